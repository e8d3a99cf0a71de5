# config package - settings and the results-store connection
