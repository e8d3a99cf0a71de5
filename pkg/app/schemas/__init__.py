# schemas package - pydantic wire shapes (configs, rows, reports, API bodies)
