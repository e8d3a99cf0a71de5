# repositories package - results store and file artifacts
