# services package - one service class per toolkit component, each with a module-level singleton
