# controllers package - FastAPI routers
