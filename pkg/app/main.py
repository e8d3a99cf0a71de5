"""
FastAPI Application Entry Point

    uvicorn app.main:app --port 8080

Routers:
- /api/toolkit   single-shot computations (sample, graph, stationary, bound, w2, fit, lab)
- /api/sweeps    stored sweep rows
- /actuator      health and info

Long-running work (sweeps, report, verify) is driven from the command line
(python -m app.cli); the API only reads what sweeps stored.

Swagger UI is served at /docs, ReDoc at /redoc.
"""

import logging
from contextlib import asynccontextmanager

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.config.database import create_results_tables
from app.config.settings import settings
from app.controllers import health_controller, sweeps_controller, toolkit_controller

# =============================================================================
# LOGGING
# =============================================================================

logging.basicConfig(
    level=settings.log_level.upper(),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logging.getLogger("sqlalchemy.engine").setLevel(logging.WARNING)

logger = logging.getLogger(__name__)


# =============================================================================
# LIFESPAN
# =============================================================================
@asynccontextmanager
async def lifespan(app: FastAPI):
    logger.info("=" * 60)
    logger.info(f"Starting {settings.app_name} v{settings.app_version}")
    logger.info("=" * 60)

    try:
        logger.info("Creating results tables...")
        create_results_tables()
        logger.info("Results tables ready")
    except Exception as e:
        # the toolkit endpoints work without the store
        logger.error(f"Failed to create results tables: {e}")

    logger.info(f"Server running on http://{settings.server_host}:{settings.server_port}")
    logger.info("Swagger UI available at: /docs")
    logger.info("=" * 60)

    yield

    logger.info("Shutting down application...")


# =============================================================================
# APPLICATION
# =============================================================================

app = FastAPI(
    title=settings.app_name,
    version=settings.app_version,
    description="""
    ## kNN Diffusion Bound Toolkit

    Random walks on k-nearest-neighbour graphs of samples on the flat torus, their
    diffusion limit and quantitative Wasserstein-2 error bounds.

    ### Features:
    * **Toolkit**: sampling, kNN kernels, invariant measures, bound terms, W2 solvers
    * **Semigroup lab**: gradient bounds of 1-D periodic diffusions
    * **Sweeps**: stored (n, k, seed) results and exponent fits
    * **Health Check**: results store status
    """,
    lifespan=lifespan,
    openapi_tags=[
        {"name": "Toolkit", "description": "Single-shot computations"},
        {"name": "Sweeps", "description": "Stored sweep results"},
        {"name": "Health & Info", "description": "Health check and application info (Actuator-like)"},
    ],
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(toolkit_controller.router)
app.include_router(sweeps_controller.router)
app.include_router(health_controller.router)


@app.get("/", tags=["Root"])
def root():
    return {
        "message": f"Welcome to {settings.app_name}",
        "version": settings.app_version,
        "docs": "/docs",
        "health": "/actuator/health",
    }


if __name__ == "__main__":
    import uvicorn

    uvicorn.run(
        "app.main:app",
        host=settings.server_host,
        port=settings.server_port,
        reload=settings.debug,
    )
