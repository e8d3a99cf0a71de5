"""
Health Controller - Health Check Endpoints

Actuator-style endpoints:
- GET /actuator/health            overall status with the results store component
- GET /actuator/info              application info
- GET /actuator/health/liveness   process is up
- GET /actuator/health/readiness  results store reachable (503 otherwise)
"""

import logging
from typing import Dict

import numpy as np
import ot
import scipy
from fastapi import APIRouter, Depends, HTTPException, status
from sqlalchemy import text
from sqlalchemy.orm import Session

from app.config.database import get_results_db
from app.config.settings import settings
from app.schemas.requests import HealthResponse, InfoResponse

logger = logging.getLogger(__name__)

router = APIRouter(
    prefix="/actuator",
    tags=["Health & Info"],
)


def check_results_store_health(db: Session) -> Dict[str, str]:
    """
    SELECT 1 against the results store.

    Returns:
        dict: {"status": "UP"} or {"status": "DOWN", "error": "..."}
    """
    try:
        db.execute(text("SELECT 1"))
        return {"status": "UP"}
    except Exception as e:
        logger.error(f"Results store health check failed: {e}")
        return {"status": "DOWN", "error": str(e)}


@router.get(
    "/health",
    response_model=HealthResponse,
    summary="Health Check",
    description="Returns the health status of the application and its dependencies",
)
def health_check(db: Session = Depends(get_results_db)):
    logger.info("GET /actuator/health - Checking system health")
    components = {"results_store": check_results_store_health(db)}

    overall_status = "UP"
    for component_status in components.values():
        if component_status.get("status") == "DOWN":
            overall_status = "DOWN"
            break

    logger.info(f"Health check result: {overall_status}")
    return HealthResponse(status=overall_status, components=components)


@router.get(
    "/info",
    response_model=InfoResponse,
    summary="Application Info",
)
def application_info():
    logger.info("GET /actuator/info - Returning application info")
    return InfoResponse(
        app={
            "name": settings.app_name,
            "version": settings.app_version,
            "description": "kNN random-walk diffusion limits: Stein bounds, W2 rates, semigroup lab",
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pot": ot.__version__,
        }
    )


@router.get("/health/liveness", summary="Liveness Probe")
def liveness_probe():
    return {"status": "UP"}


@router.get("/health/readiness", summary="Readiness Probe")
def readiness_probe(db: Session = Depends(get_results_db)):
    """Returns 503 while the results store is unreachable."""
    if check_results_store_health(db).get("status") == "UP":
        return {"status": "UP"}
    raise HTTPException(
        status_code=status.HTTP_503_SERVICE_UNAVAILABLE,
        detail="Results store not ready",
    )
