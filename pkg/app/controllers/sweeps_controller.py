"""
Sweeps Controller - Stored Sweep Results

Read access to the rows the sweep runner saved in the results store.

GET /api/sweeps                       config hashes with stored rows
GET /api/sweeps/{config_hash}/rows    rows of one sweep in (n, k, seed) order
GET /api/sweeps/{config_hash}/fit     exponent of mean W2 against n
"""

import logging
from typing import List, Optional

from fastapi import APIRouter, Depends, HTTPException, Query, status
from sqlalchemy.orm import Session

from app.config.database import get_results_db
from app.exceptions import ToolkitError
from app.repositories.result_repository import result_repository
from app.schemas.experiment import CellStatus, FitResult, ResultRow
from app.services.experiment_service import experiment_service

logger = logging.getLogger(__name__)

router = APIRouter(
    prefix="/api/sweeps",
    tags=["Sweeps"],
)


@router.get("", response_model=List[str], summary="List stored sweeps")
def list_sweeps(db: Session = Depends(get_results_db)):
    logger.info("GET /api/sweeps")
    return result_repository.list_config_hashes(db)


@router.get(
    "/{config_hash}/rows",
    response_model=List[ResultRow],
    summary="Rows of one sweep",
)
def sweep_rows(
    config_hash: str,
    status_filter: Optional[CellStatus] = Query(None, alias="status"),
    db: Session = Depends(get_results_db),
):
    """
    Returns the stored rows of a sweep, optionally only 'success' or 'failed' cells.

    Raises:
        HTTPException(404): no rows stored under this hash
    """
    logger.info(f"GET /api/sweeps/{config_hash}/rows")
    rows = result_repository.find_by_config(
        db, config_hash, status=status_filter.value if status_filter is not None else None
    )
    if not rows and config_hash not in result_repository.list_config_hashes(db):
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail=f"No sweep stored under {config_hash}",
        )
    return rows


@router.get(
    "/{config_hash}/fit",
    response_model=FitResult,
    summary="W2 exponent of one sweep",
)
def sweep_fit(config_hash: str, db: Session = Depends(get_results_db)):
    logger.info(f"GET /api/sweeps/{config_hash}/fit")
    rows = result_repository.find_by_config(db, config_hash, status=CellStatus.SUCCESS.value)
    if not rows:
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail=f"No successful rows stored under {config_hash}",
        )
    try:
        return experiment_service.fit_exponent(rows, "n", "w2_torus")
    except ToolkitError as exc:
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            detail={"error": type(exc).__name__, "message": str(exc)},
        )
