"""
Result Repository - Sweep Results Store Access

CRUD on 'tbl_sweep_result'. Rows are written per sweep (upsert on the cell key
config_hash + n + k + seed) and read back as ResultRow objects.

SQLAlchemy query pattern used here:
----------------------------------
db.query(SweepResult)
    .filter(SweepResult.config_hash == h)     -> WHERE config_hash = ?
    .order_by(n, k, seed)                     -> fixed (n, k, seed) order
    .all()
"""

import logging
from typing import Iterable, List, Optional

from sqlalchemy.orm import Session

from app.models.sweep_result import SweepResult
from app.schemas.experiment import ResultRow

logger = logging.getLogger(__name__)


class ResultRepository:
    """Results store repository."""

    # =========================================================================
    # WRITE
    # =========================================================================

    def save_rows(self, db: Session, config_hash: str, rows: Iterable[ResultRow]) -> int:
        """
        Inserts or replaces the rows of one sweep in a single transaction.

        Returns:
            int: number of rows written
        """
        count = 0
        try:
            for row in rows:
                existing = self.find_cell(db, config_hash, row.n, row.k, row.seed)
                record = existing or SweepResult(config_hash=config_hash, n=row.n, k=row.k, seed=row.seed)
                record.dim = row.d
                record.status = row.status.value
                record.error = row.error
                record.w2_torus = row.w2_torus
                record.bound_value = row.bound_value
                record.runtime = row.runtime
                record.payload = row.model_dump_json()
                if existing is None:
                    db.add(record)
                count += 1
            db.commit()
        except Exception:
            db.rollback()
            raise
        logger.info(f"Stored {count} rows for sweep {config_hash[:12]}")
        return count

    def delete_sweep(self, db: Session, config_hash: str) -> int:
        deleted = db.query(SweepResult).filter(SweepResult.config_hash == config_hash).delete()
        db.commit()
        return deleted

    # =========================================================================
    # READ
    # =========================================================================

    def find_cell(self, db: Session, config_hash: str, n: int, k: int, seed: int) -> Optional[SweepResult]:
        return (
            db.query(SweepResult)
            .filter(
                SweepResult.config_hash == config_hash,
                SweepResult.n == n,
                SweepResult.k == k,
                SweepResult.seed == seed,
            )
            .first()
        )

    def find_by_config(self, db: Session, config_hash: str, status: Optional[str] = None) -> List[ResultRow]:
        """Rows of one sweep in (n, k, seed) order, optionally filtered by status."""
        query = db.query(SweepResult).filter(SweepResult.config_hash == config_hash)
        if status is not None:
            query = query.filter(SweepResult.status == status)
        records = query.order_by(SweepResult.n, SweepResult.k, SweepResult.seed).all()
        return [ResultRow.model_validate_json(r.payload) for r in records]

    def list_config_hashes(self, db: Session) -> List[str]:
        return [h for (h,) in db.query(SweepResult.config_hash).distinct().order_by(SweepResult.config_hash).all()]


# Singleton instance
result_repository = ResultRepository()
