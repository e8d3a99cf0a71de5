"""
Sweep Result Entity

One row of 'tbl_sweep_result' per sweep cell (config hash, n, k, seed).

The headline numbers get their own columns so they can be filtered in SQL;
the complete ResultRow (every bound term and sup item) is kept as JSON in
'payload' and is the source the CSV is re-emitted from.
"""

from sqlalchemy import BigInteger, Column, DateTime, Float, Integer, String, Text, UniqueConstraint, func

from app.config.database import ResultsBase


class SweepResult(ResultsBase):
    """
    Stored sweep cell.

    Attributes:
        config_hash (str): sha256 of the canonical SweepConfig JSON
        n, k, seed (int): the cell
        status (str): "success" or "failed"
        error (str): exception class and message of a failed cell
        w2_torus (float): W2 to the target, None on failure
        bound_value (float): assembled bound at C_report, None on failure
        runtime (float): wall-clock seconds (never written to the CSV)
        payload (str): ResultRow JSON
    """

    __tablename__ = "tbl_sweep_result"
    __table_args__ = (UniqueConstraint("config_hash", "n", "k", "seed", name="uq_sweep_cell"),)

    id = Column(BigInteger().with_variant(Integer, "sqlite"), primary_key=True, autoincrement=True)
    config_hash = Column(String(64), nullable=False, index=True)
    dim = Column(Integer, nullable=False)
    n = Column(Integer, nullable=False)
    k = Column(Integer, nullable=False)
    seed = Column(BigInteger, nullable=False)
    status = Column(String(16), nullable=False)
    error = Column(Text, nullable=True)
    w2_torus = Column(Float, nullable=True)
    bound_value = Column(Float, nullable=True)
    runtime = Column(Float, nullable=True)
    payload = Column(Text, nullable=False)
    created_at = Column(DateTime(timezone=True), server_default=func.now())

    def __repr__(self) -> str:
        return f"<SweepResult(config={self.config_hash[:8]}, n={self.n}, k={self.k}, seed={self.seed}, status='{self.status}')>"
