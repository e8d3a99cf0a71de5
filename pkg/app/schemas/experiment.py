"""
Experiment Schemas

Sweep configuration, result rows, manifests and verdicts, all validated by pydantic.

Example SweepConfig JSON:
-------------------------
    {
        "d": 2,
        "density": {"dim": 2, "modes": [{"amp": 0.3, "freq": [1, 0]}]},
        "n_values": [2000, 4000, 8000, 16000],
        "k_rule": {"kind": "power", "alpha": 0.75},
        "seeds": 5
    }

CSV columns are the ResultRow fields in declaration order, minus the volatile
"runtime" (kept in the results store and the manifest only).
"""

import hashlib
import json
import math
from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.schemas.density import DensityModelSchema

SCHEMA_VERSION = 1


# =============================================================================
# CONFIGURATION
# =============================================================================

class KRule(BaseModel):
    """
    k per sample size:
        fixed   k
        power   ceil(n^alpha), alpha in (0, 1)
        log     ceil(c log n), the conjectured regime (exploratory)
    """

    kind: Literal["fixed", "power", "log"] = "power"
    k: Optional[int] = Field(None, ge=1)
    alpha: Optional[float] = 0.75
    c: float = Field(1.0, gt=0.0)

    @model_validator(mode="after")
    def _check_rule(self):
        if self.kind == "fixed" and self.k is None:
            raise ValueError("fixed k rule needs k")
        if self.kind == "power" and (self.alpha is None or not 0.0 < self.alpha < 1.0):
            raise ValueError(f"power k rule needs alpha in (0, 1), got {self.alpha}")
        return self

    def resolve(self, n: int) -> int:
        if self.kind == "fixed":
            return self.k
        if self.kind == "power":
            return math.ceil(n**self.alpha)
        return math.ceil(self.c * math.log(n))


class OtSettings(BaseModel):
    """
    W2 measurement of a sweep cell.

    Without grid_per_axis the target grid is sized per cell so that its half-cell
    bound is at most max_proxy_ratio times the measured W2; cells that cannot get
    there within max_grid_points (or refinements re-sizings) fail.
    """

    grid_per_axis: Optional[int] = Field(None, ge=2, description="Fixed target grid; sized per cell when omitted")
    max_proxy_ratio: float = Field(0.1, gt=0.0, le=1.0)
    max_grid_points: int = Field(1_000_000, ge=4)
    refinements: int = Field(3, ge=1)
    exact_limit: int = Field(4_000_000, ge=1)
    target_gap: float = Field(1e-3, gt=0.0)
    conformal: bool = Field(False, description="Also measure W2 in the conformal metric")
    geodesic_grid: int = Field(64, ge=32)


class SweepConfig(BaseModel):
    d: int = Field(..., ge=1, le=3)
    density: Optional[DensityModelSchema] = Field(None, description="Defaults to the uniform density")
    density_path: Optional[str] = Field(None, description="Density JSON file, resolved on load")
    n_values: List[int] = Field(..., min_length=1)
    k_rule: KRule = Field(default_factory=KRule)
    seeds: int = Field(5, ge=1)
    base_seed: int = Field(0, ge=0)
    rho: float = 0.0
    c_report: float = Field(1.0, gt=0.0)
    include_self: bool = True
    moment_order: int = Field(5, ge=5, le=8)
    ot: OtSettings = Field(default_factory=OtSettings)
    output_dir: str = "./out"
    workers: int = Field(1, ge=1)

    @field_validator("n_values")
    @classmethod
    def _check_sizes(cls, values: List[int]) -> List[int]:
        small = [n for n in values if n < 4]
        if small:
            raise ValueError(f"every n must be >= 4, got {small}")
        return values

    @model_validator(mode="after")
    def _check_cells(self):
        if self.density is not None and self.density.dim != self.d:
            raise ValueError(f"density has dim {self.density.dim}, sweep has d={self.d}")
        for n in self.n_values:
            k = self.k_rule.resolve(n)
            if not 1 <= k < n:
                raise ValueError(f"k rule gives k={k} for n={n}; need 1 <= k < n")
        return self

    @property
    def seed_values(self) -> List[int]:
        return list(range(self.base_seed, self.base_seed + self.seeds))

    def cells(self) -> List[tuple]:
        """(n, k, seed) sorted."""
        return sorted((n, self.k_rule.resolve(n), seed) for n in set(self.n_values) for seed in self.seed_values)

    def config_hash(self) -> str:
        # output location and worker count do not change the rows
        canonical = self.model_dump(mode="json", exclude={"output_dir", "workers", "density_path"})
        text = json.dumps(canonical, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


# =============================================================================
# RESULTS
# =============================================================================

class CellStatus(str, Enum):
    SUCCESS = "success"
    FAILED = "failed"


class ResultRow(BaseModel):
    """One sweep cell. Numeric fields are None on failed rows."""

    d: int
    n: int
    k: int
    seed: int
    status: CellStatus
    error: Optional[str] = None

    w2_torus: Optional[float] = None
    w2_conformal: Optional[float] = None
    w2_method: Optional[str] = None
    w2_proxy_bound: Optional[float] = None

    s: Optional[float] = None
    tau: Optional[float] = None
    short_time: Optional[float] = None
    drift_term: Optional[float] = None
    diffusion_term: Optional[float] = None
    third_term: Optional[float] = None
    moment_4: Optional[float] = None
    moment_5: Optional[float] = None
    bound_value: Optional[float] = None
    truncation_bound: Optional[float] = None
    k_truncation: Optional[int] = None

    sup_I1: Optional[float] = None
    sup_I2: Optional[float] = None
    sup_I3: Optional[float] = None
    sup_I4: Optional[float] = None
    sup_I5: Optional[float] = None
    r_max: Optional[float] = None

    stationary_residual: Optional[float] = None
    stationary_iterations: Optional[int] = None
    stationary_method: Optional[str] = None

    density_error: Optional[float] = None
    predicted_rate: Optional[float] = None
    in_window: Optional[bool] = None

    runtime: Optional[float] = None

    @property
    def succeeded(self) -> bool:
        return self.status == CellStatus.SUCCESS


CSV_COLUMNS = [name for name in ResultRow.model_fields if name != "runtime"]


class CellEntry(BaseModel):
    n: int
    k: int
    seed: int
    status: CellStatus
    error: Optional[str] = None
    runtime: Optional[float] = None


class RunManifest(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    schema_version: int = Field(SCHEMA_VERSION, alias="schema")
    config_hash: str
    code_version: str
    seeds: List[int]
    workers: int
    started_at: datetime
    finished_at: datetime
    cells: List[CellEntry]
    files: Dict[str, str] = Field(default_factory=dict, description="file name -> sha256")


class FitResult(BaseModel):
    slope: float
    intercept: float
    r_squared: float
    points: int


class CriterionResult(BaseModel):
    id: int
    name: str
    passed: bool
    measured: Dict[str, Any] = Field(default_factory=dict)
    runtime_s: float = 0.0
    error: Optional[str] = None


class VerifyVerdict(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    schema_version: int = Field(SCHEMA_VERSION, alias="schema")
    profile: str
    passed: bool
    criteria: List[CriterionResult]


class ReportSummary(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    schema_version: int = Field(SCHEMA_VERSION, alias="schema")
    config_hash: str
    d: int
    n_values: List[int]
    successes: Dict[str, int]
    failures: Dict[str, int]
    mean_w2: Dict[str, float]
    predicted: Dict[str, float]
    fits: Dict[str, FitResult]
    checks: Dict[str, bool]
    files: List[str] = Field(default_factory=list)
