"""
API Request / Response Schemas

Bodies of the single-shot endpoints under /api/toolkit. Points are lists of
coordinate lists; every point must have the same dimension.
"""

from typing import Annotated, Dict, List, Literal, Optional

from pydantic import AfterValidator, BaseModel, Field, model_validator

from app.schemas.density import DensityModelSchema, TrigSeriesSchema


def _check_points(points: List[List[float]]) -> List[List[float]]:
    dims = {len(p) for p in points}
    if len(dims) != 1 or 0 in dims:
        raise ValueError("points must be non-empty coordinate lists of one common dimension")
    return points


PointList = Annotated[List[List[float]], AfterValidator(_check_points)]


class SampleRequest(BaseModel):
    density: DensityModelSchema
    n: int = Field(..., ge=2, le=1_000_000)
    seed: int = Field(0, ge=0)
    stream: List[int] = Field(default_factory=list)


class SampleResponse(BaseModel):
    points: List[List[float]]


class GraphRequest(BaseModel):
    points: PointList = Field(..., min_length=2)
    k: int = Field(..., ge=2)
    include_self: bool = True


class GraphResponse(BaseModel):
    n: int
    denominator: int
    indptr: List[int]
    indices: List[int]
    counts: List[int]
    radii: Optional[List[float]] = None


class StationaryRequest(GraphRequest):
    tol: Optional[float] = Field(None, gt=0.0)


class BoundRequest(BaseModel):
    """Samples n points (or takes the given ones) and evaluates the bound terms."""

    density: DensityModelSchema
    n: Optional[int] = Field(None, ge=4)
    points: Optional[List[List[float]]] = None
    k: int = Field(..., ge=2)
    seed: int = Field(0, ge=0)
    mode: Literal["nu", "sup"] = "nu"
    rho: float = 0.0
    c_report: float = Field(1.0, gt=0.0)
    moment_order: int = Field(5, ge=4, le=8)

    @model_validator(mode="after")
    def _check_source(self):
        if (self.n is None) == (self.points is None):
            raise ValueError("give exactly one of n or points")
        if self.points is not None:
            _check_points(self.points)
        return self


class W2Request(BaseModel):
    atoms_a: PointList = Field(..., min_length=1)
    atoms_b: PointList = Field(..., min_length=1)
    weights_a: Optional[List[float]] = None
    weights_b: Optional[List[float]] = None
    metric: Literal["torus", "conformal"] = "torus"
    solver: Literal["exact", "entropic", "brute"] = "exact"
    target_gap: Optional[float] = Field(None, gt=0.0)
    density: Optional[DensityModelSchema] = Field(None, description="Required for the conformal metric")
    geodesic_grid: int = Field(64, ge=32)
    include_plan: bool = False


class W2Response(BaseModel):
    distance: float
    solver: str
    metric: str
    plan: Optional[List[List[float]]] = Field(None, description="(i, j, mass) triplets")


class FitRequest(BaseModel):
    x: List[float] = Field(..., min_length=3)
    y: List[float] = Field(..., min_length=3)

    @model_validator(mode="after")
    def _check_lengths(self):
        if len(self.x) != len(self.y):
            raise ValueError("x and y must have the same length")
        return self


class GradientBoundRequest(BaseModel):
    generator: Literal["heat", "reversible", "bakry_emery"] = "heat"
    density: Optional[DensityModelSchema] = Field(None, description="One-dimensional f for 'reversible'")
    potential: Optional[TrigSeriesSchema] = Field(None, description="V for 'bakry_emery'")
    phi: TrigSeriesSchema
    rho: Optional[float] = Field(None, description="Curvature; estimated when omitted")
    t_list: List[float] = Field(default_factory=lambda: [0.005, 0.02, 0.1], min_length=1)
    k_max: int = Field(3, ge=1, le=3)
    grid_size: int = Field(512, ge=16, le=8192)

    @model_validator(mode="after")
    def _check_generator(self):
        if self.generator == "reversible" and self.density is None:
            raise ValueError("reversible generator needs a density")
        if self.generator == "bakry_emery" and self.potential is None:
            raise ValueError("bakry_emery generator needs a potential")
        if self.phi.dim != 1:
            raise ValueError("the test function must be one-dimensional")
        if any(t <= 0.0 for t in self.t_list):
            raise ValueError("times must be > 0")
        return self


# =============================================================================
# ACTUATOR
# =============================================================================

class HealthResponse(BaseModel):
    status: str
    components: Dict[str, Dict[str, str]]


class InfoResponse(BaseModel):
    app: Dict[str, str]
