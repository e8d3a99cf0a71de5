"""
Density Schemas

JSON shape of a trigonometric density model:

    {
        "dim": 2,
        "modes": [{"amp": 0.3, "freq": [1, 0], "phase": 0.0}],
        "margin": null
    }

The same shape (with an "offset") describes a potential V for the curvature
estimate of the semigroup lab.
"""

from typing import List, Optional

from pydantic import BaseModel, Field, model_validator

from app.models.torus import DensityModel, Mode, TrigSeries


class ModeSchema(BaseModel):
    amp: float = Field(..., description="Amplitude of the cosine mode")
    freq: List[int] = Field(..., min_length=1, description="Integer frequency vector")
    phase: float = Field(0.0, description="Phase in radians")


class DensityModelSchema(BaseModel):
    """f(x) = 1 + sum amp cos(2 pi <freq, x> + phase), strictly positive."""

    dim: int = Field(..., ge=1, le=4)
    modes: List[ModeSchema] = Field(default_factory=list)
    margin: Optional[float] = Field(None, gt=0.0, description="Lower bound of f; defaults to 1 - sum |amp|")

    model_config = {
        "json_schema_extra": {
            "example": {"dim": 2, "modes": [{"amp": 0.3, "freq": [1, 0], "phase": 0.0}]}
        }
    }

    @model_validator(mode="after")
    def _check_frequencies(self):
        for mode in self.modes:
            if len(mode.freq) != self.dim:
                raise ValueError(f"mode frequency {mode.freq} does not have {self.dim} components")
        return self

    def to_model(self) -> DensityModel:
        modes = tuple(Mode(amp=m.amp, freq=tuple(m.freq), phase=m.phase) for m in self.modes)
        return DensityModel(dim=self.dim, modes=modes, margin=self.margin)

    @classmethod
    def from_model(cls, model: DensityModel) -> "DensityModelSchema":
        return cls(
            dim=model.dim,
            modes=[ModeSchema(amp=m.amp, freq=list(m.freq), phase=m.phase) for m in model.modes],
            margin=model.margin,
        )


class TrigSeriesSchema(BaseModel):
    """g(x) = offset + sum amp cos(2 pi <freq, x> + phase)."""

    dim: int = Field(1, ge=1, le=4)
    modes: List[ModeSchema] = Field(default_factory=list)
    offset: float = 0.0

    def to_series(self) -> TrigSeries:
        modes = tuple(Mode(amp=m.amp, freq=tuple(m.freq), phase=m.phase) for m in self.modes)
        return TrigSeries(dim=self.dim, modes=modes, offset=self.offset)
