"""
Report Schemas

JSON shapes of the domain results returned by the API and written by the CLI.
Each schema has a from_domain() constructor; the domain dataclasses stay free of
serialisation concerns.
"""

import math
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field

from app.models.bound import AssembledBound, AssumptionReport, BoundTerms
from app.models.semigroup import GradientBoundReport, InterpolationReport, LabRun
from app.models.stationary import StationaryDistribution
from app.schemas.experiment import SCHEMA_VERSION


class StationaryResponse(BaseModel):
    probabilities: List[float]
    residual: float
    iterations: int
    method: str

    @classmethod
    def from_domain(cls, pi: StationaryDistribution) -> "StationaryResponse":
        return cls(
            probabilities=[float(p) for p in pi.probabilities],
            residual=pi.residual,
            iterations=pi.iterations,
            method=pi.method,
        )


class BoundTermsSchema(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    schema_version: int = Field(SCHEMA_VERSION, alias="schema")
    mode: str
    s: float
    tau: float
    T: float
    short_time: float
    drift_term: float
    diffusion_term: float
    third_term: float
    moments: Dict[str, float]
    sup_variants: Dict[str, float]
    computed_order: int
    radius_bound: float
    b_norm: float
    rho: float

    @classmethod
    def from_domain(cls, terms: BoundTerms) -> "BoundTermsSchema":
        return cls(
            mode=terms.mode,
            s=terms.scaling.s,
            tau=terms.scaling.tau,
            T=terms.scaling.T,
            short_time=terms.short_time,
            drift_term=terms.drift_term,
            diffusion_term=terms.diffusion_term,
            third_term=terms.third_term,
            moments={str(k): v for k, v in terms.moments.items()},
            sup_variants={str(k): v for k, v in terms.sup_variants.items()},
            computed_order=terms.computed_order,
            radius_bound=terms.radius_bound,
            b_norm=terms.b_norm,
            rho=terms.rho,
        )


class AssembledBoundSchema(BaseModel):
    value: float
    c_report: float
    k_truncation: int
    truncation_bound: float

    @classmethod
    def from_domain(cls, bound: AssembledBound) -> "AssembledBoundSchema":
        return cls(
            value=bound.value,
            c_report=bound.c_report,
            k_truncation=bound.k_truncation,
            truncation_bound=bound.truncation_bound,
        )


class BoundResponse(BaseModel):
    terms: BoundTermsSchema
    bound: AssembledBoundSchema
    predicted_rate: float


class AssumptionReportSchema(BaseModel):
    series_value: float
    truncation_bound: float
    k_truncation: int
    gaussian_tail_value: float
    gaussian_exponent: float
    empirical_exponent: float
    fk_constant: float
    finite: bool

    @classmethod
    def from_domain(cls, report: AssumptionReport) -> "AssumptionReportSchema":
        return cls(
            series_value=report.series_value,
            truncation_bound=report.truncation_bound,
            k_truncation=report.k_truncation,
            gaussian_tail_value=report.gaussian_tail_value,
            gaussian_exponent=report.gaussian_exponent,
            empirical_exponent=report.empirical_exponent,
            fk_constant=report.fk_constant,
            finite=report.finite,
        )


class GradientEntrySchema(BaseModel):
    k: int
    t: float
    ratio: float


class GradientBoundSchema(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    schema_version: int = Field(SCHEMA_VERSION, alias="schema")
    rho: float
    slack: float
    max_ratio: float
    passed: bool
    entries: List[GradientEntrySchema]

    @classmethod
    def from_domain(cls, report: GradientBoundReport) -> "GradientBoundSchema":
        return cls(
            rho=report.rho,
            slack=report.slack,
            max_ratio=report.max_ratio,
            passed=report.passed,
            entries=[GradientEntrySchema(k=e.k, t=e.t, ratio=e.ratio) for e in report.entries],
        )


class InterpolationSchema(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    schema_version: int = Field(SCHEMA_VERSION, alias="schema")
    T: float
    kappa: float
    c: float
    w2: float
    lhs: float
    rhs: float
    slack: float
    holds: bool
    empirical_rate: Optional[float] = None

    @classmethod
    def from_domain(cls, report: InterpolationReport) -> "InterpolationSchema":
        return cls(
            T=report.T,
            kappa=report.kappa,
            c=report.c,
            w2=report.w2,
            lhs=report.lhs,
            rhs=report.rhs,
            slack=report.slack,
            holds=report.holds,
            empirical_rate=report.empirical_rate,
        )


class LabReportSchema(BaseModel):
    """Everything `lab` computes for one generator."""

    model_config = ConfigDict(populate_by_name=True)

    schema_version: int = Field(SCHEMA_VERSION, alias="schema")
    generator: str
    grid_size: int
    rho: float
    spectral_gap: Optional[float] = None
    gradient: GradientBoundSchema
    interpolation: Optional[InterpolationSchema] = None
    taylor_errors: Dict[str, float] = Field(default_factory=dict)
    short_time_passed: Optional[bool] = None

    @classmethod
    def from_domain(cls, run: LabRun) -> "LabReportSchema":
        return cls(
            generator=run.generator,
            grid_size=run.grid_size,
            rho=run.rho,
            spectral_gap=None if math.isnan(run.spectral_gap) else run.spectral_gap,
            gradient=GradientBoundSchema.from_domain(run.gradient),
            interpolation=InterpolationSchema.from_domain(run.interpolation) if run.interpolation else None,
            taylor_errors={str(k): v for k, v in run.taylor.errors.items()} if run.taylor else {},
            short_time_passed=run.short_time.passed if run.short_time else None,
        )
