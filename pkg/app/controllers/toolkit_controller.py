"""
Toolkit Controller - Single-Shot Computation Endpoints

Each endpoint runs one toolkit operation on the request body and returns its
result; nothing is stored.

Endpoints:
---------
POST /api/toolkit/sample                 points from a density model
POST /api/toolkit/graph                  kNN kernel of a point list
POST /api/toolkit/stationary             invariant measure of that kernel
POST /api/toolkit/bound                  discrepancy terms and the assembled bound
POST /api/toolkit/w2                     W2 between two discrete measures
POST /api/toolkit/fit                    power-law exponent of (x, y)
POST /api/toolkit/lab/gradient-bounds    semigroup gradient-bound check

Error mapping:
-------------
ToolkitError (bad parameters, divergence, size limits)  -> 422
anything else                                            -> 500 (FastAPI default)
"""

import logging
from typing import Optional

import numpy as np
from fastapi import APIRouter, HTTPException, status

from app.exceptions import ToolkitError
from app.models.bound import FkParams
from app.models.kernel import PointCloud
from app.models.transport import DiscreteMeasure
from app.schemas.experiment import FitResult
from app.schemas.reports import (
    AssembledBoundSchema,
    BoundResponse,
    BoundTermsSchema,
    LabReportSchema,
    StationaryResponse,
)
from app.schemas.requests import (
    BoundRequest,
    FitRequest,
    GradientBoundRequest,
    GraphRequest,
    GraphResponse,
    SampleRequest,
    SampleResponse,
    StationaryRequest,
    W2Request,
    W2Response,
)
from app.services.experiment_service import experiment_service
from app.services.kernel_service import kernel_service
from app.services.semigroup_service import semigroup_service
from app.services.stationary_service import stationary_service
from app.services.stein_bound_service import stein_bound_service
from app.services.torus_service import torus_service
from app.services.transport_service import transport_service

logger = logging.getLogger(__name__)

router = APIRouter(
    prefix="/api/toolkit",
    tags=["Toolkit"],
)


def _unprocessable(exc: ToolkitError) -> HTTPException:
    logger.warning(f"Request rejected: {type(exc).__name__}: {exc}")
    return HTTPException(
        status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
        detail={"error": type(exc).__name__, "message": str(exc)},
    )


def _measure(atoms, weights: Optional[list]) -> DiscreteMeasure:
    if weights is None:
        return DiscreteMeasure.uniform(np.asarray(atoms, dtype=float))
    return DiscreteMeasure.normalized(np.asarray(atoms, dtype=float), weights)


# =============================================================================
# POST /api/toolkit/sample
# =============================================================================
@router.post(
    "/sample",
    response_model=SampleResponse,
    summary="Sample points",
    description="Draws n points from the density model with a seeded generator",
)
def sample(request: SampleRequest):
    logger.info(f"POST /api/toolkit/sample - n={request.n}, seed={request.seed}")
    try:
        points = torus_service.sample(request.density.to_model(), request.n, request.seed, request.stream)
    except ToolkitError as exc:
        raise _unprocessable(exc)
    return SampleResponse(points=points.tolist())


# =============================================================================
# POST /api/toolkit/graph
# =============================================================================
@router.post(
    "/graph",
    response_model=GraphResponse,
    summary="Build the kNN kernel",
)
def graph(request: GraphRequest):
    """
    Kernel in CSR form: row i holds indices[indptr[i]:indptr[i+1]] with
    integer counts over the common denominator k.
    """
    logger.info(f"POST /api/toolkit/graph - n={len(request.points)}, k={request.k}")
    try:
        cloud = PointCloud(np.asarray(request.points, dtype=float))
        kernel = kernel_service.build_kernel(cloud, request.k, include_self=request.include_self)
    except ToolkitError as exc:
        raise _unprocessable(exc)
    return GraphResponse(
        n=kernel.n,
        denominator=kernel.denominator,
        indptr=kernel.indptr.tolist(),
        indices=kernel.indices.tolist(),
        counts=kernel.counts.tolist(),
        radii=kernel.radii.tolist() if kernel.radii is not None else None,
    )


# =============================================================================
# POST /api/toolkit/stationary
# =============================================================================
@router.post(
    "/stationary",
    response_model=StationaryResponse,
    summary="Invariant measure of the kNN kernel",
)
def stationary(request: StationaryRequest):
    logger.info(f"POST /api/toolkit/stationary - n={len(request.points)}, k={request.k}")
    try:
        cloud = PointCloud(np.asarray(request.points, dtype=float))
        kernel = kernel_service.build_kernel(cloud, request.k, include_self=request.include_self)
        pi = stationary_service.stationary_distribution(kernel, tol=request.tol)
    except ToolkitError as exc:
        raise _unprocessable(exc)
    return StationaryResponse.from_domain(pi)


# =============================================================================
# POST /api/toolkit/bound
# =============================================================================
@router.post(
    "/bound",
    response_model=BoundResponse,
    response_model_by_alias=True,
    summary="Stein-type bound of one kNN kernel",
)
def bound(request: BoundRequest):
    """
    Runs sample (or takes the given points) -> kernel -> stationary -> jump moments
    -> discrepancy terms, and assembles the bound for C = c_report.
    """
    logger.info(f"POST /api/toolkit/bound - k={request.k}, mode={request.mode}")
    try:
        model = request.density.to_model()
        if request.points is not None:
            points = np.asarray(request.points, dtype=float)
        else:
            points = torus_service.sample(model, request.n, request.seed, stream=(request.n,))
        cloud = PointCloud(points)
        kernel = kernel_service.build_kernel(cloud, request.k)
        pi = stationary_service.stationary_distribution(kernel)
        moments = kernel_service.kernel_moments(kernel, cloud, request.moment_order)
        scaling = stein_bound_service.knn_scaling(request.k, cloud.n, cloud.dim)
        terms = stein_bound_service.discrepancy_terms(
            moments, pi, model, scaling, FkParams(request.rho, cloud.dim), mode=request.mode
        )
        assembled = stein_bound_service.assemble_bound(terms, c_report=request.c_report)
    except ToolkitError as exc:
        raise _unprocessable(exc)
    return BoundResponse(
        terms=BoundTermsSchema.from_domain(terms),
        bound=AssembledBoundSchema.from_domain(assembled),
        predicted_rate=stein_bound_service.predicted_rate(cloud.n, request.k, cloud.dim),
    )


# =============================================================================
# POST /api/toolkit/w2
# =============================================================================
@router.post(
    "/w2",
    response_model=W2Response,
    summary="Wasserstein-2 distance",
    description="Exact (network simplex), entropic (certified gap) or brute force",
)
def w2(request: W2Request):
    logger.info(
        f"POST /api/toolkit/w2 - {len(request.atoms_a)}x{len(request.atoms_b)} atoms, "
        f"solver={request.solver}, metric={request.metric}"
    )
    try:
        A = _measure(request.atoms_a, request.weights_a)
        B = _measure(request.atoms_b, request.weights_b)
        model = request.density.to_model() if request.density is not None else None
        plan = None
        if request.solver == "exact":
            distance, coupling = transport_service.exact_w2(
                A, B, metric=request.metric, model=model, grid_res=request.geodesic_grid
            )
            if request.include_plan:
                plan = [[float(i), float(j), m] for i, j, m in coupling.triplets()]
        elif request.solver == "entropic":
            distance = transport_service.entropic_w2(
                A, B, metric=request.metric, target_gap=request.target_gap, model=model,
                grid_res=request.geodesic_grid,
            )
        else:
            distance = transport_service.brute_force_w2(A, B, metric=request.metric, model=model)
    except ToolkitError as exc:
        raise _unprocessable(exc)
    return W2Response(distance=distance, solver=request.solver, metric=request.metric, plan=plan)


# =============================================================================
# POST /api/toolkit/fit
# =============================================================================
@router.post(
    "/fit",
    response_model=FitResult,
    summary="Power-law exponent",
)
def fit(request: FitRequest):
    logger.info(f"POST /api/toolkit/fit - {len(request.x)} points")
    try:
        return experiment_service.fit_power_law(request.x, request.y)
    except ToolkitError as exc:
        raise _unprocessable(exc)


# =============================================================================
# POST /api/toolkit/lab/gradient-bounds
# =============================================================================
@router.post(
    "/lab/gradient-bounds",
    response_model=LabReportSchema,
    response_model_by_alias=True,
    summary="Semigroup gradient bounds",
)
def lab_gradient_bounds(request: GradientBoundRequest):
    """
    Gradient bounds |d^k P_t phi|_a <= f_k(t) sqrt(P_t |phi'|^2_a) for k <= k_max,
    together with the spectral gap, Taylor errors and short-time check.
    """
    logger.info(f"POST /api/toolkit/lab/gradient-bounds - generator={request.generator}, N={request.grid_size}")
    try:
        phi = request.phi.to_series()
        run = semigroup_service.run_lab(
            request.generator,
            lambda x: phi.value(x[:, None]),
            request.t_list,
            k_max=request.k_max,
            size=request.grid_size,
            model=request.density.to_model() if request.density is not None else None,
            potential=request.potential.to_series() if request.potential is not None else None,
            rho=request.rho,
        )
    except ToolkitError as exc:
        raise _unprocessable(exc)
    return LabReportSchema.from_domain(run)
