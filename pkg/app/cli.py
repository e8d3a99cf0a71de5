"""
Command Line Interface

    python -m app.cli [--config PATH] [--seed N] [--out DIR] [--workers N] [--log-level LEVEL] <command> ...

Commands:
    sample       draw points from a density model            -> points.csv
    graph        kNN kernel of a points file                 -> kernel.csv
    stationary   invariant measure of a kernel               -> stationary.json, stationary.csv
    bound        discrepancy terms and the assembled bound   -> bound.json (+ moments.csv)
    w2           W2 between two points files                 -> w2.json (+ plan.csv)
    sweep        (n, k, seed) sweep of a SweepConfig         -> sweep-<hash>.csv, manifest, report
    lab          semigroup checks of a 1-D generator         -> lab.json (+ fisher-trace.csv)
    fit          power-law exponent of a rows CSV            -> stdout
    verify       acceptance suite or a run's checksums       -> verify-<profile>.json

JSON results are printed to stdout as well. Any ToolkitError ends the command
with exit status 2; verify exits with 1 when a criterion fails or a file listed in
a --manifest no longer matches its checksum.
"""

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import BaseModel

from app.config.database import create_results_tables, results_session
from app.config.settings import settings
from app.exceptions import InvalidParameterError, ToolkitError
from app.models.bound import FkParams
from app.models.kernel import PointCloud
from app.models.torus import DensityModel, Mode, TrigSeries
from app.models.transport import DiscreteMeasure
from app.repositories.artifact_repository import artifact_repository
from app.schemas.density import TrigSeriesSchema
from app.schemas.reports import (
    AssembledBoundSchema,
    BoundResponse,
    BoundTermsSchema,
    LabReportSchema,
    StationaryResponse,
)
from app.schemas.requests import W2Response
from app.services.experiment_service import experiment_service
from app.services.kernel_service import kernel_service
from app.services.semigroup_service import semigroup_service
from app.services.stationary_service import stationary_service
from app.services.stein_bound_service import stein_bound_service
from app.services.torus_service import torus_service
from app.services.transport_service import transport_service
from app.services.verify_service import verify_service

logger = logging.getLogger("app.cli")

SIN_2PI = TrigSeries(dim=1, modes=(Mode(amp=1.0, freq=(1,), phase=-math.pi / 2),))


# =============================================================================
# PARSER
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="app.cli", description="kNN diffusion bound toolkit")
    parser.add_argument("--config", type=Path, help="SweepConfig JSON (sweep) or density JSON (other commands)")
    parser.add_argument("--seed", type=int, default=None, help="Base seed (overrides the config)")
    parser.add_argument("--out", type=Path, default=None, help="Output directory")
    parser.add_argument("--workers", type=int, default=None, help="Worker processes for sweeps")
    parser.add_argument("--log-level", default=settings.log_level, help="Logging level")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("sample", help="Draw points from a density model")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dim", type=int, default=1, help="Dimension of the uniform density when no --config is given")
    p.add_argument("--stream", type=int, nargs="*", default=[])
    p.set_defaults(handler=cmd_sample)

    p = commands.add_parser("graph", help="kNN kernel of a points CSV")
    p.add_argument("--points", type=Path, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--no-self", action="store_true", help="Exclude X_i from its own row")
    p.set_defaults(handler=cmd_graph)

    p = commands.add_parser("stationary", help="Invariant measure of a kernel")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--points", type=Path, help="Points CSV; needs --k")
    source.add_argument("--kernel", type=Path, help="Kernel file written by graph")
    p.add_argument("--k", type=int)
    p.add_argument("--no-self", action="store_true")
    p.add_argument("--tol", type=float, default=None)
    p.set_defaults(handler=cmd_stationary)

    p = commands.add_parser("bound", help="Discrepancy terms and the assembled bound")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--points", type=Path)
    source.add_argument("--n", type=int)
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--mode", choices=["nu", "sup"], default="nu")
    p.add_argument("--rho", type=float, default=settings.default_rho)
    p.add_argument("--c-report", type=float, default=settings.report_constant)
    p.add_argument("--moment-order", type=int, default=settings.moment_order)
    p.set_defaults(handler=cmd_bound)

    p = commands.add_parser("w2", help="W2 between two point sets with uniform weights")
    p.add_argument("--a", type=Path, required=True)
    p.add_argument("--b", type=Path, required=True)
    p.add_argument("--metric", choices=["torus", "conformal"], default="torus")
    p.add_argument("--solver", choices=["exact", "entropic", "brute"], default="exact")
    p.add_argument("--target-gap", type=float, default=None)
    p.add_argument("--plan", action="store_true", help="Write the exact plan as plan.csv")
    p.set_defaults(handler=cmd_w2)

    p = commands.add_parser("sweep", help="Run a SweepConfig")
    p.add_argument("--no-store", action="store_true", help="Do not save rows in the results store")
    p.add_argument("--no-report", action="store_true", help="Skip plots and summary")
    p.set_defaults(handler=cmd_sweep)

    p = commands.add_parser("lab", help="Semigroup checks of a 1-D periodic generator")
    p.add_argument("--generator", choices=["heat", "reversible", "bakry_emery"], default="heat")
    p.add_argument("--potential", type=Path, help="Potential V (trigonometric series JSON) for bakry_emery")
    p.add_argument("--phi", type=Path, help="Test function (trigonometric series JSON); sin(2 pi x) by default")
    p.add_argument("--t", type=float, nargs="+", default=[0.005, 0.02, 0.1])
    p.add_argument("--k-max", type=int, default=3)
    p.add_argument("--grid", type=int, default=settings.lab_grid_size)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--T", type=float, default=None, help="Horizon of the interpolation inequality")
    p.set_defaults(handler=cmd_lab)

    p = commands.add_parser("fit", help="Power-law exponent of a rows CSV")
    p.add_argument("--rows", type=Path, required=True)
    p.add_argument("--x", default="n")
    p.add_argument("--y", default="w2_torus")
    p.set_defaults(handler=cmd_fit)

    p = commands.add_parser("verify", help="Acceptance suite")
    p.add_argument("--profile", choices=["full", "quick"], default="full")
    p.add_argument("--manifest", type=Path, help="Check the files of a sweep manifest instead of running the suite")
    p.set_defaults(handler=cmd_verify)
    return parser


# =============================================================================
# HELPERS
# =============================================================================

def _density(args, dim: int) -> DensityModel:
    if args.config is not None:
        return artifact_repository.load_density(args.config)
    return DensityModel.uniform(dim)


def _emit(args, name: str, payload: BaseModel) -> None:
    print(payload.model_dump_json(by_alias=True, indent=2))
    if args.out is not None:
        path = artifact_repository.write_json(args.out / name, payload)
        logger.info(f"Wrote {path}")


def _cloud(path: Path) -> PointCloud:
    return PointCloud(artifact_repository.read_points(path))


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_sample(args) -> int:
    model = _density(args, args.dim)
    points = torus_service.sample(model, args.n, args.seed or 0, stream=args.stream)
    out = args.out or Path(settings.output_dir)
    path = artifact_repository.write_points(out / "points.csv", points)
    print(path)
    return 0


def cmd_graph(args) -> int:
    kernel = kernel_service.build_kernel(_cloud(args.points), args.k, include_self=not args.no_self)
    out = args.out or Path(settings.output_dir)
    path = artifact_repository.write_kernel(out / "kernel.csv", kernel)
    print(path)
    return 0


def cmd_stationary(args) -> int:
    if args.kernel is not None:
        kernel = artifact_repository.read_kernel(args.kernel)
    elif args.k is None:
        raise InvalidParameterError("stationary --points needs --k")
    else:
        kernel = kernel_service.build_kernel(_cloud(args.points), args.k, include_self=not args.no_self)
    pi = stationary_service.stationary_distribution(kernel, tol=args.tol)
    _emit(args, "stationary.json", StationaryResponse.from_domain(pi))
    if args.out is not None:
        logger.info(f"Wrote {artifact_repository.write_stationary_csv(args.out / 'stationary.csv', pi)}")
    return 0


def cmd_bound(args) -> int:
    if args.points is not None:
        cloud = _cloud(args.points)
        model = _density(args, cloud.dim)
    else:
        model = _density(args, args.dim)
        seed = args.seed or 0
        cloud = PointCloud(torus_service.sample(model, args.n, seed, stream=(args.n,)), seed=seed, stream=(args.n,))
    kernel = kernel_service.build_kernel(cloud, args.k)
    pi = stationary_service.stationary_distribution(kernel)
    moments = kernel_service.kernel_moments(kernel, cloud, args.moment_order)
    scaling = stein_bound_service.knn_scaling(args.k, cloud.n, cloud.dim)
    terms = stein_bound_service.discrepancy_terms(
        moments, pi, model, scaling, FkParams(args.rho, cloud.dim), mode=args.mode
    )
    assembled = stein_bound_service.assemble_bound(terms, c_report=args.c_report)
    if args.out is not None:
        logger.info(f"Wrote {artifact_repository.write_moments_csv(args.out / 'moments.csv', moments)}")
    _emit(
        args,
        "bound.json",
        BoundResponse(
            terms=BoundTermsSchema.from_domain(terms),
            bound=AssembledBoundSchema.from_domain(assembled),
            predicted_rate=stein_bound_service.predicted_rate(cloud.n, args.k, cloud.dim),
        ),
    )
    return 0


def cmd_w2(args) -> int:
    A = DiscreteMeasure.uniform(artifact_repository.read_points(args.a))
    B = DiscreteMeasure.uniform(artifact_repository.read_points(args.b))
    model = artifact_repository.load_density(args.config) if args.config is not None else None
    if args.solver == "exact":
        distance, plan = transport_service.exact_w2(A, B, metric=args.metric, model=model)
        if args.plan:
            out = args.out or Path(settings.output_dir)
            logger.info(f"Wrote {artifact_repository.write_plan_csv(out / 'plan.csv', plan)}")
    elif args.solver == "entropic":
        distance = transport_service.entropic_w2(A, B, metric=args.metric, target_gap=args.target_gap, model=model)
    else:
        distance = transport_service.brute_force_w2(A, B, metric=args.metric, model=model)
    _emit(args, "w2.json", W2Response(distance=distance, solver=args.solver, metric=args.metric))
    return 0


def cmd_sweep(args) -> int:
    if args.config is None:
        raise InvalidParameterError("sweep needs --config")
    config = artifact_repository.load_sweep_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["base_seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    if args.workers is not None:
        overrides["workers"] = args.workers
    if overrides:
        config = config.model_validate({**config.model_dump(), **overrides})

    if args.no_store:
        outcome = experiment_service.run_sweep(config)
    else:
        create_results_tables()
        with results_session() as db:
            outcome = experiment_service.run_sweep(config, db=db)
    print(outcome.csv_path)
    if not args.no_report:
        summary = experiment_service.emit_report(outcome.rows, config)
        print(summary.model_dump_json(by_alias=True, indent=2))
    return 0


def cmd_lab(args) -> int:
    phi = TrigSeriesSchema.model_validate_json(args.phi.read_text(encoding="utf-8")).to_series() if args.phi else SIN_2PI
    potential = None
    if args.potential is not None:
        potential = TrigSeriesSchema.model_validate_json(args.potential.read_text(encoding="utf-8")).to_series()
    model = _density(args, 1) if args.generator == "reversible" else None
    run = semigroup_service.run_lab(
        args.generator,
        lambda x: phi.value(x[:, None]),
        args.t,
        k_max=args.k_max,
        size=args.grid,
        model=model,
        potential=potential,
        rho=args.rho,
        T=args.T,
    )
    _emit(args, "lab.json", LabReportSchema.from_domain(run))
    if args.T is not None and args.out is not None:
        gen = semigroup_service.build_named(args.generator, args.grid, model, potential)
        trace = semigroup_service.fisher_trace(gen, lambda x: 1.0 + 0.5 * np.cos(2.0 * np.pi * x), args.T)
        # the gradient ratios on the trace times; t = 0 has no f_k(t)
        gradient = semigroup_service.gradient_bound_check(
            gen, lambda x: phi.value(x[:, None]), run.rho, [t for t in trace.times.tolist() if t > 0.0], k_max=args.k_max
        )
        path = artifact_repository.write_trace_csv(args.out / "fisher-trace.csv", trace, gradient=gradient)
        logger.info(f"Wrote {path}")
    return 0


def cmd_fit(args) -> int:
    rows = artifact_repository.read_rows_csv(args.rows)
    print(experiment_service.fit_exponent(rows, args.x, args.y).model_dump_json(indent=2))
    return 0


def cmd_verify(args) -> int:
    if args.manifest is not None:
        problems = experiment_service.verify_manifest(args.manifest)
        print(json.dumps({"manifest": str(args.manifest), "passed": not problems, "problems": problems}, indent=2))
        return 1 if problems else 0
    verdict = verify_service.verify_suite(profile=args.profile, out_dir=str(args.out) if args.out else None)
    print(verdict.model_dump_json(by_alias=True, indent=2))
    return 0 if verdict.passed else 1


# =============================================================================
# ENTRY POINT
# =============================================================================

def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    logging.getLogger("sqlalchemy.engine").setLevel(logging.WARNING)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    try:
        return args.handler(args)
    except ToolkitError as exc:
        logger.error(f"{args.command} failed: {type(exc).__name__}: {exc}")
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
