"""
Application Configuration

All tunable values of the toolkit live here, managed by pydantic-settings:
- read from environment variables
- read from a .env file
- type checked and validated
- documented defaults

Example:
--------
    RESULTS_DB_URL=sqlite:///./results.db
    STATIONARY_TOL=1e-12
    WORKERS=4

Sweep-level knobs (which n, which k rule, how many seeds) are NOT here; they belong
to a SweepConfig JSON file (see app/schemas/experiment.py). These settings are the
numerical defaults shared by every operation.
"""

from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """
    Toolkit settings.

    Every field maps to an environment variable of the same name
    (case-insensitive), e.g. exact_ot_limit -> EXACT_OT_LIMIT.
    """

    # =========================================================================
    # APPLICATION
    # =========================================================================
    app_name: str = "kNN Diffusion Bound Toolkit"
    app_version: str = "1.0.0"
    debug: bool = False
    log_level: str = "INFO"

    # =========================================================================
    # SERVER
    # =========================================================================
    server_host: str = "0.0.0.0"
    server_port: int = 8080

    # =========================================================================
    # OUTPUT / EXECUTION
    # =========================================================================
    output_dir: str = "./out"
    workers: int = 1

    # Sweep rows are stored here (one table, see app/models/sweep_result.py)
    results_db_url: str = "sqlite:///./results.db"

    # =========================================================================
    # TENSOR ALGEBRA
    # =========================================================================
    tensor_max_order: int = 8
    tensor_max_dim: int = 4

    # =========================================================================
    # STATIONARY SOLVER
    # =========================================================================
    stationary_tol: float = 1e-12
    # None -> 10 * n * log(n)
    stationary_max_iter: Optional[int] = None

    # =========================================================================
    # BOUND EVALUATION
    # =========================================================================
    moment_order: int = 5
    tail_cap: int = 64
    tail_rel_tol: float = 1e-14
    # jump-moment series of the exponential-moment check; terms peak near
    # k = e * (r/sqrt(tau))^2, around k = 30 for d = 2 kNN kernels
    series_k_max: int = 200
    fk_time_grid_points: int = 32
    report_constant: float = 1.0
    default_rho: float = 0.0

    # =========================================================================
    # TRANSPORT
    # =========================================================================
    exact_ot_limit: int = 4_000_000
    entropic_target_gap: float = 1e-3
    entropic_max_iter: int = 5000
    # candidate atoms per grid point and L-BFGS iterations per stage of semidual_w2
    semidual_neighbours: int = 8
    semidual_max_iter: int = 500

    # =========================================================================
    # SEMIGROUP LAB
    # =========================================================================
    gradient_slack: float = 0.05
    lab_grid_size: int = 512

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
    )


# Single settings object shared by the whole application
settings = Settings()
