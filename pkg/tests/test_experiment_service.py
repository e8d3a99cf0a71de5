import json
import math
import shutil

import pytest

from app.exceptions import EmptyResultError, InvalidParameterError, MaxIterExceededError, NonPositiveValueError
from app.repositories.result_repository import result_repository
from app.schemas.experiment import CellStatus, KRule, OtSettings, ResultRow, SweepConfig
from app.services.experiment_service import experiment_service
from app.services.stationary_service import stationary_service


@pytest.fixture(scope="module")
def smoke_config(tmp_path_factory):
    return SweepConfig(
        d=1,
        n_values=[512, 1024],
        k_rule=KRule(kind="power", alpha=0.75),
        seeds=3,
        output_dir=str(tmp_path_factory.mktemp("smoke")),
    )


@pytest.fixture(scope="module")
def smoke_outcome(smoke_config):
    return experiment_service.run_sweep(smoke_config)


def test_smoke_sweep_rows(smoke_outcome):
    rows = smoke_outcome.rows
    assert len(rows) == 6
    assert all(r.succeeded for r in rows)
    assert [(r.n, r.k, r.seed) for r in rows] == [
        (512, 108, 0), (512, 108, 1), (512, 108, 2),
        (1024, 182, 0), (1024, 182, 1), (1024, 182, 2),
    ]
    for row in rows:
        assert row.w2_torus > 0.0
        assert row.w2_method in {"exact", "circle"}
        assert row.w2_proxy_bound <= 0.1 * row.w2_torus
        assert math.isfinite(row.bound_value)
        assert row.stationary_residual <= 1e-12
        assert row.sup_I1 >= row.drift_term


def test_smoke_sweep_artifacts(smoke_outcome, smoke_config):
    manifest = json.loads(smoke_outcome.manifest_path.read_text())
    assert manifest["schema"] == 1
    assert manifest["config_hash"] == smoke_config.config_hash()
    assert len(manifest["cells"]) == 6
    assert smoke_outcome.csv_path.name in manifest["files"]
    header = smoke_outcome.csv_path.read_text().splitlines()[0]
    assert "runtime" not in header.split(",")


def test_rerun_gives_identical_csv(smoke_outcome, smoke_config, tmp_path):
    again = experiment_service.run_sweep(smoke_config, out_dir=str(tmp_path))
    assert again.csv_path.read_bytes() == smoke_outcome.csv_path.read_bytes()


def test_sweep_rows_are_stored(smoke_outcome, smoke_config, db_session, tmp_path):
    experiment_service.run_sweep(smoke_config, db=db_session, out_dir=str(tmp_path))
    stored = result_repository.find_by_config(db_session, smoke_config.config_hash())
    assert [(r.n, r.seed) for r in stored] == [(r.n, r.seed) for r in smoke_outcome.rows]
    assert stored[0].w2_torus == smoke_outcome.rows[0].w2_torus


def test_failed_cell_becomes_failed_row(smoke_config, monkeypatch):
    def broken(kernel, tol=None, max_iter=None):
        raise MaxIterExceededError(10, 0.5, 1e-12)

    monkeypatch.setattr(stationary_service, "stationary_distribution", broken)
    row = experiment_service.run_cell(smoke_config, 512, 108, 0)
    assert row.status == CellStatus.FAILED
    assert row.error.startswith("MaxIterExceededError")
    assert row.w2_torus is None


def test_report_writes_plots_and_summary(smoke_outcome, smoke_config):
    summary = experiment_service.emit_report(smoke_outcome.rows, smoke_config)
    out = smoke_outcome.csv_path.parent
    assert len(summary.files) == 2
    for name in summary.files:
        assert (out / name).read_text().lstrip().startswith("<?xml")
    assert summary.successes == {"512": 3, "1024": 3}
    assert summary.checks["sup_dominates_nu"]
    summary_file = next(out.glob("*-summary.json"))
    assert json.loads(summary_file.read_text())["schema"] == 1

    listed = json.loads(smoke_outcome.manifest_path.read_text())["files"]
    assert set(listed) == {smoke_outcome.csv_path.name, summary_file.name, *summary.files}
    assert experiment_service.verify_manifest(smoke_outcome.manifest_path) == {}


def test_verify_manifest_flags_changed_and_missing_files(smoke_outcome, smoke_config, tmp_path):
    experiment_service.emit_report(smoke_outcome.rows, smoke_config)
    copy = tmp_path / "run"
    shutil.copytree(smoke_outcome.csv_path.parent, copy)
    manifest_path = copy / smoke_outcome.manifest_path.name
    assert experiment_service.verify_manifest(manifest_path) == {}

    plot = next(copy.glob("*-w2.svg"))
    plot.write_text(plot.read_text() + "<!-- edited -->\n")
    summary_file = next(copy.glob("*-summary.json"))
    summary_file.unlink()
    problems = experiment_service.verify_manifest(manifest_path)
    assert problems == {plot.name: "checksum mismatch", summary_file.name: "missing"}
    assert smoke_outcome.csv_path.name not in problems


def test_report_needs_successful_rows(smoke_config):
    failed = ResultRow(d=1, n=512, k=108, seed=0, status=CellStatus.FAILED, error="x")
    with pytest.raises(EmptyResultError):
        experiment_service.emit_report([failed], smoke_config)


def test_fit_power_law():
    fit = experiment_service.fit_power_law([1, 2, 4, 8], [3.0 * x**-0.5 for x in (1, 2, 4, 8)])
    assert fit.slope == pytest.approx(-0.5)
    assert fit.intercept == pytest.approx(math.log(3.0))
    assert fit.r_squared == pytest.approx(1.0)
    assert fit.points == 4

    repeated = experiment_service.fit_power_law([10, 10, 100, 1000], [1.0, 3.0, 0.2, 0.02])
    assert repeated.points == 3
    assert repeated.slope == pytest.approx(-1.0)


def test_fit_power_law_preconditions():
    with pytest.raises(InvalidParameterError):
        experiment_service.fit_power_law([1, 2], [1.0, 0.5])
    with pytest.raises(NonPositiveValueError):
        experiment_service.fit_power_law([1, 2, 4], [1.0, 0.0, 0.5])


def test_fit_exponent_averages_seeds_and_skips_failures():
    rows = [
        ResultRow(d=1, n=n, k=4, seed=s, status=CellStatus.SUCCESS, w2_torus=y)
        for n, s, y in [(100, 0, 1.0), (100, 1, 3.0), (1000, 0, 0.2), (10_000, 0, 0.02)]
    ]
    rows.append(ResultRow(d=1, n=100_000, k=4, seed=0, status=CellStatus.FAILED, error="x"))
    fit = experiment_service.fit_exponent(rows, "n", "w2_torus")
    assert fit.points == 3
    assert fit.slope == pytest.approx(-1.0)


def test_convergence_window():
    k_low, k_high = experiment_service.convergence_window(1000, 2)
    assert k_low == pytest.approx(math.sqrt(math.log(1000)) * math.sqrt(1000))
    assert k_high == 1000.0
    assert experiment_service.in_window(1000, 200, 2)
    assert not experiment_service.in_window(1000, 10, 2)
    with pytest.raises(InvalidParameterError):
        experiment_service.convergence_window(1, 2)


def test_rate_ratio_spread():
    assert experiment_service.rate_ratio_spread({100.0: 2.0, 1000.0: 1.0}, {100: 1.0, 1000: 1.0}) == 2.0
    assert experiment_service.rate_ratio_spread({}, {}) == math.inf


def test_sweep_config_rejects_bad_k_rule():
    with pytest.raises(ValueError):
        SweepConfig(d=1, n_values=[10], k_rule=KRule(kind="fixed", k=10))
    with pytest.raises(ValueError):
        KRule(kind="power", alpha=1.5)


def test_config_hash_ignores_output_location():
    a = SweepConfig(d=2, n_values=[100], output_dir="/tmp/a", workers=1)
    b = SweepConfig(d=2, n_values=[100], output_dir="/tmp/b", workers=4)
    c = SweepConfig(d=2, n_values=[100], seeds=2)
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()


def test_target_grid_follows_the_measured_distance(smoke_outcome, smoke_config):
    # above a tiny exact limit the 1-D cells go through the circle solver on the re-sized grid
    circle = smoke_config.model_copy(update={"ot": OtSettings(exact_limit=10_000)})
    row = experiment_service.run_cell(circle, 512, 108, 0)
    assert row.succeeded, row.error
    assert row.w2_method == "circle"
    assert row.w2_proxy_bound <= 0.1 * row.w2_torus

    exact = next(r for r in smoke_outcome.rows if (r.n, r.seed) == (512, 0))
    assert abs(row.w2_torus - exact.w2_torus) <= row.w2_proxy_bound + exact.w2_proxy_bound + 1e-3


def test_semidual_cell_in_two_dimensions(tmp_path):
    config = SweepConfig(
        d=2,
        n_values=[200],
        k_rule=KRule(kind="power", alpha=0.75),
        seeds=1,
        ot=OtSettings(exact_limit=50_000),
        output_dir=str(tmp_path),
    )
    row = experiment_service.run_cell(config, 200, config.k_rule.resolve(200), 0)
    assert row.succeeded, row.error
    assert row.w2_method == "semidual"
    assert row.w2_proxy_bound <= 0.1 * row.w2_torus


def test_coarse_target_grid_is_rejected(smoke_config):
    coarse = smoke_config.model_copy(update={"ot": OtSettings(grid_per_axis=4)})
    row = experiment_service.run_cell(coarse, 512, 108, 0)
    assert row.status == CellStatus.FAILED
    assert row.error.startswith("ProxyResolutionError")


def test_grid_beyond_point_budget_fails_the_cell(smoke_config):
    small = smoke_config.model_copy(update={"ot": OtSettings(max_grid_points=16)})
    row = experiment_service.run_cell(small, 512, 108, 0)
    assert row.status == CellStatus.FAILED
    assert row.error.startswith("SizeLimitExceededError")
