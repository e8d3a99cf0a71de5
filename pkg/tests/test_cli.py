import json
from datetime import datetime, timezone

import numpy as np
import pytest

from app.cli import main
from app.repositories.artifact_repository import artifact_repository
from app.schemas.experiment import RunManifest
from app.services.experiment_service import experiment_service


@pytest.fixture
def points_file(tmp_path):
    assert main(["--out", str(tmp_path), "--seed", "3", "sample", "--n", "64", "--dim", "1"]) == 0
    return tmp_path / "points.csv"


def test_sample_writes_points(points_file):
    points = artifact_repository.read_points(points_file)
    assert points.shape == (64, 1)
    assert np.all((points >= 0.0) & (points < 1.0))


def test_graph_and_stationary(points_file, tmp_path, capsys):
    assert main(["--out", str(tmp_path), "graph", "--points", str(points_file), "--k", "8"]) == 0
    assert (tmp_path / "kernel.csv").read_text().splitlines()[0] == "64,8"
    kernel = artifact_repository.read_kernel(tmp_path / "kernel.csv")
    assert kernel.n == 64 and kernel.denominator == 8
    capsys.readouterr()

    assert main(["--out", str(tmp_path), "stationary", "--points", str(points_file), "--k", "8"]) == 0
    printed = json.loads(capsys.readouterr().out)
    stored = json.loads((tmp_path / "stationary.json").read_text())
    assert printed == stored
    assert sum(stored["probabilities"]) == pytest.approx(1.0)
    lines = (tmp_path / "stationary.csv").read_text().splitlines()
    assert lines[0] == "index,probability" and len(lines) == 65


def test_stationary_reads_a_kernel_file(points_file, tmp_path, capsys):
    assert main(["--out", str(tmp_path), "graph", "--points", str(points_file), "--k", "8"]) == 0
    assert main(["--out", str(tmp_path), "stationary", "--points", str(points_file), "--k", "8"]) == 0
    from_points = json.loads((tmp_path / "stationary.json").read_text())
    capsys.readouterr()

    assert main(["stationary", "--kernel", str(tmp_path / "kernel.csv")]) == 0
    from_kernel = json.loads(capsys.readouterr().out)
    np.testing.assert_allclose(from_kernel["probabilities"], from_points["probabilities"], atol=1e-12)
    assert main(["stationary", "--points", str(points_file)]) == 2


def test_bound_from_sampled_points(tmp_path):
    assert main(["--out", str(tmp_path), "bound", "--n", "256", "--k", "32", "--mode", "sup"]) == 0
    payload = json.loads((tmp_path / "bound.json").read_text())
    assert payload["terms"]["mode"] == "sup"
    assert payload["terms"]["sup_variants"]
    moments = (tmp_path / "moments.csv").read_text().splitlines()
    assert moments[0].startswith("i,m,c0") and len(moments) == 1 + 256 * 5


def test_w2_between_point_files(points_file, tmp_path):
    assert main(["--out", str(tmp_path), "w2", "--a", str(points_file), "--b", str(points_file), "--plan"]) == 0
    assert json.loads((tmp_path / "w2.json").read_text())["distance"] == pytest.approx(0.0, abs=1e-12)
    assert (tmp_path / "plan.csv").read_text().splitlines()[0] == "i,j,mass"


def test_fit_reads_rows_csv(tmp_path, capsys):
    rows = tmp_path / "rows.csv"
    rows.write_text(
        "d,n,k,seed,status,w2_torus\n"
        "1,100,4,0,success,0.1\n"
        "1,1000,4,0,success,0.01\n"
        "1,10000,4,0,success,0.001\n"
    )
    assert main(["fit", "--rows", str(rows)]) == 0
    assert json.loads(capsys.readouterr().out)["slope"] == pytest.approx(-1.0)


def test_toolkit_errors_exit_with_two(points_file, tmp_path, capsys):
    assert main(["--out", str(tmp_path), "graph", "--points", str(points_file), "--k", "1"]) == 2
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "InvalidParameterError"


def test_sweep_needs_config(tmp_path):
    assert main(["--out", str(tmp_path), "sweep"]) == 2


def test_lab_writes_report_and_trace(tmp_path):
    assert main(["--out", str(tmp_path), "lab", "--grid", "128", "--t", "0.02", "--T", "0.1"]) == 0
    report = json.loads((tmp_path / "lab.json").read_text())
    assert report["generator"] == "heat"
    assert report["gradient"]["passed"]
    trace = (tmp_path / "fisher-trace.csv").read_text().splitlines()
    assert trace[0] == "t,fisher_information,ratio_k1,ratio_k2,ratio_k3"
    assert trace[1].endswith(",,,")
    assert all(float(cell) >= 0.0 for line in trace[2:] for cell in line.split(",")[2:])


def test_verify_checks_manifest_files(tmp_path, capsys):
    (tmp_path / "rows.csv").write_text("d,n\n1,64\n")
    now = datetime.now(timezone.utc)
    manifest = RunManifest(config_hash="abc", code_version="1.0.0", seeds=[0], workers=1, started_at=now, finished_at=now, cells=[])
    path = artifact_repository.write_json(tmp_path / "run.manifest.json", manifest)
    experiment_service.register_files(path, [tmp_path / "rows.csv"])

    assert main(["verify", "--manifest", str(path)]) == 0
    assert json.loads(capsys.readouterr().out)["passed"]
    (tmp_path / "rows.csv").write_text("d,n\n1,65\n")
    assert main(["verify", "--manifest", str(path)]) == 1
    assert json.loads(capsys.readouterr().out)["problems"] == {"rows.csv": "checksum mismatch"}
