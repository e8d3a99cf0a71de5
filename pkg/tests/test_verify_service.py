import json

import pytest

from app.services.semigroup_service import semigroup_service
from app.services.verify_service import PROFILES, verify_service


def halved_fk(k, t, params):
    return 0.5 * semigroup_service.bounds.eval_fk(k, t, params)


def test_kernel_criterion_quick():
    passed, measured = verify_service.check_kernels(PROFILES["quick"])
    assert passed
    assert measured["clouds"] == 8
    assert measured["max_residual"] <= 1e-12


def test_fk_constant_criterion():
    passed, measured = verify_service.check_fk_constant()
    assert passed
    assert len(measured["relative_change"]) == 9


def test_gradient_criterion_and_its_mutation():
    passed, measured = verify_service.check_gradient_bounds(size=256)
    assert passed
    assert measured["max_ratio"] <= 1.05
    mutated, measured = verify_service.check_gradient_bounds(fk=halved_fk, size=256)
    assert not mutated
    assert measured["max_ratio"] > 1.05


def test_interpolation_criterion():
    passed, measured = verify_service.check_interpolation()
    assert passed
    assert measured["kappa_relative_error"] <= 0.02


def test_unknown_profile():
    with pytest.raises(ValueError):
        verify_service.profile("nightly")


def test_suite_reports_each_criterion_once(tmp_path, monkeypatch):
    def fine(*args, **kwargs):
        return True, {"stub": 1}

    def broken(*args, **kwargs):
        raise RuntimeError("boom")

    for name in ("check_kernels", "check_uniform", "check_rate", "check_items", "check_fk_constant",
                 "check_interpolation", "check_transport"):
        monkeypatch.setattr(verify_service, name, fine)
    monkeypatch.setattr(verify_service, "check_jump_moments", broken)
    monkeypatch.setattr(verify_service, "check_gradient_bounds", lambda fk=None: (fk is None, {}))

    verdict = verify_service.verify_suite(profile="quick", out_dir=str(tmp_path))
    assert [c.id for c in verdict.criteria] == list(range(1, 10))
    assert not verdict.passed
    jump = verdict.criteria[8]
    assert not jump.passed and jump.error == "RuntimeError: boom"

    stored = json.loads((tmp_path / "verify-quick.json").read_text())
    assert stored["schema"] == 1
    assert stored["profile"] == "quick"
    assert len(stored["criteria"]) == 9

    mutated = verify_service.verify_suite(profile="quick", fk=halved_fk)
    assert not mutated.criteria[4].passed


@pytest.mark.slow
def test_quick_suite_end_to_end(tmp_path):
    verdict = verify_service.verify_suite(profile="quick", out_dir=str(tmp_path))
    assert sorted(c.id for c in verdict.criteria) == list(range(1, 10))
    assert all(c.error is None for c in verdict.criteria)
    assert (tmp_path / "verify-quick.json").exists()
