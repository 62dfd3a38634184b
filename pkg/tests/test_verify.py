import json

import numpy as np
import pytest

from services import verify
from services.analysis.penalty import mc_expected_loss_gap
from services.regularizers import masks
from services.regularizers.masks import RegularizerKind, RegularizerTag, Stir
from services.tensor_core import draw_uniform


def names_of_failures(checks):
    return [c.name for c in checks if not c.passed]


def test_mask_suite_passes():
    assert names_of_failures(verify.check_masks()) == []


def test_gradient_suite_passes():
    checks = verify.check_gradients(n_models=1)
    assert names_of_failures(checks) == []
    # every tag plus each PerNodeDrop stir/granularity/mode combination
    assert sum(c.name.startswith("model[") for c in checks) == 5 + 12


def test_stats_suite_passes():
    assert names_of_failures(verify.check_stats()) == []


def test_penalty_suite_passes_on_a_reduced_grid():
    assert names_of_failures(verify.check_penalty(n_instances=10)) == []


def test_one_quadratic_instance_beyond_three_std_errs_fails(monkeypatch):
    calls = []

    def shifted(*args, **kwargs):
        est = mc_expected_loss_gap(*args, **kwargs)
        calls.append(est)
        # call 0 is the closed-form anchor; call 1 is the first quadratic instance
        if len(calls) == 2:
            est.mc_gap = est.closed_form + 3.5 * est.std_err
        return est

    monkeypatch.setattr(verify, "mc_expected_loss_gap", shifted)
    failures = names_of_failures(verify.check_penalty(n_instances=10))
    first, *rest = list(Stir)
    assert f"quadratic_agreement[{first.value}]" in failures
    assert not any(f"quadratic_agreement[{stir.value}]" in failures for stir in rest)


@pytest.mark.parametrize("seed", range(20))
def test_plain_network_gradients(seed):
    assert verify.gradient_error(RegularizerKind(RegularizerTag.PLAIN), seed) < 1e-5


def test_flipped_bernoulli_polarity_is_caught(monkeypatch):
    def flipped(spec, shape, stream):
        return (draw_uniform(stream, shape) < spec.drop_rate).astype(np.float64)

    monkeypatch.setitem(masks._SAMPLERS, Stir.BERNOULLI, flipped)
    failures = names_of_failures(verify.check_masks())
    assert "moments[Bernoulli,p=0.1]" in failures
    assert "moments[Bernoulli,p=0.9]" in failures
    assert names_of_failures(verify.check_stats()) == []
    assert names_of_failures(verify.check_gradients(n_models=1)) == []


def test_report_is_written(tmp_path):
    report = verify.run_verify("stats", tmp_path / "out" / "verify_report.json")
    assert report.passed
    payload = json.loads((tmp_path / "out" / "verify_report.json").read_text(encoding="utf-8"))
    assert payload["suite"] == "stats"
    assert payload["n_failed"] == 0
    assert payload["n_checks"] == len(report.checks)


def test_failures_are_reported():
    report = verify.VerifyReport("x", [verify.CheckResult("x", "a", True), verify.CheckResult("x", "b", False, "why")])
    assert not report.passed
    assert [c.name for c in report.failures] == ["b"]


@pytest.mark.slow
def test_all_suites_at_full_size():
    report = verify.run_verify("all")
    assert report.passed, [f"{c.suite}/{c.name}: {c.detail}" for c in report.failures]
