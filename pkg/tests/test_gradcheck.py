import numpy as np
import pytest

from wavesplit import gradcheck as G
from wavesplit import tensor as T
from wavesplit.tensor import Tensor, precision


def test_relative_error():
    assert G.relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.002])) == pytest.approx(0.002 / 2.002)
    assert G.relative_error(np.zeros(3), np.full(3, 1e-9)) == 0.0


def test_check_function_exact_on_quadratic():
    rng = np.random.default_rng(0)
    with precision(np.float64):
        x = Tensor(rng.normal(size=(4,)), requires_grad=True)
        err, name, skipped = G.check_function(lambda: T.tsum(T.square(x)), {"x": x}, rng)
    assert err < 1e-8 and name == "x" and skipped == 0


def test_check_function_skips_kink_crossings():
    rng = np.random.default_rng(0)
    with precision(np.float64):
        x = Tensor(np.array([1e-4, 1.0, -1.0]), requires_grad=True)   # first entry straddles the kink
        slope = Tensor(np.array([0.2, 0.2, 0.2]), requires_grad=False)
        err, _, skipped = G.check_function(lambda: T.tsum(T.prelu(x, slope)), {"x": x}, rng)
    assert skipped == 1 and err < 1e-8


def test_check_function_flags_wrong_rule():
    rng = np.random.default_rng(0)
    with precision(np.float64):
        x = Tensor(rng.normal(size=(5,)), requires_grad=True)
        wrong = lambda: T.tsum(T._result(x.data ** 3, (x,), lambda g: (2.0 * g * x.data ** 2,)))
        err, _, _ = G.check_function(wrong, {"x": x}, rng)
    assert err > 0.1


@pytest.mark.parametrize("name", ["speaker_loss_global", "film_residual_block", "reconstruction_loss_clipped",
                                  "regularize_centroids"])
def test_selected_checks_pass(name):
    for seed in range(3):
        r = G.run_check(name, seed)
        assert r.passed, (r.max_rel_error, r.worst_input)


def test_every_check_builds_float64_inputs():
    rng = np.random.default_rng(0)
    with precision(np.float64):
        for name, build in G.CHECKS.items():
            fn, inputs = build(np.random.default_rng(1))
            assert inputs and all(t.data.dtype == np.float64 for t in inputs.values()), name
    assert len(G.CHECKS) >= 40


def test_format_table_reports_failures():
    rs = [G.GradCheckResult("op", 0, 1e-5, "x", True, 0.0), G.GradCheckResult("op", 1, 0.5, "w", False, 0.0, 2)]
    table = G.format_table(rs)
    assert "FAIL (seed 1, w)" in table and table.splitlines()[1].split()[1] == "2"
