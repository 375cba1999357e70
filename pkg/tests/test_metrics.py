import itertools
import math

import numpy as np
import pytest

from motionprior_hub.core import metrics
from motionprior_hub.core.exceptions import (
    ContractError,
    ConvergenceError,
    EmdCapExceededError,
)
from motionprior_hub.core.mapgrid import ProbGrid
from motionprior_hub.core.metrics import (
    EmdMode,
    MetricReport,
    block_sum,
    emd_exact,
    emd_grid,
    evaluate,
    kl_div,
    reverse_kl,
)


def _random_grid(rng, shape):
    x = rng.random(shape)
    return x / x.sum()


def _delta(shape, cell):
    x = np.zeros(shape)
    x[cell] = 1.0
    return x


# --- KL ------------------------------------------------------------------------


def test_kl_examples():
    p, q = np.array([0.5, 0.5]), np.array([0.25, 0.75])
    assert kl_div(p, p) == pytest.approx(0.0, abs=1e-12)
    assert kl_div(p, q) == pytest.approx(0.143841, abs=1e-6)
    assert kl_div([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-9)
    assert kl_div([1.0, 0.0], [0.5, 0.5], base=2) == pytest.approx(1.0, abs=1e-9)


def test_reverse_kl_delegates():
    p, q = np.array([0.5, 0.5]), np.array([0.25, 0.75])
    assert reverse_kl(p, q) == pytest.approx(0.130812, abs=1e-6)
    rng = np.random.default_rng(0)
    a, b = _random_grid(rng, (4, 4)), _random_grid(rng, (4, 4))
    assert reverse_kl(a, b) == kl_div(b, a)


def test_kl_non_negative_on_random_grids():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a = _random_grid(rng, (5, 5)) * (rng.random((5, 5)) > 0.3)
        b = _random_grid(rng, (5, 5))
        assert kl_div(a, b) >= -1e-9


def test_kl_shape_mismatch():
    with pytest.raises(ContractError):
        kl_div(np.ones((2, 2)) / 4, np.ones((1, 4)) / 4)


# --- EMD -----------------------------------------------------------------------


def test_emd_exact_examples():
    p = _random_grid(np.random.default_rng(0), (3, 3))
    assert emd_exact(p, p).distance == pytest.approx(0.0, abs=1e-12)
    result = emd_exact(_delta((1, 4), (0, 0)), _delta((1, 4), (0, 3)))
    assert result.distance == pytest.approx(3.0)
    assert emd_exact(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]])).distance == (
        pytest.approx(0.5)
    )


def test_emd_coupling_is_feasible():
    rng = np.random.default_rng(2)
    p, q = _random_grid(rng, (4, 4)), _random_grid(rng, (4, 4))
    result = emd_exact(p, q)
    rows = tuple(result.source_cells.T)
    cols = tuple(result.target_cells.T)
    assert np.allclose(result.coupling.sum(axis=1), p[rows], atol=1e-9)
    assert np.allclose(result.coupling.sum(axis=0), q[cols], atol=1e-9)
    assert (result.coupling >= 0).all()


def test_emd_symmetry():
    rng = np.random.default_rng(3)
    for _ in range(100):
        p, q = _random_grid(rng, (4, 4)), _random_grid(rng, (4, 4))
        assert abs(emd_exact(p, q).distance - emd_exact(q, p).distance) < 1e-9


def test_emd_triangle_inequality():
    rng = np.random.default_rng(4)
    for _ in range(100):
        p, q, r = (_random_grid(rng, (3, 3)) for _ in range(3))
        direct = emd_exact(p, r).distance
        assert direct <= emd_exact(p, q).distance + emd_exact(q, r).distance + 1e-9


def _vertex_search(p, q):
    """Перебор базисных решений транспортной задачи 3×3 (клетки 1×3)."""
    cost = np.abs(np.subtract.outer(np.arange(3), np.arange(3))).astype(float)
    eqs = np.zeros((6, 9))
    for i in range(3):
        eqs[i, i * 3 : i * 3 + 3] = 1.0
        eqs[3 + i, i::3] = 1.0
    rhs = np.concatenate([p, q])
    best = math.inf
    for size in range(1, 6):
        for cells in itertools.combinations(range(9), size):
            sub = eqs[:, cells]
            x, *_ = np.linalg.lstsq(sub, rhs, rcond=None)
            if np.abs(sub @ x - rhs).max() > 1e-12 or (x < -1e-12).any():
                continue
            best = min(best, float(cost.reshape(-1)[list(cells)] @ x))
    return best


def test_emd_matches_vertex_enumeration():
    rng = np.random.default_rng(5)
    for _ in range(20):
        p = rng.integers(1, 6, 3).astype(float)
        q = rng.integers(1, 6, 3).astype(float)
        p, q = p / p.sum(), q / q.sum()
        value = emd_exact(p[None, :], q[None, :]).distance
        assert value == pytest.approx(_vertex_search(p, q), abs=1e-9)


def test_emd_cap_and_auto_fallback():
    rng = np.random.default_rng(6)
    p, q = _random_grid(rng, (4, 4)), _random_grid(rng, (4, 4))
    with pytest.raises(EmdCapExceededError):
        emd_exact(p, q, pair_cap=3)
    with pytest.raises(EmdCapExceededError):
        emd_grid(p, q, EmdMode("exact"), pair_cap=3)
    result = emd_grid(p, q, EmdMode("auto"), pair_cap=3)
    assert result.mode == "downsample:2" and result.approximate
    exact = emd_grid(p, q)
    assert exact.mode == "exact" and not exact.approximate
    assert exact.distance == emd_exact(p, q).distance


def test_downsample_preserves_separation():
    p, q = _delta((1, 8), (0, 0)), _delta((1, 8), (0, 4))
    result = emd_grid(p, q, EmdMode("downsample", factor=2))
    assert result.distance == pytest.approx(4.0)
    assert block_sum(np.ones((3, 5)), 2).tolist() == [[4, 4, 2], [2, 2, 1]]


def test_entropic_close_to_exact():
    p, q = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    result = emd_grid(p, q, EmdMode("entropic", lam=50.0))
    assert result.approximate and result.mode == "entropic"
    assert result.distance == pytest.approx(1.0, rel=0.01)
    rng = np.random.default_rng(7)
    a, b = _random_grid(rng, (3, 3)), _random_grid(rng, (3, 3))
    smooth = emd_grid(a, b, EmdMode("entropic", lam=50.0, iters=20_000))
    assert smooth.distance == pytest.approx(emd_exact(a, b).distance, rel=0.05)


def test_entropic_non_convergence_reports_residual():
    rng = np.random.default_rng(8)
    p, q = _random_grid(rng, (4, 4)), _random_grid(rng, (4, 4))
    with pytest.raises(ConvergenceError) as err:
        emd_grid(p, q, EmdMode("entropic", lam=50.0, iters=1))
    assert err.value.residual > 1e-6


def test_exact_iteration_limit_raises(monkeypatch):
    def stalled(a, b, cost, numItermax, log):
        plan = np.outer(a, b) * 0.5
        return plan, {"warning": "numItermax reached before optimality"}

    monkeypatch.setattr(metrics.ot, "emd", stalled)
    p = _delta((3, 3), (0, 0)) * 0.5 + _delta((3, 3), (2, 2)) * 0.5
    with pytest.raises(ConvergenceError) as err:
        emd_exact(p, _delta((3, 3), (1, 1)))
    assert err.value.iterations == metrics.EXACT_MAX_ITER
    assert err.value.residual == pytest.approx(0.5)


def test_emd_mode_parse_and_label():
    assert EmdMode.parse("exact") == EmdMode("exact")
    assert EmdMode.parse("downsample:4").label() == "downsample:4"
    assert EmdMode.parse("entropic:50:2000").label() == "entropic:50:2000"
    with pytest.raises(ContractError):
        EmdMode.parse("sliced")


# --- отчёт ---------------------------------------------------------------------


def test_evaluate_identical_maps():
    p = ProbGrid.from_counts(np.random.default_rng(9).random((6, 6)))
    report = evaluate(p, p)
    assert report.kl == 0.0 and report.rkl == 0.0
    assert report.emd == pytest.approx(0.0, abs=1e-12)
    assert report.mode == "exact" and report.shape == (6, 6)


def test_evaluate_clamps_negative_prediction():
    gt = np.array([[0.5, 0.5]])
    pred = np.array([[1.0, -0.2]])
    report = evaluate(gt, pred)
    assert report.emd == pytest.approx(0.5)
    assert report.kl > 0 and report.rkl >= -1e-9


def test_evaluate_rejects_degenerate():
    with pytest.raises(ContractError):
        evaluate(np.zeros((2, 2)), np.ones((2, 2)))


def test_csv_line_format():
    report = MetricReport(0.25, 0.5, 3.0, 1e-12, (2, 2), "exact")
    assert report.csv_line() == "0.25,0.5,3.0,exact,1e-12"
