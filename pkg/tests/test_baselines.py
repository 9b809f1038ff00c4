"""TV baseline tests against closed forms and a dense convex-program oracle."""

import itertools

import numpy as np
import pytest

from csrd.baselines import (
    DEFAULT_WEIGHT_GRID,
    TVConfig,
    tv_denoise,
    tv_objective,
    tune_tv_weight,
    _div,
    _grad,
)
from csrd.errors import ConfigError, DomainError
from csrd.volumes import Volume3D


def _qp_tv_prox(v, lam):
    """Dense isotropic-TV proximal solve via a generic convex solver."""
    import cvxpy as cp

    shape = v.shape
    u = cp.Variable(shape)
    terms = []
    for i, j, k in itertools.product(*(range(n) for n in shape)):
        comps = []
        comps.append(u[i + 1, j, k] - u[i, j, k] if i + 1 < shape[0] else cp.Constant(0.0))
        comps.append(u[i, j + 1, k] - u[i, j, k] if j + 1 < shape[1] else cp.Constant(0.0))
        comps.append(u[i, j, k + 1] - u[i, j, k] if k + 1 < shape[2] else cp.Constant(0.0))
        terms.append(cp.norm(cp.hstack(comps)))
    obj = 0.5 * cp.sum_squares(u - v) + lam * cp.sum(cp.hstack(terms))
    cp.Problem(cp.Minimize(obj)).solve(solver=cp.CLARABEL)
    return np.asarray(u.value)


def _step_volume():
    v = np.concatenate([np.full(8, 0.2), np.full(8, 0.8)])
    return Volume3D(v.reshape(16, 1, 1))


def test_zero_weight_returns_input_exactly(rng):
    vol = Volume3D(rng.uniform(0, 1, (8, 8, 8)))
    out = tv_denoise(vol, TVConfig(weight=0.0))
    assert np.array_equal(out.data, vol.data)
    assert out.domain == vol.domain


def test_constant_volume_is_fixed_point():
    vol = Volume3D(np.full((8, 8, 8), 0.37))
    for lam in (0.01, 0.3, 5.0):
        out = tv_denoise(vol, TVConfig(weight=lam, n_iters=50))
        assert np.array_equal(out.data, vol.data)


def test_step_signal_matches_two_constant_closed_form():
    lam = 0.1
    out = tv_denoise(_step_volume(), TVConfig(weight=lam, n_iters=2000, tol=0.0))
    expected = np.concatenate([np.full(8, 0.2 + lam / 8), np.full(8, 0.8 - lam / 8)])
    assert np.abs(out.data.ravel() - expected).max() < 1e-4


@pytest.mark.filterwarnings("ignore:The problem has an expression:UserWarning")
def test_step_signal_matches_dense_qp_oracle():
    lam = 0.1
    out = tv_denoise(_step_volume(), TVConfig(weight=lam, n_iters=2000, tol=0.0))
    u_qp = _qp_tv_prox(np.concatenate([np.full(8, 0.2), np.full(8, 0.8)]).reshape(16, 1, 1), lam)
    assert np.abs(out.data - u_qp).max() < 1e-4


@pytest.mark.filterwarnings("ignore:The problem has an expression:UserWarning")
def test_random_3d_matches_dense_qp_oracle(rng):
    v = rng.uniform(0, 1, (4, 4, 4))
    lam = 0.05
    out = tv_denoise(Volume3D(v), TVConfig(weight=lam, n_iters=20000, tol=0.0))
    assert np.abs(out.data - _qp_tv_prox(v, lam)).max() < 1e-4


def test_mean_preserved_across_weight_grid(rng):
    v = rng.uniform(0, 1, (8, 8, 8))
    vol = Volume3D(v)
    for lam in (0.01, 0.05, 0.2, 0.3):
        out = tv_denoise(vol, TVConfig(weight=lam, n_iters=300, tol=1e-10))
        assert abs(out.data.mean() - v.mean()) < 1e-8


def test_objective_trace_non_increasing(rng):
    for v in (rng.uniform(0, 1, (6, 6, 6)), _step_volume().data):
        trace = {}
        tv_denoise(Volume3D(np.asarray(v, dtype=np.float64)),
                   TVConfig(weight=0.1, n_iters=400, tol=0.0), trace=trace)
        obj = trace["objective"]
        assert len(obj) >= 2
        for a, b in zip(obj, obj[1:]):
            assert b <= a + 1e-12 * max(1.0, abs(a))


def test_maximum_principle(rng):
    v = rng.uniform(0.2, 0.9, (8, 8, 8))
    out = tv_denoise(Volume3D(v), TVConfig(weight=0.2, n_iters=100))
    assert out.data.min() >= v.min() - 1e-8
    assert out.data.max() <= v.max() + 1e-8


def test_smoothing_reduces_error_on_noisy_step(rng):
    clean = np.where(np.arange(16) < 8, 0.2, 0.8)[:, None, None] * np.ones((16, 8, 8))
    noisy = clean + rng.normal(0, 0.1, clean.shape)
    out = tv_denoise(Volume3D(noisy), TVConfig(weight=0.1, n_iters=300))
    assert np.abs(out.data - clean).mean() < np.abs(noisy - clean).mean()


def test_counts_domain_rejected(rng):
    vol = Volume3D(rng.poisson(5.0, (6, 6, 6)).astype(np.float64), domain="counts")
    with pytest.raises(DomainError):
        tv_denoise(vol, TVConfig(weight=0.1))


def test_config_validation():
    with pytest.raises(ConfigError):
        TVConfig(weight=-0.1)
    with pytest.raises(ConfigError):
        TVConfig(weight=0.1, n_iters=0)
    with pytest.raises(ConfigError):
        TVConfig(weight=0.1, tol=-1.0)
    with pytest.raises(ConfigError):
        TVConfig(weight=0.1, scheme="primal-dual")


def test_loose_tolerance_stops_early(rng):
    vol = Volume3D(rng.uniform(0, 1, (8, 8, 8)))
    trace = {}
    tv_denoise(vol, TVConfig(weight=0.1, n_iters=500, tol=1e-2), trace=trace)
    assert trace["iterations"] < 500


def test_input_not_mutated(rng):
    v = rng.uniform(0, 1, (6, 6, 6))
    keep = v.copy()
    tv_denoise(Volume3D(v), TVConfig(weight=0.2, n_iters=50))
    assert np.array_equal(v, keep)


def test_grad_div_adjointness(rng):
    u = rng.normal(size=(5, 6, 7))
    p = rng.normal(size=(3, 5, 6, 7))
    lhs = float((_grad(u) * p).sum())
    rhs = -float((u * _div(p)).sum())
    assert lhs == pytest.approx(rhs, abs=1e-10)


def test_objective_components(rng):
    v = rng.uniform(0, 1, (4, 4, 4))
    assert tv_objective(v, v, 0.5) == pytest.approx(
        0.5 * float(np.sqrt((_grad(v) ** 2).sum(axis=0)).sum()))
    shifted = v + 0.1
    assert tv_objective(shifted, v, 0.0) == pytest.approx(0.5 * 0.01 * v.size)


def test_tune_tv_weight_selects_best_psnr(rng):
    clean = np.where(np.arange(16) < 8, 0.2, 0.8)[:, None, None] * np.ones((16, 12, 12))
    noisy = clean + rng.normal(0, 0.08, clean.shape)
    best, scores = tune_tv_weight(Volume3D(clean), Volume3D(noisy),
                                  grid=(0.01, 0.05, 0.15), n_iters=150)
    assert best in scores
    assert set(scores) == {0.01, 0.05, 0.15}
    assert scores[best] == max(scores.values())


def test_tune_tv_weight_empty_grid_rejected(rng):
    vol = Volume3D(rng.uniform(size=(6, 6, 6)))
    with pytest.raises(ConfigError):
        tune_tv_weight(vol, vol, grid=())


def test_default_weight_grid_spans_stated_range():
    assert min(DEFAULT_WEIGHT_GRID) == 0.01
    assert max(DEFAULT_WEIGHT_GRID) == 0.3
