import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit

from hurdlesae import nngp
from hurdlesae.errors import ConfigError, ValidationError
from hurdlesae.model import (
    PriorConfig,
    apply_loading_constraints,
    check_presences,
    init_state,
    loadings_identified,
    stage1_linpred,
    stage1_loglik,
    stage1_loglik_grad,
    stage2_linpred,
    stage2_loglik,
    stage2_loglik_grad,
)


def test_prior_defaults_and_bounds():
    p = PriorConfig()
    assert (p.mu_beta_mean, p.mu_beta_var) == (0.0, 2.72)
    assert (p.tau2_beta_shape, p.tau2_beta_scale) == (0.1, 0.1)
    assert (p.tau2_shape, p.tau2_scale) == (2.0, 1.0)
    assert (p.alpha_mean, p.alpha_var, p.absent_var) == (0.0, 10.0, 1e-4)
    lo, hi = p.phi_bounds
    assert math.isclose(lo, math.log(20) / 2000) and math.isclose(hi, math.log(20) / 50)
    assert PriorConfig.from_dict(p.to_dict()) == p
    with pytest.raises(ConfigError):
        PriorConfig(alpha_var=0)
    with pytest.raises(ConfigError):
        PriorConfig(min_range_km=3000)
    with pytest.raises(ConfigError):
        PriorConfig.from_dict({"bogus": 1})


def test_stage1_linpred_examples():
    zero = np.zeros(7)
    beta = np.array([0.7, 1, 2, 3, 4, 5, 6])
    x = np.r_[1.0, zero[1:]]
    assert stage1_linpred(x, beta, [0.0], [0.0]) == 0.7
    assert expit(stage1_linpred(x, np.zeros(7), [1.0], [0.0])) == 0.5
    x = np.array([1, 0.5, 0.25, -0.2, 0.04, 1, 1])
    b = np.array([0.1, 0.2, -0.3, 0.4, 0, 0.05, -0.02])
    expect = 0.1 + 0.1 - 0.075 - 0.08 + 0 + 0.05 - 0.02 + 0.3
    assert math.isclose(stage1_linpred(x, b, [0.3], [1.0]), expect, rel_tol=1e-14)
    with pytest.raises(ValueError):
        stage1_linpred(x[:6], b, [0.3], [1.0])


def test_stage2_linpred_oracle():
    rng = np.random.default_rng(0)
    x, a, lam, w = rng.normal(size=6), rng.normal(size=6), rng.normal(size=3), rng.normal(size=3)
    assert math.isclose(stage2_linpred(x, a, lam, w), sum(x * a) + sum(lam * w), rel_tol=1e-12)
    assert stage2_linpred(np.r_[1.0, np.zeros(5)], np.r_[1.3, np.ones(5)], [0.0], [0.0]) == 1.3
    assert np.all(np.exp(rng.normal(stage2_linpred(x, a, lam, w), 1.0, 1000)) > 0)


def test_stage1_loglik_examples():
    assert stage1_loglik([1], [0.5]) == math.log(0.5)
    assert math.isclose(stage1_loglik([1, 0], [0.9, 0.1]), 2 * math.log(0.9), rel_tol=1e-14)
    rng = np.random.default_rng(1)
    z = rng.integers(0, 2, 100)
    psi = rng.uniform(0.01, 0.99, 100)
    oracle = math.fsum(math.log(p) if zi else math.log(1 - p) for zi, p in zip(z, psi))
    assert math.isclose(stage1_loglik(z, psi), oracle, rel_tol=1e-12)
    assert stage1_loglik([1], [0.0]) == -math.inf
    assert stage1_loglik([0], [1.0]) == -math.inf
    assert math.isfinite(stage1_loglik([0], [0.0]))


@given(st.integers(1, 30), st.integers(0, 30))
def test_stage1_loglik_max_at_sample_mean(n1, n0):
    z = np.r_[np.ones(n1), np.zeros(n0)]
    zbar = z.mean()
    best = stage1_loglik(z, np.full(z.size, zbar))
    for p in (0.01, 0.2, 0.5, 0.8, 0.99):
        assert stage1_loglik(z, np.full(z.size, p)) <= best + 1e-9


def test_stage2_loglik_examples():
    assert math.isclose(stage2_loglik([0.0], [0], [0.0], 1.0), -0.5 * math.log(2 * math.pi * 1e-4), rel_tol=1e-14)
    assert math.isclose(stage2_loglik([1.0], [1], [0.0], 1.0), -0.5 * math.log(2 * math.pi), rel_tol=1e-14)
    y = np.array([0.0, 2.5, 0.0, 0.4, 7.0])
    z = (y > 0).astype(int)
    mu = np.array([0.1, 0.8, -1.0, -0.5, 2.0])
    t2 = 0.6
    oracle = 0.0
    for yi, zi, mi in zip(y, z, mu):
        if zi:
            oracle += -0.5 * math.log(2 * math.pi * t2) - (math.log(yi) - mi) ** 2 / (2 * t2) - math.log(yi)
        else:
            oracle += -0.5 * math.log(2 * math.pi * 1e-4) - yi ** 2 / 2e-4
    assert math.isclose(stage2_loglik(y, z, mu, t2), oracle, rel_tol=1e-12)
    with pytest.raises(ValidationError, match="non-positive"):
        stage2_loglik([0.0], [1], [0.0], 1.0)


def _fd(f, x, h=1e-6):
    g = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    X = np.column_stack([np.ones(40), rng.normal(size=(40, 3))])
    off = rng.normal(size=40) * 0.3
    z = rng.integers(0, 2, 40)
    beta = rng.normal(size=4) * 0.5
    g = stage1_loglik_grad(X, z, beta, off)
    fd = _fd(lambda b: stage1_loglik(z, expit(X @ b + off)), beta)
    np.testing.assert_allclose(g, fd, rtol=1e-5)
    y = np.where(z == 1, rng.lognormal(size=40), 0.0)
    alpha = rng.normal(size=4)
    g2 = stage2_loglik_grad(X, y, z, alpha, 0.7, off)
    fd2 = _fd(lambda a: stage2_loglik(y, z, X @ a + off, 0.7), alpha)
    np.testing.assert_allclose(g2, fd2, rtol=1e-5)


@given(st.floats(-50, 50))
def test_affine_equivariance_of_linear_predictor(c):
    rng = np.random.default_rng(3)
    raw = rng.normal(size=5)
    alpha = rng.normal(size=6)
    shifted = raw.copy()
    shifted[1] += c
    adj = alpha.copy()
    adj[0] -= alpha[2] * c
    x = np.r_[1.0, raw]
    xs = np.r_[1.0, shifted]
    assert math.isclose(math.exp(stage2_linpred(x, alpha, [0.0], [0.0])),
                        math.exp(stage2_linpred(xs, adj, [0.0], [0.0])), rel_tol=1e-9)


def test_loading_constraints():
    L = apply_loading_constraints(np.random.default_rng(0).normal(size=(20, 5)))
    assert L.shape == (20, 5) and loadings_identified(L)
    assert L[0, 0] == 1 and np.all(L[0, 1:] == 0)
    with pytest.raises(ConfigError):
        apply_loading_constraints(np.ones((2, 3)))


def test_check_presences():
    check_presences(np.array([[1, 1, 0], [0, 1, 1]]), ["a", "b"])
    with pytest.raises(ValidationError, match=r"b \(1\)"):
        check_presences(np.array([[1, 1, 0], [0, 1, 0]]), ["a", "b"])


def test_init_state_shapes_determinism_and_prior_moments():
    g = nngp.build_neighbor_graph(np.random.default_rng(0).uniform(0, 100, (25, 2)), 5)
    cfg = PriorConfig()
    s1, s2 = init_state(cfg, 20, 25, 7, 6, 5, np.random.default_rng(11), g)
    assert s1.loadings.shape == (20, 5) and loadings_identified(s1.loadings) and loadings_identified(s2.loadings)
    assert s1.factors.shape == (5, 25) and s2.alpha.shape == (20, 6)
    lo, hi = cfg.phi_bounds
    assert np.all((s1.phi >= lo) & (s1.phi <= hi))
    assert np.all((s1.tau2_beta >= 1e-4) & (s1.tau2_beta <= 1e4)) and np.all((s2.tau2 >= 1e-4) & (s2.tau2 <= 1e4))
    t1, _ = init_state(cfg, 20, 25, 7, 6, 5, np.random.default_rng(11), g)
    np.testing.assert_array_equal(s1.beta, t1.beta)
    rng = np.random.default_rng(5)
    mus = np.concatenate([init_state(cfg, 1, 25, 7, 1, 0, rng)[0].mu_beta for _ in range(1500)])
    assert abs(mus.var() / 2.72 - 1) < 0.05
