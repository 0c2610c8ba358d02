import math

import numpy as np
import pytest
from scipy import stats
from scipy.spatial.distance import cdist

from hurdlesae import mcmc
from hurdlesae.errors import ConfigError, MissingPrerequisiteError, ValidationError
from hurdlesae.model import PriorConfig, loadings_identified


def _coords(n, seed=0, scale=100.0):
    return np.random.default_rng(seed).uniform(0, scale, (n, 2))


def test_config_draw_counts():
    assert mcmc.McmcConfig.stage1_default().total_draws == 6000
    assert mcmc.McmcConfig.stage2_default().total_draws == 6000
    assert mcmc.McmcConfig(n_chains=1, n_iters=100, n_burn=0, n_thin=1).total_draws == 100
    with pytest.raises(ConfigError, match="divisible"):
        mcmc.McmcConfig(n_iters=100, n_burn=10, n_thin=7)
    with pytest.raises(ConfigError):
        mcmc.McmcConfig(n_iters=100, n_burn=100)
    cfg = mcmc.McmcConfig(n_iters=50, n_burn=10, n_thin=2, fixed=["phi"])
    assert mcmc.McmcConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        mcmc.McmcConfig.from_dict({"n_itters": 5})


def test_too_few_presences_rejected():
    X = np.ones((6, 1))
    z = np.array([[1, 0, 0, 0, 0, 0], [1, 1, 0, 0, 0, 0]])
    with pytest.raises(ValidationError, match="a \\(1\\)"):
        mcmc.Stage1Sampler(X, z, ["a", "b"], _coords(6), q=0)
    with pytest.raises(ValidationError):
        mcmc.Stage2Sampler(X, z * 2.0, ["a", "b"], _coords(6), q=0)


def _stage2_problem(n=60, J=3, q=2, seed=1):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = np.where(rng.random((J, n)) < 0.6, rng.lognormal(1.0, 0.5, (J, n)), 0.0)
    return mcmc.Stage2Sampler(X, y, [f"s{j}" for j in range(J)], _coords(n, seed), q=q, m=8)


def test_same_seed_bit_identical_and_store_round_trip(tmp_path):
    s = _stage2_problem()
    cfg = mcmc.McmcConfig(n_chains=2, n_iters=60, n_burn=20, n_thin=4, seed=42)
    a = mcmc.run(s, cfg)
    b = mcmc.run(s, cfg)
    for name in a.blocks:
        assert np.array_equal(a.blocks[name], b.blocks[name])
    assert a.blocks["alpha"].shape == (2, 10, 3, 2)
    assert a.n_draws == 20 and a.draws("phi").shape == (20, 2)
    a.save(tmp_path / "store")
    back = mcmc.SampleStore.load(tmp_path / "store")
    for name in a.blocks:
        assert np.array_equal(a.blocks[name], back.blocks[name])
    assert back.meta["species"] == ["s0", "s1", "s2"] and np.array_equal(back.coords, a.coords)
    c = mcmc.run(s, mcmc.McmcConfig(n_chains=2, n_iters=60, n_burn=20, n_thin=4, seed=43))
    assert not np.array_equal(a.blocks["alpha"], c.blocks["alpha"])
    with pytest.raises(MissingPrerequisiteError):
        mcmc.SampleStore.load(tmp_path / "nowhere")


def test_parallel_chains_match_serial():
    s = _stage2_problem(n=30)
    cfg = mcmc.McmcConfig(n_chains=2, n_iters=20, n_burn=10, n_thin=2, seed=7)
    a = mcmc.run(s, cfg)
    b = mcmc.run(s, mcmc.McmcConfig(**{**cfg.to_dict(), "n_workers": 2}))
    for name in a.blocks:
        assert np.array_equal(a.blocks[name], b.blocks[name])


def test_constraints_hold_at_every_draw():
    s = _stage2_problem()
    store = mcmc.run(s, mcmc.McmcConfig(n_chains=1, n_iters=300, n_burn=0, n_thin=1, seed=3))
    assert all(loadings_identified(L) for L in store.draws("loadings"))
    lo, hi = PriorConfig().phi_bounds
    phi = store.draws("phi")
    assert np.all((phi > lo) & (phi < hi))


def test_stage2_variance_conjugate():
    # Coefficients held fixed, no factors: tau2 | y is inverse-gamma.
    rng = np.random.default_rng(4)
    n = 40
    y = rng.lognormal(0.5, 0.8, (1, n))
    s = mcmc.Stage2Sampler(np.ones((n, 1)), y, ["a"], _coords(n), q=0)
    cfg = mcmc.McmcConfig(n_chains=1, n_iters=5000, n_burn=0, n_thin=1, seed=1, fixed=("alpha",))
    store = mcmc.run(s, cfg, initial={"alpha": np.array([[0.5]])})
    draws = store.draws("tau2")[:, 0]
    a = 2.0 + n / 2
    b = 1.0 + 0.5 * np.sum((np.log(y[0]) - 0.5) ** 2)
    mean, var = b / (a - 1), b * b / ((a - 1) ** 2 * (a - 2))
    assert abs(draws.mean() - mean) < 3 * math.sqrt(var / draws.size)
    assert abs(draws.var() / var - 1) < 0.1


def test_identical_species_exchangeable():
    rng = np.random.default_rng(5)
    n = 50
    z1 = (rng.random(n) < 0.4).astype(int)
    z = np.vstack([z1, z1])
    X = np.ones((n, 1))
    pri = PriorConfig(tau2_beta_scale=1e4)
    s = mcmc.Stage1Sampler(X, z, ["a", "b"], _coords(n), q=0, priors=pri)
    store = mcmc.run(s, mcmc.McmcConfig(n_chains=1, n_iters=8000, n_burn=1000, n_thin=10, seed=2))
    b = store.draws("beta")[:, :, 0]
    assert stats.ks_2samp(b[:, 0], b[:, 1]).pvalue > 0.01


def test_phi_adaptation_reaches_target_band():
    n = 30
    s = mcmc.Stage2Sampler(np.ones((n, 1)), np.ones((1, n)), ["a"], _coords(n, 3, 500.0), q=1, m=10)
    cfg = mcmc.McmcConfig(n_chains=1, n_iters=7500, n_burn=2500, n_thin=50, seed=9, prior_only=True)
    store = mcmc.run(s, cfg)
    acc = store.meta["chain_stats"][0]["phi_acceptance"][0]
    assert 0.3 <= acc <= 0.6


def _lambda_posterior_quadrature(y_log, alpha, tau2, C):
    """Posterior mean of the free loading in a J=2, q=1 model, marginalizing the factor."""
    n = C.shape[0]
    r = (y_log - alpha[:, None]).ravel()
    grid = np.linspace(-4, 4, 1601)
    logp = np.empty_like(grid)
    for k, l in enumerate(grid):
        lam = np.array([1.0, l])
        S = np.kron(np.outer(lam, lam), C) + np.kron(np.diag(tau2), np.eye(n))
        sign, logdet = np.linalg.slogdet(S)
        logp[k] = -0.5 * logdet - 0.5 * r @ np.linalg.solve(S, r) - 0.5 * l * l
    w = np.exp(logp - logp.max())
    return float(np.sum(grid * w) / np.sum(w))


def test_loading_posterior_matches_quadrature():
    rng = np.random.default_rng(6)
    n = 12
    coords = _coords(n, 6, 60.0)
    phi = 0.05
    C = np.exp(-phi * cdist(coords, coords))
    w = np.linalg.cholesky(C) @ rng.standard_normal(n)
    alpha = np.array([1.0, 0.5])
    tau2 = np.array([0.3, 0.3])
    logy = alpha[:, None] + np.outer([1.0, 0.7], w) + np.sqrt(tau2)[:, None] * rng.standard_normal((2, n))
    s = mcmc.Stage2Sampler(np.ones((n, 1)), np.exp(logy), ["a", "b"], coords, q=1, m=n - 1)
    init = {"alpha": alpha[:, None], "tau2": tau2, "phi": np.array([phi])}
    cfg = mcmc.McmcConfig(n_chains=2, n_iters=30000, n_burn=2000, n_thin=4, seed=8, fixed=("alpha", "tau2", "phi"))
    store = mcmc.run(s, cfg, initial=init)
    sampled = store.draws("loadings")[:, 1, 0].mean()
    assert abs(sampled - _lambda_posterior_quadrature(logy, alpha, tau2, C)) < 0.05


def test_prior_only_factors_reproduce_nngp_prior():
    n = 20
    s = mcmc.Stage2Sampler(np.ones((n, 1)), np.ones((1, n)), ["a"], _coords(n, 4, 3000.0), q=1, m=5)
    cfg = mcmc.McmcConfig(n_chains=1, n_iters=10000, n_burn=0, n_thin=1, seed=4, prior_only=True,
                          fixed=("phi",))
    store = mcmc.run(s, cfg, initial={"phi": np.array([0.01])})
    w = store.draws("factors")[:, 0, :]
    assert np.all(np.abs(w.mean(axis=0)) < 0.1)
    assert abs(w.var(axis=0).mean() - 1) < 0.05
