"""Hurdle model parameters, priors, linear predictors and likelihoods.

Stage 1: z_j(s) ~ Bernoulli(psi), logit(psi) = beta_j' x1(s) + lambda_j' w(s),
with beta_{j,t} ~ Normal(mu_t, tau2_t) shared across species.
Stage 2: log y_j(s) | z=1 ~ Normal(alpha_j' x2(s) + lambda_j' w(s), tau2_j);
y_j(s) | z=0 ~ Normal(0, 1e-4).
Each stage has its own loadings, NNGP factors and decay parameters.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from . import nngp
from .errors import ConfigError, ValidationError

PSI_CLAMP = 1e-12


@dataclass
class PriorConfig:
    # community (hyper) means of stage 1 coefficients
    mu_beta_mean: float = 0.0
    mu_beta_var: float = 2.72
    # inverse-gamma (shape, scale) on stage 1 community variances
    tau2_beta_shape: float = 0.1
    tau2_beta_scale: float = 0.1
    # independent normal prior on stage 2 coefficients
    alpha_mean: float = 0.0
    alpha_var: float = 10.0
    # inverse-gamma (shape, scale) on stage 2 residual variances
    tau2_shape: float = 2.0
    tau2_scale: float = 1.0
    # uniform decay prior through the effective range (km)
    min_range_km: float = 50.0
    max_range_km: float = 2000.0
    loading_var: float = 1.0
    absent_var: float = 1e-4

    def __post_init__(self):
        positive = [
            "mu_beta_var", "tau2_beta_shape", "tau2_beta_scale", "alpha_var",
            "tau2_shape", "tau2_scale", "min_range_km", "max_range_km", "loading_var", "absent_var",
        ]
        bad = [k for k in positive if not getattr(self, k) > 0]
        if bad:
            raise ConfigError(f"prior settings must be positive: {', '.join(bad)}")
        if not self.phi_bounds[0] < self.phi_bounds[1]:
            raise ConfigError("phi bounds are empty: min_range_km must be below max_range_km")

    @property
    def phi_bounds(self) -> tuple[float, float]:
        return nngp.LN20 / self.max_range_km, nngp.LN20 / self.min_range_km

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "PriorConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown prior setting(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class Stage1Params:
    beta: np.ndarray  # (J, p1)
    mu_beta: np.ndarray  # (p1,)
    tau2_beta: np.ndarray  # (p1,)
    loadings: np.ndarray  # (J, q)
    factors: np.ndarray  # (q, n)
    phi: np.ndarray  # (q,)


@dataclass
class Stage2Params:
    alpha: np.ndarray  # (J, p2)
    tau2: np.ndarray  # (J,)
    loadings: np.ndarray
    factors: np.ndarray
    phi: np.ndarray


def loading_mask(J: int, q: int) -> np.ndarray:
    """True for freely estimated entries: strictly below the diagonal."""
    return np.tril(np.ones((J, q), dtype=bool), k=-1)


def apply_loading_constraints(loadings: np.ndarray) -> np.ndarray:
    J, q = loadings.shape
    if q > J:
        raise ConfigError(f"number of factors ({q}) exceeds number of species ({J})")
    out = np.where(loading_mask(J, q), loadings, 0.0)
    out[np.arange(q), np.arange(q)] = 1.0
    return out


def loadings_identified(loadings: np.ndarray) -> bool:
    J, q = loadings.shape
    d = np.arange(q)
    return bool(np.all(loadings[d, d] == 1.0) and np.all(np.triu(loadings, k=1) == 0.0))


def inv_logit(x):
    return expit(x)


def _dot(x, coef, lam, w) -> float:
    x, coef = np.asarray(x, float), np.asarray(coef, float)
    lam, w = np.atleast_1d(np.asarray(lam, float)), np.atleast_1d(np.asarray(w, float))
    if x.shape != coef.shape or lam.shape != w.shape:
        raise ValueError(f"shape mismatch: x{x.shape} coef{coef.shape} loadings{lam.shape} factors{w.shape}")
    return float(x @ coef + lam @ w)


def stage1_linpred(x, beta_j, lambda_j, w_at_site) -> float:
    """Logit of occurrence probability; x = (1, TMIN, TMIN^2, TMAX, TMAX^2, PPT, PPT^2)."""
    return _dot(x, beta_j, lambda_j, w_at_site)


def stage2_linpred(x, alpha_j, lambda_j, w_at_site) -> float:
    """Log-scale biomass mean; x = (1, TCC, VPD, PPT, ELEV, ELEV^2)."""
    return _dot(x, alpha_j, lambda_j, w_at_site)


def stage1_loglik(z, psi) -> float:
    """Bernoulli log-likelihood; -inf when psi is exactly 0 or 1 against the data."""
    z = np.asarray(z, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if np.any((psi == 0) & (z == 1)) or np.any((psi == 1) & (z == 0)):
        return -np.inf
    psi = np.clip(psi, PSI_CLAMP, 1 - PSI_CLAMP)
    return float(np.sum(z * np.log(psi) + (1 - z) * np.log1p(-psi)))


def stage2_loglik(y, z, mu, tau2_j: float, absent_var: float = 1e-4) -> float:
    """Log-normal density where present (on y, with Jacobian), Normal(0, absent_var) where absent."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    z = np.atleast_1d(np.asarray(z)).astype(bool)
    mu = np.broadcast_to(np.asarray(mu, dtype=float), y.shape)
    if np.any(y[z] <= 0):
        raise ValidationError("present (z=1) observation with non-positive response")
    if np.any(y < 0):
        raise ValidationError("negative response")
    ly = np.log(y[z])
    present = -0.5 * np.log(2 * np.pi * tau2_j) - 0.5 * (ly - mu[z]) ** 2 / tau2_j - ly
    absent = -0.5 * np.log(2 * np.pi * absent_var) - 0.5 * y[~z] ** 2 / absent_var
    return float(present.sum() + absent.sum())


def stage1_loglik_grad(X, z, beta_j, offset=0.0) -> np.ndarray:
    """Gradient of the species-j stage 1 log-likelihood with respect to beta_j."""
    psi = expit(X @ beta_j + offset)
    return X.T @ (np.asarray(z, float) - psi)


def stage2_loglik_grad(X, y, z, alpha_j, tau2_j, offset=0.0) -> np.ndarray:
    z = np.asarray(z).astype(bool)
    r = np.log(y[z]) - (X[z] @ alpha_j + np.broadcast_to(offset, z.shape)[z])
    return X[z].T @ r / tau2_j


def check_presences(z: np.ndarray, species, minimum: int = 2) -> None:
    counts = np.asarray(z).sum(axis=1)
    few = [f"{s} ({int(c)})" for s, c in zip(species, counts) if c < minimum]
    if few:
        raise ValidationError(f"species with fewer than {minimum} presences cannot be modeled: {', '.join(few)}")


def _inv_gamma(rng, shape, scale, size=None):
    return scale / rng.gamma(shape, 1.0, size=size)


def _truncated_inv_gamma(rng, shape, scale, size, lo=1e-4, hi=1e4):
    return np.clip(_inv_gamma(rng, shape, scale, size), lo, hi)


def init_state(
    config: PriorConfig,
    J: int,
    n: int,
    p1: int,
    p2: int,
    q: int,
    rng: np.random.Generator,
    graph: nngp.NeighborGraph | None = None,
) -> tuple[Stage1Params, Stage2Params]:
    """Starting values drawn from the priors; variances truncated to (1e-4, 1e4)."""
    lo, hi = config.phi_bounds

    def spatial():
        lam = apply_loading_constraints(rng.normal(0.0, np.sqrt(config.loading_var), (J, q)))
        phi = rng.uniform(lo, hi, q)
        if q and graph is None:
            raise ValueError("a neighbor graph is required to draw initial factors")
        w = np.zeros((q, n))
        for r in range(q):
            w[r] = nngp.sample_prior(nngp.factorize(graph, phi[r]), rng)
        return lam, w, phi

    mu_beta = rng.normal(config.mu_beta_mean, np.sqrt(config.mu_beta_var), p1)
    tau2_beta = _truncated_inv_gamma(rng, config.tau2_beta_shape, config.tau2_beta_scale, p1)
    beta = rng.normal(mu_beta, np.sqrt(tau2_beta), (J, p1))
    lam1, w1, phi1 = spatial()
    s1 = Stage1Params(beta, mu_beta, tau2_beta, lam1, w1, phi1)

    alpha = rng.normal(config.alpha_mean, np.sqrt(config.alpha_var), (J, p2))
    tau2 = _truncated_inv_gamma(rng, config.tau2_shape, config.tau2_scale, J)
    lam2, w2, phi2 = spatial()
    s2 = Stage2Params(alpha, tau2, lam2, w2, phi2)
    return s1, s2
