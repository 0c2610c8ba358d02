"""Gibbs-within-Metropolis samplers for the two hurdle stages.

Both stages reduce to a Gaussian working likelihood for the linear predictor
``eta = X coef' + Lambda W``: a per-observation precision ``prec`` and
information ``h`` with log-likelihood ``-prec * eta^2 / 2 + h * eta``.

* Stage 1 (Bernoulli-logit) uses Polya-Gamma augmentation:
  ``prec = omega ~ PG(1, eta)``, ``h = z - 1/2``.
* Stage 2 (log-normal on present plots) has ``prec = z / tau2_j`` and
  ``h = z * log(y) / tau2_j``.

Coefficient, loading and factor updates are then shared Gaussian conditionals;
decay parameters use adaptive random-walk Metropolis on the logit scale.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.special import expit, logit

from . import _kernels, nngp
from .errors import ConfigError, MissingPrerequisiteError, NumericalError
from .model import PriorConfig, apply_loading_constraints, check_presences

STAGE1_ORDER = ("omega", "beta", "mu_beta", "tau2_beta", "loadings", "factors", "phi")
STAGE2_ORDER = ("alpha", "tau2", "loadings", "factors", "phi")
STAGE1_RECORD = ("beta", "mu_beta", "tau2_beta", "loadings", "factors", "phi")
STAGE2_RECORD = ("alpha", "tau2", "loadings", "factors", "phi")

_SEED_MAX = 2**31 - 1


@dataclass
class McmcConfig:
    n_chains: int = 3
    n_iters: int = 200_000
    n_burn: int = 140_000
    n_thin: int = 30
    seed: int = 0
    target_accept: float = 0.44
    batch_length: int = 25
    block_order: tuple[str, ...] | None = None
    # Testing hooks: run without data, or hold named blocks at their initial values.
    prior_only: bool = False
    fixed: tuple[str, ...] = ()
    n_workers: int = 1

    def __post_init__(self):
        self.fixed = tuple(self.fixed)
        if self.block_order is not None:
            self.block_order = tuple(self.block_order)
        if self.n_chains < 1 or self.n_iters < 1 or self.n_thin < 1:
            raise ConfigError("n_chains, n_iters and n_thin must be positive")
        if not 0 <= self.n_burn < self.n_iters:
            raise ConfigError(f"n_burn ({self.n_burn}) must be in [0, n_iters={self.n_iters})")
        if (self.n_iters - self.n_burn) % self.n_thin:
            raise ConfigError(
                f"(n_iters - n_burn) = {self.n_iters - self.n_burn} is not divisible by n_thin = {self.n_thin}"
            )
        if not 0 < self.target_accept < 1:
            raise ConfigError("target_accept must be in (0, 1)")

    @property
    def draws_per_chain(self) -> int:
        return (self.n_iters - self.n_burn) // self.n_thin

    @property
    def total_draws(self) -> int:
        return self.n_chains * self.draws_per_chain

    @classmethod
    def stage1_default(cls, **kw) -> "McmcConfig":
        return cls(**{"n_chains": 3, "n_iters": 200_000, "n_burn": 140_000, "n_thin": 30, **kw})

    @classmethod
    def stage2_default(cls, **kw) -> "McmcConfig":
        return cls(**{"n_chains": 3, "n_iters": 100_000, "n_burn": 40_000, "n_thin": 30, **kw})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fixed"] = list(self.fixed)
        d["block_order"] = None if self.block_order is None else list(self.block_order)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "McmcConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown MCMC setting(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class _Chain:
    """Mutable per-chain state. Factors and data columns are in NNGP order."""

    coef: np.ndarray
    loadings: np.ndarray
    factors: np.ndarray
    phi: np.ndarray
    B: np.ndarray
    F: np.ndarray
    log_step: np.ndarray
    accepted: np.ndarray
    tried: int = 0
    batch_accepted: np.ndarray = None
    n_batches: int = 0
    extra: dict = field(default_factory=dict)


def _gaussian_draw(P: np.ndarray, r: np.ndarray, rng: np.random.Generator, what: str) -> np.ndarray:
    """Draw from N(P^{-1} r, P^{-1})."""
    try:
        L = cholesky(P, lower=True)
    except np.linalg.LinAlgError:
        raise NumericalError(f"non-positive-definite conditional precision for {what}") from None
    mean = cho_solve((L, True), r)
    return mean + solve_triangular(L.T, rng.standard_normal(r.shape[0]), lower=False)


class _FactorSampler:
    """Shared machinery: NNGP graph, loadings, factor sweeps, decay updates."""

    stage: str = ""
    order: tuple[str, ...] = ()
    record_blocks: tuple[str, ...] = ()

    def __init__(self, X, species, coords, q, priors, m, graph, design_names):
        X = np.asarray(X, dtype=float)
        coords = np.asarray(coords, dtype=float)
        if X.shape[0] != coords.shape[0]:
            raise ConfigError("design matrix and coordinates disagree on number of plots")
        self.species = tuple(species)
        self.J = len(self.species)
        self.q = int(q)
        if self.q < 0 or self.q > self.J:
            raise ConfigError(f"number of factors must be in [0, J={self.J}], got {q}")
        self.priors = priors or PriorConfig()
        self.coords = coords
        self.m = m
        self.graph = graph if graph is not None else nngp.build_neighbor_graph(coords, m)
        self.X = X[self.graph.order]
        self.n, self.p = self.X.shape
        self.design_names = list(design_names) if design_names else [f"x{i}" for i in range(self.p)]
        self.u_ptr, self.u_site, self.u_slot = self.graph.co_neighbors
        self.phi_lo, self.phi_hi = self.priors.phi_bounds

    # ---- state -------------------------------------------------------------
    def _spatial_init(self, rng, initial):
        J, q = self.J, self.q
        lam = np.asarray(initial.get("loadings", rng.standard_normal((J, q)) * math.sqrt(self.priors.loading_var)), float)
        lam = apply_loading_constraints(lam.reshape(J, q))
        phi = np.asarray(initial.get("phi", rng.uniform(self.phi_lo, self.phi_hi, q)), float).reshape(q)
        B = np.zeros((q, self.n, self.graph.m))
        F = np.ones((q, self.n))
        W = np.zeros((q, self.n))
        for r in range(q):
            sys_ = nngp.factorize(self.graph, phi[r])
            B[r], F[r] = sys_.b_coeffs, sys_.f_vars
            W[r] = _kernels.nngp_forward(self.graph.neighbors, self.graph.counts, B[r], F[r], rng.standard_normal(self.n))
        if "factors" in initial:
            W = np.asarray(initial["factors"], float).reshape(q, self.n)[:, self.graph.order].copy()
        return lam, W, phi, B, F

    def _record_common(self, ch: _Chain) -> dict:
        return {
            "loadings": ch.loadings.copy(),
            "factors": ch.factors[:, self.graph.rank].copy(),
            "phi": ch.phi.copy(),
        }

    # ---- shared updates ----------------------------------------------------
    def _factor_term(self, ch: _Chain) -> np.ndarray:
        return ch.loadings @ ch.factors if self.q else np.zeros((self.J, self.n))

    def _update_coef(self, ch, prec, h, prior_mean, prior_prec, rng):
        """Gaussian conditional of each species' coefficient row."""
        off = self._factor_term(ch)
        X = self.X
        for j in range(self.J):
            P = (X * prec[j][:, None]).T @ X + np.diag(prior_prec)
            r = X.T @ (h[j] - prec[j] * off[j]) + prior_prec * prior_mean
            ch.coef[j] = _gaussian_draw(P, r, rng, f"{self.stage} coefficients of species {self.species[j]}")

    def _update_loadings(self, ch, prec, info, rng):
        W = ch.factors
        for j in range(1, self.J):
            k = min(j, self.q)
            Wf = W[:k]
            resid = info[j] - (prec[j] * W[j] if j < self.q else 0.0)
            P = (Wf * prec[j]) @ Wf.T + np.eye(k) / self.priors.loading_var
            r = Wf @ resid
            ch.loadings[j, :k] = _gaussian_draw(P, r, rng, f"{self.stage} loadings of species {self.species[j]}")

    def _update_factors(self, ch, prec, info, rng):
        g = self.graph
        fail = _kernels.sweep_factors(
            ch.factors, g.neighbors, g.counts, ch.B, ch.F, self.u_ptr, self.u_site, self.u_slot,
            np.ascontiguousarray(ch.loadings), np.ascontiguousarray(prec), np.ascontiguousarray(info),
            int(rng.integers(_SEED_MAX)),
        )
        if fail >= 0:
            raise NumericalError(f"{self.stage} factor update failed at ordered site {fail}")

    def _phi_logpost(self, w, b, f) -> float:
        g = self.graph
        nb = np.where(g.neighbors >= 0, g.neighbors, 0)
        resid = w - np.einsum("ij,ij->i", b, w[nb])
        return -0.5 * float(np.sum(np.log(f) + resid * resid / f))

    def _update_phi(self, ch, rng, adapt: bool, cfg: McmcConfig):
        lo, hi = self.phi_lo, self.phi_hi
        for r in range(self.q):
            u = (ch.phi[r] - lo) / (hi - lo)
            theta = logit(u)
            theta_new = theta + math.exp(ch.log_step[r]) * rng.standard_normal()
            u_new = expit(theta_new)
            phi_new = lo + (hi - lo) * u_new
            if not lo < phi_new < hi:
                continue  # numerically on the boundary: reject
            sys_new = nngp.factorize(self.graph, phi_new)
            w = ch.factors[r]
            log_ratio = (
                self._phi_logpost(w, sys_new.b_coeffs, sys_new.f_vars)
                - self._phi_logpost(w, ch.B[r], ch.F[r])
                + math.log(u_new * (1 - u_new)) - math.log(u * (1 - u))
            )
            if math.log(rng.random()) < log_ratio:
                ch.phi[r] = phi_new
                ch.B[r], ch.F[r] = sys_new.b_coeffs, sys_new.f_vars
                ch.batch_accepted[r] += 1
                if not adapt:
                    ch.accepted[r] += 1
        if not adapt:
            ch.tried += 1
        if adapt:
            ch.extra["batch_iter"] = ch.extra.get("batch_iter", 0) + 1
            if ch.extra["batch_iter"] == cfg.batch_length:
                ch.n_batches += 1
                delta = min(0.01, 1.0 / math.sqrt(ch.n_batches))
                rate = ch.batch_accepted / cfg.batch_length
                ch.log_step += np.where(rate > cfg.target_accept, delta, -delta)
                ch.batch_accepted[:] = 0
                ch.extra["batch_iter"] = 0

    def _new_chain(self, coef, rng, initial) -> _Chain:
        lam, W, phi, B, F = self._spatial_init(rng, initial)
        return _Chain(
            coef=coef, loadings=lam, factors=W, phi=phi, B=B, F=F,
            log_step=np.zeros(self.q), accepted=np.zeros(self.q), batch_accepted=np.zeros(self.q),
        )

    def meta(self) -> dict:
        return {
            "stage": self.stage,
            "species": list(self.species),
            "design_names": self.design_names,
            "q": self.q,
            "m": self.graph.m,
            "priors": self.priors.to_dict(),
        }


class Stage1Sampler(_FactorSampler):
    """Multi-species Bernoulli-logit occurrence with hierarchical coefficients."""

    stage = "stage1"
    order = STAGE1_ORDER
    record_blocks = STAGE1_RECORD

    def __init__(self, X, z, species, coords, q, priors=None, m=nngp.DEFAULT_NEIGHBORS, graph=None,
                 design_names=None, min_presences=2):
        super().__init__(X, species, coords, q, priors, m, graph, design_names)
        z = np.asarray(z)
        if z.shape != (self.J, self.n):
            raise ConfigError(f"presence matrix has shape {z.shape}, expected {(self.J, self.n)}")
        if min_presences:
            check_presences(z, self.species, min_presences)
        self.z = z[:, self.graph.order].astype(float)
        self.kappa = self.z - 0.5

    def init_chain(self, rng, initial=None) -> _Chain:
        pr = self.priors
        initial = initial or {}
        mu = np.asarray(initial.get("mu_beta", rng.normal(pr.mu_beta_mean, math.sqrt(pr.mu_beta_var), self.p)), float)
        tau2 = np.asarray(
            initial.get("tau2_beta", np.clip(pr.tau2_beta_scale / rng.gamma(pr.tau2_beta_shape, 1.0, self.p), 1e-4, 1e4)),
            float,
        )
        beta = np.asarray(initial.get("beta", rng.normal(mu, np.sqrt(tau2), (self.J, self.p))), float)
        ch = self._new_chain(beta.reshape(self.J, self.p).copy(), rng, initial)
        ch.extra["mu_beta"] = mu.reshape(self.p).copy()
        ch.extra["tau2_beta"] = tau2.reshape(self.p).copy()
        ch.extra["omega"] = np.zeros((self.J, self.n))
        return ch

    def step(self, ch: _Chain, rng, adapt: bool, cfg: McmcConfig) -> None:
        pr = self.priors
        fixed = cfg.fixed
        if cfg.prior_only:
            prec = np.zeros((self.J, self.n))
            h = prec
        for block in cfg.block_order or self.order:
            if block in fixed:
                continue
            if block == "omega":
                if cfg.prior_only:
                    continue
                eta = ch.coef @ self.X.T + self._factor_term(ch)
                flat = eta.ravel()
                ch.extra["omega"] = _kernels.polya_gamma(
                    np.ones(flat.size, dtype=np.int64), flat, int(rng.integers(_SEED_MAX))
                ).reshape(eta.shape)
            if not cfg.prior_only:
                prec, h = ch.extra["omega"], self.kappa
            if block == "beta":
                tau2 = ch.extra["tau2_beta"]
                self._update_coef(ch, prec, h, ch.extra["mu_beta"], 1.0 / tau2, rng)
            elif block == "mu_beta":
                tau2 = ch.extra["tau2_beta"]
                v = 1.0 / (self.J / tau2 + 1.0 / pr.mu_beta_var)
                mean = v * (ch.coef.sum(axis=0) / tau2 + pr.mu_beta_mean / pr.mu_beta_var)
                ch.extra["mu_beta"] = mean + np.sqrt(v) * rng.standard_normal(self.p)
            elif block == "tau2_beta":
                ss = np.sum((ch.coef - ch.extra["mu_beta"]) ** 2, axis=0)
                shape = pr.tau2_beta_shape + 0.5 * self.J
                ch.extra["tau2_beta"] = (pr.tau2_beta_scale + 0.5 * ss) / rng.gamma(shape, 1.0, self.p)
            elif block in ("loadings", "factors") and self.q:
                info = h - prec * (ch.coef @ self.X.T)
                if block == "loadings":
                    self._update_loadings(ch, prec, info, rng)
                else:
                    self._update_factors(ch, prec, info, rng)
            elif block == "phi" and self.q:
                self._update_phi(ch, rng, adapt, cfg)

    def record(self, ch: _Chain) -> dict:
        return {
            "beta": ch.coef.copy(),
            "mu_beta": ch.extra["mu_beta"].copy(),
            "tau2_beta": ch.extra["tau2_beta"].copy(),
            **self._record_common(ch),
        }


class Stage2Sampler(_FactorSampler):
    """Multi-species log-normal biomass, fit on plots where each species is present."""

    stage = "stage2"
    order = STAGE2_ORDER
    record_blocks = STAGE2_RECORD

    def __init__(self, X, y, species, coords, q, priors=None, m=nngp.DEFAULT_NEIGHBORS, graph=None,
                 design_names=None, min_presences=2):
        super().__init__(X, species, coords, q, priors, m, graph, design_names)
        y = np.asarray(y, dtype=float)
        if y.shape != (self.J, self.n):
            raise ConfigError(f"response matrix has shape {y.shape}, expected {(self.J, self.n)}")
        z = y > 0
        if min_presences:
            check_presences(z, self.species, min_presences)
        y = y[:, self.graph.order]
        self.present = (y > 0).astype(float)
        self.logy = np.where(y > 0, np.log(np.where(y > 0, y, 1.0)), 0.0)
        self.n_present = self.present.sum(axis=1)

    def init_chain(self, rng, initial=None) -> _Chain:
        pr = self.priors
        initial = initial or {}
        alpha = np.asarray(initial.get("alpha", rng.normal(pr.alpha_mean, math.sqrt(pr.alpha_var), (self.J, self.p))), float)
        tau2 = np.asarray(
            initial.get("tau2", np.clip(pr.tau2_scale / rng.gamma(pr.tau2_shape, 1.0, self.J), 1e-4, 1e4)), float
        )
        ch = self._new_chain(alpha.reshape(self.J, self.p).copy(), rng, initial)
        ch.extra["tau2"] = tau2.reshape(self.J).copy()
        return ch

    def _working(self, ch, prior_only):
        if prior_only:
            z = np.zeros((self.J, self.n))
            return z, z
        w = 1.0 / ch.extra["tau2"][:, None]
        return self.present * w, self.present * self.logy * w

    def step(self, ch: _Chain, rng, adapt: bool, cfg: McmcConfig) -> None:
        pr = self.priors
        for block in cfg.block_order or self.order:
            if block in cfg.fixed:
                continue
            if block == "alpha":
                prec, h = self._working(ch, cfg.prior_only)
                prior_prec = np.full(self.p, 1.0 / pr.alpha_var)
                self._update_coef(ch, prec, h, np.full(self.p, pr.alpha_mean), prior_prec, rng)
            elif block == "tau2":
                if cfg.prior_only:
                    shape, ss = np.full(self.J, pr.tau2_shape), np.zeros(self.J)
                else:
                    resid = (self.logy - ch.coef @ self.X.T - self._factor_term(ch)) * self.present
                    shape = pr.tau2_shape + 0.5 * self.n_present
                    ss = np.sum(resid * resid, axis=1)
                ch.extra["tau2"] = (pr.tau2_scale + 0.5 * ss) / rng.gamma(shape, 1.0)
            elif block in ("loadings", "factors") and self.q:
                prec, h = self._working(ch, cfg.prior_only)
                info = h - prec * (ch.coef @ self.X.T)
                if block == "loadings":
                    self._update_loadings(ch, prec, info, rng)
                else:
                    self._update_factors(ch, prec, info, rng)
            elif block == "phi" and self.q:
                self._update_phi(ch, rng, adapt, cfg)

    def record(self, ch: _Chain) -> dict:
        return {"alpha": ch.coef.copy(), "tau2": ch.extra["tau2"].copy(), **self._record_common(ch)}


# ---- chains and storage ------------------------------------------------------


def _run_chain(sampler: _FactorSampler, cfg: McmcConfig, seed_seq, initial) -> tuple[dict, dict]:
    rng = np.random.default_rng(seed_seq)
    ch = sampler.init_chain(rng, initial)
    out: dict[str, list] = {name: [] for name in sampler.record_blocks}
    for it in range(cfg.n_iters):
        adapt = it < cfg.n_burn
        sampler.step(ch, rng, adapt, cfg)
        if it >= cfg.n_burn and (it - cfg.n_burn + 1) % cfg.n_thin == 0:
            for name, value in sampler.record(ch).items():
                out[name].append(value)
    stats = {
        "phi_acceptance": (ch.accepted / max(ch.tried, 1)).tolist(),
        "phi_log_step": ch.log_step.tolist(),
    }
    return {k: np.asarray(v) for k, v in out.items()}, stats


def _chain_job(args):
    return _run_chain(*args)


@dataclass
class SampleStore:
    """Thinned post-burn-in draws, each block shaped (chain, draw, ...)."""

    stage: str
    blocks: dict[str, np.ndarray]
    coords: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return next(iter(self.blocks.values())).shape[0]

    @property
    def draws_per_chain(self) -> int:
        return next(iter(self.blocks.values())).shape[1]

    @property
    def n_draws(self) -> int:
        return self.n_chains * self.draws_per_chain

    def draws(self, name: str) -> np.ndarray:
        """Draws of one block with chains concatenated: (n_draws, ...)."""
        a = self.blocks[name]
        return a.reshape((-1,) + a.shape[2:])

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {"stage": self.stage, "meta": self.meta, "blocks": {}}
        for name, arr in {**self.blocks, "_coords": self.coords}.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fname = f"{name.lstrip('_')}.f64" if name != "_coords" else "coords.f64"
            arr.tofile(directory / fname)
            manifest["blocks"][name] = {"file": fname, "shape": list(arr.shape), "dtype": "<f8"}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "SampleStore":
        directory = Path(directory)
        mpath = directory / "manifest.json"
        if not mpath.exists():
            raise MissingPrerequisiteError(f"sample store not found: {mpath}")
        manifest = json.loads(mpath.read_text())
        blocks = {}
        coords = None
        for name, spec in manifest["blocks"].items():
            arr = np.fromfile(directory / spec["file"], dtype=spec["dtype"]).reshape(spec["shape"])
            if name == "_coords":
                coords = arr
            else:
                blocks[name] = arr
        return cls(stage=manifest["stage"], blocks=blocks, coords=coords, meta=manifest["meta"])


def run(
    sampler: _FactorSampler,
    config: McmcConfig,
    initial: dict | None = None,
    extra_meta: dict | None = None,
) -> SampleStore:
    """Run ``config.n_chains`` independent chains and collect thinned draws."""
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_chains)
    jobs = [(sampler, config, s, initial) for s in seeds]
    if config.n_workers > 1 and config.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(config.n_workers, config.n_chains)) as ex:
            results = list(ex.map(_chain_job, jobs))
    else:
        results = [_chain_job(j) for j in jobs]
    blocks = {name: np.stack([r[0][name] for r in results]) for name in sampler.record_blocks}
    meta = sampler.meta()
    meta["mcmc"] = config.to_dict()
    meta["chain_stats"] = [r[1] for r in results]
    if extra_meta:
        meta.update(extra_meta)
    return SampleStore(stage=sampler.stage, blocks=blocks, coords=sampler.coords.copy(), meta=meta)
