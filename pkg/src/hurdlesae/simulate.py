"""Synthetic populations from the two-stage spatial factor hurdle model.

Covariate surfaces are smooth random fields (random Fourier features),
factors are exponential-kernel Gaussian processes with a mix of short and
long effective ranges, and species intercepts are calibrated so expected
occupancy follows a skewed spread (mean ~29%, 2% to 87% by default).
Areas are compact clusters of population units (k-means on coordinates).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.linalg import cholesky
from scipy.optimize import brentq
from scipy.spatial.distance import cdist
from scipy.special import expit

from . import nngp
from .data import PlotTable, PredictionGrid, design_matrix
from .errors import ConfigError, NumericalError
from .model import apply_loading_constraints
from .pipeline import STAGE1_SPEC, STAGE2_SPEC

COVARIATES = ("TMIN", "TMAX", "PPT", "VPD", "TCC", "ELEV")
GENERATOR_VERSION = 1
_DENSE_LIMIT = 4000


@dataclass
class SimConfig:
    nx: int = 50
    ny: int = 40
    spacing_km: float = 10.0
    n_units: int = 2000
    n_species: int = 5
    q: int = 2
    # effective ranges of the factors as fractions of the domain width
    factor_range_fracs: tuple[float, ...] = (0.1, 0.5)
    occupancy_mean: float = 0.29
    occupancy_min: float = 0.02
    occupancy_max: float = 0.87
    # stage 1 truths
    slope_sd: float = 0.5
    quad_mean: float = -0.2
    quad_sd: float = 0.1
    # stage 2 truths (log Mg/ha)
    log_intercept_mean: float = 2.5
    log_intercept_sd: float = 0.5
    log_slope_sd: float = 0.2
    tau2_range: tuple[float, float] = (0.2, 0.5)
    loading_sd: float = 0.5
    covariate_length_frac: float = 0.3
    n_areas: int = 25
    n_replicates: int = 10
    sample_size: int = 400
    seed: int = 20240601
    version: int = GENERATOR_VERSION

    def __post_init__(self):
        self.factor_range_fracs = tuple(self.factor_range_fracs)
        self.tau2_range = tuple(self.tau2_range)
        if self.n_units > self.nx * self.ny:
            raise ConfigError(f"n_units={self.n_units} exceeds grid size {self.nx}x{self.ny}")
        if self.sample_size > self.n_units:
            raise ConfigError("sample_size cannot exceed n_units")
        if self.n_areas < 2:
            raise ConfigError("need at least 2 areas")
        if len(self.factor_range_fracs) != self.q:
            raise ConfigError("factor_range_fracs needs one entry per factor")
        if self.q > self.n_species:
            raise ConfigError("q cannot exceed n_species")
        if not 0 < self.occupancy_min <= self.occupancy_mean <= self.occupancy_max < 1:
            raise ConfigError("occupancy targets must satisfy 0 < min <= mean <= max < 1")

    @classmethod
    def paper_scale(cls, **kw) -> "SimConfig":
        """41,501 units on a 1.75 km grid, 10 species, 4 factors, 100 areas, 100 x n=1000."""
        base = dict(
            nx=460, ny=100, spacing_km=1.75, n_units=41_501, n_species=10, q=4,
            factor_range_fracs=(0.05, 0.1, 0.3, 0.6), n_areas=100, n_replicates=100, sample_size=1000,
        )
        base.update(kw)
        return cls(**base)

    @property
    def width_km(self) -> float:
        return self.nx * self.spacing_km

    def to_dict(self) -> dict:
        d = asdict(self)
        d["factor_range_fracs"] = list(self.factor_range_fracs)
        d["tau2_range"] = list(self.tau2_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown simulation setting(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SimConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Truth:
    """True area means and generating parameters of a simulated population."""

    species: tuple[str, ...]
    areas: tuple[str, ...]
    area_means: np.ndarray  # (J, K)
    occupancy: np.ndarray  # realized share of units occupied per species
    params: dict = field(default_factory=dict)

    def mean(self, species: str, area: str) -> float:
        return float(self.area_means[self.species.index(species), self.areas.index(area)])


def occupancy_targets(J: int, mean: float, lo: float, hi: float) -> np.ndarray:
    """Skewed spread lo + (hi - lo) * u^k over an even grid u, with k set to hit ``mean``.

    With few species the mean of u^k cannot go below 1/J; the closest
    attainable spread is used then.
    """
    if J == 1:
        return np.array([mean])
    u = np.linspace(0, 1, J)
    target = (mean - lo) / (hi - lo)
    gap = lambda k: np.mean(u ** k) - target  # noqa: E731
    k_lo, k_hi = 1e-3, 100.0
    if gap(k_hi) > 0:
        k = k_hi
    elif gap(k_lo) < 0:
        k = k_lo
    else:
        k = brentq(gap, k_lo, k_hi)
    return lo + (hi - lo) * u ** k


def _unit_coords(cfg: SimConfig) -> np.ndarray:
    gx, gy = np.meshgrid(np.arange(cfg.nx), np.arange(cfg.ny), indexing="xy")
    pts = (np.column_stack([gx.ravel(), gy.ravel()]) + 0.5) * cfg.spacing_km
    if cfg.n_units == pts.shape[0]:
        return pts
    # Keep the units nearest the center in the domain's own aspect: an elliptical region.
    center = pts.mean(axis=0)
    half = np.array([cfg.nx, cfg.ny]) * cfg.spacing_km / 2
    r = np.sum(((pts - center) / half) ** 2, axis=1)
    keep = np.sort(np.argsort(r, kind="stable")[: cfg.n_units])
    return pts[keep]


class _FourierField:
    """Smooth random field: a sum of random cosines with length scale ``length_km``."""

    def __init__(self, length_km: float, rng: np.random.Generator, n_features: int = 64):
        self.omega = rng.normal(0.0, 1.0 / length_km, size=(n_features, 2))
        self.phase = rng.uniform(0, 2 * np.pi, n_features)

    def __call__(self, coords) -> np.ndarray:
        n = self.phase.size
        return np.sqrt(2.0 / n) * np.cos(np.asarray(coords) @ self.omega.T + self.phase).sum(axis=1)


def _smooth_field(coords, length_km, rng, n_features=64) -> np.ndarray:
    """Unit-variance smooth random field from random Fourier features."""
    f = _FourierField(length_km, rng, n_features)(coords)
    return (f - f.mean()) / f.std()


def _climate(f: np.ndarray, north: np.ndarray) -> np.ndarray:
    """Map six unit fields and a south-north gradient to covariates in source units."""
    tmin = -2.0 + 2.0 * (0.6 * f[:, 0] - 0.8 * north)
    tmax = 32.0 + 1.5 * (0.7 * f[:, 1] - 0.7 * north)
    ppt = 1300.0 + 180.0 * f[:, 2]
    vpd = 1.2 + 0.15 * (0.6 * f[:, 3] + 0.4 * f[:, 1])
    tcc = np.clip(65.0 + 15.0 * f[:, 4], 0.0, 100.0)
    elev = 350.0 + 200.0 * f[:, 5] + 50.0 * f[:, 0]
    return np.column_stack([tmin, tmax, ppt, vpd, tcc, elev])


def _covariates(coords, cfg: SimConfig, rng) -> np.ndarray:
    L = cfg.covariate_length_frac * cfg.width_km
    f = np.column_stack([_smooth_field(coords, L, rng) for _ in COVARIATES])
    north = (coords[:, 1] - coords[:, 1].mean()) / coords[:, 1].std()
    return _climate(f, north)


def _gp_factors(coords, phis, rng) -> np.ndarray:
    n = coords.shape[0]
    out = np.empty((len(phis), n))
    if n <= _DENSE_LIMIT:
        d = cdist(coords, coords)
        for r, phi in enumerate(phis):
            L = cholesky(np.exp(-phi * d) + 1e-10 * np.eye(n), lower=True)
            out[r] = L @ rng.standard_normal(n)
    else:
        g = nngp.build_neighbor_graph(coords, 30)
        for r, phi in enumerate(phis):
            out[r] = nngp.sample_prior(nngp.factorize(g, phi), rng)
    return out


def _areas(coords, k, rng) -> np.ndarray:
    scale = coords.std(axis=0)
    _, labels = kmeans2(coords / scale, k, iter=30, minit="++", seed=rng)
    # Relabel by cluster centroid position for readable, stable area ids.
    cent = np.array([coords[labels == c].mean(axis=0) if np.any(labels == c) else [np.inf, np.inf] for c in range(k)])
    rank = np.empty(k, dtype=int)
    rank[np.lexsort((cent[:, 0], cent[:, 1]))] = np.arange(k)
    width = len(str(k))
    return np.array([f"A{rank[c] + 1:0{width}d}" for c in labels])


def simulate_population(cfg: SimConfig, rng: np.random.Generator | None = None) -> tuple[PlotTable, Truth]:
    """Generate the full population (as a PlotTable) and exact per-area true means."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    J, q = cfg.n_species, cfg.q
    coords = _unit_coords(cfg)
    N = coords.shape[0]
    raw = _covariates(coords, cfg, rng)
    std = (raw - raw.mean(axis=0)) / raw.std(axis=0, ddof=1)
    X1, _ = design_matrix(std, COVARIATES, STAGE1_SPEC.linear, STAGE1_SPEC.quadratic)
    X2, _ = design_matrix(std, COVARIATES, STAGE2_SPEC.linear, STAGE2_SPEC.quadratic)
    phis = np.array([nngp.LN20 / (frac * cfg.width_km) for frac in cfg.factor_range_fracs])
    area_id = _areas(coords, cfg.n_areas, rng)

    # Stage 1 truths: linear/quadratic pairs, intercept calibrated below.
    p1 = X1.shape[1]
    beta = np.zeros((J, p1))
    for t in range(1, p1):
        is_quad = (t % 2) == 0
        beta[:, t] = rng.normal(cfg.quad_mean, cfg.quad_sd, J) if is_quad else rng.normal(0, cfg.slope_sd, J)
    lam1 = apply_loading_constraints(rng.normal(0, cfg.loading_sd, (J, q)))
    w1 = _gp_factors(coords, phis, rng)
    targets = occupancy_targets(J, cfg.occupancy_mean, cfg.occupancy_min, cfg.occupancy_max)
    base = beta[:, 1:] @ X1[:, 1:].T + lam1 @ w1
    z = np.zeros((J, N), dtype=np.int8)
    for j in range(J):
        for attempt in range(100):
            goal = targets[j] if attempt == 0 else np.clip(targets[j] * (1 + 0.1 * attempt), 1e-4, 0.999)
            beta[j, 0] = brentq(lambda b0: expit(b0 + base[j]).mean() - goal, -60, 60)
            z[j] = rng.random(N) < expit(beta[j, 0] + base[j])
            if z[j].any():
                break
        else:
            raise NumericalError(f"species {j}: no occupied units after 100 intercept draws")

    # Stage 2 truths.
    p2 = X2.shape[1]
    alpha = np.column_stack([
        rng.normal(cfg.log_intercept_mean, cfg.log_intercept_sd, J),
        rng.normal(0.3, 0.1, J),  # canopy cover: positive
        rng.normal(0.0, cfg.log_slope_sd, (J, p2 - 2)),
    ])
    tau2 = rng.uniform(*cfg.tau2_range, J)
    lam2 = apply_loading_constraints(rng.normal(0, cfg.loading_sd, (J, q)))
    w2 = _gp_factors(coords, phis, rng)
    mu = alpha @ X2.T + lam2 @ w2
    y = np.where(z == 1, np.exp(mu + np.sqrt(tau2)[:, None] * rng.standard_normal((J, N))), 0.0)

    species = tuple(f"SP{j + 1:02d}" for j in range(J))
    width = len(str(N))
    table = PlotTable(
        plot_id=np.array([f"U{i + 1:0{width}d}" for i in range(N)]),
        coords=coords,
        area_id=area_id,
        covariate_names=COVARIATES,
        covariates=raw,
        species=species,
        response=y,
    )
    areas = tuple(sorted(set(area_id)))
    means = np.array([[y[j, area_id == a].mean() for a in areas] for j in range(J)])
    truth = Truth(
        species=species, areas=areas, area_means=means, occupancy=z.mean(axis=1),
        params={"beta": beta, "alpha": alpha, "tau2": tau2, "loadings1": lam1, "loadings2": lam2,
                "phi": phis, "occupancy_targets": targets},
    )
    return table, truth


def sample_replicate(population: PlotTable, n: int, rng: np.random.Generator) -> PlotTable:
    """Simple random sample of ``n`` units without replacement (in draw order)."""
    if n > population.n:
        raise ConfigError(f"sample size {n} exceeds population size {population.n}")
    return population.subset(rng.choice(population.n, size=n, replace=False))


# ---- inventory-format synthetic data ---------------------------------------------


@dataclass
class Landscape:
    """A fixed synthetic region: covariate surfaces, species fields and square areas.

    Everything is a deterministic function of ``seed``, so plots and grids drawn
    separately from the same landscape are mutually consistent.
    """

    width_km: float = 1500.0
    height_km: float = 1000.0
    area_size_km: float = 30.0
    n_species: int = 20
    q: int = 3
    seed: int = 0

    def __post_init__(self):
        rng = np.random.default_rng([self.seed, 11])
        L = 0.2 * self.width_km
        self._cov_fields = [_FourierField(L, rng) for _ in COVARIATES]
        self._factor_fields = [_FourierField(frac * self.width_km, rng) for frac in np.linspace(0.05, 0.4, self.q)]
        J = self.n_species
        self.species = tuple(f"S{code:03d}" for code in np.sort(rng.choice(np.arange(10, 1000), J, replace=False)))
        self.beta0 = np.log(occupancy_targets(J, 0.29, 0.02, 0.87) / (1 - occupancy_targets(J, 0.29, 0.02, 0.87)))
        self.beta = rng.normal(0, 0.4, (J, len(COVARIATES)))
        self.alpha0 = rng.normal(2.3, 0.5, J)
        self.alpha = rng.normal(0, 0.15, (J, len(COVARIATES)))
        self.lam = apply_loading_constraints(rng.normal(0, 0.6, (J, self.q)))
        self.tau = np.sqrt(rng.uniform(0.2, 0.6, J))

    def covariates(self, coords) -> np.ndarray:
        coords = np.asarray(coords, dtype=float)
        f = np.column_stack([fld(coords) for fld in self._cov_fields])
        north = (coords[:, 1] - self.height_km / 2) / (self.height_km / np.sqrt(12))
        return _climate(f, north)

    def area_id(self, coords) -> np.ndarray:
        coords = np.asarray(coords, dtype=float)
        ix = np.floor(coords[:, 0] / self.area_size_km).astype(int)
        iy = np.floor(coords[:, 1] / self.area_size_km).astype(int)
        return np.array([f"C{a:03d}{b:03d}" for a, b in zip(ix, iy)])

    def grid(self, spacing_km: float, areas=None) -> PredictionGrid:
        """Regular grid of cell centers (raw covariates), optionally only within ``areas``."""
        xs = np.arange(spacing_km / 2, self.width_km, spacing_km)
        ys = np.arange(spacing_km / 2, self.height_km, spacing_km)
        gx, gy = np.meshgrid(xs, ys, indexing="xy")
        coords = np.column_stack([gx.ravel(), gy.ravel()])
        aid = self.area_id(coords)
        if areas is not None:
            keep = np.isin(aid, np.asarray(list(areas)))
            coords, aid = coords[keep], aid[keep]
        return PredictionGrid(
            coords=coords, covariate_names=COVARIATES, covariates=self.covariates(coords),
            area_id=aid, cell_id=np.array([f"G{i:07d}" for i in range(coords.shape[0])]),
        )


def synthetic_inventory(n_plots: int = 46_710, landscape: Landscape | None = None, seed: int = 0) -> PlotTable:
    """Inventory-format plot table: uniform plot locations, hurdle biomass per species."""
    land = landscape or Landscape()
    rng = np.random.default_rng([land.seed, 12, seed])
    coords = np.column_stack([rng.uniform(0, land.width_km, n_plots), rng.uniform(0, land.height_km, n_plots)])
    coords = np.round(coords, 4)
    raw = land.covariates(coords)
    std = (raw - raw.mean(axis=0)) / raw.std(axis=0)
    w = np.vstack([fld(coords) for fld in land._factor_fields])
    eta = land.beta0[:, None] + land.beta @ std.T + land.lam @ w
    z = rng.random(eta.shape) < expit(eta)
    mu = land.alpha0[:, None] + land.alpha @ std.T + land.lam @ w
    y = np.where(z, np.round(np.exp(mu + land.tau[:, None] * rng.standard_normal(mu.shape)), 4), 0.0)
    width = len(str(n_plots))
    return PlotTable(
        plot_id=np.array([f"P{i + 1:0{width}d}" for i in range(n_plots)]),
        coords=coords, area_id=land.area_id(coords), covariate_names=COVARIATES,
        covariates=np.round(raw, 4), species=land.species, response=y,
    )
