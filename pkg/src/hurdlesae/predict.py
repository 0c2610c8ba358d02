"""Posterior-predictive occurrence and biomass on a grid, aggregated to areas.

For each stored draw ``l`` and grid cell ``s0``:

    z ~ Bernoulli(psi_l(s0))
    y = Normal(0, 1e-4)                      if z = 0
    y = exp(Normal(mu_l(s0), tau2_l))        if z = 1

with factors at ``s0`` redrawn per draw from their NNGP conditional on the
fitted sites. Area values are per-draw means over the cells of the area.
Large grids are processed tile by tile, keeping only per-area running sums.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import nngp
from .data import PredictionGrid, design_matrix
from .errors import MissingPrerequisiteError, NumericalError, ValidationError
from .mcmc import SampleStore

log = logging.getLogger(__name__)

UNDEFINED = "undefined"


@dataclass
class AreaPosterior:
    """Per-draw area means, shaped (species, area, draw)."""

    species: tuple[str, ...]
    areas: tuple[str, ...]
    n_cells: np.ndarray
    draws: np.ndarray

    def save(self, directory: str | Path) -> None:
        """Raw little-endian draws plus a JSON index; byte-identical for identical inputs."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.ascontiguousarray(self.draws, dtype="<f8").tofile(directory / "draws.f64")
        index = {"species": list(self.species), "areas": list(self.areas),
                 "n_cells": [int(c) for c in self.n_cells], "shape": list(self.draws.shape)}
        (directory / "index.json").write_text(json.dumps(index, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> "AreaPosterior":
        directory = Path(directory)
        ipath = directory / "index.json"
        if not ipath.exists():
            raise MissingPrerequisiteError(f"area posterior not found: {ipath}")
        index = json.loads(ipath.read_text(encoding="utf-8"))
        draws = np.fromfile(directory / "draws.f64", dtype="<f8").reshape(index["shape"])
        return cls(tuple(index["species"]), tuple(index["areas"]), np.asarray(index["n_cells"], dtype=float), draws)


@dataclass
class AreaEstimate:
    species: str
    area: str
    n_cells: int
    median: float
    mean: float
    sd: float
    lower: float
    upper: float
    cv: float | None  # None when the median is 0
    level: float = 0.95

    @property
    def cv_defined(self) -> bool:
        return self.cv is not None


def stage_design(store: SampleStore, covariates: np.ndarray, covariate_names: Sequence[str]) -> np.ndarray:
    meta = store.meta
    X, names = design_matrix(covariates, covariate_names, meta["linear"], meta.get("quadratic", ()))
    if names != meta["design_names"]:
        raise ValidationError(f"{store.stage}: grid design {names} does not match fitted design {meta['design_names']}")
    return X


def _linear_predictor(store: SampleStore, l: int, X: np.ndarray, plan: nngp.KrigingPlan, rng) -> np.ndarray:
    coef_name = "beta" if store.stage == "stage1" else "alpha"
    eta = store.draws(coef_name)[l] @ X.T
    if store.meta["q"]:
        w = nngp.predict_factors(None, store.draws("factors")[l], None, store.draws("phi")[l], rng, plan=plan)
        eta = eta + store.draws("loadings")[l] @ w
    return eta


def _check_aligned(store1: SampleStore, store2: SampleStore) -> None:
    if store1.n_draws != store2.n_draws:
        raise ValidationError(
            f"draw-count mismatch between stages: stage 1 has {store1.n_draws}, stage 2 has {store2.n_draws}"
        )
    if list(store1.meta["species"]) != list(store2.meta["species"]):
        raise ValidationError("stage 1 and stage 2 were fit to different species lists")


def _occurrence_draw(store1, l, X1, plan1, rng) -> np.ndarray:
    psi = expit(_linear_predictor(store1, l, X1, plan1, rng))
    return (rng.random(psi.shape) < psi).astype(np.int8)


def _biomass_draw(store2, l, X2, plan2, z, rng) -> np.ndarray:
    mu = _linear_predictor(store2, l, X2, plan2, rng)
    tau = np.sqrt(store2.draws("tau2")[l])[:, None]
    absent_sd = math.sqrt(store2.meta["priors"]["absent_var"])
    present = np.exp(mu + tau * rng.standard_normal(mu.shape))
    absent = absent_sd * rng.standard_normal(mu.shape)
    return np.where(z == 1, present, absent)


def predict_occurrence(store: SampleStore, grid: PredictionGrid, rng, draws=None) -> np.ndarray:
    """Presence draws (n_draws, J, n_cells). Materializes the full array: small grids only."""
    X = stage_design(store, grid.covariates, grid.covariate_names)
    plan = nngp.kriging_plan(store.coords, grid.coords, store.meta["m"])
    idx = range(store.n_draws) if draws is None else draws
    return np.stack([_occurrence_draw(store, l, X, plan, rng) for l in idx])


def predict_biomass(store2: SampleStore, grid: PredictionGrid, z_draws: np.ndarray, rng, draws=None) -> np.ndarray:
    """Biomass draws (n_draws, J, n_cells) conditional on aligned presence draws."""
    idx = list(range(store2.n_draws) if draws is None else draws)
    if z_draws.shape[0] != len(idx):
        raise ValidationError(f"draw-count mismatch: {z_draws.shape[0]} presence draws, {len(idx)} stage 2 draws")
    X = stage_design(store2, grid.covariates, grid.covariate_names)
    plan = nngp.kriging_plan(store2.coords, grid.coords, store2.meta["m"])
    return np.stack([_biomass_draw(store2, l, X, plan, z_draws[k], rng) for k, l in enumerate(idx)])


def aggregate(y_draws: np.ndarray, area_id, species=None, areas=None) -> AreaPosterior:
    """Per-draw area means of cell values; ``y_draws`` is (n_draws, J, n_cells).

    Areas listed in ``areas`` without any cells are dropped with a warning.
    Slightly negative means from the absence channel are reported as 0.
    """
    area_id = np.asarray(area_id).astype(str)
    keys, inverse, counts = _area_index(area_id, areas)
    S, J, _ = y_draws.shape
    valid = inverse >= 0
    sums = np.zeros((J, len(keys), S))
    for k in range(len(keys)):
        sel = valid & (inverse == k)
        sums[:, k, :] = y_draws[:, :, sel].sum(axis=2).T
    means = np.maximum(sums / counts[None, :, None], 0.0)
    species = tuple(species) if species is not None else tuple(str(j) for j in range(J))
    return AreaPosterior(species, tuple(keys), counts, means)


def _area_index(area_id: np.ndarray, areas=None):
    present = sorted(set(area_id[area_id != ""]))
    if areas is None:
        keys = present
    else:
        keys = [str(a) for a in areas]
        empty = [a for a in keys if a not in set(present)]
        if empty:
            log.warning("omitting %d area(s) with no grid cells: %s", len(empty), ", ".join(empty[:10]))
            keys = [a for a in keys if a not in set(empty)]
    pos = {a: i for i, a in enumerate(keys)}
    inverse = np.array([pos.get(a, -1) for a in area_id], dtype=np.int64)
    counts = np.bincount(inverse[inverse >= 0], minlength=len(keys)).astype(float)
    return keys, inverse, counts


def predict_area_posterior(
    store1: SampleStore,
    store2: SampleStore,
    grid: PredictionGrid,
    seed: int,
    block_size: int = 5000,
    draws: Sequence[int] | None = None,
    areas=None,
) -> AreaPosterior:
    """Stream over grid tiles and draws, accumulating per-area sums.

    Deterministic for a given seed and ``block_size`` (the tile partition).
    """
    _check_aligned(store1, store2)
    idx = list(range(store1.n_draws) if draws is None else draws)
    keys, inverse, counts = _area_index(grid.area_id, areas)
    J = len(store1.meta["species"])
    sums = np.zeros((J, len(keys), len(idx)))
    same_sites = store1.coords.shape == store2.coords.shape and np.array_equal(store1.coords, store2.coords)
    for t, start in enumerate(range(0, grid.n, block_size)):
        tile = grid.subset(np.arange(start, min(grid.n, start + block_size)))
        inv = inverse[start:start + tile.n]
        if not np.any(inv >= 0):
            continue
        rng = np.random.default_rng([seed, t])
        X1 = stage_design(store1, tile.covariates, tile.covariate_names)
        X2 = stage_design(store2, tile.covariates, tile.covariate_names)
        plan1 = nngp.kriging_plan(store1.coords, tile.coords, store1.meta["m"])
        plan2 = plan1 if same_sites and store1.meta["m"] == store2.meta["m"] else \
            nngp.kriging_plan(store2.coords, tile.coords, store2.meta["m"])
        onehot = np.zeros((tile.n, len(keys)))
        onehot[np.nonzero(inv >= 0)[0], inv[inv >= 0]] = 1.0
        with np.errstate(over="ignore", invalid="ignore"):
            for k, l in enumerate(idx):
                z = _occurrence_draw(store1, l, X1, plan1, rng)
                y = _biomass_draw(store2, l, X2, plan2, z, rng)
                sums[:, :, k] += y @ onehot
    _check_finite(sums, store1.meta["species"])
    means = np.maximum(sums / counts[None, :, None], 0.0)
    return AreaPosterior(tuple(store1.meta["species"]), tuple(keys), counts, means)


def _check_finite(sums: np.ndarray, species) -> None:
    bad = [str(sp) for sp, row in zip(species, sums) if not np.all(np.isfinite(row))]
    if bad:
        raise NumericalError(
            f"predicted biomass overflowed for {', '.join(bad)}; the log-scale predictor is extreme, "
            "usually from a weakly identified fit (few presences, short chains) or covariates far outside the data"
        )


def summarize_draws(values, level: float = 0.95) -> dict:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise ValidationError("need at least 2 draws to summarize")
    a = (1 - level) / 2
    lo, med, hi = np.quantile(v, [a, 0.5, 1 - a])  # linear interpolation (type 7)
    sd = float(v.std(ddof=1))
    return {
        "median": float(med), "mean": float(v.mean()), "sd": sd,
        "lower": float(lo), "upper": float(hi),
        "cv": sd / med if med > 0 else None,
    }


def summarize(posterior: AreaPosterior, level: float = 0.95) -> list[AreaEstimate]:
    out = []
    for j, sp in enumerate(posterior.species):
        for k, area in enumerate(posterior.areas):
            s = summarize_draws(posterior.draws[j, k], level)
            out.append(AreaEstimate(sp, area, int(posterior.n_cells[k]), level=level, **s))
    return out


def area_total(draws, area_ha: float, level: float = 0.95) -> dict:
    """Summary of area totals (Mg) from per-draw densities (Mg/ha)."""
    if not area_ha > 0:
        raise ValidationError(f"area must be positive, got {area_ha}")
    return summarize_draws(np.asarray(draws, dtype=float) * area_ha, level)


def _fmt(v) -> str:
    if v is None:
        return UNDEFINED
    return repr(float(v))


ESTIMATE_COLUMNS = ("species", "area_id", "n_cells", "median", "mean", "sd", "lower", "upper", "cv")


def write_estimates(estimates: Sequence[AreaEstimate], path: str | Path, manifest: str | None = None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        if manifest:
            fh.write(f"# {manifest}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ESTIMATE_COLUMNS)
        for e in estimates:
            w.writerow([e.species, e.area, e.n_cells, _fmt(e.median), _fmt(e.mean), _fmt(e.sd),
                        _fmt(e.lower), _fmt(e.upper), _fmt(e.cv)])


def read_estimates(path: str | Path) -> list[dict]:
    """Rows of a model or direct estimate CSV as dicts (``undefined`` -> None)."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    out = []
    for r in rows:
        d = {}
        for k, v in r.items():
            if k in ("species", "area_id"):
                d[k] = v
            elif v == UNDEFINED or v == "":
                d[k] = None
            else:
                d[k] = float(v)
        out.append(d)
    return out
