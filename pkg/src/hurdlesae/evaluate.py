"""Scoring of area estimates, relative efficiency and area-blocked cross-validation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ValidationError

UNDEFINED = "undefined"
Key = tuple[str, str]  # (species, area)


def relative_efficiency(model_cv: float | None, direct_cv: float | None) -> float | None:
    """CV_direct / CV_model, or None (skip) when either CV is undefined or not positive."""
    if model_cv is None or direct_cv is None:
        return None
    if not (model_cv > 0 and direct_cv > 0) or not (math.isfinite(model_cv) and math.isfinite(direct_cv)):
        return None
    return direct_cv / model_cv


def pearson(x, y) -> float | None:
    """Pearson correlation; None when either vector is constant or shorter than 2."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2:
        return None
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0 or syy == 0:
        return None
    return float(dx @ dy) / math.sqrt(sxx * syy)


@dataclass
class SpeciesScore:
    species: str
    n_areas: int
    bias: float
    rmse: float
    rho: float | None  # None: constant input, correlation undefined
    n_re: int
    pct_re_gt1: float | None
    mean_pct_improvement: float | None


@dataclass
class EvalReport:
    mode: str
    species: list[SpeciesScore]
    cells: list[dict] = field(default_factory=list)

    @property
    def pct_re_gt1(self) -> float | None:
        """Region-wide share (%) of (species, area) cells with RE > 1."""
        re = [c["re"] for c in self.cells if c["re"] is not None]
        return 100.0 * float(np.mean(np.asarray(re) > 1)) if re else None

    def by_species(self, name: str) -> SpeciesScore:
        for s in self.species:
            if s.species == name:
                return s
        raise KeyError(name)

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "n_cells": len(self.cells),
            "pct_re_gt1": self.pct_re_gt1,
            "species": [s.__dict__ for s in self.species],
        }

    def write_csv(self, path: str | Path, manifest: str | None = None) -> None:
        cols = ("species", "n_areas", "bias", "rmse", "rho", "n_re", "pct_re_gt1", "mean_pct_improvement")
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            if manifest:
                fh.write(f"# {manifest}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for s in self.species:
                w.writerow([_fmt(getattr(s, c)) for c in cols])

    def write_json(self, path: str | Path, manifest: str | None = None) -> None:
        d = self.summary()
        if manifest:
            d["manifest"] = manifest
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    if v is None:
        return UNDEFINED
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def score(
    estimates: Mapping[Key, float],
    reference: Mapping[Key, float],
    mode: str = "truth",
    model_cv: Mapping[Key, float | None] | None = None,
    direct_cv: Mapping[Key, float | None] | None = None,
) -> EvalReport:
    """Compare estimates with a reference (true means, or direct estimates).

    Bias is the mean of ``estimate - reference`` over the shared areas of a
    species. RE and percent improvement, ``100 (1 - CV_model / CV_direct)``,
    are reported where both CVs are defined.
    """
    if mode not in ("truth", "direct"):
        raise ConfigError(f"mode must be 'truth' or 'direct', got {mode!r}")
    keys = sorted(set(estimates) & set(reference))
    if not keys:
        raise ValidationError("estimates and reference share no (species, area) keys")
    model_cv = model_cv or {}
    direct_cv = direct_cv or {}
    cells = []
    for k in keys:
        re = relative_efficiency(model_cv.get(k), direct_cv.get(k))
        cells.append({
            "species": k[0], "area": k[1],
            "estimate": float(estimates[k]), "reference": float(reference[k]),
            "re": re, "pct_improvement": None if re is None else 100.0 * (1.0 - 1.0 / re),
        })
    out = []
    for sp in sorted({k[0] for k in keys}):
        rows = [c for c in cells if c["species"] == sp]
        est = np.array([c["estimate"] for c in rows])
        ref = np.array([c["reference"] for c in rows])
        err = est - ref
        re = np.array([c["re"] for c in rows if c["re"] is not None])
        out.append(SpeciesScore(
            species=sp,
            n_areas=len(rows),
            bias=float(err.mean()),
            rmse=float(np.sqrt(np.mean(err ** 2))),
            rho=pearson(est, ref),
            n_re=int(re.size),
            pct_re_gt1=100.0 * float(np.mean(re > 1)) if re.size else None,
            mean_pct_improvement=float(np.mean(100.0 * (1.0 - 1.0 / re))) if re.size else None,
        ))
    return EvalReport(mode=mode, species=out, cells=cells)


def kfold_by_area(areas: Sequence[str], k: int, rng: np.random.Generator) -> list[list[str]]:
    """Random partition of unique areas into ``k`` folds whose sizes differ by at most 1."""
    uniq = sorted(set(map(str, areas)))
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if k > len(uniq):
        raise ConfigError(f"k={k} exceeds the number of areas ({len(uniq)})")
    perm = rng.permutation(len(uniq))
    return [sorted(uniq[i] for i in part) for part in np.array_split(perm, k)]


def area_blocked_cv(table, k: int, fit_predict, rng: np.random.Generator) -> EvalReport:
    """Refit without each fold's areas and score predictions against held-out direct estimates.

    ``fit_predict(train_table, held_out_areas)`` must return a mapping
    ``(species, area) -> estimate`` for the held-out areas.
    """
    from .direct import direct_table

    folds = kfold_by_area(table.area_id, k, rng)
    direct = {(e.species, e.area): e.mean for e in direct_table(table)}
    estimates = {}
    for fold in folds:
        held = set(fold)
        train_idx = np.nonzero([a not in held for a in table.area_id])[0]
        train = table.subset(train_idx)
        if held & set(train.area_id):
            raise AssertionError("held-out area leaked into the training set")
        estimates.update(fit_predict(train, fold))
    return score(estimates, direct, mode="direct")
