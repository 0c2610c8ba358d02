"""Design-based direct estimator: within-area sample mean and its variance."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import PlotTable

UNDEFINED = "undefined"


@dataclass(frozen=True)
class DirectEstimate:
    species: str
    area: str
    n: int
    mean: float
    variance: float | None  # None when n == 1
    zero_se: bool  # every observation is zero: no usable standard error

    @property
    def se(self) -> float | None:
        return None if self.variance is None else math.sqrt(self.variance)

    @property
    def cv(self) -> float | None:
        """SE / mean, defined only for a positive mean with n >= 2."""
        if self.variance is None or not self.mean > 0:
            return None
        return self.se / self.mean


def direct_mean(values) -> float | None:
    """Sample mean; None for an empty area."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return None
    return math.fsum(v) / v.size


def direct_variance(values) -> float | None:
    """Variance of the sample mean, sum((y - ybar)^2) / (n (n - 1)); None when n < 2."""
    v = np.asarray(values, dtype=float)
    n = v.size
    if n < 2:
        return None
    mu = math.fsum(v) / n
    return math.fsum((v - mu) ** 2) / (n * (n - 1))


def direct_table(table: PlotTable) -> list[DirectEstimate]:
    """One estimate per (species, area) with at least one plot, areas sorted."""
    out = []
    areas = sorted(set(table.area_id))
    members = {a: np.nonzero(table.area_id == a)[0] for a in areas}
    for j, sp in enumerate(table.species):
        for a in areas:
            vals = table.response[j, members[a]]
            out.append(
                DirectEstimate(
                    species=sp,
                    area=a,
                    n=vals.size,
                    mean=direct_mean(vals),
                    variance=direct_variance(vals),
                    zero_se=bool(np.all(vals == 0)),
                )
            )
    return out


DIRECT_COLUMNS = ("species", "area_id", "n_plots", "mean", "variance", "se", "cv", "zero_se")


def _fmt(v) -> str:
    return UNDEFINED if v is None else repr(float(v))


def write_direct(estimates: Sequence[DirectEstimate], path: str | Path, manifest: str | None = None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        if manifest:
            fh.write(f"# {manifest}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIRECT_COLUMNS)
        for e in estimates:
            w.writerow([e.species, e.area, e.n, _fmt(e.mean), _fmt(e.variance), _fmt(e.se), _fmt(e.cv),
                        int(e.zero_se)])
