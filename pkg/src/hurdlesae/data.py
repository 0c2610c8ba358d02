"""Plot tables, prediction grids, covariate standardization and design matrices."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import SchemaError, ValidationError

PLOT_KEY_COLUMNS = ("plot_id", "x", "y", "area_id")
GRID_KEY_COLUMNS = ("x", "y", "area_id")
OPTIONAL_GRID_COLUMNS = ("cell_id",)

# Shift applied per repeated coordinate (km).
DUPLICATE_JITTER_KM = 1e-6


@dataclass(frozen=True)
class PlotTable:
    """Plot-level multispecies inventory data.

    ``response`` is species x plot (Mg/ha), rows ordered as ``species``.
    """

    plot_id: np.ndarray
    coords: np.ndarray
    area_id: np.ndarray
    covariate_names: tuple[str, ...]
    covariates: np.ndarray
    species: tuple[str, ...]
    response: np.ndarray

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def n_species(self) -> int:
        return len(self.species)

    def covariate(self, name: str) -> np.ndarray:
        return self.covariates[:, self.covariate_names.index(name)]

    def subset(self, index) -> "PlotTable":
        index = np.asarray(index)
        return replace(
            self,
            plot_id=self.plot_id[index],
            coords=self.coords[index],
            area_id=self.area_id[index],
            covariates=self.covariates[index],
            response=self.response[:, index],
        )


@dataclass(frozen=True)
class StandardizationStats:
    names: tuple[str, ...]
    mean: np.ndarray
    sd: np.ndarray

    def apply(self, values: np.ndarray, names: Sequence[str]) -> np.ndarray:
        idx = [self.names.index(n) for n in names]
        return (values - self.mean[idx]) / self.sd[idx]

    def invert(self, values: np.ndarray, names: Sequence[str]) -> np.ndarray:
        idx = [self.names.index(n) for n in names]
        return values * self.sd[idx] + self.mean[idx]

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "mean": [float(v) for v in self.mean],
            "sd": [float(v) for v in self.sd],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationStats":
        return cls(tuple(d["names"]), np.asarray(d["mean"], float), np.asarray(d["sd"], float))


@dataclass(frozen=True)
class PredictionGrid:
    coords: np.ndarray
    covariate_names: tuple[str, ...]
    covariates: np.ndarray
    area_id: np.ndarray
    cell_id: np.ndarray = field(default=None)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def cell_counts(self) -> dict[str, int]:
        """Number of cells per area (n_{0,k}); cells without an area are skipped."""
        keys, counts = np.unique(self.area_id[self.area_id != ""], return_counts=True)
        return {str(k): int(c) for k, c in zip(keys, counts)}

    def subset(self, index) -> "PredictionGrid":
        index = np.asarray(index)
        return replace(
            self,
            coords=self.coords[index],
            covariates=self.covariates[index],
            area_id=self.area_id[index],
            cell_id=self.cell_id[index],
        )


def _read_rows(path: str | Path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    """Read a CSV, skipping ``#`` manifest/comment lines. Returns header and (line, row) pairs."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        lines = [(i + 1, line) for i, line in enumerate(fh) if not line.startswith("#")]
    if not lines:
        raise SchemaError(f"{path}: empty file, expected a header row")
    reader = csv.reader([line for _, line in lines])
    header = [h.strip() for h in next(reader)]
    rows = [(lineno, row) for (lineno, _), row in zip(lines[1:], reader) if row]
    return header, rows


def read_header(path: str | Path) -> list[str]:
    """Column names of a CSV (after any ``#`` lines)."""
    return _read_rows(path)[0]


def _parse_float(text: str) -> float:
    text = text.strip()
    if text == "" or text.upper() in ("NA", "NAN"):
        raise ValueError("missing")
    value = float(text)
    if not math.isfinite(value):
        raise ValueError("non-finite")
    return value


def _require_columns(path, header: Sequence[str], required: Iterable[str]) -> None:
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")


def load_plot_table(
    path: str | Path,
    species_list: Sequence[str],
    covariate_names: Sequence[str] | None = None,
) -> PlotTable:
    """Load and validate a plot CSV.

    Columns: ``plot_id, x, y, area_id``, the covariates and one response column
    per species. When ``covariate_names`` is None every remaining column is a
    covariate.
    """
    header, rows = _read_rows(path)
    species_list = tuple(species_list)
    _require_columns(path, header, PLOT_KEY_COLUMNS)
    _require_columns(path, header, species_list)
    if covariate_names is None:
        taken = set(PLOT_KEY_COLUMNS) | set(species_list)
        covariate_names = [h for h in header if h not in taken]
    covariate_names = tuple(covariate_names)
    _require_columns(path, header, covariate_names)

    col = {h: i for i, h in enumerate(header)}
    n = len(rows)
    plot_id = np.empty(n, dtype=object)
    area_id = np.empty(n, dtype=object)
    coords = np.empty((n, 2))
    covs = np.empty((n, len(covariate_names)))
    resp = np.empty((len(species_list), n))
    problems: list[str] = []
    for i, (lineno, row) in enumerate(rows):
        if len(row) != len(header):
            problems.append(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            continue
        pid = row[col["plot_id"]].strip()
        aid = row[col["area_id"]].strip()
        if not pid or not aid:
            problems.append(f"line {lineno}: missing plot_id or area_id")
            continue
        plot_id[i], area_id[i] = pid, aid
        try:
            coords[i] = [_parse_float(row[col["x"]]), _parse_float(row[col["y"]])]
        except ValueError:
            problems.append(f"line {lineno} (plot {pid}): missing or invalid coordinate")
            continue
        for k, name in enumerate(covariate_names):
            try:
                covs[i, k] = _parse_float(row[col[name]])
            except ValueError:
                problems.append(f"line {lineno} (plot {pid}): missing or invalid covariate {name}")
        for j, name in enumerate(species_list):
            try:
                v = _parse_float(row[col[name]])
            except ValueError:
                problems.append(f"line {lineno} (plot {pid}): missing or invalid response {name}")
                continue
            if v < 0:
                problems.append(f"line {lineno} (plot {pid}): negative response {name}={v!r}")
            resp[j, i] = v
    if problems:
        shown = "\n  ".join(problems[:20])
        more = f"\n  ... and {len(problems) - 20} more" if len(problems) > 20 else ""
        raise ValidationError(f"{path}: {len(problems)} invalid row(s):\n  {shown}{more}")
    ids, counts = np.unique(plot_id.astype(str), return_counts=True)
    dups = ids[counts > 1]
    if dups.size:
        raise ValidationError(f"{path}: duplicate plot_id(s): {', '.join(dups[:10])}")
    return PlotTable(
        plot_id=plot_id.astype(str),
        coords=coords,
        area_id=area_id.astype(str),
        covariate_names=covariate_names,
        covariates=covs,
        species=species_list,
        response=resp,
    )


def write_plot_table(table: PlotTable, path: str | Path, manifest: str | None = None) -> None:
    """Write a plot table; floats use ``repr`` so a reload is bit-exact."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        if manifest:
            fh.write(f"# {manifest}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*PLOT_KEY_COLUMNS, *table.covariate_names, *table.species])
        for i in range(table.n):
            w.writerow(
                [table.plot_id[i], repr(float(table.coords[i, 0])), repr(float(table.coords[i, 1])), table.area_id[i]]
                + [repr(float(v)) for v in table.covariates[i]]
                + [repr(float(v)) for v in table.response[:, i]]
            )


def write_grid(grid: PredictionGrid, path: str | Path, stats: StandardizationStats | None = None) -> None:
    """Write a grid CSV. With ``stats`` the covariates are written back in raw units."""
    covs = grid.covariates if stats is None else stats.invert(grid.covariates, grid.covariate_names)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", *GRID_KEY_COLUMNS, *grid.covariate_names])
        for i in range(grid.n):
            w.writerow(
                [grid.cell_id[i], repr(float(grid.coords[i, 0])), repr(float(grid.coords[i, 1])), grid.area_id[i]]
                + [repr(float(v)) for v in covs[i]]
            )


def derive_presence(table: PlotTable) -> np.ndarray:
    """Species x plot 0/1 matrix, 1 where the response is strictly positive."""
    return (table.response > 0).astype(np.int8)


def standardize_covariates(
    table: PlotTable, stats: StandardizationStats | None = None
) -> tuple[PlotTable, StandardizationStats]:
    """Center and scale covariates (sample sd, ddof=1).

    Supplying ``stats`` reuses them unchanged, e.g. for prediction data.
    """
    names = table.covariate_names
    if stats is None:
        mean = table.covariates.mean(axis=0)
        sd = table.covariates.std(axis=0, ddof=1) if table.n > 1 else np.zeros(len(names))
        bad = [n for n, s in zip(names, sd) if not s > 0]
        if bad:
            raise ValidationError(f"zero-variance covariate(s): {', '.join(bad)}")
        stats = StandardizationStats(names, mean, sd)
    else:
        missing = [n for n in names if n not in stats.names]
        if missing:
            raise SchemaError(f"no standardization stats for covariate(s): {', '.join(missing)}")
    return replace(table, covariates=stats.apply(table.covariates, names)), stats


def design_matrix(
    covariates: np.ndarray,
    covariate_names: Sequence[str],
    linear: Sequence[str],
    quadratic: Sequence[str] = (),
) -> tuple[np.ndarray, list[str]]:
    """Intercept, then each linear term followed by its square when listed in ``quadratic``.

    Squares are taken of the (already standardized) linear columns.
    """
    covariate_names = list(covariate_names)
    missing = [n for n in [*linear, *quadratic] if n not in covariate_names]
    if missing:
        raise SchemaError(f"design matrix: unknown covariate(s) {', '.join(missing)}")
    orphan = [n for n in quadratic if n not in linear]
    if orphan:
        raise SchemaError(f"quadratic term without linear term: {', '.join(orphan)}")
    cols = [np.ones(covariates.shape[0])]
    names = ["(Intercept)"]
    for name in linear:
        x = covariates[:, covariate_names.index(name)]
        cols.append(x)
        names.append(name)
        if name in quadratic:
            cols.append(x * x)
            names.append(f"{name}^2")
    return np.column_stack(cols), names


def attach_grid(
    path: str | Path,
    stats: StandardizationStats,
    species_list: Sequence[str] | None = None,
) -> PredictionGrid:
    """Load a prediction grid and standardize it with the fitted ``stats``.

    ``species_list`` is accepted so response columns present in the file are
    not mistaken for covariates.
    """
    header, rows = _read_rows(path)
    _require_columns(path, header, GRID_KEY_COLUMNS)
    ignore = set(GRID_KEY_COLUMNS) | set(OPTIONAL_GRID_COLUMNS) | set(species_list or ())
    present = [h for h in header if h not in ignore]
    missing = [n for n in stats.names if n not in present]
    extra = [n for n in present if n not in stats.names]
    if missing or extra:
        raise SchemaError(
            f"{path}: grid covariates do not match fitted model "
            f"(missing: {', '.join(missing) or 'none'}; extra: {', '.join(extra) or 'none'})"
        )
    col = {h: i for i, h in enumerate(header)}
    n = len(rows)
    coords = np.empty((n, 2))
    covs = np.empty((n, len(stats.names)))
    area = np.empty(n, dtype=object)
    cell = np.empty(n, dtype=object)
    problems = []
    for i, (lineno, row) in enumerate(rows):
        try:
            coords[i] = [_parse_float(row[col["x"]]), _parse_float(row[col["y"]])]
            covs[i] = [_parse_float(row[col[name]]) for name in stats.names]
        except (ValueError, IndexError):
            problems.append(f"line {lineno}: missing or invalid value")
            continue
        area[i] = row[col["area_id"]].strip()
        cell[i] = row[col["cell_id"]].strip() if "cell_id" in col else str(i)
    if problems:
        raise ValidationError(f"{path}: {len(problems)} invalid row(s): " + "; ".join(problems[:20]))
    return PredictionGrid(
        coords=coords,
        covariate_names=tuple(stats.names),
        covariates=stats.apply(covs, stats.names),
        area_id=area.astype(str),
        cell_id=cell.astype(str),
    )


def jitter_duplicates(coords: np.ndarray, step: float = DUPLICATE_JITTER_KM) -> np.ndarray:
    """Shift the k-th repeat of a coordinate pair by ``k * step`` km along x.

    Deterministic: repeats are numbered in input order.
    """
    coords = np.array(coords, dtype=float, copy=True)
    seen: dict[tuple[float, float], int] = {}
    for i, (x, y) in enumerate(coords):
        key = (x, y)
        k = seen.get(key, 0)
        if k:
            coords[i, 0] = x + k * step
        seen[key] = k + 1
    return coords


def spatial_subsample(table: PlotTable, fraction: float, rng: np.random.Generator) -> PlotTable:
    """Plots nearest to a randomly chosen plot, ``ceil(fraction * n)`` of them."""
    if not 0 < fraction <= 1:
        raise ValidationError("fraction must be in (0, 1]")
    k = max(1, math.ceil(fraction * table.n))
    center = table.coords[rng.integers(table.n)]
    d = np.hypot(*(table.coords - center).T)
    keep = np.sort(np.argsort(d, kind="stable")[:k])
    return table.subset(keep)
