"""Fit both hurdle stages to a plot table and predict small-area posteriors."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import mcmc, nngp
from .data import (
    PlotTable,
    PredictionGrid,
    StandardizationStats,
    derive_presence,
    design_matrix,
    jitter_duplicates,
    standardize_covariates,
)
from .errors import SchemaError
from .model import PriorConfig
from .predict import AreaPosterior, predict_area_posterior


@dataclass
class StageSpec:
    linear: tuple[str, ...]
    quadratic: tuple[str, ...] = ()

    def __post_init__(self):
        self.linear = tuple(self.linear)
        self.quadratic = tuple(self.quadratic)

    @property
    def covariates(self) -> tuple[str, ...]:
        return self.linear


STAGE1_SPEC = StageSpec(("TMIN", "TMAX", "PPT"), ("TMIN", "TMAX", "PPT"))
STAGE2_SPEC = StageSpec(("TCC", "VPD", "PPT", "ELEV"), ("ELEV",))


@dataclass
class FitSettings:
    stage1: StageSpec = field(default_factory=lambda: StageSpec(STAGE1_SPEC.linear, STAGE1_SPEC.quadratic))
    stage2: StageSpec = field(default_factory=lambda: StageSpec(STAGE2_SPEC.linear, STAGE2_SPEC.quadratic))
    q: int = 5
    m: int = nngp.DEFAULT_NEIGHBORS
    priors: PriorConfig = field(default_factory=PriorConfig)
    mcmc1: mcmc.McmcConfig = field(default_factory=mcmc.McmcConfig.stage1_default)
    mcmc2: mcmc.McmcConfig = field(default_factory=mcmc.McmcConfig.stage2_default)

    @property
    def covariates(self) -> list[str]:
        names = list(self.stage1.linear)
        names += [n for n in self.stage2.linear if n not in names]
        return names


@dataclass
class HurdleFit:
    stage1: mcmc.SampleStore
    stage2: mcmc.SampleStore
    stats: StandardizationStats


def _restrict(table: PlotTable, names: Sequence[str]) -> PlotTable:
    missing = [n for n in names if n not in table.covariate_names]
    if missing:
        raise SchemaError(f"plot table lacks covariate(s) {', '.join(missing)}")
    idx = [table.covariate_names.index(n) for n in names]
    return replace(table, covariate_names=tuple(names), covariates=table.covariates[:, idx])


def fit_hurdle(table: PlotTable, settings: FitSettings, stats: StandardizationStats | None = None) -> HurdleFit:
    """Standardize covariates, build one neighbor graph, fit stage 1 then stage 2."""
    table = _restrict(table, settings.covariates)
    std, stats = standardize_covariates(table, stats)
    coords = jitter_duplicates(std.coords)
    graph = nngp.build_neighbor_graph(coords, settings.m)
    z = derive_presence(std)
    stores = []
    for stage, spec, cfg in (("stage1", settings.stage1, settings.mcmc1), ("stage2", settings.stage2, settings.mcmc2)):
        X, names = design_matrix(std.covariates, std.covariate_names, spec.linear, spec.quadratic)
        kw = dict(species=std.species, coords=coords, q=settings.q, priors=settings.priors,
                  m=settings.m, graph=graph, design_names=names)
        sampler = mcmc.Stage1Sampler(X, z, **kw) if stage == "stage1" else mcmc.Stage2Sampler(X, std.response, **kw)
        meta = {"linear": list(spec.linear), "quadratic": list(spec.quadratic), "standardization": stats.to_dict()}
        stores.append(mcmc.run(sampler, cfg, extra_meta=meta))
    return HurdleFit(stores[0], stores[1], stats)


def grid_from_table(table: PlotTable, stats: StandardizationStats) -> PredictionGrid:
    """Treat plot/population units as prediction cells (raw covariates standardized with ``stats``)."""
    table = _restrict(table, stats.names)
    return PredictionGrid(
        coords=table.coords,
        covariate_names=tuple(stats.names),
        covariates=stats.apply(table.covariates, stats.names),
        area_id=table.area_id,
        cell_id=table.plot_id,
    )


def predict_areas(fit: HurdleFit, grid: PredictionGrid, seed: int, block_size: int = 5000,
                  areas=None, draws=None) -> AreaPosterior:
    return predict_area_posterior(fit.stage1, fit.stage2, grid, seed, block_size=block_size, areas=areas, draws=draws)
