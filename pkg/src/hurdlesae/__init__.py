"""Multivariate spatial hurdle models for small-area estimation of species biomass."""

from .data import PlotTable, PredictionGrid, load_plot_table, attach_grid
from .direct import direct_mean, direct_table, direct_variance
from .errors import (
    ConfigError,
    HurdleSAEError,
    InputError,
    MissingPrerequisiteError,
    NumericalError,
    SchemaError,
    ValidationError,
)
from .mcmc import McmcConfig, SampleStore
from .model import PriorConfig
from .pipeline import FitSettings, fit_hurdle, predict_areas
from .predict import AreaPosterior, summarize

__version__ = "0.1.0"

__all__ = [
    "AreaPosterior", "ConfigError", "FitSettings", "HurdleSAEError", "InputError", "McmcConfig",
    "MissingPrerequisiteError", "NumericalError", "PlotTable", "PredictionGrid", "PriorConfig",
    "SampleStore", "SchemaError", "ValidationError", "attach_grid", "direct_mean", "direct_table",
    "direct_variance", "fit_hurdle", "load_plot_table", "predict_areas", "summarize",
]
