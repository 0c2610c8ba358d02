import numpy as np
import pytest
from hypothesis import settings

from hurdlesae.data import PlotTable
from hurdlesae.simulate import Landscape, synthetic_inventory

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def small_landscape(n_species=3, q=1, seed=3):
    return Landscape(width_km=300.0, height_km=200.0, area_size_km=100.0, n_species=n_species, q=q, seed=seed)


@pytest.fixture
def toy_table() -> PlotTable:
    """200 plots, 3 species, 6 areas; every species present on several plots."""
    return synthetic_inventory(200, small_landscape(), seed=1)


def make_table(n=30, J=2, seed=0, areas=3, covariates=("TMIN", "TMAX")) -> PlotTable:
    rng = np.random.default_rng(seed)
    resp = np.where(rng.random((J, n)) < 0.5, rng.lognormal(1.0, 0.5, (J, n)), 0.0)
    return PlotTable(
        plot_id=np.array([f"p{i}" for i in range(n)]),
        coords=rng.uniform(0, 100, (n, 2)),
        area_id=np.array([f"A{i % areas}" for i in range(n)]),
        covariate_names=tuple(covariates),
        covariates=rng.normal(size=(n, len(covariates))),
        species=tuple(f"sp{j}" for j in range(J)),
        response=resp,
    )
