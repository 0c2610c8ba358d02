import numpy as np
import pytest

from hurdlesae.diagnostics import rhat, rhat_table, split_rhat
from hurdlesae.errors import ConfigError
from hurdlesae.mcmc import SampleStore


def test_separated_chains_flagged():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(0, 1, 1000), rng.normal(5, 1, 1000)])
    assert split_rhat(x) > 2


def test_well_mixed_chains():
    x = np.random.default_rng(1).normal(size=(4, 2000))
    assert split_rhat(x) < 1.01


def test_constant_chains():
    assert split_rhat(np.full((3, 50), 2.5)) == 1.0


def test_trend_within_chain_flagged():
    # Drift caught by the split even when chains agree with each other.
    t = np.linspace(0, 10, 1000)
    x = np.vstack([t, t]) + np.random.default_rng(2).normal(0, 0.1, (2, 1000))
    assert split_rhat(x) > 1.5


def test_input_errors():
    with pytest.raises(ConfigError):
        split_rhat(np.zeros((1, 100)))
    with pytest.raises(ConfigError):
        split_rhat(np.zeros((2, 5)))


def test_block_rhat_shape_and_table():
    rng = np.random.default_rng(3)
    store = SampleStore("stage2", {"alpha": rng.normal(size=(2, 100, 3, 2)), "factors": rng.normal(size=(2, 100, 1, 4))},
                        np.zeros((4, 2)))
    assert rhat(store, "alpha").shape == (3, 2)
    rows = rhat_table(store)
    assert len(rows) == 6 and {r["block"] for r in rows} == {"alpha"}
    one = SampleStore("stage2", {"alpha": rng.normal(size=(1, 100, 1))}, np.zeros((1, 2)))
    with pytest.raises(ConfigError, match="two chains"):
        rhat(one, "alpha")
