"""Convergence diagnostics: rank-normalized split R-hat."""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

from .errors import ConfigError


def _split(x: np.ndarray) -> np.ndarray:
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def _basic_rhat(x: np.ndarray) -> float:
    n = x.shape[1]
    w = x.var(axis=1, ddof=1).mean()
    b = n * x.mean(axis=1).var(ddof=1)
    if w == 0:
        return 1.0 if b == 0 else np.inf
    return float(np.sqrt(((n - 1) / n * w + b / n) / w))


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    r = rankdata(x, method="average").reshape(x.shape)
    return ndtri((r - 0.375) / (x.size + 0.25))


def split_rhat(chains) -> float:
    """Split R-hat for one scalar: max of rank-normalized bulk, folded tail
    and classic (un-normalized) split R-hat.

    Rank normalization bounds the statistic for fully separated chains, so
    the classic value is kept to flag gross disagreement. ``chains`` is
    (n_chains, n_draws). Constant input gives 1.0.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ConfigError("R-hat needs at least two chains")
    if x.shape[1] < 10:
        raise ConfigError("R-hat needs at least 10 draws per chain")
    if np.ptp(x) == 0:
        return 1.0
    s = _split(x)
    bulk = _basic_rhat(_rank_normalize(s))
    folded = np.abs(s - np.median(s))
    tail = 1.0 if np.ptp(folded) == 0 else _basic_rhat(_rank_normalize(folded))
    return max(bulk, tail, _basic_rhat(s))


def rhat(store, block: str) -> np.ndarray:
    """Split R-hat for every scalar in a block; shape equals the block's parameter shape."""
    a = store.blocks[block]
    if a.shape[0] < 2:
        raise ConfigError(f"R-hat for {block!r} needs at least two chains, store has {a.shape[0]}")
    flat = a.reshape(a.shape[0], a.shape[1], -1)
    out = np.array([split_rhat(flat[:, :, k]) for k in range(flat.shape[2])])
    return out.reshape(a.shape[2:])


def rhat_table(store, blocks=None, skip=("factors",)) -> list[dict]:
    """Rows of (block, index, rhat) for summary output."""
    rows = []
    for name in blocks or store.blocks:
        if name in skip:
            continue
        values = rhat(store, name)
        for idx in np.ndindex(values.shape):
            rows.append({"block": name, "index": ",".join(map(str, idx)), "rhat": float(values[idx])})
    return rows
