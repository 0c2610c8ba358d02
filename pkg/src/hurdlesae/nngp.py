"""Exponential correlation, neighbor graphs and the NNGP sparse factorization.

Sites are ordered by x (ties by y); each ordered site conditions on its ``m``
nearest predecessors. ``factorize`` returns the per-site regression weights
``b`` and conditional variances ``f`` such that

    w_i | w_{N(i)} ~ Normal(b_i' w_{N(i)}, f_i)

which defines the NNGP joint density. With ``m = n - 1`` this equals the dense
GP density exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .errors import NumericalError, ValidationError

LN20 = math.log(20.0)
DEFAULT_NEIGHBORS = 15
_BLOCK = 2048
_FACTOR_CHUNK = 4096


def exp_correlation(d, phi: float):
    """exp(-phi * d); ``phi`` in 1/km, ``d`` in km."""
    if not phi > 0:
        raise ValueError(f"decay parameter must be positive, got {phi}")
    return np.exp(-phi * np.asarray(d, dtype=float))


def phi_from_effective_range(range_km: float) -> float:
    """Decay giving correlation 0.05 at ``range_km``."""
    return LN20 / range_km


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    """Ordering and neighbor sets.

    ``neighbors[i]`` holds ordered positions of the nearest predecessors of
    ordered site ``i`` (closest first), padded with -1 past ``counts[i]``.
    ``order[i]`` is the input index of ordered site ``i``.
    """

    coords: np.ndarray
    order: np.ndarray
    neighbors: np.ndarray
    counts: np.ndarray
    m: int

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @cached_property
    def rank(self) -> np.ndarray:
        """Ordered position of each input site (inverse of ``order``)."""
        r = np.empty(self.n, dtype=np.int64)
        r[self.order] = np.arange(self.n)
        return r

    @cached_property
    def ordered_coords(self) -> np.ndarray:
        return self.coords[self.order]

    @cached_property
    def _distances(self) -> tuple[np.ndarray, np.ndarray]:
        oc = self.ordered_coords
        nb = np.where(self.neighbors >= 0, self.neighbors, 0)
        pts = oc[nb]  # (n, m, 2)
        site = np.linalg.norm(pts - oc[:, None, :], axis=-1)
        between = np.linalg.norm(pts[:, :, None, :] - pts[:, None, :, :], axis=-1)
        return between, site

    @cached_property
    def co_neighbors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """CSR arrays (ptr, site, slot): ordered sites t with ``neighbors[t, slot] == i``."""
        t_idx, slot = np.nonzero(self.neighbors >= 0)
        target = self.neighbors[t_idx, slot]
        srt = np.lexsort((t_idx, target))
        ptr = np.zeros(self.n + 1, dtype=np.int64)
        np.add.at(ptr, target + 1, 1)
        return np.cumsum(ptr), t_idx[srt].astype(np.int64), slot[srt].astype(np.int64)


@dataclass(frozen=True, eq=False)
class NNGPSystem:
    graph: NeighborGraph
    phi: float
    b_coeffs: np.ndarray
    f_vars: np.ndarray

    def neighbor_weights(self, i: int) -> np.ndarray:
        return self.b_coeffs[i, : self.graph.counts[i]]


def _check_distinct(coords: np.ndarray) -> None:
    _, counts = np.unique(coords, axis=0, return_counts=True)
    if np.any(counts > 1):
        raise ValidationError(
            f"{int(np.sum(counts > 1))} duplicated coordinate pair(s); apply jitter_duplicates first"
        )


def _select(cand: np.ndarray, dist: np.ndarray, m: int) -> np.ndarray:
    """Indices of the ``m`` smallest distances, ties broken by smaller index."""
    keep = np.lexsort((cand, dist))[:m]
    return cand[keep]


def build_neighbor_graph(coords, m: int = DEFAULT_NEIGHBORS) -> NeighborGraph:
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] < 1:
        raise ValidationError("coords must be an (n, 2) array with n >= 1")
    if m < 1:
        raise ValidationError("neighbor budget m must be >= 1")
    _check_distinct(coords)
    n = coords.shape[0]
    order = np.lexsort((coords[:, 1], coords[:, 0]))
    oc = coords[order]
    neighbors = np.full((n, m), -1, dtype=np.int64)
    counts = np.minimum(np.arange(n), m)
    # Candidates for site i: kd-tree over sites before the block, brute force within it.
    extra = 4
    for start in range(0, n, _BLOCK):
        stop = min(n, start + _BLOCK)
        tree_hits = None
        if start > 0:
            k = min(start, m + extra)
            tree = cKDTree(oc[:start])
            _, tree_hits = tree.query(oc[start:stop], k=k)
            tree_hits = np.asarray(tree_hits).reshape(stop - start, k)
        for i in range(start, stop):
            if i == 0:
                continue
            local = np.arange(start, i)
            cand = local if tree_hits is None else np.concatenate([tree_hits[i - start], local])
            d = np.hypot(oc[cand, 0] - oc[i, 0], oc[cand, 1] - oc[i, 1])
            sel = _select(cand, d, m)
            neighbors[i, : sel.size] = sel
    return NeighborGraph(coords=coords, order=order, neighbors=neighbors, counts=counts, m=m)


def _conditional_weights(between: np.ndarray, site: np.ndarray, counts: np.ndarray, phi: float):
    """b = C_NN^{-1} c_iN and f = 1 - c_iN' b per site; padded slots get b = 0."""
    b, f, fail = _kernels.conditional_weights(between, site, np.asarray(counts, dtype=np.int64), float(phi))
    if fail >= 0:
        raise NumericalError(f"singular neighbor correlation matrix at site {fail}")
    return b, f


def factorize(graph: NeighborGraph, phi: float) -> NNGPSystem:
    if not phi > 0:
        raise ValueError(f"decay parameter must be positive, got {phi}")
    between, site = graph._distances
    n = graph.n
    b = np.empty((n, graph.m))
    f = np.empty(n)
    for s in range(0, n, _FACTOR_CHUNK):
        e = min(n, s + _FACTOR_CHUNK)
        try:
            b[s:e], f[s:e] = _conditional_weights(between[s:e], site[s:e], graph.counts[s:e], phi)
        except NumericalError:
            raise NumericalError(f"singular neighbor correlation matrix near ordered site {s}") from None
    bad = np.nonzero(~(f > 0) | ~np.isfinite(f))[0]
    if bad.size:
        raise NumericalError(f"non-positive conditional variance at ordered site {int(bad[0])} (phi={phi})")
    return NNGPSystem(graph=graph, phi=float(phi), b_coeffs=b, f_vars=f)


def log_density_ordered(system: NNGPSystem, w_ordered: np.ndarray) -> float:
    g = system.graph
    nb = np.where(g.neighbors >= 0, g.neighbors, 0)
    mean = np.einsum("ij,ij->i", system.b_coeffs, w_ordered[nb])
    r = w_ordered - mean
    f = system.f_vars
    return float(-0.5 * np.sum(np.log(2 * np.pi * f) + r * r / f))


def log_density(system: NNGPSystem, w) -> float:
    """NNGP log density of ``w`` given in input site order."""
    w = np.asarray(w, dtype=float)
    if w.shape != (system.graph.n,):
        raise ValueError(f"expected vector of length {system.graph.n}, got shape {w.shape}")
    return log_density_ordered(system, w[system.graph.order])


def sample_prior(system: NNGPSystem, rng: np.random.Generator) -> np.ndarray:
    """One draw from the NNGP prior, returned in input site order."""
    g = system.graph
    eps = rng.standard_normal(g.n)
    w_ord = _kernels.nngp_forward(g.neighbors, g.counts, system.b_coeffs, system.f_vars, eps)
    return w_ord[g.rank]


@dataclass(frozen=True, eq=False)
class KrigingPlan:
    """Neighbors of new sites among observed sites, with the distances needed per draw."""

    neighbors: np.ndarray  # (n_new, k) observed input indices, closest first
    between: np.ndarray  # (n_new, k, k)
    site: np.ndarray  # (n_new, k)

    @property
    def n(self) -> int:
        return self.neighbors.shape[0]

    def weights(self, phi: float) -> tuple[np.ndarray, np.ndarray]:
        counts = np.full(self.n, self.neighbors.shape[1])
        return _conditional_weights(self.between, self.site, counts, phi)


def kriging_plan(observed_coords, new_coords, m: int = DEFAULT_NEIGHBORS) -> KrigingPlan:
    obs = np.asarray(observed_coords, dtype=float)
    new = np.asarray(new_coords, dtype=float).reshape(-1, 2)
    if obs.shape[0] == 0:
        raise ValidationError("cannot predict without observed sites")
    k = min(m, obs.shape[0])
    _, idx = cKDTree(obs).query(new, k=k)
    idx = np.asarray(idx).reshape(new.shape[0], k)
    pts = obs[idx]
    site = np.linalg.norm(pts - new[:, None, :], axis=-1)
    between = np.linalg.norm(pts[:, :, None, :] - pts[:, None, :, :], axis=-1)
    return KrigingPlan(neighbors=idx, between=between, site=site)


def predict_factors(
    system: NNGPSystem | None,
    observed: np.ndarray,
    new_coords,
    phis,
    rng: np.random.Generator,
    plan: KrigingPlan | None = None,
    m: int | None = None,
    return_moments: bool = False,
):
    """Draw factor values at new sites conditional on their nearest observed sites.

    ``observed`` is q x n (input order of the fitted sites). New sites never
    condition on one another. With ``return_moments`` the conditional means
    and variances are returned alongside the draws.
    """
    observed = np.atleast_2d(np.asarray(observed, dtype=float))
    phis = np.atleast_1d(np.asarray(phis, dtype=float))
    if observed.shape[1] == 0:
        raise ValidationError("cannot predict without observed sites")
    if plan is None:
        if system is None:
            raise ValueError("need either a fitted system or a kriging plan")
        coords = system.graph.coords
        plan = kriging_plan(coords, new_coords, m or system.graph.m)
    q = observed.shape[0]
    draws = np.empty((q, plan.n))
    means = np.empty((q, plan.n))
    variances = np.empty((q, plan.n))
    for r in range(q):
        b, f = plan.weights(phis[r])
        means[r] = np.einsum("ij,ij->i", b, observed[r][plan.neighbors])
        variances[r] = np.maximum(f, 0.0)
        draws[r] = means[r] + np.sqrt(variances[r]) * rng.standard_normal(plan.n)
    if return_moments:
        return draws, means, variances
    return draws
