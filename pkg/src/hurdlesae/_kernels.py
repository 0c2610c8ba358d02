"""Compiled inner loops: Polya-Gamma draws, NNGP forward sampling, site-wise factor sweeps.

Random kernels take an explicit integer seed and reseed numba's generator on
entry so results are reproducible from a numpy ``Generator``.
"""

import math

import numpy as np
from numba import njit

_TRUNC = 0.64
_PI = math.pi
_LOG_HALF_PI = math.log(0.5 * math.pi)


@njit(cache=True)
def _log_pnorm(x):
    if x > -30.0:
        return math.log(0.5 * math.erfc(-x / math.sqrt(2.0)))
    # Mills-ratio tail expansion
    return -0.5 * x * x - math.log(-x) - 0.5 * math.log(2.0 * _PI) + math.log1p(-1.0 / (x * x))


@njit(cache=True)
def _series_coef(n, x):
    k = (n + 0.5) * _PI
    if x > _TRUNC:
        return k * math.exp(-0.5 * k * k * x)
    return math.exp(-1.5 * (_LOG_HALF_PI + math.log(x)) + math.log(k) - 2.0 * (n + 0.5) * (n + 0.5) / x)


@njit(cache=True)
def _exponential_mass(z):
    """Probability of the truncated-exponential branch of the proposal."""
    t = _TRUNC
    fz = _PI * _PI / 8.0 + 0.5 * z * z
    b = math.sqrt(1.0 / t) * (t * z - 1.0)
    a = -math.sqrt(1.0 / t) * (t * z + 1.0)
    x0 = math.log(fz) + fz * t
    xb = x0 - z + _log_pnorm(b)
    xa = x0 + z + _log_pnorm(a)
    qdivp = 4.0 / _PI * (math.exp(xb) + math.exp(xa))
    return 1.0 / (1.0 + qdivp)


@njit(cache=True)
def _truncated_inverse_gaussian(z):
    """Inverse-Gaussian(1/z, 1) restricted to (0, 0.64)."""
    t = _TRUNC
    if z * t < 1.0:  # mean 1/z above truncation point
        while True:
            e1 = np.random.exponential(1.0)
            e2 = np.random.exponential(1.0)
            while e1 * e1 > 2.0 * e2 / t:
                e1 = np.random.exponential(1.0)
                e2 = np.random.exponential(1.0)
            x = t / ((1.0 + t * e1) * (1.0 + t * e1))
            if np.random.random() <= math.exp(-0.5 * z * z * x):
                return x
    mu = 1.0 / z
    x = t + 1.0
    while x > t:
        y = np.random.standard_normal()
        y = y * y
        muy = mu * y
        x = mu + 0.5 * mu * muy - 0.5 * mu * math.sqrt(4.0 * muy + muy * muy)
        if np.random.random() > mu / (mu + x):
            x = mu * mu / x
    return x


@njit(cache=True)
def _pg1(c):
    """One PG(1, c) draw by the alternating-series rejection sampler."""
    z = 0.5 * abs(c)
    fz = _PI * _PI / 8.0 + 0.5 * z * z
    pexp = _exponential_mass(z)
    while True:
        if np.random.random() < pexp:
            x = _TRUNC + np.random.exponential(1.0) / fz
        else:
            x = _truncated_inverse_gaussian(z)
        s = _series_coef(0, x)
        y = np.random.random() * s
        n = 0
        while True:
            n += 1
            if n % 2 == 1:
                s -= _series_coef(n, x)
                if y <= s:
                    return 0.25 * x
            else:
                s += _series_coef(n, x)
                if y > s:
                    break


@njit(cache=True)
def polya_gamma(b, c, seed):
    """PG(b[i], c[i]) for integer shapes, as sums of PG(1, c) draws."""
    np.random.seed(seed)
    out = np.empty(c.shape[0])
    for i in range(c.shape[0]):
        acc = 0.0
        for _ in range(b[i]):
            acc += _pg1(c[i])
        out[i] = acc
    return out


@njit(cache=True)
def nngp_forward(neighbors, counts, b, f, eps):
    n = eps.shape[0]
    w = np.empty(n)
    for i in range(n):
        mu = 0.0
        for k in range(counts[i]):
            mu += b[i, k] * w[neighbors[i, k]]
        w[i] = mu + math.sqrt(f[i]) * eps[i]
    return w


@njit(cache=True)
def _cholesky_inplace(a, q):
    for j in range(q):
        s = a[j, j]
        for k in range(j):
            s -= a[j, k] * a[j, k]
        if s <= 0.0:
            return False
        a[j, j] = math.sqrt(s)
        for i in range(j + 1, q):
            s = a[i, j]
            for k in range(j):
                s -= a[i, k] * a[j, k]
            a[i, j] = s / a[j, j]
    return True


@njit(cache=True)
def sweep_factors(W, neighbors, counts, B, F, u_ptr, u_site, u_slot, lam, prec, info, seed):
    """Site-by-site Gibbs update of all q factors, in NNGP order, in place.

    W: (q, n) ordered factors. B, F: (q, n, m) and (q, n) NNGP weights and
    variances per factor. lam: (J, q) loadings. prec, info: (J, n) Gaussian
    likelihood precision and information residual of the linear predictor with
    the factor term removed. Returns -1 on success or the failing site index.
    """
    np.random.seed(seed)
    q, n = W.shape
    J = lam.shape[0]
    P = np.empty((q, q))
    v = np.empty(q)
    z = np.empty(q)
    for i in range(n):
        for a in range(q):
            v[a] = 0.0
            for c in range(q):
                P[a, c] = 0.0
        for j in range(J):
            p = prec[j, i]
            h = info[j, i]
            for a in range(q):
                v[a] += lam[j, a] * h
                if p != 0.0:
                    for c in range(a + 1):
                        P[a, c] += p * lam[j, a] * lam[j, c]
        for r in range(q):
            mu = 0.0
            for k in range(counts[i]):
                mu += B[r, i, k] * W[r, neighbors[i, k]]
            P[r, r] += 1.0 / F[r, i]
            v[r] += mu / F[r, i]
            for idx in range(u_ptr[i], u_ptr[i + 1]):
                t = u_site[idx]
                slot = u_slot[idx]
                bt = B[r, t, slot]
                resid = W[r, t]
                for l in range(counts[t]):
                    if l != slot:
                        resid -= B[r, t, l] * W[r, neighbors[t, l]]
                P[r, r] += bt * bt / F[r, t]
                v[r] += bt * resid / F[r, t]
        if not _cholesky_inplace(P, q):
            return i
        # mean = P^{-1} v via L L' ; draw = mean + L'^{-1} z
        for a in range(q):
            s = v[a]
            for k in range(a):
                s -= P[a, k] * v[k]
            v[a] = s / P[a, a]
        for a in range(q):
            z[a] = v[a] + np.random.standard_normal()
        for a in range(q - 1, -1, -1):
            s = z[a]
            for k in range(a + 1, q):
                s -= P[k, a] * z[k]
            z[a] = s / P[a, a]
        for a in range(q):
            W[a, i] = z[a]
    return -1


@njit(cache=True, fastmath=True)
def conditional_weights(between, site, counts, phi):
    """Per-site b = C_NN^{-1} c and f = 1 - c'b for the exponential kernel.

    Returns (b, f, fail) with fail = -1 on success, else the first site whose
    neighbor correlation matrix is not positive definite.
    """
    n, m = site.shape
    b = np.zeros((n, m))
    f = np.ones(n)
    C = np.empty((m, m))
    y = np.empty(m)
    for i in range(n):
        k = counts[i]
        if k == 0:
            continue
        for a in range(k):
            for c in range(a + 1):
                C[a, c] = math.exp(-phi * between[i, a, c])
        if not _cholesky_inplace(C, k):
            return b, f, i
        for a in range(k):
            s = math.exp(-phi * site[i, a])
            for c in range(a):
                s -= C[a, c] * y[c]
            y[a] = s / C[a, a]
        fi = 1.0
        for a in range(k):
            fi -= y[a] * y[a]
        for a in range(k - 1, -1, -1):
            s = y[a]
            for c in range(a + 1, k):
                s -= C[c, a] * b[i, c]
            b[i, a] = s / C[a, a]
        f[i] = fi
    return b, f, -1
