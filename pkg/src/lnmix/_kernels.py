"""Hot loops: log marginal densities for every (gene, pattern) pair.

Two interchangeable backends compute the same quantities:

* a numba ``@njit(parallel=True)`` kernel looping over genes with ``prange``;
* a vectorised numpy path, chunked over genes and optionally threaded.

The numba path is used when numba imports and ``LNMIX_DISABLE_NUMBA`` is
unset (or ``0``).  Each gene's value is computed independently of how genes
are split among workers, so results do not depend on the thread count.

All kernels take per-gene sufficient statistics instead of raw data:

``csum``  (J, T) sum of shifted observations in each condition
``wss``   (J,)   pooled within-condition sum of squares
``reps``  (T,)   replicates per condition
``cgroup`` (P, T) 0-based group of each condition under each pattern
``gsize`` (P, G) units per group (zero padded)
``ngrp``  (P,)   groups per pattern

For a gene with residual r = y - mu, covariance
``s2*I + t*M_p + g*11'`` and group sums ``S_g``, the quadratic form and
log-determinant reduce to sums over groups (block Sherman-Morrison plus one
rank-one update).  Terms that depend only on the error variance (inverse
group variances, log-determinant) are computed once per distinct variance
and shared by all genes with that variance.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

LOG2PI = math.log(2.0 * math.pi)

# TBB shipped here is too old for numba; OpenMP avoids the warning.
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

_DISABLE = os.environ.get("LNMIX_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")

try:  # pragma: no cover - exercised implicitly
    if _DISABLE:
        raise ImportError
    import numba as nb
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    nb = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA

_CHUNK = 512


# --------------------------------------------------------------------------
# numpy backend
# --------------------------------------------------------------------------


def _pattern_consts_numpy(s2, t, g, gsize, ngrp, I):
    """Variance-only terms for error variances ``s2`` (shape (..., 1, 1)).

    Returns ``invd`` (..., P, G) with 1/(s2 + n t) (zero for padded groups),
    ``const`` (..., P) the log-density part free of the data and
    ``gfac`` (..., P) the rank-one coefficient g / (1 + g c).
    """
    used = gsize > 0
    d = s2 + gsize * t
    invd = np.where(used, 1.0 / d, 0.0)
    c = np.sum(gsize * invd, axis=-1)
    logdet = (I - ngrp) * np.log(s2[..., 0]) + np.sum(np.where(used, np.log(d), 0.0), axis=-1) + np.log1p(g * c)
    return invd, -0.5 * (I * LOG2PI + logdet), g / (1.0 + g * c)


def _group_sums_numpy(csum, reps, cgroup, G, mu):
    """Centered group sums (J, P, G)."""
    P, T = cgroup.shape
    onehot = np.zeros((P, T, G))
    onehot[np.arange(P)[:, None], np.arange(T)[None, :], cgroup] = 1.0
    S = np.einsum("jt,ptg->jpg", csum, onehot)
    n = np.einsum("t,ptg->pg", reps, onehot)
    return S - n * mu


def _rss_numpy(csum, wss, reps, mu):
    cdev = csum - reps * mu
    return wss + np.sum(cdev * cdev / reps, axis=1)


def loglik_numpy(csum, wss, reps, cgroup, gsize, ngrp, mu, s2, t, g, out=None):
    I = float(reps.sum())
    S = _group_sums_numpy(csum, reps, cgroup, gsize.shape[1], mu)
    rss = _rss_numpy(csum, wss, reps, mu)
    s2c = s2[:, None, None]
    invd, const, gfac = _pattern_consts_numpy(s2c, t, g, gsize, ngrp, I)
    b = np.sum(S * invd, axis=2)
    quad = (rss[:, None] - t * np.sum(S * S * invd, axis=2)) / s2[:, None] - gfac * b * b
    res = const - 0.5 * quad
    if out is None:
        return res
    out[...] = res
    return out


def loglik_gv_numpy(csum, wss, reps, cgroup, gsize, ngrp, mu, grid, t, g, out=None):
    I = float(reps.sum())
    Q = grid.size
    S = _group_sums_numpy(csum, reps, cgroup, gsize.shape[1], mu)  # (J, P, G)
    rss = _rss_numpy(csum, wss, reps, mu)
    invd, const, gfac = _pattern_consts_numpy(grid[:, None, None], t, g, gsize, ngrp, I)  # (Q, P, G)
    if out is None:
        out = np.empty(S.shape[:2])
    for p in range(cgroup.shape[0]):
        Sp = S[:, p, :]  # (J, G)
        b = Sp @ invd[:, p, :].T  # (J, Q)
        ssq = (Sp * Sp) @ invd[:, p, :].T
        quad = (rss[:, None] - t * ssq) / grid[None, :] - gfac[None, :, p] * b * b
        vals = const[None, :, p] - 0.5 * quad
        m = vals.max(axis=1, keepdims=True)
        out[:, p] = m[:, 0] + np.log(np.exp(vals - m).sum(axis=1)) - math.log(Q)
    return out


def _threaded_numpy(fn, csum, wss, extra_first, args, threads, P):
    J = csum.shape[0]
    out = np.empty((J, P))
    bounds = [(a, min(a + _CHUNK, J)) for a in range(0, J, _CHUNK)]

    def work(ab):
        a, z = ab
        fn(csum[a:z], wss[a:z], *extra_first, *args(a, z), out=out[a:z])

    if threads <= 1 or len(bounds) == 1:
        for ab in bounds:
            work(ab)
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(work, bounds))
    return out


# --------------------------------------------------------------------------
# numba backend
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _consts_nb(s2, t, g, gsize, ngrp, I, invd, const, gfac):  # pragma: no cover
        """Fill per-pattern variance-only terms for one error variance."""
        P = ngrp.shape[0]
        log_s2 = math.log(s2)
        for p in range(P):
            c = 0.0
            logdet = (I - ngrp[p]) * log_s2
            for k in range(ngrp[p]):
                d = s2 + gsize[p, k] * t
                invd[p, k] = 1.0 / d
                c += gsize[p, k] / d
                logdet += math.log(d)
            logdet += math.log1p(g * c)
            const[p] = -0.5 * (I * LOG2PI + logdet)
            gfac[p] = g / (1.0 + g * c)

    @njit(cache=True)
    def _gene_sums_nb(j, csum, reps, cgroup, gsize, ngrp, mu, S):  # pragma: no cover
        """Centered group sums of gene j under every pattern; returns rss."""
        P, T = cgroup.shape
        rss = 0.0
        for k in range(T):
            dev = csum[j, k] - reps[k] * mu
            rss += dev * dev / reps[k]
        for p in range(P):
            for k in range(ngrp[p]):
                S[p, k] = -gsize[p, k] * mu
            for k in range(T):
                S[p, cgroup[p, k]] += csum[j, k]
        return rss

    @njit(cache=True, parallel=True)
    def loglik_numba(csum, wss, reps, cgroup, gsize, ngrp, mu, s2, t, g, out):  # pragma: no cover
        J, T = csum.shape
        P, G = gsize.shape
        I = 0.0
        for k in range(T):
            I += reps[k]
        common = True
        for j in range(1, J):
            if s2[j] != s2[0]:
                common = False
                break
        invd0 = np.zeros((P, G))
        const0 = np.empty(P)
        gfac0 = np.empty(P)
        if common:
            _consts_nb(s2[0], t, g, gsize, ngrp, I, invd0, const0, gfac0)
        for j in prange(J):
            S = np.empty((P, G))
            if common:
                invd, const, gfac = invd0, const0, gfac0
            else:
                invd = np.zeros((P, G))
                const = np.empty(P)
                gfac = np.empty(P)
                _consts_nb(s2[j], t, g, gsize, ngrp, I, invd, const, gfac)
            rss = wss[j] + _gene_sums_nb(j, csum, reps, cgroup, gsize, ngrp, mu, S)
            inv_s2 = 1.0 / s2[j]
            for p in range(P):
                b = 0.0
                ssq = 0.0
                for k in range(ngrp[p]):
                    w = S[p, k] * invd[p, k]
                    b += w
                    ssq += S[p, k] * w
                quad = (rss - t * ssq) * inv_s2 - gfac[p] * b * b
                out[j, p] = const[p] - 0.5 * quad
        return out

    @njit(cache=True, parallel=True)
    def loglik_gv_numba(csum, wss, reps, cgroup, gsize, ngrp, mu, grid, t, g, out):  # pragma: no cover
        J, T = csum.shape
        P, G = gsize.shape
        Q = grid.shape[0]
        log_q = math.log(Q)
        I = 0.0
        for k in range(T):
            I += reps[k]
        invd = np.zeros((Q, P, G))
        const = np.empty((Q, P))
        gfac = np.empty((Q, P))
        for q in range(Q):
            _consts_nb(grid[q], t, g, gsize, ngrp, I, invd[q], const[q], gfac[q])
        inv_grid = 1.0 / grid
        for j in prange(J):
            S = np.empty((P, G))
            vals = np.empty(Q)
            rss = wss[j] + _gene_sums_nb(j, csum, reps, cgroup, gsize, ngrp, mu, S)
            for p in range(P):
                vmax = -np.inf
                for q in range(Q):
                    b = 0.0
                    ssq = 0.0
                    for k in range(ngrp[p]):
                        w = S[p, k] * invd[q, p, k]
                        b += w
                        ssq += S[p, k] * w
                    v = const[q, p] - 0.5 * ((rss - t * ssq) * inv_grid[q] - gfac[q, p] * b * b)
                    vals[q] = v
                    if v > vmax:
                        vmax = v
                acc = 0.0
                for q in range(Q):
                    acc += math.exp(vals[q] - vmax)
                out[j, p] = vmax + math.log(acc) - log_q
        return out


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------


def _prep(csum, wss, reps, cgroup, gsize, ngrp):
    return (
        np.ascontiguousarray(csum, dtype=np.float64),
        np.ascontiguousarray(wss, dtype=np.float64),
        np.ascontiguousarray(reps, dtype=np.float64),
        np.ascontiguousarray(cgroup, dtype=np.int64),
        np.ascontiguousarray(gsize, dtype=np.float64),  # float keeps numba arithmetic in doubles
        np.ascontiguousarray(ngrp, dtype=np.int64),
    )


def _with_threads(threads: int):
    class _Ctx:
        def __enter__(self):
            self.prev = nb.get_num_threads()
            nb.set_num_threads(max(1, min(int(threads), nb.config.NUMBA_NUM_THREADS)))

        def __exit__(self, *exc):
            nb.set_num_threads(self.prev)

    return _Ctx()


def loglik(csum, wss, reps, cgroup, gsize, ngrp, mu, s2, t, g, threads=1, backend=None):
    """(J, P) log densities with per-gene error variance ``s2`` (length J)."""
    csum, wss, reps, cgroup, gsize, ngrp = _prep(csum, wss, reps, cgroup, gsize, ngrp)
    s2 = np.ascontiguousarray(np.broadcast_to(np.asarray(s2, dtype=np.float64), wss.shape))
    use_numba = USE_NUMBA if backend is None else backend == "numba"
    J, P = csum.shape[0], cgroup.shape[0]
    if use_numba:
        out = np.empty((J, P))
        with _with_threads(threads):
            return loglik_numba(csum, wss, reps, cgroup, gsize, ngrp, float(mu), s2, float(t), float(g), out)
    return _threaded_numpy(
        loglik_numpy, csum, wss, (reps, cgroup, gsize, ngrp, float(mu)),
        lambda a, z: (s2[a:z], float(t), float(g)), threads, P,
    )


def loglik_gv(csum, wss, reps, cgroup, gsize, ngrp, mu, grid, t, g, threads=1, backend=None):
    """(J, P) log of the grid-averaged density over error variances ``grid``."""
    csum, wss, reps, cgroup, gsize, ngrp = _prep(csum, wss, reps, cgroup, gsize, ngrp)
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    use_numba = USE_NUMBA if backend is None else backend == "numba"
    J, P = csum.shape[0], cgroup.shape[0]
    if use_numba:
        out = np.empty((J, P))
        with _with_threads(threads):
            return loglik_gv_numba(csum, wss, reps, cgroup, gsize, ngrp, float(mu), grid, float(t), float(g), out)
    return _threaded_numpy(
        loglik_gv_numpy, csum, wss, (reps, cgroup, gsize, ngrp, float(mu)),
        lambda a, z: (grid, float(t), float(g)), threads, P,
    )


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
