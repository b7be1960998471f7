"""Log marginal densities of a gene's observation vector under each pattern.

Under pattern p the vector y_j is multivariate normal with mean ``mu * 1``
and covariance ``s2*I + gamma_var*11' + tau_var*M_p``.  The two-level
models are the ``gamma_var = 0`` case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .patterns import ConditionDesign, Pattern, PatternSet

__all__ = [
    "CovarianceSpec",
    "GeneStats",
    "log_density",
    "log_density_gv",
    "pattern_loglik",
    "pattern_loglik_gv",
]


@dataclass(frozen=True)
class CovarianceSpec:
    error_var: float
    tau_var: float
    gamma_var: float
    pattern: Pattern

    def __post_init__(self):
        if not self.error_var > 0:
            raise ValueError(f"error variance must be positive, got {self.error_var}")
        if self.tau_var < 0 or self.gamma_var < 0:
            raise ValueError("variance components must be non-negative")

    def dense(self) -> np.ndarray:
        from .patterns import membership_matrix

        I = self.pattern.size
        return (
            self.error_var * np.eye(I)
            + self.gamma_var * np.ones((I, I))
            + self.tau_var * membership_matrix(self.pattern)
        )


@dataclass(frozen=True)
class GeneStats:
    """Per-gene sufficient statistics for the structured density.

    Observations are shifted by a constant ``shift`` before summing, which
    keeps the sums well conditioned; means passed to the kernels are shifted
    the same way.
    """

    csum: np.ndarray  # (J, T)
    wss: np.ndarray  # (J,)
    reps: np.ndarray  # (T,)
    shift: float

    @classmethod
    def from_values(cls, values: np.ndarray, design: ConditionDesign, shift: float | None = None) -> "GeneStats":
        y = np.asarray(values, dtype=np.float64)
        if y.ndim != 2 or y.shape[1] != design.I:
            raise ValueError(f"expected a (J, {design.I}) matrix, got shape {y.shape}")
        if not np.all(np.isfinite(y)):
            raise ValueError("observations must be finite")
        if shift is None:
            shift = float(np.mean(y))
        z = y - shift
        T = design.T
        reps = design.replicates.astype(np.float64)
        csum = np.empty((y.shape[0], T))
        wss = np.zeros(y.shape[0])
        for k in range(T):
            cols = z[:, design.unit_index == k]
            csum[:, k] = cols.sum(axis=1)
            dev = cols - (csum[:, k] / reps[k])[:, None]
            wss += np.sum(dev * dev, axis=1)
        return cls(csum, wss, reps, float(shift))

    @property
    def J(self) -> int:
        return self.csum.shape[0]

    def subset(self, idx) -> "GeneStats":
        return GeneStats(self.csum[idx], self.wss[idx], self.reps, self.shift)


def _single_gene(y, pattern: Pattern):
    """Stats treating every unit as its own condition."""
    y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    if y.shape[1] != pattern.size:
        raise ValueError(f"gene vector has length {y.shape[1]}, pattern covers {pattern.size} units")
    if not np.all(np.isfinite(y)):
        raise ValueError("observations must be finite")
    shift = float(y.mean())
    cgroup = (np.asarray(pattern.groups, dtype=np.int64) - 1)[None, :]
    gsize = pattern.group_sizes[None, :]
    ngrp = np.array([pattern.n_groups])
    return y - shift, np.zeros(1), np.ones(y.shape[1]), cgroup, gsize, ngrp, shift


def log_density(y, mu: float, cov: CovarianceSpec) -> float:
    """Log multivariate normal density of one gene vector (structured path)."""
    csum, wss, reps, cgroup, gsize, ngrp, shift = _single_gene(y, cov.pattern)
    out = _kernels.loglik(
        csum, wss, reps, cgroup, gsize, ngrp, mu - shift,
        np.array([cov.error_var]), cov.tau_var, cov.gamma_var,
    )
    return float(out[0, 0])


def log_density_gv(y, mu: float, tau_var: float, gamma_var: float, pattern: Pattern, prior) -> float:
    """Log of the density averaged over the prior's error-variance grid."""
    grid = prior.require_grid()
    csum, wss, reps, cgroup, gsize, ngrp, shift = _single_gene(y, pattern)
    out = _kernels.loglik_gv(csum, wss, reps, cgroup, gsize, ngrp, mu - shift, grid, tau_var, gamma_var)
    return float(out[0, 0])


def pattern_loglik(
    stats: GeneStats,
    patterns: PatternSet,
    mu: float,
    error_var,
    tau_var: float,
    gamma_var: float = 0.0,
    threads: int = 1,
) -> np.ndarray:
    """(J, P) matrix of log f_p(y_j) with scalar or per-gene error variance."""
    ev = np.broadcast_to(np.asarray(error_var, dtype=np.float64), (stats.J,))
    if np.any(~(ev > 0)):
        raise ValueError("error variances must be positive")
    return _kernels.loglik(
        stats.csum, stats.wss, stats.reps,
        patterns.condition_group_matrix, patterns.group_sizes, patterns.n_groups,
        mu - stats.shift, ev, tau_var, gamma_var, threads=threads,
    )


def pattern_loglik_gv(
    stats: GeneStats,
    patterns: PatternSet,
    mu: float,
    grid: np.ndarray,
    tau_var: float,
    gamma_var: float = 0.0,
    threads: int = 1,
) -> np.ndarray:
    """(J, P) matrix of log mean_q f_p(y_j | error variance = grid[q])."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0 or np.any(~(grid > 0)):
        raise ValueError("variance grid must be a non-empty vector of positive values")
    return _kernels.loglik_gv(
        stats.csum, stats.wss, stats.reps,
        patterns.condition_group_matrix, patterns.group_sizes, patterns.n_groups,
        mu - stats.shift, grid, tau_var, gamma_var, threads=threads,
    )
