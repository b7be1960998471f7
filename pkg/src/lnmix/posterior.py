"""Posterior pattern probabilities and the gene lists built from them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .density import GeneStats, pattern_loglik, pattern_loglik_gv
from .em import EMConfig, FitResult, Method, _log_pi, _softmax_rows, get_method
from .io import ExpressionMatrix
from .patterns import PatternSet
from .variance_prior import quantile_grid

__all__ = ["PosteriorTable", "posteriors", "gene_list", "eppee_cdf", "topk_overlap"]


@dataclass(frozen=True)
class PosteriorTable:
    """J x P posterior probabilities; ``eppee`` is the null-pattern column."""

    probs: np.ndarray
    gene_ids: tuple[str, ...]
    method: str
    null_index: int | None

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] != len(self.gene_ids):
            raise ValueError("probs must be (J, P) with one gene id per row")
        if np.any(p < -1e-15) or np.any(p > 1 + 1e-12):
            raise ValueError("posterior probabilities must lie in [0, 1]")
        if not np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-10):
            raise ValueError("posterior rows must sum to 1")
        object.__setattr__(self, "probs", np.clip(p, 0.0, 1.0))

    @property
    def J(self) -> int:
        return self.probs.shape[0]

    @property
    def has_eppee(self) -> bool:
        return self.null_index is not None

    @property
    def eppee(self) -> np.ndarray:
        if self.null_index is None:
            raise ValueError("pattern set has no null (single-group) pattern, so ePPEE is undefined")
        return self.probs[:, self.null_index]


def posteriors(
    data: ExpressionMatrix,
    patterns: PatternSet,
    fit: FitResult,
    method: Method | str | None = None,
    config: EMConfig | None = None,
) -> PosteriorTable:
    """Posterior pattern probabilities from a fitted model.

    GV methods replace each gene's plug-in error variance by an average of
    the density over ``config.Q`` quantiles of the fitted variance prior.
    """
    config = config or EMConfig()
    method = get_method(method) if method is not None else fit.method
    if method.name != fit.method.name:
        raise ValueError(f"fit was produced by {fit.method.name}, not {method.name}")
    th = fit.hyperparams
    stats = GeneStats.from_values(data.values, data.design)
    if method.gv:
        grid = quantile_grid(th.prior, config.Q)
        lf = pattern_loglik_gv(stats, patterns, th.mu, grid, th.tau_var, th.gamma_var, threads=config.threads)
    else:
        lf = pattern_loglik(stats, patterns, th.mu, th.errors(stats.J), th.tau_var, th.gamma_var, threads=config.threads)
    z, _ = _softmax_rows(lf + _log_pi(fit.pi))
    return PosteriorTable(z, tuple(data.gene_ids), method.name, patterns.null_index)


def _rank(table: PosteriorTable) -> np.ndarray:
    """Gene indices by ascending ePPEE; ties keep input order."""
    return np.argsort(table.eppee, kind="stable")


def gene_list(table: PosteriorTable, threshold: float) -> list[int]:
    """Indices of genes with ePPEE below ``threshold``, most significant first."""
    order = _rank(table)
    e = table.eppee[order]
    return order[e < threshold].tolist()


def eppee_cdf(table: PosteriorTable) -> tuple[np.ndarray, np.ndarray]:
    """Empirical CDF of the ePPEEs as (distinct values, fraction <= value)."""
    e = np.sort(table.eppee, kind="stable")
    vals, counts = np.unique(e, return_counts=True)
    return vals, np.cumsum(counts) / e.size


def topk_overlap(tables: Sequence[PosteriorTable], K: int) -> np.ndarray:
    """Pairwise intersection sizes of the K most significant genes per table."""
    if not tables:
        raise ValueError("need at least one table")
    J = tables[0].J
    for t in tables:
        if t.gene_ids != tables[0].gene_ids:
            raise ValueError("tables cover different gene universes")
    if K > J or K < 1:
        raise ValueError(f"K must be in 1..{J}, got {K}")
    tops = [set(_rank(t)[:K].tolist()) for t in tables]
    n = len(tables)
    out = np.zeros((n, n), dtype=np.int64)
    for a in range(n):
        for b in range(a, n):
            out[a, b] = out[b, a] = len(tops[a] & tops[b])
    return out
