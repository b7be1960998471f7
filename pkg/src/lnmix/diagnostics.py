"""Covariance evidence for gene effects.

Without gene effects, the average across-gene covariance between two units
is ``pi_EE * tau_var``, where ``pi_EE`` is the fraction of genes that are EE
between them.  Averaging the same quantity over same-condition unit pairs
estimates ``tau_var`` (or ``tau_var + gamma_var`` with a gene effect).  A
gene effect shows up as cross-condition covariance above ``pi_EE`` times
that same-condition average.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats as sps

from .io import ExpressionMatrix, write_tsv
from .variance_prior import VariancePrior, estimate_prior, sample_variances

__all__ = [
    "CovarianceEvidence",
    "pair_covariance",
    "estimate_pi_ee",
    "pairwise_pvalues",
    "same_condition_covariance",
    "evidence_table",
    "write_evidence",
]


@dataclass(frozen=True)
class CovarianceEvidence:
    cond_a: str
    cond_b: str
    pi_ee: float
    sigma_tau_bar: float
    observed_cov: float

    @property
    def predicted_cov(self) -> float:
        return self.pi_ee * self.sigma_tau_bar

    @property
    def excess(self) -> float:
        return self.observed_cov - self.predicted_cov

    @property
    def pair(self) -> str:
        return f"{self.cond_a},{self.cond_b}"


def pair_covariance(values: np.ndarray, i: int, k: int) -> float:
    """Across-gene sample covariance of units ``i`` and ``k`` (divisor J - 1)."""
    y = np.asarray(values, dtype=np.float64)
    if y.shape[0] < 2:
        raise ValueError("pair covariance needs at least two genes")
    a = y[:, i] - y[:, i].mean()
    b = y[:, k] - y[:, k].mean()
    # symmetric by construction: the product is formed elementwise
    return float(np.sum(a * b) / (y.shape[0] - 1))


def _covariance_matrix(values: np.ndarray) -> np.ndarray:
    y = np.asarray(values, dtype=np.float64)
    c = y - y.mean(axis=0)
    out = c.T @ c / (y.shape[0] - 1)
    return 0.5 * (out + out.T)


def estimate_pi_ee(pvalues, bins: int = 20, max_iter: int | None = None) -> float:
    """Fraction of true nulls from the p-value histogram.

    Start from ``m = J`` nulls.  Each pass finds the first bin whose count
    does not exceed the uniform expectation ``m / bins``, and re-estimates
    ``m`` as ``bins`` times the average count from that bin rightwards.
    Stops at a fixed point.
    """
    p = np.asarray(pvalues, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("no p-values")
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError("p-values must lie in [0, 1]")
    counts = np.histogram(p, bins=bins, range=(0.0, 1.0))[0].astype(np.float64)
    tail = np.cumsum(counts[::-1])[::-1]  # tail[k] = sum(counts[k:])
    m = float(p.size)
    for _ in range(max_iter or bins + 1):
        below = np.flatnonzero(counts <= m / bins)
        if below.size == 0:
            break
        k = int(below[0])
        m_new = bins * tail[k] / (bins - k)
        if m_new == m:
            break
        m = m_new
    return float(min(max(m / p.size, 0.0), 1.0))


def pairwise_pvalues(data: ExpressionMatrix, cond_a: str, cond_b: str, prior: VariancePrior | None = None) -> np.ndarray:
    """Two-sided moderated-t p-values for the mean difference of two conditions.

    The residual variance pools all conditions (df = I - T) and is moderated
    toward the prior: ``(nu*phi + df*S^2) / (nu + df)``, with ``nu + df``
    degrees of freedom for the t reference.
    """
    design = data.design
    ua, ub = design.units_of(cond_a), design.units_of(cond_b)
    sv = sample_variances(data.values, design)
    if prior is None:
        prior = estimate_prior(sv)
    d = sv.df
    if prior.is_finite:
        s2_mod = (prior.nu * prior.phi + d * sv.s2) / (prior.nu + d)
        df_total = prior.nu + d
    else:
        s2_mod = np.full_like(sv.s2, prior.phi)
        df_total = np.inf
    diff = data.values[:, ua].mean(axis=1) - data.values[:, ub].mean(axis=1)
    se = np.sqrt(s2_mod * (1.0 / ua.size + 1.0 / ub.size))
    t = diff / se
    if np.isinf(df_total):
        return 2.0 * sps.norm.sf(np.abs(t))
    return 2.0 * sps.t.sf(np.abs(t), df_total)


def same_condition_covariance(data: ExpressionMatrix) -> float | None:
    """Average covariance over same-condition unit pairs, pooled over conditions."""
    cov = _covariance_matrix(data.values)
    vals = []
    for k in range(data.design.T):
        units = np.flatnonzero(data.design.unit_index == k)
        vals += [cov[i, j] for i, j in itertools.combinations(units, 2)]
    return float(np.mean(vals)) if vals else None


def evidence_table(data: ExpressionMatrix, bins: int = 20) -> list[CovarianceEvidence]:
    """One row per pair of conditions, in design order."""
    design = data.design
    if design.T < 2:
        return []
    sigma_bar = same_condition_covariance(data)
    if sigma_bar is None:
        raise ValueError("no condition has two replicates; same-condition covariance is undefined")
    cov = _covariance_matrix(data.values)
    prior = estimate_prior(sample_variances(data.values, design))
    rows = []
    for a, b in itertools.combinations(design.conditions, 2):
        ua, ub = design.units_of(a), design.units_of(b)
        observed = float(cov[np.ix_(ua, ub)].mean())
        pi_ee = estimate_pi_ee(pairwise_pvalues(data, a, b, prior), bins=bins)
        rows.append(CovarianceEvidence(a, b, pi_ee, sigma_bar, observed))
    return rows


def write_evidence(path: str | Path, rows: list[CovarianceEvidence]) -> None:
    write_tsv(
        path,
        ("pair", "pi_ee_hat", "sigma_tau_bar", "predicted_cov", "observed_cov"),
        ((r.pair, r.pi_ee, r.sigma_tau_bar, r.predicted_cov, r.observed_cov) for r in rows),
    )
