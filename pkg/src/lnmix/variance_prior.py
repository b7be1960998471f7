"""Scaled inverse chi-squared prior for gene-specific error variances.

The prior says ``nu * phi / sigma_j^2 ~ chi2(nu)``.  Its hyperparameters are
fitted by matching the first two moments of the log sample variances
(digamma/trigamma moment matching), and gene variances are then shrunk
toward the prior.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .patterns import ConditionDesign

__all__ = [
    "SampleVariances",
    "VariancePrior",
    "sample_variances",
    "estimate_prior",
    "shrink",
    "quantile_grid",
    "scaled_inv_chi2_cdf",
    "trigamma_inverse",
]

ZERO_FLOOR = 1e-8


@dataclass(frozen=True)
class SampleVariances:
    """Pooled within-condition sample variances with common ``df``."""

    s2: np.ndarray
    df: int

    def __post_init__(self):
        s2 = np.asarray(self.s2, dtype=np.float64)
        if s2.ndim != 1:
            raise ValueError("sample variances must be a vector")
        if np.any(~np.isfinite(s2)) or np.any(s2 < 0):
            raise ValueError("sample variances must be finite and non-negative")
        if self.df < 1:
            raise ValueError(
                f"sample variances need at least one residual degree of freedom (got df={self.df}); "
                "some condition must have two or more replicates"
            )
        object.__setattr__(self, "s2", s2)

    @property
    def zero_mask(self) -> np.ndarray:
        return self.s2 == 0


def sample_variances(values: np.ndarray, design: ConditionDesign) -> SampleVariances:
    """Pooled within-condition variance of every gene, df = I - T."""
    y = np.asarray(values, dtype=np.float64)
    ss = np.zeros(y.shape[0])
    for k in range(design.T):
        cols = y[:, design.unit_index == k]
        dev = cols - cols.mean(axis=1, keepdims=True)
        ss += np.sum(dev * dev, axis=1)
    df = design.df
    if df < 1:
        return SampleVariances(np.zeros(y.shape[0]), df)  # raises
    return SampleVariances(ss / df, df)


@dataclass(frozen=True)
class VariancePrior:
    """Prior degrees of freedom ``nu`` and scale ``phi``.

    ``nu = inf`` marks the common-variance case where the sample variances
    show no dispersion beyond sampling noise; the prior is then a point mass
    at ``phi``.
    """

    nu: float
    phi: float
    grid: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if not (self.nu > 0) or not (0 < self.phi < math.inf):
            raise ValueError(f"invalid prior nu={self.nu}, phi={self.phi}")
        if self.grid is not None:
            g = np.asarray(self.grid, dtype=np.float64)
            if g.ndim != 1 or g.size == 0 or np.any(g <= 0):
                raise ValueError("quantile grid must hold positive values")
            if self.is_finite and np.any(np.diff(g) <= 0):
                raise ValueError("quantile grid must be strictly increasing")
            object.__setattr__(self, "grid", g)

    @property
    def is_finite(self) -> bool:
        return math.isfinite(self.nu)

    @property
    def common_variance(self) -> bool:
        return not self.is_finite

    def with_grid(self, Q: int = 1000) -> "VariancePrior":
        return VariancePrior(self.nu, self.phi, quantile_grid(self, Q))

    def require_grid(self) -> np.ndarray:
        if self.grid is None:
            raise ValueError("prior has no quantile grid; call with_grid(Q) first")
        return self.grid

    def mean(self) -> float:
        if not self.is_finite:
            return self.phi
        if self.nu <= 2:
            return math.inf
        return self.nu * self.phi / (self.nu - 2)


def trigamma_inverse(x: float, lo: float = 1e-8, hi: float = 1e8) -> float:
    """Solve polygamma(1, y) = x for y by bisection in log space."""
    if not x > 0:
        raise ValueError("trigamma inverse needs a positive argument")
    f = lambda y: special.polygamma(1, y) - x  # noqa: E731
    if f(hi) > 0:
        return hi
    if f(lo) < 0:
        return lo
    a, b = math.log(lo), math.log(hi)
    for _ in range(200):
        m = 0.5 * (a + b)
        if f(math.exp(m)) > 0:
            a = m
        else:
            b = m
        if b - a < 1e-15:
            break
    return math.exp(0.5 * (a + b))


def estimate_prior(sv: SampleVariances) -> VariancePrior:
    """Fit (nu, phi) by moment matching on log sample variances.

    Returns ``nu = inf`` when the spread of log variances does not exceed
    what sampling with ``df`` degrees of freedom alone would produce.
    """
    s2 = sv.s2
    J = s2.size
    if J < 10:
        raise ValueError(f"prior estimation needs at least 10 genes, got {J}")
    pos = s2[s2 > 0]
    if pos.size == 0:
        raise ValueError("all sample variances are zero")
    if pos.size < J:
        warnings.warn(f"{J - pos.size} genes have zero sample variance; flooring them", RuntimeWarning)
        s2 = np.where(s2 > 0, s2, ZERO_FLOOR * np.median(pos))
    half_d = sv.df / 2.0
    e = np.log(s2) - special.digamma(half_d) + math.log(half_d)
    ebar = float(np.mean(e))
    evar = float(np.mean((e - ebar) ** 2) * J / (J - 1)) - float(special.polygamma(1, half_d))
    # upper end of the nu range: (0, 1e8]
    if evar <= special.polygamma(1, 0.5e8):
        return VariancePrior(math.inf, math.exp(ebar))
    half_nu = trigamma_inverse(evar, hi=0.5e8)
    nu = 2.0 * half_nu
    phi = math.exp(ebar + special.digamma(half_nu) - math.log(half_nu))
    return VariancePrior(nu, phi)


def shrink(sv: SampleVariances, prior: VariancePrior, rule: str, I: int, T: int) -> np.ndarray:
    """Shrunken gene variances.

    ``rule="posterior-expectation"`` divides ``nu*phi + (I-T)*S^2`` by
    ``nu + (I-T) - 2``; ``rule="ebarrays"`` divides the same numerator by
    ``nu + I - 2``.
    """
    if not I > T:
        raise ValueError(f"shrinkage needs I > T (got I={I}, T={T})")
    d = I - T
    s2 = sv.s2
    if not prior.is_finite:
        return np.full_like(s2, prior.phi)
    num = prior.nu * prior.phi + d * s2
    if rule == "posterior-expectation":
        den = prior.nu + d - 2
    elif rule == "ebarrays":
        den = prior.nu + I - 2
    else:
        raise ValueError(f"unknown shrinkage rule {rule!r}")
    if not den > 0:
        raise ValueError(f"non-positive shrinkage denominator {den:.4g} (nu={prior.nu:.4g}, df={d})")
    return num / den


def quantile_grid(prior: VariancePrior, Q: int = 1000) -> np.ndarray:
    """Quantiles q/(Q+1), q = 1..Q, of the scaled inverse chi-squared prior."""
    if Q < 1:
        raise ValueError("Q must be at least 1")
    if not prior.is_finite:
        return np.full(Q, prior.phi)
    q = np.arange(1, Q + 1) / (Q + 1.0)
    # sigma^2 <= s  iff  chi2 >= nu*phi/s
    x = special.chdtri(prior.nu, q)  # upper-tail inverse: P(chi2 > x) = q
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise ArithmeticError("chi-squared quantile inversion failed")
    return prior.nu * prior.phi / x


def scaled_inv_chi2_cdf(x, nu: float, phi: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return special.gammaincc(nu / 2.0, nu * phi / (2.0 * x))
