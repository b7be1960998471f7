"""EM estimation of mixing proportions and hyperparameters.

The latent variable is the expression pattern of each gene.  The E-step is a
row-wise softmax of ``log pi_p + log f_p(y_j | theta)``; the M-step updates
``pi`` in closed form and improves ``theta`` with Nelder-Mead on
``(mu, log tau_var[, log gamma_var][, log error_var])``, keeping the new
point only when it does not lower the expected complete-data log-likelihood.
That makes every iteration a generalized EM step, so the marginal
log-likelihood never decreases.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .density import GeneStats, pattern_loglik
from .io import ExpressionMatrix
from .patterns import PatternSet
from .variance_prior import VariancePrior, estimate_prior, sample_variances, shrink

__all__ = [
    "Method",
    "METHODS",
    "get_method",
    "EMConfig",
    "Hyperparams",
    "FitResult",
    "initial_hyperparams",
    "e_step",
    "m_step",
    "marginal_loglik",
    "fit",
]

log = logging.getLogger(__name__)

CLAMP_REL = 1e-12


@dataclass(frozen=True)
class Method:
    name: str
    gene_effect: bool
    variance: str  # "common", "ebarrays" or "posterior-expectation"
    gv: bool = False

    @property
    def model(self) -> str:
        base = "LN3" if self.gene_effect else "LNN"
        return base if self.variance == "common" else base + "MV"

    @property
    def gene_specific(self) -> bool:
        return self.variance != "common"


METHODS: dict[str, Method] = {
    m.name: m
    for m in (
        Method("LNN", False, "common"),
        Method("LNNMV", False, "ebarrays"),
        Method("LNNMV*", False, "posterior-expectation"),
        Method("LNNGV", False, "posterior-expectation", gv=True),
        Method("LN3", True, "common"),
        Method("LN3MV", True, "ebarrays"),
        Method("LN3MV*", True, "posterior-expectation"),
        Method("LN3GV", True, "posterior-expectation", gv=True),
    )
}


def get_method(name: str | Method) -> Method:
    if isinstance(name, Method):
        return name
    key = name.strip().upper().replace("^", "").replace("STAR", "*").replace("-*", "*")
    if key not in METHODS:
        raise ValueError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")
    return METHODS[key]


@dataclass(frozen=True)
class EMConfig:
    tol: float = 1e-8
    max_iter: int = 500
    Q: int = 1000
    threads: int = 1


@dataclass(frozen=True)
class Hyperparams:
    """Model hyperparameters.

    Common-variance models carry ``error_var``; gene-specific models carry
    the fixed shrunken ``gene_error_var`` and the prior they came from.
    """

    model: str
    mu: float
    tau_var: float
    gamma_var: float = 0.0
    error_var: float | None = None
    gene_error_var: np.ndarray | None = field(default=None, compare=False, repr=False)
    prior: VariancePrior | None = None

    def __post_init__(self):
        if self.tau_var < 0 or self.gamma_var < 0:
            raise ValueError("variance components must be non-negative")
        if self.model in ("LNN", "LN3"):
            if self.error_var is None or not self.error_var > 0:
                raise ValueError("common-variance models need error_var > 0")
        elif self.model in ("LNNMV", "LN3MV"):
            if self.gene_error_var is None or np.any(~(np.asarray(self.gene_error_var) > 0)):
                raise ValueError("gene-specific models need positive gene_error_var")
        else:
            raise ValueError(f"unknown model {self.model!r}")
        if self.model.startswith("LNN") and self.gamma_var != 0:
            raise ValueError("two-level models have no gene effect")

    def errors(self, J: int) -> np.ndarray | float:
        if self.gene_error_var is not None:
            ev = np.asarray(self.gene_error_var, dtype=np.float64)
            if ev.size != J:
                raise ValueError(f"gene_error_var has {ev.size} entries for {J} genes")
            return ev
        return float(self.error_var)


@dataclass
class FitResult:
    method: Method
    hyperparams: Hyperparams
    pi: np.ndarray
    loglik: float
    n_iter: int
    converged: bool
    trace: list[float]
    flags: list[str] = field(default_factory=list)


def _as_stats(data) -> GeneStats:
    if isinstance(data, GeneStats):
        return data
    if isinstance(data, ExpressionMatrix):
        return GeneStats.from_values(data.values, data.design)
    raise TypeError(f"expected ExpressionMatrix or GeneStats, got {type(data).__name__}")


def _log_f(stats: GeneStats, patterns: PatternSet, theta: Hyperparams, threads: int = 1) -> np.ndarray:
    return pattern_loglik(
        stats, patterns, theta.mu, theta.errors(stats.J), theta.tau_var, theta.gamma_var, threads=threads
    )


def _softmax_rows(logw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = logsumexp(logw, axis=1)
    if not np.all(np.isfinite(norm)):
        bad = int(np.flatnonzero(~np.isfinite(norm))[0])
        raise FloatingPointError(f"gene {bad}: no pattern has finite weight")
    z = np.exp(logw - norm[:, None])
    z /= z.sum(axis=1, keepdims=True)
    return z, norm


def _log_pi(pi: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(pi, dtype=np.float64))


def e_step(data, patterns: PatternSet, theta: Hyperparams, pi, threads: int = 1) -> np.ndarray:
    """(J, P) posterior pattern responsibilities."""
    stats = _as_stats(data)
    z, _ = _softmax_rows(_log_f(stats, patterns, theta, threads) + _log_pi(pi))
    return z


def marginal_loglik(data, patterns: PatternSet, theta: Hyperparams, pi, threads: int = 1) -> float:
    stats = _as_stats(data)
    return float(np.sum(logsumexp(_log_f(stats, patterns, theta, threads) + _log_pi(pi), axis=1)))


# -- parameter vector <-> Hyperparams -------------------------------------


class _Packer:
    """Maps theta to the unconstrained Nelder-Mead vector and back.

    Coordinates are ``mu`` and the logs of the free variance components;
    names listed in ``fixed`` keep the value they have in the template.
    """

    def __init__(self, method: Method, scale: float, fixed=()):
        self.method = method
        self.floor = math.log(CLAMP_REL * scale)
        names = ["mu", "tau_var"]
        if method.gene_effect:
            names.append("gamma_var")
        if not method.gene_specific:
            names.append("error_var")
        unknown = set(fixed) - set(names)
        if unknown:
            raise ValueError(f"cannot fix {sorted(unknown)} for {method.name}")
        self.names = [n for n in names if n not in fixed]

    def pack(self, th: Hyperparams) -> np.ndarray:
        x = []
        for n in self.names:
            v = getattr(th, n)
            if n == "mu":
                x.append(v)
            elif n == "error_var":
                x.append(math.log(v))
            else:
                x.append(math.log(max(v, math.exp(self.floor))))
        return np.array(x, dtype=np.float64)

    def unpack(self, x: np.ndarray, like: Hyperparams) -> Hyperparams:
        kw = {}
        for n, v in zip(self.names, x):
            if n == "mu":
                kw[n] = float(v)
            elif n == "error_var":
                kw[n] = math.exp(v)
            else:
                kw[n] = math.exp(max(v, self.floor))
        return replace(like, **kw)

    def clamped(self, x: np.ndarray) -> list[str]:
        return [f"{n}_clamped" for n, v in zip(self.names, x) if n in ("tau_var", "gamma_var") and v <= self.floor]


def _expected_complete(stats, patterns, theta, z, threads) -> float:
    lf = _log_f(stats, patterns, theta, threads)
    return float(np.sum(np.sum(z * lf, axis=1)))


def m_step(
    data,
    patterns: PatternSet,
    responsibilities: np.ndarray,
    theta: Hyperparams,
    method: Method | str | None = None,
    threads: int = 1,
    step: np.ndarray | float | None = None,
    fixed=(),
    _packer: _Packer | None = None,
) -> tuple[Hyperparams, np.ndarray]:
    """Closed-form pi update and Nelder-Mead improvement of theta.

    Parameters
    ----------
    data : ExpressionMatrix or GeneStats
    patterns : PatternSet
    responsibilities : (J, P) array
        Current E-step output.
    theta : Hyperparams
        Starting point; returned unchanged if no improvement is found.
    method : Method or str, optional
        Which parameters are free; defaults to the plug-in method of
        ``theta.model``.
    threads : int
        Gene-parallel workers for density evaluation.
    step : float or array, optional
        Initial simplex edge per coordinate (default 0.1).
    fixed : iterable of str
        Hyperparameter names held at their value in ``theta``.
    """
    stats = _as_stats(data)
    z = np.asarray(responsibilities, dtype=np.float64)
    pi = z.mean(axis=0)
    pi = pi / pi.sum()
    if method is None:
        method = next(m for m in METHODS.values() if m.model == theta.model and not m.gv)
    method = get_method(method)
    scale = theta.error_var if theta.error_var is not None else float(np.median(theta.gene_error_var))
    packer = _packer or _Packer(method, scale, fixed)
    x0 = packer.pack(theta)
    if x0.size == 0:
        return theta, pi

    def negq(x):
        try:
            th = packer.unpack(x, theta)
        except (ValueError, OverflowError):
            return math.inf
        v = _expected_complete(stats, patterns, th, z, threads)
        return -v if math.isfinite(v) else math.inf

    f0 = negq(x0)
    if step is None:
        step = 0.1
    step = np.broadcast_to(np.asarray(step, dtype=np.float64), x0.shape)
    simplex = np.vstack([x0] + [x0 + np.eye(x0.size)[k] * step[k] for k in range(x0.size)])
    res = minimize(
        negq,
        x0,
        method="Nelder-Mead",
        options=dict(
            initial_simplex=simplex,
            xatol=1e-7,
            fatol=1e-10 * max(1.0, abs(f0)),
            maxfev=400 * x0.size,
        ),
    )
    if not np.all(np.isfinite(res.x)) or not math.isfinite(res.fun):
        raise FloatingPointError(f"Nelder-Mead returned a non-finite point: {res.message}")
    if res.fun <= f0:
        return packer.unpack(res.x, theta), pi
    return theta, pi


# -- initialization ------------------------------------------------------


def initial_hyperparams(values: np.ndarray, patterns: PatternSet, method: Method, gene_error_var=None, prior=None) -> Hyperparams:
    """Method-of-moments starting point."""
    design = patterns.design
    y = np.asarray(values, dtype=np.float64)
    mu0 = float(y.mean())
    if method.gene_specific:
        s2_0 = float(np.median(gene_error_var))
    else:
        sv = sample_variances(y, design) if design.df >= 1 else None
        s2_0 = float(np.median(sv.s2)) if sv is not None and np.median(sv.s2) > 0 else float(np.var(y, axis=1).mean())
        s2_0 = max(s2_0, 1e-8)
    reps = design.replicates.astype(float)
    cmeans = np.stack([y[:, design.unit_index == k].mean(axis=1) for k in range(design.T)], axis=1)
    if design.T > 1:
        between = float(np.mean(np.var(cmeans, axis=1, ddof=1)))
        tau0 = max(between - s2_0 / float(np.mean(reps)), 0.01 * s2_0)
    else:
        tau0 = 0.01 * s2_0
    gene_means = y.mean(axis=1)
    gamma0 = max(float(np.var(gene_means, ddof=1)) - tau0, 0.01 * s2_0)
    if not method.gene_effect:
        tau0, gamma0 = tau0 + gamma0, 0.0
    kw = dict(model=method.model, mu=mu0, tau_var=tau0, gamma_var=gamma0)
    if method.gene_specific:
        kw.update(gene_error_var=np.asarray(gene_error_var), prior=prior)
    else:
        kw.update(error_var=s2_0)
    return Hyperparams(**kw)


def gene_variances(values: np.ndarray, patterns: PatternSet, method: Method) -> tuple[np.ndarray, VariancePrior]:
    """Fitted prior and fixed shrunken error variances for MV/GV methods."""
    design = patterns.design
    if design.df < 1:
        raise ValueError(
            f"{method.name} needs I - T >= 1 residual degrees of freedom (I={design.I}, T={design.T})"
        )
    single = [c for c, r in zip(design.conditions, design.replicates) if r < 2]
    if single:
        warnings.warn(f"conditions {single} have one replicate and add no variance degrees of freedom", RuntimeWarning)
    sv = sample_variances(values, design)
    prior = estimate_prior(sv)
    return shrink(sv, prior, method.variance, design.I, design.T), prior


def fit(data: ExpressionMatrix, patterns: PatternSet, method: Method | str, config: EMConfig | None = None,
        init: Hyperparams | None = None, init_pi=None) -> FitResult:
    """Maximize the marginal likelihood over (pi, theta) by generalized EM."""
    config = config or EMConfig()
    method = get_method(method)
    if data.design != patterns.design:
        raise ValueError("data and pattern set use different condition designs")
    stats = GeneStats.from_values(data.values, data.design)
    gev = prior = None
    if method.gene_specific:
        gev, prior = gene_variances(data.values, patterns, method)
    theta = init or initial_hyperparams(data.values, patterns, method, gev, prior)
    if gev is not None and init is not None and init.gene_error_var is None:
        theta = replace(theta, gene_error_var=gev, prior=prior)
    P = patterns.P
    pi = np.full(P, 1.0 / P) if init_pi is None else np.asarray(init_pi, dtype=np.float64)
    scale = theta.error_var if theta.error_var is not None else float(np.median(theta.gene_error_var))
    packer = _Packer(method, scale)

    threads = config.threads
    logw = _log_f(stats, patterns, theta, threads) + _log_pi(pi)
    z, norm = _softmax_rows(logw)
    ll = float(np.sum(norm))
    trace = [ll]
    converged = False
    n_iter = 0
    step = np.full(len(packer.names), 0.1)
    for it in range(1, config.max_iter + 1):
        x_old = packer.pack(theta)
        theta, pi = m_step(stats, patterns, z, theta, method, threads, step=step, _packer=packer)
        dx = np.abs(packer.pack(theta) - x_old)
        step = np.clip(4.0 * dx, 1e-6, 0.1)
        z, norm = _softmax_rows(_log_f(stats, patterns, theta, threads) + _log_pi(pi))
        ll_new = float(np.sum(norm))
        trace.append(ll_new)
        n_iter = it
        rel = abs(ll_new - ll) / max(1.0, abs(ll))
        ll = ll_new
        if rel < config.tol:
            converged = True
            break
    flags = packer.clamped(packer.pack(theta)) if n_iter else []
    if not converged:
        flags.append("not_converged")
    log.info("%s: %d iterations, loglik %.6f, converged=%s", method.name, n_iter, ll, converged)
    return FitResult(method, theta, pi, ll, n_iter, converged, trace, flags)
