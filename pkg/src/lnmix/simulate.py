"""Simulation from the generative models and scoring of posterior tables.

Random numbers come from Philox, a counter-based generator.  Gene ``j``
uses key ``seed`` with the highest counter word set to ``j``, so its draws
depend only on ``(seed, j)``.  Any split of genes among workers therefore
reproduces the same data.

Per-gene draw order: one uniform (pattern), one normal (gene effect),
``T`` normals (group effects), one chi-squared (gene variance, MV models
only), ``I`` normals (errors).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import ExpressionMatrix, read_kv, read_tsv, write_tsv
from .patterns import ConditionDesign, PatternSet, all_partitions, each_vs_control, read_pattern_file
from .posterior import PosteriorTable

__all__ = [
    "SimSpec",
    "TruthTable",
    "MODELS",
    "generate",
    "gene_stream",
    "calibration_score",
    "roc_points",
    "roc_auc",
    "read_simspec",
    "write_truth",
    "read_truth",
    "dc3000_design",
    "dc3000_spec",
]

MODELS = ("LNN", "LN3", "LNNMV", "LN3MV")


@dataclass(frozen=True)
class SimSpec:
    model: str
    J: int
    patterns: PatternSet
    pi: np.ndarray
    mu: float
    tau_var: float
    gamma_var: float = 0.0
    error_var: float | None = None
    nu: float | None = None
    phi: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.J < 1:
            raise ValueError("J must be at least 1")
        pi = np.asarray(self.pi, dtype=np.float64)
        if pi.shape != (self.patterns.P,):
            raise ValueError(f"pi has {pi.size} entries for {self.patterns.P} patterns")
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-9:
            raise ValueError("pi must lie on the simplex")
        object.__setattr__(self, "pi", pi / pi.sum())
        if self.tau_var < 0 or self.gamma_var < 0:
            raise ValueError("variance components must be non-negative")
        if self.model.startswith("LNN") and self.gamma_var != 0:
            raise ValueError(f"{self.model} has no gene effect; set gamma_var = 0")
        if self.model.endswith("MV"):
            if self.nu is None or self.phi is None or not (self.nu > 0 and self.phi > 0):
                raise ValueError(f"{self.model} needs nu > 0 and phi > 0")
        elif self.error_var is None or not self.error_var > 0:
            raise ValueError(f"{self.model} needs error_var > 0")

    @property
    def design(self) -> ConditionDesign:
        return self.patterns.design


@dataclass(frozen=True)
class TruthTable:
    pattern: np.ndarray  # 0-based pattern index per gene
    unit_means: np.ndarray  # (J, I) mu + gamma_j + tau of each unit's group
    sigma2: np.ndarray | None = field(default=None)

    def is_null(self, null_index: int) -> np.ndarray:
        return self.pattern == null_index


def gene_stream(seed: int, j: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, 0, int(j)]))


def _draw_genes(spec: SimSpec, lo: int, hi: int, y, means, pat, s2):
    design = spec.design
    I, T = design.I, design.T
    cum = np.cumsum(spec.pi)
    cum[-1] = 1.0
    sd_g = math.sqrt(spec.gamma_var)
    sd_t = math.sqrt(spec.tau_var)
    mv = spec.model.endswith("MV")
    # unit -> group under each pattern
    unit_groups = [np.asarray(p.groups) - 1 for p in spec.patterns]
    for j in range(lo, hi):
        rng = gene_stream(spec.seed, j)
        p = int(np.searchsorted(cum, rng.random(), side="right"))
        p = min(p, spec.patterns.P - 1)
        gamma = sd_g * rng.standard_normal()
        tau = sd_t * rng.standard_normal(T)
        if mv:
            var = spec.nu * spec.phi / rng.chisquare(spec.nu)
        else:
            var = spec.error_var
        eps = math.sqrt(var) * rng.standard_normal(I)
        m = spec.mu + gamma + tau[unit_groups[p]]
        pat[j] = p
        means[j] = m
        s2[j] = var
        y[j] = m + eps


def generate(spec: SimSpec, threads: int = 1) -> tuple[ExpressionMatrix, TruthTable]:
    """Simulate a data set and its ground truth; deterministic given ``spec.seed``."""
    J, I = spec.J, spec.design.I
    y = np.empty((J, I))
    means = np.empty((J, I))
    pat = np.empty(J, dtype=np.int64)
    s2 = np.empty(J)
    chunk = max(1, -(-J // max(1, threads)))
    bounds = [(a, min(a + chunk, J)) for a in range(0, J, chunk)]
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(lambda ab: _draw_genes(spec, ab[0], ab[1], y, means, pat, s2), bounds))
    else:
        _draw_genes(spec, 0, J, y, means, pat, s2)
    width = len(str(J))
    ids = tuple(f"g{j + 1:0{width}d}" for j in range(J))
    truth = TruthTable(pat, means, s2 if spec.model.endswith("MV") else None)
    return ExpressionMatrix(y, ids, spec.design), truth


# -- scoring -------------------------------------------------------------


def _eppee(posteriors) -> np.ndarray:
    if isinstance(posteriors, PosteriorTable):
        return posteriors.eppee
    return np.asarray(posteriors, dtype=np.float64)


def calibration_score(posteriors, truth: TruthTable, null_index: int = 0, bins: int = 10) -> np.ndarray:
    """Per-bin (lower, upper, mean ePPEE, true EE fraction, count).

    Genes are binned by ePPEE into ``bins`` equal-width bins on [0, 1]; the
    last bin is closed.  Empty bins report NaN means and zero count.
    """
    e = _eppee(posteriors)
    if e.shape != truth.pattern.shape:
        raise ValueError("posteriors and truth cover different numbers of genes")
    ee = truth.is_null(null_index).astype(np.float64)
    idx = np.minimum((e * bins).astype(np.int64), bins - 1)
    out = np.empty((bins, 5))
    for b in range(bins):
        sel = idx == b
        n = int(sel.sum())
        out[b] = (b / bins, (b + 1) / bins, e[sel].mean() if n else np.nan, ee[sel].mean() if n else np.nan, n)
    return out


def roc_points(posteriors, truth: TruthTable, null_index: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """(false-positive counts, true-positive counts) sweeping the ePPEE cutoff.

    Genes are declared DE in order of increasing ePPEE; one point is emitted
    after each distinct ePPEE value, preceded by (0, 0).
    """
    e = _eppee(posteriors)
    de = ~truth.is_null(null_index)
    order = np.argsort(e, kind="stable")
    e_sorted = e[order]
    tp = np.cumsum(de[order])
    fp = np.cumsum(~de[order])
    last = np.r_[np.flatnonzero(np.diff(e_sorted) != 0), e_sorted.size - 1]
    return np.r_[0, fp[last]], np.r_[0, tp[last]]


def roc_auc(fp: np.ndarray, tp: np.ndarray) -> float:
    """Area under the ROC curve, normalized to [0, 1] (trapezoids for ties)."""
    n_fp, n_tp = fp[-1], tp[-1]
    if n_fp == 0 or n_tp == 0:
        raise ValueError("ROC area needs both DE and EE genes")
    return float(np.sum(np.diff(fp) * (tp[1:] + tp[:-1]) / 2.0) / (n_fp * n_tp))


# -- configuration and truth files ---------------------------------------


def dc3000_design(replicates: int = 2) -> ConditionDesign:
    return ConditionDesign.balanced(["ctrl", "phen", "NaCl", "PEG", "H2O2"], replicates)


# Hyperparameter estimates reported for the DC3000 data set.
DC3000_ESTIMATES = {
    "LNN": dict(mu=0.501, tau_var=0.982, error_var=0.0129, pi_null=0.721),
    "LNNMV": dict(mu=0.419, tau_var=0.878, nu=3.546, phi=0.00509, pi_null=0.657),
    "LN3": dict(mu=0.277, tau_var=0.151, gamma_var=0.813, error_var=0.0116, pi_null=0.655),
    "LN3MV": dict(mu=0.264, tau_var=0.101, gamma_var=0.832, nu=3.546, phi=0.00509, pi_null=0.492),
}


def _pi_from_null(pi_null: float, P: int, null_index: int) -> np.ndarray:
    if P == 1:
        return np.ones(1)
    pi = np.full(P, (1.0 - pi_null) / (P - 1))
    pi[null_index] = pi_null
    return pi


def dc3000_spec(model: str, J: int = 5000, seed: int = 0, **overrides) -> SimSpec:
    """DC3000-like simulation: 5 conditions x 2 replicates, 16 each-vs-control patterns.

    Non-null patterns share the non-null mass equally.
    """
    params = dict(DC3000_ESTIMATES[model])
    params.update(overrides)
    pats = params.pop("patterns", None) or each_vs_control(dc3000_design(), "ctrl")
    pi_null = params.pop("pi_null")
    pi = params.pop("pi", None)
    if pi is None:
        pi = _pi_from_null(pi_null, pats.P, pats.null_index)
    return SimSpec(model=model, J=J, patterns=pats, pi=pi, seed=seed, **params)


def _parse_design(text: str) -> ConditionDesign:
    """``ctrl:2, A:2, B:3`` -> condition labels repeated by replicate count."""
    units = []
    for item in text.split(","):
        name, sep, n = item.strip().rpartition(":")
        if not sep:
            raise ValueError(f"design entry {item!r} is not '<condition>:<replicates>'")
        units += [name.strip()] * int(n)
    return ConditionDesign(tuple(units))


def read_simspec(path: str | Path, seed: int | None = None) -> SimSpec:
    """Read a ``key = value`` simulation config.

    Keys: ``model``, ``J``, ``design`` (``ctrl:2, A:2``), ``patterns``
    (``all-partitions``, ``vs-control:<name>`` or a pattern file path),
    ``pi`` (comma list) or ``pi_null``, ``mu``, ``tau_var``, ``gamma_var``,
    ``error_var``, ``nu``, ``phi``, ``seed``.
    """
    kv = read_kv(path)
    known = {"model", "J", "design", "patterns", "pi", "pi_null", "mu", "tau_var", "gamma_var",
             "error_var", "nu", "phi", "seed"}
    unknown = set(kv) - known
    if unknown:
        raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
    for req in ("model", "J", "design", "mu", "tau_var"):
        if req not in kv:
            raise ValueError(f"{path}: missing key {req!r}")
    design = _parse_design(kv["design"])
    pspec = kv.get("patterns", "all-partitions")
    if pspec == "all-partitions":
        pats = all_partitions(design)
    elif pspec.startswith("vs-control:"):
        pats = each_vs_control(design, pspec.split(":", 1)[1].strip())
    else:
        p = Path(pspec)
        if not p.is_absolute():
            p = Path(path).parent / p
        pats = read_pattern_file(p, design)
    if "pi" in kv:
        pi = np.array([float(v) for v in kv["pi"].split(",")])
    elif "pi_null" in kv:
        if pats.null_index is None:
            raise ValueError(f"{path}: pi_null given but the pattern set has no null pattern")
        pi = _pi_from_null(float(kv["pi_null"]), pats.P, pats.null_index)
    else:
        pi = np.full(pats.P, 1.0 / pats.P)
    opt = lambda k: float(kv[k]) if k in kv else None  # noqa: E731
    return SimSpec(
        model=kv["model"].upper(),
        J=int(kv["J"]),
        patterns=pats,
        pi=pi,
        mu=float(kv["mu"]),
        tau_var=float(kv["tau_var"]),
        gamma_var=opt("gamma_var") or 0.0,
        error_var=opt("error_var"),
        nu=opt("nu"),
        phi=opt("phi"),
        seed=int(kv.get("seed", 0)) if seed is None else seed,
    )


def write_truth(path: str | Path, gene_ids, truth: TruthTable) -> None:
    if truth.sigma2 is not None:
        rows = ((g, int(p) + 1, s) for g, p, s in zip(gene_ids, truth.pattern, truth.sigma2))
        write_tsv(path, ("gene_id", "pattern", "sigma_j2"), rows)
    else:
        write_tsv(path, ("gene_id", "pattern"), ((g, int(p) + 1) for g, p in zip(gene_ids, truth.pattern)))


def read_truth(path: str | Path) -> tuple[tuple[str, ...], TruthTable]:
    header, rows = read_tsv(path)
    if header[:2] != ["gene_id", "pattern"]:
        raise ValueError(f"{path}: truth header must start with gene_id, pattern")
    ids = tuple(r[0] for r in rows)
    pat = np.array([int(r[1]) - 1 for r in rows], dtype=np.int64)
    s2 = np.array([float(r[2]) for r in rows]) if "sigma_j2" in header else None
    return ids, TruthTable(pat, np.full((len(ids), 0), np.nan), s2)
