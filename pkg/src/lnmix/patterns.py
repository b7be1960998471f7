"""Expression patterns as partitions of experimental conditions.

A pattern assigns every experimental unit to a group of equivalently
expressed observations.  Patterns are stored as group-assignment vectors
with groups numbered ``1..n_p`` in order of first appearance, so two
patterns describe the same partition exactly when their vectors are equal.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "ConditionDesign",
    "Pattern",
    "PatternSet",
    "membership_matrix",
    "enumerate_patterns",
    "all_partitions",
    "each_vs_control",
    "read_pattern_file",
    "write_pattern_file",
]


def _canonical(labels: Iterable) -> tuple[int, ...]:
    seen: dict = {}
    out = []
    for lab in labels:
        if lab not in seen:
            seen[lab] = len(seen) + 1
        out.append(seen[lab])
    return tuple(out)


@dataclass(frozen=True)
class ConditionDesign:
    """Condition label of every experimental unit, in column order."""

    unit_conditions: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "unit_conditions", tuple(str(c) for c in self.unit_conditions))
        if len(self.unit_conditions) < 2:
            raise ValueError("a design needs at least two experimental units")

    @cached_property
    def conditions(self) -> tuple[str, ...]:
        """Distinct condition labels in order of first appearance."""
        return tuple(dict.fromkeys(self.unit_conditions))

    @property
    def I(self) -> int:  # noqa: E743
        return len(self.unit_conditions)

    @property
    def T(self) -> int:
        return len(self.conditions)

    @cached_property
    def unit_index(self) -> np.ndarray:
        """0-based condition index of every unit."""
        pos = {c: k for k, c in enumerate(self.conditions)}
        return np.array([pos[c] for c in self.unit_conditions], dtype=np.int64)

    @cached_property
    def replicates(self) -> np.ndarray:
        return np.bincount(self.unit_index, minlength=self.T).astype(np.int64)

    @property
    def df(self) -> int:
        """Residual degrees of freedom of the pooled within-condition variance."""
        return self.I - self.T

    def condition_position(self, name: str) -> int:
        try:
            return self.conditions.index(name)
        except ValueError:
            raise ValueError(f"unknown condition {name!r}; design has {list(self.conditions)}") from None

    def units_of(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.unit_index == self.condition_position(name))

    @classmethod
    def balanced(cls, conditions: Sequence[str], replicates: int) -> "ConditionDesign":
        return cls(tuple(c for c in conditions for _ in range(replicates)))


@dataclass(frozen=True)
class Pattern:
    """Unit-level group assignment with canonical 1-based group indices."""

    groups: tuple[int, ...]

    def __post_init__(self):
        g = _canonical(self.groups)
        if len(g) == 0:
            raise ValueError("a pattern needs at least one unit")
        object.__setattr__(self, "groups", g)

    @property
    def n_groups(self) -> int:
        return max(self.groups)

    @property
    def size(self) -> int:
        return len(self.groups)

    @property
    def group_sizes(self) -> np.ndarray:
        return np.bincount(np.asarray(self.groups) - 1).astype(np.int64)

    @property
    def is_null(self) -> bool:
        return self.n_groups == 1

    def respects(self, design: ConditionDesign) -> bool:
        """True when no condition is split across groups."""
        if self.size != design.I:
            return False
        first: dict[int, int] = {}
        for c, g in zip(design.unit_index, self.groups):
            if first.setdefault(int(c), g) != g:
                return False
        return True

    def condition_groups(self, design: ConditionDesign) -> tuple[int, ...]:
        """Group of each condition (length T, canonical)."""
        if not self.respects(design):
            raise ValueError(f"pattern {self.groups} splits a condition of the design")
        out = [0] * design.T
        for c, g in zip(design.unit_index, self.groups):
            out[int(c)] = g
        return _canonical(out)

    @classmethod
    def from_condition_groups(cls, design: ConditionDesign, cond_groups: Sequence[int]) -> "Pattern":
        if len(cond_groups) != design.T:
            raise ValueError(f"expected {design.T} condition group labels, got {len(cond_groups)}")
        return cls(tuple(cond_groups[c] for c in design.unit_index))


def membership_matrix(p: Pattern) -> np.ndarray:
    """I x I 0/1 matrix with ones where two units share a group."""
    g = np.asarray(p.groups)
    return (g[:, None] == g[None, :]).astype(np.float64)


@dataclass(frozen=True)
class PatternSet:
    design: ConditionDesign
    patterns: tuple[Pattern, ...]
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        pats = tuple(self.patterns)
        if not pats:
            raise ValueError("a pattern set needs at least one pattern")
        for p in pats:
            if not p.respects(self.design):
                raise ValueError(f"pattern {p.groups} does not respect the condition design")
        if len(set(p.groups for p in pats)) != len(pats):
            raise ValueError("patterns must be pairwise distinct partitions")
        object.__setattr__(self, "patterns", pats)
        if not self.labels:
            labels = tuple(" ".join(map(str, p.condition_groups(self.design))) for p in pats)
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.patterns)

    def __iter__(self):
        return iter(self.patterns)

    def __getitem__(self, k: int) -> Pattern:
        return self.patterns[k]

    @property
    def P(self) -> int:
        return len(self.patterns)

    @cached_property
    def null_index(self) -> int | None:
        """Position of the single-group pattern, or None when absent."""
        for k, p in enumerate(self.patterns):
            if p.is_null:
                return k
        return None

    @cached_property
    def max_groups(self) -> int:
        return max(p.n_groups for p in self.patterns)

    @cached_property
    def condition_group_matrix(self) -> np.ndarray:
        """(P, T) int array: 0-based group of each condition under each pattern."""
        out = np.empty((self.P, self.design.T), dtype=np.int64)
        for k, p in enumerate(self.patterns):
            out[k] = np.asarray(p.condition_groups(self.design)) - 1
        return out

    @cached_property
    def group_sizes(self) -> np.ndarray:
        """(P, max_groups) units per group, zero-padded."""
        out = np.zeros((self.P, self.max_groups), dtype=np.int64)
        for k, p in enumerate(self.patterns):
            sizes = p.group_sizes
            out[k, : sizes.size] = sizes
        return out

    @cached_property
    def n_groups(self) -> np.ndarray:
        return np.array([p.n_groups for p in self.patterns], dtype=np.int64)


def _restricted_growth(n: int):
    """Set partitions of range(n) as restricted growth strings, lexicographic."""
    if n == 0:
        yield ()
        return

    def rec(prefix, m):
        if len(prefix) == n:
            yield tuple(prefix)
            return
        for v in range(m + 2):
            yield from rec(prefix + [v], max(m, v))

    yield from rec([0], 0)


def all_partitions(design: ConditionDesign) -> PatternSet:
    """Every set partition of the T conditions; the null pattern comes first."""
    pats = tuple(
        Pattern.from_condition_groups(design, [g + 1 for g in rgs])
        for rgs in _restricted_growth(design.T)
    )
    return PatternSet(design, pats)


def each_vs_control(design: ConditionDesign, control: str) -> PatternSet:
    """Each treatment is EE with the control or alone in its own group.

    Two treatments share a group only through the control, so with ``k``
    treatments there are ``2**k`` patterns.
    """
    c = design.condition_position(control)
    others = [k for k in range(design.T) if k != c]
    pats = []
    for de in itertools.product((False, True), repeat=len(others)):
        cond = [0] * design.T
        nxt = 1
        for k, is_de in zip(others, de):
            if is_de:
                cond[k] = nxt
                nxt += 1
        pats.append(Pattern.from_condition_groups(design, cond))
    return PatternSet(design, tuple(pats))


def enumerate_patterns(
    design: ConditionDesign,
    constraint: str = "all-partitions",
    control: str | None = None,
    patterns: Sequence[Sequence[int]] | None = None,
) -> PatternSet:
    """Build a PatternSet from one of the supported constraints.

    Parameters
    ----------
    design : ConditionDesign
    constraint : {"all-partitions", "vs-control", "explicit"}
    control : str, optional
        Control condition name, required for ``"vs-control"``.
    patterns : sequence of sequences, optional
        Condition-level group labels (length T each), required for ``"explicit"``.
    """
    if constraint == "all-partitions":
        return all_partitions(design)
    if constraint == "vs-control":
        if control is None:
            raise ValueError("vs-control enumeration needs a control condition")
        return each_vs_control(design, control)
    if constraint == "explicit":
        if not patterns:
            raise ValueError("explicit constraint needs a non-empty pattern list")
        return PatternSet(design, tuple(Pattern.from_condition_groups(design, row) for row in patterns))
    raise ValueError(f"unknown pattern constraint {constraint!r}")


def read_pattern_file(path: str | Path, design: ConditionDesign) -> PatternSet:
    """One pattern per line, whitespace-separated group labels per condition."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            row = [int(tok) for tok in line.split()]
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-integer group label") from None
        if len(row) != design.T:
            raise ValueError(f"{path}:{lineno}: expected {design.T} labels, got {len(row)}")
        rows.append(row)
    return enumerate_patterns(design, "explicit", patterns=rows)


def write_pattern_file(path: str | Path, pset: PatternSet) -> None:
    lines = [" ".join(map(str, p.condition_groups(pset.design))) for p in pset]
    Path(path).write_text("\n".join(lines) + "\n")
