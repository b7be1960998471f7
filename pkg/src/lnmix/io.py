"""Text formats: expression matrices, key=value files and result TSVs.

Expression matrix TSV::

    gene_id<TAB>ctrl:1<TAB>ctrl:2<TAB>A:1 ...
    g1<TAB>0.25<TAB>...

Unit columns are named ``<condition>:<replicate>``; the condition design is
read from those names.  Floats are written with 17 significant digits so a
write/read round trip is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .patterns import ConditionDesign

__all__ = [
    "ExpressionMatrix",
    "IngestError",
    "ingest",
    "write_matrix",
    "fmt",
    "read_kv",
    "write_kv",
    "write_tsv",
    "read_tsv",
]


class IngestError(ValueError):
    """Malformed expression matrix file; the message carries the location."""


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return "%.17g" % x


@dataclass(frozen=True)
class ExpressionMatrix:
    values: np.ndarray
    gene_ids: tuple[str, ...]
    design: ConditionDesign
    unit_names: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("expression values must be a 2-d array")
        if v.shape[1] != self.design.I:
            raise ValueError(f"matrix has {v.shape[1]} columns, design has {self.design.I} units")
        if len(self.gene_ids) != v.shape[0]:
            raise ValueError("one gene id per row required")
        if len(set(self.gene_ids)) != len(self.gene_ids):
            raise ValueError("duplicate gene ids")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "gene_ids", tuple(self.gene_ids))
        if not self.unit_names:
            names, seen = [], {}
            for c in self.design.unit_conditions:
                seen[c] = seen.get(c, 0) + 1
                names.append(f"{c}:{seen[c]}")
            object.__setattr__(self, "unit_names", tuple(names))

    @property
    def J(self) -> int:
        return self.values.shape[0]

    @property
    def I(self) -> int:  # noqa: E743
        return self.values.shape[1]


def _parse_header(fields: list[str], path) -> ConditionDesign:
    if not fields or fields[0] != "gene_id":
        raise IngestError(f"{path}:1: header must start with 'gene_id'")
    conds = []
    for col, name in enumerate(fields[1:], start=2):
        cond, sep, rep = name.rpartition(":")
        if not sep or not cond or not rep:
            raise IngestError(f"{path}:1: column {col} header {name!r} is not '<condition>:<replicate>'")
        conds.append(cond)
    if len(set(fields[1:])) != len(fields) - 1:
        raise IngestError(f"{path}:1: duplicate unit column names")
    try:
        return ConditionDesign(tuple(conds))
    except ValueError as exc:
        raise IngestError(f"{path}:1: {exc}") from None


def ingest(path: str | Path) -> ExpressionMatrix:
    """Read an expression matrix TSV, validating every cell."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise IngestError(f"{path}: empty file")
    header = lines[0].rstrip("\r").split("\t")
    design = _parse_header(header, path)
    width = len(header)
    ids: list[str] = []
    rows: list[list[float]] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != width:
            raise IngestError(f"{path}:{lineno}: expected {width} fields, found {len(fields)}")
        gid = fields[0]
        if gid in seen:
            raise IngestError(f"{path}:{lineno}: duplicate gene id {gid!r} (first on line {seen[gid]})")
        seen[gid] = lineno
        row = []
        for col, cell in enumerate(fields[1:], start=2):
            try:
                v = float(cell)
            except ValueError:
                raise IngestError(f"{path}:{lineno}: column {col} ({header[col - 1]}): non-numeric value {cell!r}") from None
            if not math.isfinite(v):
                raise IngestError(f"{path}:{lineno}: column {col} ({header[col - 1]}): non-finite value {cell!r}")
            row.append(v)
        ids.append(gid)
        rows.append(row)
    if not rows:
        raise IngestError(f"{path}: no gene rows")
    return ExpressionMatrix(np.array(rows), tuple(ids), design, tuple(header[1:]))


def write_matrix(path: str | Path, data: ExpressionMatrix) -> None:
    out = ["\t".join(("gene_id",) + tuple(data.unit_names))]
    for gid, row in zip(data.gene_ids, data.values):
        out.append("\t".join([gid] + [fmt(v) for v in row]))
    Path(path).write_text("\n".join(out) + "\n")


def write_kv(path: str | Path, items: Mapping[str, object]) -> None:
    lines = []
    for k, v in items.items():
        if isinstance(v, (float, np.floating, int, np.integer)) and not isinstance(v, bool):
            v = fmt(v)
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_kv(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip()] = val.strip()
    return out


def write_tsv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    out = ["\t".join(header)]
    for row in rows:
        out.append("\t".join(v if isinstance(v, str) else fmt(v) for v in row))
    Path(path).write_text("\n".join(out) + "\n")


def read_tsv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty file")
    return lines[0].split("\t"), [ln.split("\t") for ln in lines[1:]]
