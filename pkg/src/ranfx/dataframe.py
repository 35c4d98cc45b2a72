"""Columnar datasets, factor handling and factor-relation classification."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Union

import numpy as np


class DataError(ValueError):
    """Raised for malformed input files or invalid column requests."""


@dataclass(frozen=True, eq=False)
class NumericColumn:
    values: np.ndarray
    missing: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        missing = np.asarray(self.missing, dtype=bool)
        if values.shape != missing.shape:
            raise DataError("values and missing mask differ in length")
        if not np.all(np.isfinite(values[~missing])):
            raise DataError("numeric column has non-finite values outside the missing mask")
        values = values.copy()
        values[missing] = 0.0
        values.flags.writeable = False
        missing = missing.copy()
        missing.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "missing", missing)

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, NumericColumn)
            and np.array_equal(self.missing, other.missing)
            and np.array_equal(self.values, other.values)
        )

    def take(self, rows) -> "NumericColumn":
        return NumericColumn(self.values[rows], self.missing[rows])

    def cell(self, i: int) -> str:
        return "" if self.missing[i] else repr(float(self.values[i]))


@dataclass(frozen=True, eq=False)
class FactorColumn:
    """Integer codes into ``levels``; codes under the missing mask are 0 and meaningless."""

    levels: tuple[str, ...]
    codes: np.ndarray
    missing: np.ndarray

    def __post_init__(self):
        levels = tuple(self.levels)
        if len(set(levels)) != len(levels):
            raise DataError("factor levels must be unique")
        codes = np.asarray(self.codes, dtype=np.int64).copy()
        missing = np.asarray(self.missing, dtype=bool).copy()
        if codes.shape != missing.shape:
            raise DataError("codes and missing mask differ in length")
        codes[missing] = 0
        present = codes[~missing]
        if present.size and (present.min() < 0 or present.max() >= len(levels)):
            raise DataError("factor code out of range")
        codes.flags.writeable = False
        missing.flags.writeable = False
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "missing", missing)

    @classmethod
    def from_labels(cls, labels: Iterable[str | None]) -> "FactorColumn":
        labels = list(labels)
        missing = np.array([lab is None or lab == "" for lab in labels], dtype=bool)
        levels = tuple(sorted({lab for lab, m in zip(labels, missing) if not m}))
        index = {lev: i for i, lev in enumerate(levels)}
        codes = np.array([0 if m else index[lab] for lab, m in zip(labels, missing)], dtype=np.int64)
        return cls(levels, codes, missing)

    def __len__(self) -> int:
        return len(self.codes)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, FactorColumn)
            and self.levels == other.levels
            and np.array_equal(self.missing, other.missing)
            and np.array_equal(self.codes, other.codes)
        )

    def labels(self) -> list[str | None]:
        return [None if m else self.levels[c] for c, m in zip(self.codes, self.missing)]

    def take(self, rows) -> "FactorColumn":
        return FactorColumn(self.levels, self.codes[rows], self.missing[rows])

    def droplevels(self) -> "FactorColumn":
        """Keep only levels that occur in non-missing rows."""
        return FactorColumn.from_labels(self.labels())

    def cell(self, i: int) -> str:
        return "" if self.missing[i] else self.levels[self.codes[i]]


Column = Union[NumericColumn, FactorColumn]


@dataclass(frozen=True)
class Dataset:
    columns: Mapping[str, Column]
    n_rows: int
    dropped_cells: int = field(default=0, compare=False)

    def __post_init__(self):
        for name, col in self.columns.items():
            if len(col) != self.n_rows:
                raise DataError(f"column {name!r} has {len(col)} rows, expected {self.n_rows}")
        object.__setattr__(self, "columns", dict(self.columns))

    @classmethod
    def from_dict(cls, data: Mapping[str, Iterable]) -> "Dataset":
        """Build a dataset from python sequences, inferring column types.

        ``None``, ``""`` and NaN are treated as missing.
        """
        cols: dict[str, Column] = {}
        n = None
        for name, values in data.items():
            values = list(values)
            cells = ["" if _is_missing(v) else str(v) for v in values]
            cols[name] = _infer_column(cells, None)
            n = len(values) if n is None else n
            if len(values) != n:
                raise DataError(f"column {name!r} has {len(values)} rows, expected {n}")
        return cls(cols, n or 0)

    def __getitem__(self, name: str) -> Column:
        try:
            return self.columns[name]
        except KeyError:
            raise DataError(f"unknown column {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def factor(self, name: str) -> FactorColumn:
        col = self[name]
        if not isinstance(col, FactorColumn):
            raise DataError(f"column {name!r} is not a factor")
        return col

    def numeric(self, name: str) -> NumericColumn:
        col = self[name]
        if not isinstance(col, NumericColumn):
            raise DataError(f"column {name!r} is not numeric")
        return col

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        cols = {name: col.take(rows) for name, col in self.columns.items()}
        n = int(rows.sum()) if rows.dtype == bool else len(rows)
        return Dataset(cols, n)

    def with_column(self, name: str, col: Column) -> "Dataset":
        cols = dict(self.columns)
        cols[name] = col
        return Dataset(cols, self.n_rows)


def _is_missing(v) -> bool:
    if v is None:
        return True
    if isinstance(v, float) and math.isnan(v):
        return True
    return isinstance(v, str) and v == ""


def _parse_float(s: str) -> float | None:
    try:
        x = float(s)
    except ValueError:
        return None
    return x if math.isfinite(x) else None


def _infer_column(cells: list[str], hint: str | None) -> Column:
    missing = np.array([c == "" for c in cells], dtype=bool)
    if hint not in (None, "numeric", "factor"):
        raise DataError(f"unknown column type hint {hint!r}")
    if hint != "factor":
        parsed = [0.0 if m else _parse_float(c) for c, m in zip(cells, missing)]
        if all(p is not None for p in parsed):
            return NumericColumn(np.array(parsed, dtype=float), missing)
        if hint == "numeric":
            bad = next(c for c, p in zip(cells, parsed) if p is None)
            raise DataError(f"cannot parse {bad!r} as a number")
    return FactorColumn.from_labels([None if m else c for c, m in zip(cells, missing)])


def read_csv(path, overrides: Mapping[str, str] | None = None) -> Dataset:
    """Read a CSV file with a header row.

    Columns whose non-missing cells all parse as finite reals become numeric,
    everything else becomes a factor. ``overrides`` maps a column name to
    ``"numeric"`` or ``"factor"``. Empty cells are missing; the total count of
    missing cells is recorded on ``Dataset.dropped_cells``.
    """
    overrides = dict(overrides or {})
    try:
        with open(Path(path), newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise DataError(f"{path} is not valid UTF-8") from exc
    if not rows:
        raise DataError(f"{path} has no header row")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        dupes = sorted({h for h in header if header.count(h) > 1})
        raise DataError(f"duplicate column names: {dupes}")
    unknown = set(overrides) - set(header)
    if unknown:
        raise DataError(f"type override for nonexistent column(s): {sorted(unknown)}")
    body = [r for r in rows[1:] if r != []]
    for lineno, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DataError(f"line {lineno}: expected {len(header)} fields, found {len(r)}")
    cols: dict[str, Column] = {}
    n_missing = 0
    for j, name in enumerate(header):
        cells = [r[j].strip() for r in body]
        n_missing += sum(c == "" for c in cells)
        cols[name] = _infer_column(cells, overrides.get(name))
    return Dataset(cols, len(body), dropped_cells=n_missing)


def write_csv(ds: Dataset, path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        write_csv_stream(ds, fh)


def write_csv_stream(ds: Dataset, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(ds.names)
    cols = list(ds.columns.values())
    for i in range(ds.n_rows):
        writer.writerow([c.cell(i) for c in cols])


@dataclass(frozen=True, eq=False)
class IncidenceMatrix:
    row_factor: str
    col_factor: str
    row_levels: tuple[str, ...]
    col_levels: tuple[str, ...]
    counts: np.ndarray

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, IncidenceMatrix)
            and (self.row_factor, self.col_factor) == (other.row_factor, other.col_factor)
            and (self.row_levels, self.col_levels) == (other.row_levels, other.col_levels)
            and np.array_equal(self.counts, other.counts)
        )

    def transpose(self) -> "IncidenceMatrix":
        return IncidenceMatrix(self.col_factor, self.row_factor, self.col_levels, self.row_levels, self.counts.T.copy())

    def render(self) -> str:
        width = max([len(s) for s in self.col_levels + self.row_levels] + [len(self.row_factor), 3])
        lines = [" ".join([f"{self.row_factor:>{width}}"] + [f"{c:>{width}}" for c in self.col_levels])]
        for lev, row in zip(self.row_levels, self.counts):
            lines.append(" ".join([f"{lev:>{width}}"] + [f"{int(v):>{width}}" for v in row]))
        return "\n".join(lines)


class FactorRelation(enum.Enum):
    NESTED_A_IN_B = "NestedAinB"
    NESTED_B_IN_A = "NestedBinA"
    FULLY_CROSSED = "FullyCrossed"
    PARTIALLY_CROSSED = "PartiallyCrossed"


def cross_tabulate(ds: Dataset, a: str, b: str) -> IncidenceMatrix:
    """Count observations for each (level of ``a``, level of ``b``) pair.

    Rows missing either factor are skipped; unused levels are dropped.
    """
    fa, fb = ds.factor(a), ds.factor(b)
    keep = ~(fa.missing | fb.missing)
    ra = np.unique(fa.codes[keep])
    rb = np.unique(fb.codes[keep])
    ia = np.searchsorted(ra, fa.codes[keep])
    ib = np.searchsorted(rb, fb.codes[keep])
    counts = np.zeros((len(ra), len(rb)), dtype=np.int64)
    np.add.at(counts, (ia, ib), 1)
    return IncidenceMatrix(
        a, b, tuple(fa.levels[i] for i in ra), tuple(fb.levels[i] for i in rb), counts
    )


def classify_relation(inc: IncidenceMatrix) -> FactorRelation:
    """Classify the relation between the row factor (A) and column factor (B).

    A is nested in B when every level of A occurs with exactly one level of B.
    Degenerate tables where both directions nest are labelled fully crossed.
    """
    present = inc.counts > 0
    if not present.any():
        raise DataError("cannot classify an all-zero incidence matrix")
    present = present[present.any(axis=1)][:, present.any(axis=0)]
    a_in_b = bool(np.all(present.sum(axis=1) == 1))
    b_in_a = bool(np.all(present.sum(axis=0) == 1))
    if present.all() or (a_in_b and b_in_a):
        return FactorRelation.FULLY_CROSSED
    if a_in_b:
        return FactorRelation.NESTED_A_IN_B
    if b_in_a:
        return FactorRelation.NESTED_B_IN_A
    return FactorRelation.PARTIALLY_CROSSED


def concat_factors(ds: Dataset, a: str, b: str, sep: str = ":") -> FactorColumn:
    """Per-row labels ``"<a level><sep><b level>"`` over the observed combinations."""
    fa, fb = ds.factor(a), ds.factor(b)
    missing = fa.missing | fb.missing
    labels = [
        None if m else f"{fa.levels[ca]}{sep}{fb.levels[cb]}"
        for ca, cb, m in zip(fa.codes, fb.codes, missing)
    ]
    return FactorColumn.from_labels(labels)


def interaction_factor(ds: Dataset, names: tuple[str, ...], sep: str = ":") -> FactorColumn:
    """Concatenate any number of factor columns into a single grouping factor."""
    col = ds.factor(names[0])
    for name in names[1:]:
        tmp = Dataset({"__a": col, "__b": ds.factor(name)}, ds.n_rows)
        col = concat_factors(tmp, "__a", "__b", sep)
    return col
