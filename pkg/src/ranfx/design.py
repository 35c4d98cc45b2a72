"""Fixed and random design matrices built from a dataset and an expanded formula."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .dataframe import DataError, Dataset, FactorColumn, NumericColumn, interaction_factor
from .formula import FixedTerm, FormulaAst, RandomTerm, TermList, expand_terms


class DesignError(ValueError):
    pass


class RankDeficientError(DesignError):
    def __init__(self, dependent: list[str]):
        self.dependent = dependent
        super().__init__(f"fixed-effects design is rank deficient; dependent columns: {', '.join(dependent)}")


@dataclass(frozen=True)
class Contrasts:
    """Treatment coding (with optional per-factor reference levels) or sum-to-zero coding."""

    kind: str = "treatment"
    reference: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("treatment", "sum"):
            raise DesignError(f"unknown contrast scheme {self.kind!r}")


TREATMENT = Contrasts("treatment")
SUM = Contrasts("sum")

CENTERING_CHOICES = ("none", "first", "mean")


@dataclass(frozen=True)
class VarEncoding:
    """How one dataset column is turned into model columns (kept for prediction)."""

    name: str
    kind: str  # "numeric" or "factor"
    center: float = 0.0
    levels: tuple[str, ...] = ()

    def contrast_matrix(self, contrasts: Contrasts, full: bool = False) -> tuple[np.ndarray, list[str]]:
        n = len(self.levels)
        if full:
            return np.eye(n), [f"{self.name}[{lev}]" for lev in self.levels]
        if contrasts.kind == "sum":
            mat = np.vstack([np.eye(n - 1), -np.ones((1, n - 1))])
            return mat, [f"{self.name}[S.{lev}]" for lev in self.levels[:-1]]
        ref = contrasts.reference.get(self.name, self.levels[0])
        if ref not in self.levels:
            raise DesignError(f"reference level {ref!r} not found in factor {self.name!r}")
        keep = [i for i, lev in enumerate(self.levels) if lev != ref]
        return np.eye(n)[:, keep], [f"{self.name}[{self.levels[i]}]" for i in keep]


@dataclass(frozen=True, eq=False)
class ZBlock:
    """Random-effects design for one term: ``n x (k * n_levels)``, level-major columns."""

    term: str
    grouping: tuple[str, ...]
    levels: tuple[str, ...]
    column_names: tuple[str, ...]
    correlated: bool
    codes: np.ndarray  # grouping level per row
    inner: np.ndarray  # n x k inner design
    matrix: sp.csc_matrix

    @property
    def k(self) -> int:
        return len(self.column_names)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def group_name(self) -> str:
        return ":".join(self.grouping)

    @property
    def n_coef(self) -> int:
        return self.k * self.n_levels


@dataclass(frozen=True)
class ThetaSlot:
    """Position of one covariance parameter in the lower-triangular factor of a term."""

    block: int
    row: int
    col: int

    @property
    def diagonal(self) -> bool:
        return self.row == self.col


@dataclass(frozen=True, eq=False)
class ModelMatrices:
    y: np.ndarray
    X: np.ndarray
    x_names: tuple[str, ...]
    x_terms: tuple[str, ...]  # term label per X column
    blocks: tuple[ZBlock, ...]
    theta_layout: tuple[ThetaSlot, ...]
    dropped_rows: np.ndarray
    ast: FormulaAst
    contrasts: Contrasts
    encodings: Mapping[str, VarEncoding]
    data: Dataset  # rows actually used

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def n_theta(self) -> int:
        return len(self.theta_layout)

    @property
    def q(self) -> int:
        return sum(b.n_coef for b in self.blocks)

    @property
    def Z(self) -> sp.csc_matrix:
        if not self.blocks:
            return sp.csc_matrix((self.n, 0))
        return sp.hstack([b.matrix for b in self.blocks], format="csc")

    def theta_lower_bounds(self) -> np.ndarray:
        return np.array([0.0 if s.diagonal else -np.inf for s in self.theta_layout])

    def theta_start(self) -> np.ndarray:
        return np.array([0.5 if s.diagonal else 0.0 for s in self.theta_layout])

    def lambda_factors(self, theta) -> list[np.ndarray]:
        """Lower-triangular relative covariance factor of every random term."""
        mats = [np.zeros((b.k, b.k)) for b in self.blocks]
        for value, slot in zip(theta, self.theta_layout):
            mats[slot.block][slot.row, slot.col] = value
        return mats


def count_random_effects(mats: ModelMatrices) -> int:
    """Total number of random-effect coefficients across all terms."""
    return sum(b.n_coef for b in mats.blocks)


def _encode_var(ds: Dataset, name: str, policy: str) -> VarEncoding:
    col = ds[name]
    if isinstance(col, FactorColumn):
        if policy != "none":
            raise DesignError(f"cannot centre factor column {name!r}")
        return VarEncoding(name, "factor", levels=col.droplevels().levels)
    values = col.values[~col.missing]
    if policy == "mean":
        center = float(values.mean())
    elif policy == "first":
        center = float(values.min())
    else:
        center = 0.0
    return VarEncoding(name, "numeric", center=center)


def _factor_codes(col, enc: VarEncoding) -> np.ndarray:
    if not isinstance(col, FactorColumn):
        raise DesignError(f"column {enc.name!r} was a factor when the model was built")
    index = {lev: i for i, lev in enumerate(enc.levels)}
    try:
        return np.array([index[lab] for lab in col.labels()], dtype=np.int64)
    except KeyError as exc:
        raise DesignError(f"unseen level {exc.args[0]!r} in factor {enc.name!r}") from None


def _term_columns(
    ds: Dataset,
    term: FixedTerm,
    encodings: Mapping[str, VarEncoding],
    contrasts: Contrasts,
    full_factor: bool,
) -> tuple[np.ndarray, list[str]]:
    parts = []
    for var in term.factors:
        enc = encodings[var.name]
        col = ds[var.name]
        if enc.kind == "numeric":
            if not isinstance(col, NumericColumn):
                raise DesignError(f"column {var.name!r} was numeric when the model was built")
            x = (col.values - enc.center) ** var.power
            parts.append((x[:, None], [str(var)]))
        else:
            if var.power != 1:
                raise DesignError(f"cannot raise factor {var.name!r} to a power")
            cmat, names = enc.contrast_matrix(contrasts, full=full_factor and term.order == 1)
            parts.append((cmat[_factor_codes(col, enc)], names))
    cols, names = [], []
    for combo in itertools.product(*[range(len(p[1])) for p in parts]):
        x = np.ones(ds.n_rows)
        for (mat, _), j in zip(parts, combo):
            x = x * mat[:, j]
        cols.append(x)
        names.append(":".join(p[1][j] for p, j in zip(parts, combo)))
    return np.column_stack(cols) if cols else np.empty((ds.n_rows, 0)), names


def linear_design(
    ds: Dataset,
    terms: TermList,
    encodings: Mapping[str, VarEncoding],
    contrasts: Contrasts,
) -> tuple[np.ndarray, list[str], list[str]]:
    """Columns for an intercept flag plus term list; returns (matrix, column names, term labels)."""
    blocks = []
    names: list[str] = []
    labels: list[str] = []
    if terms.intercept:
        blocks.append(np.ones((ds.n_rows, 1)))
        names.append("(Intercept)")
        labels.append("(Intercept)")
    full_used = terms.intercept
    for term in terms.terms:
        full = False
        if not full_used and term.order == 1 and encodings[term.factors[0].name].kind == "factor":
            full = full_used = True
        mat, cn = _term_columns(ds, term, encodings, contrasts, full)
        blocks.append(mat)
        names.extend(cn)
        labels.extend([str(term)] * len(cn))
    X = np.hstack(blocks) if blocks else np.empty((ds.n_rows, 0))
    return X, names, labels


def _check_rank(X: np.ndarray, names: list[str]) -> None:
    if X.shape[1] == 0:
        return
    _, r, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    tol = max(X.shape) * np.finfo(float).eps * (d[0] if d.size else 0.0)
    rank = int(np.sum(d > max(tol, 1e-10 * d[0])))
    if rank < X.shape[1]:
        raise RankDeficientError(sorted((names[i] for i in piv[rank:]), key=names.index))


def build_matrices(
    ds: Dataset,
    ast: FormulaAst,
    contrasts: Contrasts = TREATMENT,
    centering: Mapping[str, str] | None = None,
) -> ModelMatrices:
    """Assemble y, X and the per-term Z blocks.

    Rows with a missing value in any referenced column are dropped. Numeric
    predictors are centred (per ``centering``) before powers are taken.
    """
    ast = expand_terms(ast)
    centering = dict(centering or {})
    for var, policy in centering.items():
        if policy not in CENTERING_CHOICES:
            raise DesignError(f"unknown centering policy {policy!r} for {var!r}")
    referenced = ast.variables()
    for name in referenced:
        if name not in ds:
            raise DesignError(f"formula references unknown column {name!r}")
    for r in ast.random_terms:
        for g in r.grouping.factors:
            if not isinstance(ds[g], FactorColumn):
                raise DesignError(f"grouping column {g!r} must be a factor")

    missing = np.zeros(ds.n_rows, dtype=bool)
    for name in referenced:
        missing |= ds[name].missing
    if ast.response.log:
        resp = ds[ast.response.name]
        if isinstance(resp, NumericColumn) and np.any(resp.values[~missing] <= 0):
            raise DesignError(f"log() of non-positive values in {ast.response.name!r}")
    dropped = np.flatnonzero(missing)
    data = ds.take(~missing)
    if data.n_rows == 0:
        raise DesignError("no rows left after dropping missing values")

    resp = data[ast.response.name]
    if not isinstance(resp, NumericColumn):
        raise DesignError(f"response {ast.response.name!r} must be numeric")
    y = np.log(resp.values) if ast.response.log else resp.values.copy()

    predictors = [v for v in referenced[1:]]
    grouping_only = {g for r in ast.random_terms for g in r.grouping.factors}
    encodings = {}
    for name in predictors:
        if name in grouping_only and not _used_as_predictor(ast, name):
            continue
        encodings[name] = _encode_var(data, name, centering.get(name, "none"))
    unknown = set(centering) - set(encodings)
    if unknown:
        raise DesignError(f"centering requested for columns not used as predictors: {sorted(unknown)}")

    X, x_names, x_terms = linear_design(data, ast.fixed, encodings, contrasts)
    _check_rank(X, x_names)
    blocks, layout = _random_blocks(data, ast.random_terms, encodings, contrasts)
    return ModelMatrices(
        y=y,
        X=X,
        x_names=tuple(x_names),
        x_terms=tuple(x_terms),
        blocks=tuple(blocks),
        theta_layout=tuple(layout),
        dropped_rows=dropped,
        ast=ast,
        contrasts=contrasts,
        encodings=encodings,
        data=data,
    )


def _used_as_predictor(ast: FormulaAst, name: str) -> bool:
    terms = list(ast.fixed_terms) + [t for r in ast.random_terms for t in r.inner.terms]
    return any(name in t.variables for t in terms)


def _random_blocks(data, random_terms: tuple[RandomTerm, ...], encodings, contrasts, levels=None):
    blocks = []
    layout = []
    for b_index, r in enumerate(random_terms):
        inner, cnames, _ = linear_design(data, r.inner, encodings, contrasts)
        gcol = interaction_factor(data, r.grouping.factors)
        if levels is None:
            gcol = gcol.droplevels()
            glevels = gcol.levels
            if len(glevels) < 2:
                raise DesignError(f"grouping factor {r.grouping.name!r} has a single level")
            codes = gcol.codes.copy()
        else:
            glevels = levels[b_index]
            index = {lev: i for i, lev in enumerate(glevels)}
            codes = np.array([index.get(lab, -1) for lab in gcol.labels()], dtype=np.int64)
        k = inner.shape[1]
        n = data.n_rows
        ok = codes >= 0
        rows = np.repeat(np.flatnonzero(ok), k)
        cols = (codes[ok][:, None] * k + np.arange(k)[None, :]).ravel()
        vals = inner[ok].ravel()
        zmat = sp.csc_matrix((vals, (rows, cols)), shape=(n, k * len(glevels)))
        blocks.append(
            ZBlock(
                term=str(r),
                grouping=r.grouping.factors,
                levels=tuple(glevels),
                column_names=tuple(cnames),
                correlated=r.correlated,
                codes=codes,
                inner=inner,
                matrix=zmat,
            )
        )
        for j in range(k):
            for i in range(j, k):
                if r.correlated or i == j:
                    layout.append(ThetaSlot(b_index, i, j))
    return blocks, layout


def new_data_design(mats: ModelMatrices, ds: Dataset) -> tuple[np.ndarray, list[ZBlock]]:
    """X and Z blocks for fresh rows, encoded exactly as the training data.

    Grouping levels not seen in training get code -1 and an all-zero Z row.
    """
    ast = mats.ast
    for name in ast.variables()[1:]:
        if name not in ds:
            raise DesignError(f"new data lacks column {name!r}")
    X, _, _ = linear_design(ds, ast.fixed, mats.encodings, mats.contrasts)
    blocks, _ = _random_blocks(
        ds, ast.random_terms, mats.encodings, mats.contrasts, levels=[b.levels for b in mats.blocks]
    )
    return X, blocks


def alternate_fixed_design(mats: ModelMatrices, contrasts: Contrasts) -> tuple[np.ndarray, list[str], list[str]]:
    """Rebuild X on the training rows under a different contrast scheme."""
    return linear_design(mats.data, mats.ast.fixed, mats.encodings, contrasts)


def dump_matrices(mats: ModelMatrices, prefix) -> tuple[Path, Path]:
    """Write dense X and Z to ``<prefix>_X.csv`` and ``<prefix>_Z.csv``."""
    prefix = Path(prefix)
    x_path = prefix.with_name(prefix.name + "_X.csv")
    z_path = prefix.with_name(prefix.name + "_Z.csv")
    znames = [
        f"{b.group_name}[{lev}]:{c}" for b in mats.blocks for lev in b.levels for c in b.column_names
    ]
    for path, names, mat in ((x_path, mats.x_names, mats.X), (z_path, znames, mats.Z.toarray())):
        try:
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(names)
                w.writerows(mat.tolist())
        except OSError as exc:
            raise DataError(f"cannot write {path}: {exc}") from exc
    return x_path, z_path
