"""F-tests for fixed-effect terms with Satterthwaite denominator df, a classical
repeated-measures ANOVA used as a cross-check, and likelihood-ratio comparison."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy import stats

from .dataframe import Dataset
from .design import SUM, alternate_fixed_design
from .estimate import LmmFit, Profiler, fd_gradient_hessian, fd_steps


class InferenceError(ValueError):
    pass


# ---------------------------------------------------------------------------
# F distribution tail via the regularised incomplete beta function


def _betacf(a: float, b: float, x: float, eps: float = 1e-16, max_iter: int = 100000) -> float:
    """Continued fraction for I_x(a, b), modified Lentz evaluation."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    # the continued fraction converges fastest on this side of the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def f_sf(f: float, df1: float, df2: float) -> float:
    """Upper tail probability P(F > f) for F(df1, df2)."""
    if df1 <= 0 or df2 <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isnan(f):
        return math.nan
    if f <= 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    return betainc_reg(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f))


# ---------------------------------------------------------------------------
# tables


@dataclass(frozen=True)
class FTestRow:
    term: str
    f_value: float
    df1: int
    df2: float
    p_value: float
    note: str = ""

    def as_dict(self) -> dict:
        d = {"term": self.term, "F": _num(self.f_value), "df1": self.df1, "df2": _num(self.df2), "p": _num(self.p_value)}
        if self.note:
            d["note"] = self.note
        return d


def _num(x: float):
    return None if x is None or not math.isfinite(x) else float(x)


@dataclass(frozen=True)
class AnovaTable:
    rows: tuple[FTestRow, ...]
    source: str  # "MixedSatterthwaite" or "ClassicalRM"
    notes: tuple[str, ...] = field(default=())

    def __getitem__(self, term: str) -> FTestRow:
        for row in self.rows:
            if row.term == term:
                return row
        raise KeyError(term)

    @property
    def terms(self) -> list[str]:
        return [r.term for r in self.rows]

    def as_dict(self) -> dict:
        return {"source": self.source, "rows": [r.as_dict() for r in self.rows], "notes": list(self.notes)}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)

    def render(self, digits: int = 6) -> str:
        def g(x):
            return "undefined" if not math.isfinite(x) else f"{x:.{digits}g}"

        head = ("Term", "F", "Df1", "Df2", "p")
        body = [(r.term, g(r.f_value), str(r.df1), g(r.df2), g(r.p_value)) for r in self.rows]
        widths = [max(len(row[i]) for row in [head] + body) for i in range(5)]
        lines = [f"ANOVA ({self.source})"]
        for row in [head] + body:
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        lines.extend(f"note: {n}" for n in self.notes)
        for r in self.rows:
            if r.note:
                lines.append(f"note: {r.term}: {r.note}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# covariance of the variance parameters


@dataclass(frozen=True)
class VarparCovariance:
    """Asymptotic covariance of (theta, log sigma) from the deviance Hessian."""

    phi: np.ndarray
    hessian: np.ndarray
    cov: np.ndarray | None  # None when the Hessian is not positive definite
    profiler: Profiler

    @property
    def positive_definite(self) -> bool:
        return self.cov is not None


def varpar_covariance(fit: LmmFit, prof: Profiler | None = None) -> VarparCovariance:
    prof = prof or Profiler(fit.mats)
    method = fit.method
    nt = fit.mats.n_theta
    phi = np.concatenate([fit.theta, [0.5 * math.log(fit.sigma2)]])

    def dev(x):
        return prof.full_deviance(x[:nt], x[nt], method)

    _, H = fd_gradient_hessian(dev, phi, fd_steps(phi))
    H = 0.5 * (H + H.T)
    cov = None
    try:
        w = np.linalg.eigvalsh(H)
        if w.min() > 1e-8 * max(1.0, abs(w.max())):
            cov = 2.0 * scipy.linalg.inv(H)
    except np.linalg.LinAlgError:
        cov = None
    return VarparCovariance(phi, H, cov, prof)


def _vcov_at(prof: Profiler, phi: np.ndarray, nt: int) -> np.ndarray:
    return prof.vcov_beta(phi[:nt], math.exp(2.0 * phi[nt]))


def _vcov_jacobian(prof: Profiler, phi: np.ndarray, nt: int) -> np.ndarray:
    """Central-difference derivatives of Var(beta) w.r.t. each variance parameter."""
    steps = fd_steps(phi)
    out = []
    for i in range(len(phi)):
        e = np.zeros(len(phi))
        e[i] = steps[i]
        out.append((_vcov_at(prof, phi + e, nt) - _vcov_at(prof, phi - e, nt)) / (2 * steps[i]))
    return np.array(out)


def _combine_df(nu: np.ndarray) -> float:
    if len(nu) == 1:
        return float(nu[0])
    if np.all(np.abs(np.diff(nu)) < 1e-8):
        return float(np.mean(nu))
    if np.any(nu <= 2):
        return 2.0
    e = float(np.sum(nu / (nu - 2.0)))
    return 2.0 * e / (e - len(nu))


def term_contrasts(fit: LmmFit) -> list[tuple[str, np.ndarray]]:
    """Marginality-respecting hypothesis matrices, one per non-intercept term.

    A term's coefficients are set to zero under sum-to-zero coding and the
    hypothesis is mapped back to the fitted parameterisation; on balanced data
    this reproduces Type III sums of squares.
    """
    mats = fit.mats
    labels = list(mats.x_terms)
    terms = [t for t in dict.fromkeys(labels) if t != "(Intercept)"]
    X_alt, _, alt_labels = alternate_fixed_design(mats, SUM)
    T, *_ = np.linalg.lstsq(X_alt, mats.X, rcond=None)
    mapped = np.allclose(X_alt @ T, mats.X, atol=1e-8 * max(1.0, np.abs(mats.X).max()))
    out = []
    for term in terms:
        if mapped:
            idx = [i for i, lab in enumerate(alt_labels) if lab == term]
            L = np.eye(X_alt.shape[1])[idx] @ T
        else:
            idx = [i for i, lab in enumerate(labels) if lab == term]
            L = np.eye(mats.p)[idx]
        out.append((term, L))
    return out


def anova_satterthwaite(fit: LmmFit) -> AnovaTable:
    """Wald F per fixed term with Satterthwaite denominator df (REML or ML fit)."""
    if not fit.converged:
        raise InferenceError("fit did not converge")
    notes = []
    if fit.singular:
        notes.append("singular fit: " + ", ".join(f"{g} {n}" for g, n in fit.singular_components))
    contrasts = term_contrasts(fit)
    if not contrasts:
        return AnovaTable((), "MixedSatterthwaite", tuple(notes))
    mats = fit.mats
    nt = mats.n_theta
    vp = varpar_covariance(fit)
    fallback = not vp.positive_definite
    if fallback:
        notes.append("variance-parameter Hessian not positive definite; df2 set to residual df")
    else:
        jac = _vcov_jacobian(vp.profiler, vp.phi, nt)
    V = fit.vcov
    rows = []
    for term, L in contrasts:
        q = L.shape[0]
        LVL = L @ V @ L.T
        LVL = 0.5 * (LVL + LVL.T)
        d, P = np.linalg.eigh(LVL)
        keep = d > 1e-12 * max(d.max(), 1e-300)
        d, P = d[keep], P[:, keep]
        q = int(keep.sum())
        PL = P.T @ L
        est = PL @ fit.beta
        f_value = float(np.sum(est**2 / d) / q)
        if fallback:
            df2 = float(mats.n - mats.p)
        else:
            nu = []
            for i in range(q):
                grad = np.einsum("j,kjl,l->k", PL[i], jac, PL[i])
                denom = float(grad @ vp.cov @ grad)
                nu.append(2.0 * d[i] ** 2 / denom if denom > 0 else math.inf)
            df2 = _combine_df(np.array(nu))
            if not math.isfinite(df2):
                df2 = float(mats.n - mats.p)
        rows.append(FTestRow(term, f_value, q, df2, f_sf(f_value, q, df2)))
    return AnovaTable(tuple(rows), "MixedSatterthwaite", tuple(notes))


# ---------------------------------------------------------------------------
# classical repeated-measures ANOVA


def _centered(a: np.ndarray, axes) -> np.ndarray:
    for ax in axes:
        a = a - a.mean(axis=ax, keepdims=True)
    return a


def _effect_ss(cells: np.ndarray, keep: tuple[int, ...]) -> float:
    """Sum of squares for the interaction of the axes in ``keep``."""
    drop = tuple(i for i in range(cells.ndim) if i not in keep)
    marg = cells.mean(axis=drop, keepdims=True) if drop else cells
    eff = _centered(marg, keep)
    return float(np.sum(eff**2)) * (cells.size / marg.size)


def classical_rm_anova(ds: Dataset, dv: str, subject: str, within: list[str] | tuple[str, ...]) -> AnovaTable:
    """Fully within-subject ANOVA by sums-of-squares partitioning.

    Each effect is tested against its interaction with subject. Requires
    exactly one observation per subject and cell.
    """
    within = list(within)
    if not within:
        raise InferenceError("at least one within-subject factor is required")
    y_col = ds.numeric(dv)
    subj = ds.factor(subject)
    facs = [ds.factor(w) for w in within]
    missing = y_col.missing | subj.missing
    for f in facs:
        missing = missing | f.missing
    if np.any(missing):
        raise InferenceError("classical RM-ANOVA requires complete data (missing values present)")
    subj = subj.droplevels()
    facs = [f.droplevels() for f in facs]
    n_subj = len(subj.levels)
    if n_subj < 2:
        raise InferenceError("at least 2 subjects are required")
    shape = (n_subj,) + tuple(len(f.levels) for f in facs)
    counts = np.zeros(shape, dtype=int)
    cells = np.zeros(shape)
    index = (subj.codes,) + tuple(f.codes for f in facs)
    np.add.at(counts, index, 1)
    np.add.at(cells, index, y_col.values)
    if np.any(counts != 1):
        raise InferenceError("design is unbalanced: each subject needs exactly one observation per cell")
    rows = []
    k = len(facs)
    subsets = [s for r in range(1, k + 1) for s in itertools.combinations(range(1, k + 1), r)]
    subsets.sort(key=lambda s: (len(s), s))
    for s in subsets:
        name = ":".join(within[i - 1] for i in s)
        df1 = int(np.prod([shape[i] - 1 for i in s]))
        df2 = df1 * (n_subj - 1)
        ms_eff = _effect_ss(cells, s) / df1
        ms_err = _effect_ss(cells, (0,) + s) / df2
        scale = max(1.0, float(np.abs(cells).max()) ** 2)
        if ms_err <= 1e-28 * scale:
            if ms_eff <= 1e-28 * scale:
                rows.append(FTestRow(name, math.nan, df1, float(df2), math.nan, "undefined (0/0)"))
            else:
                rows.append(FTestRow(name, math.inf, df1, float(df2), 0.0, "zero error variance"))
            continue
        f_value = ms_eff / ms_err
        rows.append(FTestRow(name, f_value, df1, float(df2), f_sf(f_value, df1, df2)))
    return AnovaTable(tuple(rows), "ClassicalRM")


# ---------------------------------------------------------------------------
# likelihood-ratio comparison


@dataclass(frozen=True)
class LrtResult:
    smaller: str
    larger: str
    method: str
    deviance_small: float
    deviance_large: float
    chi2: float
    df: int
    p_value: float
    boundary: bool

    def as_dict(self) -> dict:
        return {
            "smaller": self.smaller,
            "larger": self.larger,
            "method": self.method,
            "deviance": [self.deviance_small, self.deviance_large],
            "chi2": self.chi2,
            "df": self.df,
            "p": self.p_value,
            "boundary_caveat": self.boundary,
        }

    def render(self, digits: int = 6) -> str:
        g = lambda x: f"{x:.{digits}g}"  # noqa: E731
        lines = [
            f"Likelihood-ratio test ({self.method})",
            f"  smaller: {self.smaller}  deviance {g(self.deviance_small)}",
            f"  larger:  {self.larger}  deviance {g(self.deviance_large)}",
            f"  Chisq = {g(self.chi2)}, Df = {self.df}, p = {g(self.p_value)}",
        ]
        if self.boundary:
            lines.append("note: a variance parameter is tested on its boundary; the chi-square p-value is conservative")
        return "\n".join(lines)


def _random_signature(fit: LmmFit) -> list[tuple[str, frozenset, bool]]:
    return [(b.group_name, frozenset(b.column_names), b.correlated) for b in fit.mats.blocks]


def _random_nested(small: LmmFit, large: LmmFit) -> bool:
    big = _random_signature(large)
    used = set()
    for g, cols, corr in _random_signature(small):
        match = None
        for i, (g2, cols2, corr2) in enumerate(big):
            if i in used or g2 != g or not cols <= cols2:
                continue
            if corr and len(cols) > 1 and not corr2:
                continue
            match = i
            break
        if match is None:
            return False
        used.add(match)
    return True


def compare_models(fit_a: LmmFit, fit_b: LmmFit) -> LrtResult:
    """Likelihood-ratio test between two nested fits of the same response rows."""
    if fit_a.method != fit_b.method:
        raise InferenceError("both models must be fitted with the same method")
    ya, yb = fit_a.mats.y, fit_b.mats.y
    if ya.shape != yb.shape or not np.array_equal(ya, yb):
        raise InferenceError("models were fitted to different response rows")
    small, large = sorted((fit_a, fit_b), key=lambda f: f.n_params)
    fixed_small = set(small.mats.x_names)
    fixed_large = set(large.mats.x_names)
    if small.method == "REML" and fixed_small != fixed_large:
        raise InferenceError(
            "REML likelihoods are not comparable across different fixed effects; refit both models with ML"
        )
    if not fixed_small <= fixed_large or not _random_nested(small, large):
        raise InferenceError("models are not nested")
    chi2 = max(small.deviance - large.deviance, 0.0)
    df = large.n_params - small.n_params
    p = float(stats.chi2.sf(chi2, df)) if df > 0 else 1.0
    boundary = large.mats.n_theta > small.mats.n_theta
    return LrtResult(
        str(small.mats.ast), str(large.mats.ast), small.method, small.deviance, large.deviance, chi2, df, p, boundary
    )


# ---------------------------------------------------------------------------
# standard errors of variance components


@dataclass(frozen=True)
class VarianceComponentSE:
    label: str
    estimate: float
    se: float


def variance_component_se(fit: LmmFit) -> list[VarianceComponentSE]:
    """Delta-method SEs for random-effect SDs, correlations and the residual SD."""
    vp = varpar_covariance(fit)
    mats = fit.mats
    nt = mats.n_theta
    labels: list[str] = []

    def transform(phi):
        sigma = math.exp(phi[nt])
        out = []
        for block, lam in zip(mats.blocks, mats.lambda_factors(phi[:nt])):
            cov = sigma**2 * lam @ lam.T
            sd = np.sqrt(np.maximum(np.diag(cov), 0.0))
            for i, c in enumerate(block.column_names):
                out.append(sd[i])
            for i in range(block.k):
                for j in range(i):
                    out.append(cov[i, j] / (sd[i] * sd[j]) if sd[i] > 0 and sd[j] > 0 else 0.0)
        out.append(sigma)
        return np.array(out)

    for block in mats.blocks:
        for c in block.column_names:
            labels.append(f"sd {block.group_name} {c}")
        for i in range(block.k):
            for j in range(i):
                labels.append(f"cor {block.group_name} {block.column_names[j]},{block.column_names[i]}")
    labels.append("sd Residual")
    est = transform(vp.phi)
    if vp.cov is None:
        se = np.full(len(est), math.nan)
    else:
        steps = fd_steps(vp.phi)
        J = np.zeros((len(est), len(vp.phi)))
        for i in range(len(vp.phi)):
            e = np.zeros(len(vp.phi))
            e[i] = steps[i]
            J[:, i] = (transform(vp.phi + e) - transform(vp.phi - e)) / (2 * steps[i])
        se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", J, vp.cov, J), 0.0))
    return [VarianceComponentSE(lab, float(e), float(s)) for lab, e, s in zip(labels, est, se)]
