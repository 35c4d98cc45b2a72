"""Negative exponential growth curves, y = alpha + delta * exp(lambda * t).

Per-subject curves are fitted by Levenberg-Marquardt with an analytic
Jacobian; the population summary is a two-stage estimate (mean of the
converged subject estimates plus per-subject deviates), not a full
nonlinear mixed model.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .dataframe import Dataset

MIN_POINTS = 4


class NonlinearError(ValueError):
    pass


@dataclass(frozen=True)
class NegExpParams:
    alpha: float  # asymptote
    delta: float  # change; value at t = 0 is alpha + delta
    lam: float  # rate, negative for approach to the asymptote

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.delta, self.lam], dtype=float)

    @classmethod
    def from_array(cls, a) -> "NegExpParams":
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def as_dict(self) -> dict:
        return {"alpha": self.alpha, "delta": self.delta, "lambda": self.lam}


DEFAULT_START = NegExpParams(80.0, -70.0, -1.0)


def negexp_predict(p: NegExpParams, t):
    return p.alpha + p.delta * np.exp(p.lam * np.asarray(t, dtype=float))


def negexp_jacobian(p: NegExpParams, t) -> np.ndarray:
    """Columns d/dalpha, d/ddelta, d/dlambda at each time point."""
    t = np.asarray(t, dtype=float)
    e = np.exp(p.lam * t)
    return np.column_stack([np.ones_like(t), e, p.delta * t * e])


@dataclass(frozen=True)
class SubjectFit:
    params: NegExpParams
    sse: float
    converged: bool
    singular: bool
    iterations: int
    message: str

    @property
    def usable(self) -> bool:
        return self.converged and not self.singular


def _is_singular(J: np.ndarray, tol: float = 1e-8) -> bool:
    norms = np.linalg.norm(J, axis=0)
    if np.any(norms == 0) or not np.all(np.isfinite(J)):
        return True
    s = np.linalg.svd(J / norms, compute_uv=False)
    return s[-1] < tol * s[0]


def fit_negexp_subject(
    times,
    y,
    start: NegExpParams = DEFAULT_START,
    max_iter: int = 500,
    sse_tol: float = 1e-10,
    grad_tol: float = 1e-8,
) -> SubjectFit:
    """Least-squares negative exponential fit for one subject.

    Returns the best parameters found; ``converged`` is False when the
    iteration or damping budget runs out first.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = np.isfinite(t) & np.isfinite(y)
    t, y = t[ok], y[ok]
    if len(t) < MIN_POINTS:
        raise NonlinearError(f"need at least {MIN_POINTS} observed points, got {len(t)}")
    if np.ptp(t) == 0:
        raise NonlinearError("all time points are equal")
    x = start.as_array()
    p = NegExpParams.from_array(x)
    r = y - negexp_predict(p, t)
    sse = float(r @ r)
    mu = 1e-3
    converged = False
    message = "iteration limit reached"
    it = 0
    for it in range(1, max_iter + 1):
        J = negexp_jacobian(p, t)
        g = J.T @ r
        if np.linalg.norm(g) < grad_tol:
            converged, message = True, "gradient below tolerance"
            break
        JtJ = J.T @ J
        diag = np.maximum(np.diag(JtJ), 1e-12)
        accepted = False
        while mu <= 1e10:
            try:
                step = np.linalg.solve(JtJ + mu * np.diag(diag), g)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            trial = NegExpParams.from_array(x + step)
            rt = y - negexp_predict(trial, t)
            sse_t = float(rt @ rt)
            if np.isfinite(sse_t) and sse_t <= sse:
                accepted = True
                break
            mu *= 10
        if not accepted:
            message = "damping limit reached"
            break
        change = (sse - sse_t) / max(sse, 1e-300)
        x, p, r, sse = x + step, trial, rt, sse_t
        mu = max(mu * 0.1, 1e-15)
        if change < sse_tol:
            converged, message = True, "relative SSE change below tolerance"
            break
    # delta ~ 0 leaves the rate unidentified even if the scaled Jacobian looks fine
    singular = bool(abs(p.delta) < 1e-6 * max(1.0, abs(p.alpha)) or _is_singular(negexp_jacobian(p, t)))
    if singular:
        message += "; parameters not identifiable (singular Jacobian)"
    return SubjectFit(p, sse, converged, singular, it, message)


@dataclass(frozen=True)
class NegExpPopulationFit:
    fixed: NegExpParams
    fixed_sem: np.ndarray
    subjects: tuple[str, ...]  # subjects used in the summary
    estimates: np.ndarray  # n_subjects x 3, stage-one estimates
    deviates: np.ndarray  # estimates - fixed
    deviate_cov: np.ndarray
    sse: dict[str, float]
    converged: dict[str, bool]
    excluded: tuple[str, ...]

    def subject_params(self, subject: str) -> NegExpParams:
        i = self.subjects.index(subject)
        return NegExpParams.from_array(self.fixed.as_array() + self.deviates[i])

    def as_dict(self) -> dict:
        names = ("alpha", "delta", "lambda")
        rows = []
        for i, s in enumerate(self.subjects):
            est = self.estimates[i]
            rows.append(
                {
                    "subject": s,
                    **{n: float(v) for n, v in zip(names, est)},
                    "deviate": {n: float(v) for n, v in zip(names, self.deviates[i])},
                    "sse": self.sse[s],
                    "converged": self.converged[s],
                }
            )
        return {
            "method": "two-stage (per-subject least squares, then mean and covariance of estimates)",
            "fixed": self.fixed.as_dict(),
            "fixed_sem": {n: float(v) for n, v in zip(names, self.fixed_sem)},
            "subjects": rows,
            "deviate_cov": self.deviate_cov.tolist(),
            "excluded": list(self.excluded),
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)


def _exact_deviates(est: np.ndarray, fixed: np.ndarray) -> np.ndarray:
    """est - fixed, nudged by ulps so that fixed + deviate == est bit for bit."""
    dev = est - fixed
    for _ in range(4):
        off = fixed + dev != est
        if not off.any():
            break
        toward = np.where(fixed + dev < est, np.inf, -np.inf)
        dev = np.where(off, np.nextafter(dev, toward), dev)
    return dev


def fit_negexp_population(
    ds: Dataset,
    dv: str,
    time: str,
    subject: str,
    start: NegExpParams = DEFAULT_START,
) -> NegExpPopulationFit:
    y = ds.numeric(dv)
    t = ds.numeric(time)
    subj = ds.factor(subject)
    fits: dict[str, SubjectFit] = {}
    excluded = []
    for code, label in enumerate(subj.levels):
        rows = (subj.codes == code) & ~subj.missing & ~y.missing & ~t.missing
        if not rows.any():
            continue
        try:
            fits[label] = fit_negexp_subject(t.values[rows], y.values[rows], start)
        except NonlinearError:
            excluded.append(label)
            continue
        if not fits[label].usable:
            excluded.append(label)
    used = [s for s in fits if s not in excluded]
    if len(used) < 2:
        raise NonlinearError(f"need at least 2 converged subjects, got {len(used)}")
    est = np.array([fits[s].params.as_array() for s in used])
    fixed = est.mean(axis=0)
    dev = _exact_deviates(est, fixed)
    cov = np.cov(dev, rowvar=False, ddof=1)
    sem = est.std(axis=0, ddof=1) / math.sqrt(len(used))
    return NegExpPopulationFit(
        fixed=NegExpParams.from_array(fixed),
        fixed_sem=sem,
        subjects=tuple(used),
        estimates=est,
        deviates=dev,
        deviate_cov=cov,
        sse={s: f.sse for s, f in fits.items()},
        converged={s: f.usable for s, f in fits.items()},
        excluded=tuple(excluded),
    )
