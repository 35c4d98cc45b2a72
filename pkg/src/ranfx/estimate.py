"""ML/REML fitting of linear mixed models by profiled-deviance optimisation.

The random effects are written ``b = Lambda(theta) u`` with spherical ``u``;
for a fixed ``theta`` the coefficients come from the penalised least squares
problem ``min ||y - X beta - Z Lambda u||^2 + ||u||^2`` and the residual
variance is profiled out in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dataframe import Dataset
from .design import DesignError, ModelMatrices, count_random_effects, new_data_design

DENSE_LIMIT = 3000  # random-effect count above which the sparse factorisation is used (measured crossover)
QUASI_NEWTON_MIN_THETA = 8  # the simplex alone crawls in this many dimensions
LOG_2PI = math.log(2.0 * math.pi)


class FitError(RuntimeError):
    pass


class OverSpecifiedError(FitError):
    def __init__(self, n_obs: int, n_ranef: int, term: str):
        self.n_obs = n_obs
        self.n_ranef = n_ranef
        self.term = term
        super().__init__(
            f"number of observations (={n_obs}) <= number of random effects (={n_ranef}) "
            f"for term {term}; the random-effects parameters and the residual variance "
            "are probably unidentifiable"
        )


class ConvergenceError(FitError):
    def __init__(self, message: str, theta: np.ndarray, deviance: float):
        self.theta = theta
        self.deviance = deviance
        super().__init__(f"{message} (best deviance {deviance:.6g})")


class DevianceError(FitError):
    pass


@dataclass(frozen=True)
class FitOptions:
    method: str = "REML"
    max_evals: int = 10_000
    rel_tol: float = 1e-9
    singular_tol: float = 1e-4
    starts: tuple[int, ...] = ()  # extra seeded starting points

    def __post_init__(self):
        method = self.method.upper()
        if method not in ("ML", "REML"):
            raise ValueError(f"method must be ML or REML, not {self.method!r}")
        object.__setattr__(self, "method", method)
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")
        if self.max_evals < 1:
            raise ValueError("max_evals must be at least 1")


@dataclass
class _PLS:
    """Penalised least squares solution for one theta."""

    logdet_l: float  # log |Lambda' Z' Z Lambda + I|
    logdet_rx: float  # log |X' V^-1 X| on the sigma = 1 scale
    r2: float  # penalised residual sum of squares
    beta: np.ndarray
    u: np.ndarray
    rx_chol: np.ndarray  # upper Cholesky factor of the Schur complement


class Profiler:
    """Cached cross-products and the per-theta penalised solve for one model."""

    def __init__(self, mats: ModelMatrices):
        self.mats = mats
        X, y = mats.X, mats.y
        Z = mats.Z
        self.n, self.p = X.shape
        self.q = Z.shape[1]
        self.X, self.y, self.Z = X, y, Z
        self.ZtZ = (Z.T @ Z).tocsc()
        self.ZtX = np.asarray(Z.T @ X)
        self.Zty = np.asarray(Z.T @ y).ravel()
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        var_y = float(np.var(y))
        self.sigma2_floor = 1e-10 * (var_y if var_y > 0 else 1.0)
        rows, cols, tidx = [], [], []
        offset = 0
        slots_by_block: dict[int, list[tuple[int, int, int]]] = {}
        for t, slot in enumerate(mats.theta_layout):
            slots_by_block.setdefault(slot.block, []).append((slot.row, slot.col, t))
        for b_index, block in enumerate(mats.blocks):
            k = block.k
            base = offset + k * np.arange(block.n_levels)
            for r, c, t in slots_by_block.get(b_index, []):
                rows.append(base + r)
                cols.append(base + c)
                tidx.append(np.full(block.n_levels, t))
            offset += block.n_coef
        lam_rows = np.concatenate(rows) if rows else np.empty(0, dtype=int)
        lam_cols = np.concatenate(cols) if cols else np.empty(0, dtype=int)
        lam_tidx = np.concatenate(tidx) if tidx else np.empty(0, dtype=int)
        # fixed CSR pattern of Lambda'; each solve only refreshes the values
        pattern = sp.csr_matrix(
            (np.arange(1.0, len(lam_tidx) + 1), (lam_cols, lam_rows)), shape=(self.q, self.q)
        )
        self._lt_indices, self._lt_indptr = pattern.indices, pattern.indptr
        self._lt_tidx = lam_tidx[pattern.data.astype(int) - 1]
        self.dense = self.q <= DENSE_LIMIT
        if self.dense:
            self.ZtZ_dense = self.ZtZ.toarray()
            self._eye = np.eye(self.q)
        self.n_evals = 0

    def dof(self, method: str) -> int:
        return self.n - self.p if method == "REML" else self.n

    def lam_t(self, theta) -> sp.csr_matrix:
        theta = np.asarray(theta, dtype=float)
        return sp.csr_matrix(
            (theta[self._lt_tidx], self._lt_indices, self._lt_indptr), shape=(self.q, self.q)
        )

    def lam(self, theta) -> sp.csc_matrix:
        return self.lam_t(theta).T

    def solve(self, theta) -> _PLS:
        self.n_evals += 1
        p = self.p
        if self.q and self.dense:
            lt = self.lam_t(theta)
            ltzx = lt @ self.ZtX
            ltzy = lt @ self.Zty
            A = lt @ (lt @ self.ZtZ_dense).T + self._eye
            try:
                cf = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise DevianceError(f"penalised system not positive definite: {exc}") from exc
            logdet_l = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
            sol = scipy.linalg.cho_solve(cf, np.column_stack([ltzx, ltzy]), check_finite=False)
        elif self.q:
            lt = self.lam_t(theta)
            lam = lt.T
            A = (lt @ self.ZtZ @ lam).tocsc() + sp.identity(self.q, format="csc")
            ltzx = np.asarray(lt @ self.ZtX)
            ltzy = np.asarray(lt @ self.Zty).ravel()
            lu = spla.splu(
                A,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
            diag = lu.U.diagonal()
            if np.any(diag <= 0):
                raise DevianceError("penalised system not positive definite")
            logdet_l = float(np.sum(np.log(diag)))
            sol = lu.solve(np.column_stack([ltzx, ltzy]))
        if self.q:
            sx, sy = sol[:, :p], sol[:, p]
            M = self.XtX - ltzx.T @ sx
            m = self.Xty - ltzx.T @ sy
        else:
            logdet_l = 0.0
            sx = np.zeros((0, p))
            sy = np.zeros(0)
            ltzy = np.zeros(0)
            M, m = self.XtX, self.Xty
        if p:
            try:
                rx = scipy.linalg.cholesky(M, lower=False, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise DevianceError("fixed-effects Schur complement not positive definite") from exc
            beta = scipy.linalg.cho_solve((rx, False), m, check_finite=False)
            logdet_rx = 2.0 * float(np.sum(np.log(np.diag(rx))))
        else:
            rx = np.zeros((0, 0))
            beta = np.zeros(0)
            logdet_rx = 0.0
        u = sy - sx @ beta
        # explicit residual; yty minus cross-products cancels badly
        resid = self.y - self.X @ beta
        if self.q:
            resid = resid - self.Z @ (u @ lt)
        r2 = float(resid @ resid) + float(u @ u)
        return _PLS(logdet_l, logdet_rx, max(r2, 0.0), beta, u, rx)

    def sigma2(self, pls: _PLS, method: str) -> float:
        return max(pls.r2 / self.dof(method), self.sigma2_floor)

    def deviance(self, theta, method: str) -> float:
        """-2 log (restricted) likelihood with beta and sigma profiled out."""
        pls = self.solve(theta)
        dof = self.dof(method)
        s2 = self.sigma2(pls, method)
        dev = pls.logdet_l + dof * (LOG_2PI + math.log(s2)) + pls.r2 / s2
        if method == "REML":
            dev += pls.logdet_rx
        return dev

    def full_deviance(self, theta, log_sigma: float, method: str) -> float:
        """Deviance as a function of theta and log(sigma), without profiling sigma."""
        pls = self.solve(theta)
        s2 = math.exp(2.0 * log_sigma)
        dev = pls.logdet_l + self.dof(method) * (LOG_2PI + math.log(s2)) + pls.r2 / s2
        if method == "REML":
            dev += pls.logdet_rx
        return dev

    def vcov_beta(self, theta, sigma2: float) -> np.ndarray:
        pls = self.solve(theta)
        inv = scipy.linalg.cho_solve((pls.rx_chol, False), np.eye(self.p), check_finite=False)
        return sigma2 * inv


def profiled_deviance(mats: ModelMatrices, theta, method: str = "REML") -> float:
    """Profiled deviance of the model at covariance parameters ``theta``."""
    method = method.upper()
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (mats.n_theta,):
        raise ValueError(f"theta must have length {mats.n_theta}")
    if np.any(theta < mats.theta_lower_bounds()):
        raise ValueError("theta violates its lower bounds")
    return Profiler(mats).deviance(theta, method)


@dataclass(frozen=True)
class TermCovariance:
    group: str
    term: str
    names: tuple[str, ...]
    cov: np.ndarray

    @property
    def variances(self) -> np.ndarray:
        return np.diag(self.cov).copy()

    @property
    def sds(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.variances, 0.0))

    @property
    def corr(self) -> np.ndarray:
        sd = self.sds
        with np.errstate(invalid="ignore", divide="ignore"):
            c = self.cov / np.outer(sd, sd)
        c[~np.isfinite(c)] = 0.0
        np.fill_diagonal(c, 1.0)
        return c


@dataclass(frozen=True, eq=False)
class LmmFit:
    mats: ModelMatrices
    options: FitOptions
    theta: np.ndarray
    beta: np.ndarray
    sigma2: float
    cov_terms: tuple[TermCovariance, ...]
    b: tuple[np.ndarray, ...]  # conditional modes per term, n_levels x k
    fitted: np.ndarray
    residuals: np.ndarray
    deviance: float
    vcov: np.ndarray
    converged: bool
    n_evals: int
    message: str
    singular: bool
    singular_components: tuple[tuple[str, str], ...]
    warnings: tuple[str, ...] = field(default=())

    @property
    def method(self) -> str:
        return self.options.method

    @property
    def beta_names(self) -> tuple[str, ...]:
        return self.mats.x_names

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)

    @property
    def n_params(self) -> int:
        return self.mats.p + self.mats.n_theta + 1

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.vcov))

    def coef(self) -> dict[str, float]:
        return dict(zip(self.beta_names, self.beta.tolist()))

    def loglik(self) -> float:
        return -0.5 * self.deviance

    def summary_dict(self) -> dict:
        random = []
        for tc in self.cov_terms:
            corr = tc.corr
            for i, name in enumerate(tc.names):
                random.append(
                    {
                        "group": tc.group,
                        "name": name,
                        "variance": float(tc.variances[i]),
                        "sd": float(tc.sds[i]),
                        "correlation": [float(corr[i, j]) for j in range(i)],
                    }
                )
        random.append(
            {"group": "Residual", "name": "", "variance": self.sigma2, "sd": self.sigma, "correlation": []}
        )
        return {
            "formula": str(self.mats.ast),
            "method": self.method,
            "deviance": self.deviance,
            "n_obs": self.mats.n,
            "groups": {b.group_name: b.n_levels for b in self.mats.blocks},
            "random_effects": random,
            "fixed_effects": [
                {"name": n, "estimate": float(e), "se": float(s)}
                for n, e, s in zip(self.beta_names, self.beta, self.se)
            ],
            "converged": self.converged,
            "n_evals": self.n_evals,
            "singular": self.singular,
            "singular_components": [list(c) for c in self.singular_components],
            "warnings": list(self.warnings),
        }


def _check_identifiable(mats: ModelMatrices) -> None:
    for block in mats.blocks:
        if block.n_coef >= mats.n:
            raise OverSpecifiedError(mats.n, block.n_coef, f"({block.term[1:-1]})")


def _nelder_mead(f, x0, lower, max_evals, rel_tol):
    bounds = scipy.optimize.Bounds(lower, np.full_like(lower, np.inf))
    n = len(x0)
    best_x, best_f = np.array(x0, float), f(x0)
    evals = 1
    converged = False
    for attempt in range(4):
        step = 0.25 if attempt == 0 else max(0.02, 0.1 ** attempt)
        simplex = [best_x]
        for i in range(n):
            v = best_x.copy()
            v[i] += step
            simplex.append(v)
        budget = max_evals - evals
        if budget <= n + 1:
            break
        res = scipy.optimize.minimize(
            f,
            best_x,
            method="Nelder-Mead",
            bounds=bounds,
            options={
                "initial_simplex": np.array(simplex),
                "maxfev": budget,
                "xatol": 1e-6,
                "fatol": rel_tol * max(1.0, abs(best_f)),
                "adaptive": n > 3,
            },
        )
        evals += res.nfev
        improved = best_f - res.fun
        if res.fun <= best_f:
            best_x, best_f = np.array(res.x), float(res.fun)
        if res.status == 0 and improved <= rel_tol * max(1.0, abs(best_f)) * 10:
            converged = True
            break
    return best_x, best_f, evals, converged


def _quasi_newton(f, x0, lower, max_evals, rel_tol):
    """Bounded L-BFGS-B on finite-difference gradients."""
    bounds = [(lo if np.isfinite(lo) else None, None) for lo in lower]
    res = scipy.optimize.minimize(
        f,
        np.asarray(x0, float),
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxfun": max_evals, "ftol": rel_tol * 1e-3, "gtol": 1e-8},
    )
    return np.array(res.x), float(res.fun), res.nfev, res.status == 0


def _hybrid(f, x0, lower, max_evals, rel_tol):
    # quasi-Newton gets close quickly but can stall on badly scaled
    # parameters; the simplex finishes from wherever it stopped
    xq, _, nq, _ = _quasi_newton(f, x0, lower, max_evals // 2, rel_tol)
    x, d, ne, ok = _nelder_mead(f, xq, lower, max_evals - nq, rel_tol)
    return x, d, nq + ne, ok


def _local_min(f, x0, lower, max_evals, rel_tol):
    paths = [_nelder_mead, _hybrid]
    if len(x0) >= QUASI_NEWTON_MIN_THETA:
        paths.reverse()
    x, d, n, ok = paths[0](f, x0, lower, max_evals, rel_tol)
    if not ok:
        x2, d2, n2, ok2 = paths[1](f, x0, lower, max_evals, rel_tol)
        n += n2
        if d2 <= d:
            x, d, ok = x2, d2, ok2
    return x, d, n, ok


def fd_steps(x, rel: float = 1e-4) -> np.ndarray:
    return rel * np.maximum(np.abs(np.asarray(x, float)), 1.0)


def fd_gradient_hessian(f, x, steps, f0=None):
    """Central-difference gradient and Hessian of a scalar function."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    f0 = f(x) if f0 is None else f0
    g = np.zeros(n)
    H = np.zeros((n, n))
    fp, fm = np.zeros(n), np.zeros(n)
    for i in range(n):
        e = np.zeros(n)
        e[i] = steps[i]
        fp[i], fm[i] = f(x + e), f(x - e)
        g[i] = (fp[i] - fm[i]) / (2 * steps[i])
        H[i, i] = (fp[i] - 2 * f0 + fm[i]) / steps[i] ** 2
    for i in range(n):
        for j in range(i):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i], ej[j] = steps[i], steps[j]
            val = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * steps[i] * steps[j])
            H[i, j] = H[j, i] = val
    return g, H


def _newton_polish(f, theta, dev, lower, max_iter: int = 6):
    """Refine an interior optimum with finite-difference Newton steps."""
    theta = theta.copy()
    for _ in range(max_iter):
        free = np.flatnonzero(~((lower == 0.0) & (theta <= 0.0)))
        if free.size == 0:
            break

        def fsub(z):
            t = theta.copy()
            t[free] = z
            return f(t)

        z0 = theta[free]
        g, H = fd_gradient_hessian(fsub, z0, fd_steps(z0, 1e-4), dev)
        try:
            step = -scipy.linalg.solve(H, g, assume_a="pos")
        except (np.linalg.LinAlgError, ValueError):
            break
        alpha = 1.0
        lb = lower[free]
        neg = step < 0
        if np.any(neg):
            room = (z0[neg] - lb[neg]) / -step[neg]
            alpha = min(1.0, float(room.min()))
        improved = False
        noise = 1e-13 * max(1.0, abs(dev))
        for _ in range(12):
            trial = np.maximum(z0 + alpha * step, lb)
            d = fsub(trial)
            if d <= dev + noise:
                theta[free] = trial
                dev = min(d, dev)
                improved = True
                break
            alpha *= 0.5
        if not improved or np.max(np.abs(alpha * step)) < 1e-10 * max(1.0, np.max(np.abs(z0))):
            break
    return theta, dev


def _snap_to_boundary(f, theta, dev, lower, tol=1e-3):
    """Try setting near-zero diagonal parameters to exactly zero."""
    theta = theta.copy()
    for i in np.argsort(theta):
        if lower[i] == 0.0 and 0.0 < theta[i] < tol:
            trial = theta.copy()
            trial[i] = 0.0
            d = f(trial)
            if d <= dev + 1e-9 * max(1.0, abs(dev)):
                theta, dev = trial, min(d, dev)
    return theta, dev


def _escape_boundary(f, theta, dev, lower):
    """Return a point off the boundary with lower deviance, if one is nearby.

    The simplex can collapse onto a zero variance even when the deviance
    decreases inward; the deviance is even in a zero diagonal, so a
    one-sided probe at a few distances is used instead of a gradient.
    """
    for i in np.flatnonzero((lower == 0.0) & (theta <= 0.0)):
        for h in (1e-3, 1e-2, 1e-1):
            trial = theta.copy()
            trial[i] = h
            if f(trial) < dev - 1e-10 * max(1.0, abs(dev)):
                return trial
    return None


def fit_lmm(mats: ModelMatrices, opts: FitOptions | None = None) -> LmmFit:
    """Fit by minimising the profiled deviance over the covariance parameters.

    Raises OverSpecifiedError when any random term has at least as many
    coefficients as there are observations, and ConvergenceError when the
    evaluation budget runs out.
    """
    opts = opts or FitOptions()
    _check_identifiable(mats)
    prof = Profiler(mats)
    method = opts.method
    lower = mats.theta_lower_bounds()

    def f(theta):
        return prof.deviance(theta, method)

    if mats.n_theta:
        starts = [mats.theta_start()]
        for seed in opts.starts:
            rng = np.random.default_rng(seed)
            s = mats.theta_start() + rng.normal(0.0, 0.5, mats.n_theta)
            starts.append(np.maximum(s, lower))
        best = None
        evals = 0
        for x0 in starts:
            x, d, ne, ok = _local_min(f, x0, lower, opts.max_evals, opts.rel_tol)
            evals += ne
            if best is None or d < best[1]:
                best = (x, d, ok)
        theta, dev, converged = best
        for _ in range(3):
            theta, dev = _snap_to_boundary(f, theta, dev, lower)
            theta, dev = _newton_polish(f, theta, dev, lower)
            inward = _escape_boundary(f, theta, dev, lower)
            if inward is None:
                break
            budget = opts.max_evals - prof.n_evals
            x, d, _, converged = _local_min(f, inward, lower, budget, opts.rel_tol)
            if d < dev:
                theta, dev = x, d
        if not converged:
            raise ConvergenceError(
                f"optimizer did not converge within {opts.max_evals} evaluations", theta, dev
            )
        message = "converged"
        evals = prof.n_evals
    else:
        theta = np.zeros(0)
        dev = f(theta)
        evals = 1
        message = "no covariance parameters"
    return _assemble(mats, opts, prof, theta, dev, evals, message)


def _assemble(mats, opts, prof, theta, dev, evals, message) -> LmmFit:
    pls = prof.solve(theta)
    sigma2 = prof.sigma2(pls, opts.method)
    lam = prof.lam(theta) if prof.q else None
    b_all = lam @ pls.u if prof.q else np.zeros(0)
    fitted = mats.X @ pls.beta + (mats.Z @ b_all if prof.q else 0.0)
    lambdas = mats.lambda_factors(theta)
    cov_terms = []
    b_blocks = []
    offset = 0
    for block, lt in zip(mats.blocks, lambdas):
        cov_terms.append(TermCovariance(block.group_name, block.term, block.column_names, sigma2 * lt @ lt.T))
        b_blocks.append(b_all[offset : offset + block.n_coef].reshape(block.n_levels, block.k))
        offset += block.n_coef
    vcov = sigma2 * scipy.linalg.cho_solve((pls.rx_chol, False), np.eye(mats.p)) if mats.p else np.zeros((0, 0))
    singular, comps = _singular_components(mats, theta, cov_terms, opts.singular_tol)
    warnings = []
    if singular:
        warnings.append("boundary (singular) fit: " + ", ".join(f"{g} {n}" for g, n in comps))
    return LmmFit(
        mats=mats,
        options=opts,
        theta=np.asarray(theta, float),
        beta=pls.beta,
        sigma2=sigma2,
        cov_terms=tuple(cov_terms),
        b=tuple(b_blocks),
        fitted=fitted,
        residuals=mats.y - fitted,
        deviance=float(dev),
        vcov=vcov,
        converged=True,
        n_evals=evals,
        message=message,
        singular=singular,
        singular_components=tuple(comps),
        warnings=tuple(warnings),
    )


def _singular_components(mats, theta, cov_terms, tol):
    comps = []
    diag_vals = [abs(v) for v, s in zip(theta, mats.theta_layout) if s.diagonal]
    scale = max(diag_vals + [1.0])
    for slot, value in zip(mats.theta_layout, theta):
        if slot.diagonal and abs(value) < tol * scale:
            block = mats.blocks[slot.block]
            comps.append((block.group_name, block.column_names[slot.row]))
    for tc in cov_terms:
        corr = tc.corr
        sds = tc.sds
        for i in range(len(tc.names)):
            for j in range(i):
                if sds[i] > 0 and sds[j] > 0 and abs(corr[i, j]) > 1.0 - tol:
                    comps.append((tc.group, f"cor({tc.names[j]},{tc.names[i]})"))
    return bool(comps), comps


def is_singular(fit: LmmFit, tol: float = 1e-4) -> tuple[bool, list[tuple[str, str]]]:
    """Boundary check: near-zero relative scale factors or correlations near +/-1."""
    singular, comps = _singular_components(fit.mats, fit.theta, fit.cov_terms, tol)
    return singular, comps


@dataclass(frozen=True)
class RanefTable:
    group: str
    levels: tuple[str, ...]
    columns: tuple[str, ...]
    values: np.ndarray  # n_levels x n_columns

    def as_dict(self) -> dict[str, dict[str, float]]:
        return {
            lev: dict(zip(self.columns, row.tolist())) for lev, row in zip(self.levels, self.values)
        }

    def __getitem__(self, level: str) -> np.ndarray:
        return self.values[self.levels.index(level)]


def ranef(fit: LmmFit) -> dict[str, RanefTable]:
    """Conditional modes per grouping factor; terms sharing a grouping are merged."""
    out: dict[str, RanefTable] = {}
    for block, vals in zip(fit.mats.blocks, fit.b):
        g = block.group_name
        if g in out:
            prev = out[g]
            cols = list(prev.columns)
            for c in block.column_names:
                cols.append(c if c not in cols else f"{c}.{len(cols)}")
            out[g] = RanefTable(g, prev.levels, tuple(cols), np.hstack([prev.values, vals]))
        else:
            out[g] = RanefTable(g, block.levels, block.column_names, vals.copy())
    return out


def predict(fit: LmmFit, ds: Dataset, include_random: bool | Iterable[str] = True) -> np.ndarray:
    """Linear predictor on new rows, on the (possibly log) scale of the model response.

    ``include_random`` is a flag or a collection of grouping names whose
    conditional modes are added; unseen grouping levels are an error only for
    included terms.
    """
    X, blocks = new_data_design(fit.mats, ds)
    pred = X @ fit.beta
    if include_random is True:
        wanted = {b.group_name for b in fit.mats.blocks}
    elif include_random is False:
        wanted = set()
    else:
        wanted = set(include_random)
    for block, vals in zip(blocks, fit.b):
        if block.group_name not in wanted:
            continue
        if np.any(block.codes < 0):
            bad = sorted({lab for lab, c in zip(_group_labels(ds, block.grouping), block.codes) if c < 0})
            raise DesignError(f"unseen level(s) {bad} of grouping {block.group_name!r}")
        pred = pred + np.sum(block.inner * vals[block.codes], axis=1)
    return pred


def _group_labels(ds: Dataset, factors: Sequence[str]) -> list[str]:
    cols = [ds.factor(f).labels() for f in factors]
    return [":".join(str(x) for x in parts) for parts in zip(*cols)]


def fit_text_summary(fit: LmmFit, digits: int = 6) -> str:
    def g(x):
        return f"{x:.{digits}g}"

    d = fit.summary_dict()
    lines = [f"Linear mixed model fit by {fit.method}", f"Formula: {d['formula']}", f"Deviance: {g(fit.deviance)}", ""]
    lines.append("Random effects:")
    rows = [("Group", "Name", "Variance", "SD", "Correlation")]
    last = None
    for r in d["random_effects"]:
        group = r["group"] if r["group"] != last else ""
        last = r["group"]
        rows.append((group, r["name"], g(r["variance"]), g(r["sd"]), " ".join(f"{c:.2f}" for c in r["correlation"])))
    widths = [max(len(row[i]) for row in rows) for i in range(5)]
    for row in rows:
        lines.append("  " + "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    groups = ", ".join(f"{k}, {v}" for k, v in d["groups"].items())
    lines.append(f"Number of obs: {d['n_obs']}; groups: {groups}")
    lines.append("")
    lines.append("Fixed effects:")
    rows = [("Effect", "Estimate", "SE")] + [(r["name"], g(r["estimate"]), g(r["se"])) for r in d["fixed_effects"]]
    widths = [max(len(row[i]) for row in rows) for i in range(3)]
    for row in rows:
        lines.append("  " + "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    for w in fit.warnings:
        lines.append(f"warning: {w}")
    return "\n".join(lines)
