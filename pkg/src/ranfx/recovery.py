"""Truth-recovery runs: simulate, refit the generating structure, and check
every truth parameter against its estimate +/- k standard errors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import build_matrices
from .estimate import FitOptions, fit_lmm
from .formula import parse_formula
from .inference import variance_component_se
from .simgen import (
    CrossedConfig,
    FactorialConfig,
    LongitudinalConfig,
    sim_crossed,
    sim_factorial,
    sim_longitudinal,
)

FORMULAS = {
    "factorial": "heart_rate ~ altitude*condition + (1|subject) + (1|subject:altitude) + (1|subject:condition)",
    "longitudinal": "functioning ~ AIS_grade*(time + I(time^2)) + (1 + time + I(time^2) | subject)",
    "crossed": "log(RT) ~ modality + (1 + modality | subject) + (1 | stimulus)",
}


def _factorial_truth(cfg: FactorialConfig, ds):
    means = np.asarray(cfg.cell_means, float)
    alt = [cfg.altitude_levels.index(x) for x in ds.factor("altitude").labels()]
    cond = [cfg.condition_levels.index(x) for x in ds.factor("condition").labels()]
    mu = means[alt, cond]
    random = {
        "sd subject (Intercept)": cfg.subject_sd,
        "sd subject:altitude (Intercept)": cfg.subject_altitude_sd,
        "sd subject:condition (Intercept)": cfg.subject_condition_sd,
        "sd Residual": cfg.residual_sd,
    }
    return mu, random


def _longitudinal_truth(cfg: LongitudinalConfig, ds):
    curves = np.asarray(cfg.group_curves, float)
    g = np.array([cfg.groups.index(x) for x in ds.factor("AIS_grade").labels()])
    t = ds.numeric("time").values
    mu = curves[g, 0] + curves[g, 1] * t + curves[g, 2] * t**2
    names = ("(Intercept)", "time", "I(time^2)")
    random = {f"sd subject {n}": s for n, s in zip(names, cfg.subject_sds)}
    for i in range(3):
        for j in range(i):
            random[f"cor subject {names[j]},{names[i]}"] = cfg.subject_corr[i][j]
    random["sd Residual"] = cfg.residual_sd
    return mu, random


def _crossed_truth(cfg: CrossedConfig, ds):
    mod = np.array([cfg.modality_levels.index(x) for x in ds.factor("modality").labels()])
    mu = cfg.intercept + cfg.modality_effect * mod
    slope = f"modality[{cfg.modality_levels[1]}]"
    random = {
        "sd subject (Intercept)": cfg.subject_sd,
        f"sd subject {slope}": cfg.subject_modality_sd,
        f"cor subject (Intercept),{slope}": cfg.subject_corr,
        "sd stimulus (Intercept)": cfg.stimulus_sd,
        "sd Residual": cfg.residual_sd,
    }
    return mu, random


_FAMILIES = {
    "factorial": (FactorialConfig, sim_factorial, _factorial_truth),
    "longitudinal": (LongitudinalConfig, sim_longitudinal, _longitudinal_truth),
    "crossed": (CrossedConfig, sim_crossed, _crossed_truth),
}


@dataclass(frozen=True)
class RecoveryCheck:
    parameter: str
    truth: float
    estimate: float
    se: float

    def covered(self, k: float = 3.0) -> bool:
        return abs(self.estimate - self.truth) <= k * self.se


def recovery_checks(family: str, seed: int, **overrides) -> list[RecoveryCheck]:
    """Simulate one replicate of ``family`` and compare the REML fit with the truth."""
    cfg_cls, sim, truth_fn = _FAMILIES[family]
    cfg = cfg_cls(seed=seed, **overrides)
    ds = sim(cfg)
    mats = build_matrices(ds, parse_formula(FORMULAS[family]))
    fit = fit_lmm(mats, FitOptions("REML"))
    mu, random = truth_fn(cfg, mats.data)
    beta_true, *_ = np.linalg.lstsq(mats.X, mu, rcond=None)
    checks = [
        RecoveryCheck(name, float(t), float(e), float(s))
        for name, t, e, s in zip(fit.beta_names, beta_true, fit.beta, fit.se)
    ]
    for vc in variance_component_se(fit):
        if vc.label not in random:
            raise KeyError(f"no truth for {vc.label}")
        checks.append(RecoveryCheck(vc.label, float(random[vc.label]), vc.estimate, vc.se))
    return checks


def coverage(family: str, seeds, k: float = 3.0, **overrides) -> dict[str, int]:
    """Number of replicates in which each parameter lies within ``k`` SE of its truth."""
    hits: dict[str, int] = {}
    for seed in seeds:
        for c in recovery_checks(family, seed, **overrides):
            hits[c.parameter] = hits.get(c.parameter, 0) + int(c.covered(k))
    return hits
