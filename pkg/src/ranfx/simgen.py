"""Seeded synthetic data for longitudinal, factorial and crossed designs.

Every random quantity is drawn from its own Philox (counter-based) stream,
keyed by the seed and the CRC32 of a stream name such as ``"residual"``.
Adding a new stream therefore never changes the draws of existing ones.
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .dataframe import Dataset, FactorColumn, NumericColumn


class SimConfigError(ValueError):
    pass


def substream(seed: int, name: str) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(name.encode("utf-8")),))
    return np.random.Generator(np.random.Philox(ss))


def _labels(prefix: str, n: int) -> list[str]:
    width = len(str(n))
    return [f"{prefix}{i + 1:0{width}d}" for i in range(n)]


def _cov_factor(sds, corr) -> np.ndarray:
    sds = np.asarray(sds, dtype=float)
    corr = np.asarray(corr, dtype=float)
    if np.any(sds < 0):
        raise SimConfigError("standard deviations must be non-negative")
    if corr.shape != (len(sds), len(sds)) or not np.allclose(corr, corr.T):
        raise SimConfigError("correlation matrix must be symmetric and match the SDs")
    if np.any(np.abs(corr) > 1) or not np.allclose(np.diag(corr), 1.0):
        raise SimConfigError("correlations must lie in [-1, 1] with a unit diagonal")
    cov = np.outer(sds, sds) * corr
    w, v = np.linalg.eigh(cov)
    if w.min() < -1e-10 * max(1.0, w.max()):
        raise SimConfigError("random-effect covariance is not positive semidefinite")
    return v * np.sqrt(np.clip(w, 0.0, None))


def _mvn(rng: np.random.Generator, factor: np.ndarray, n: int) -> np.ndarray:
    return rng.standard_normal((n, factor.shape[1])) @ factor.T


def _dataset(cols: dict[str, Any], keep: np.ndarray | None = None) -> Dataset:
    out = {}
    for name, values in cols.items():
        if keep is not None:
            values = np.asarray(values)[keep]
        if name.startswith("#"):
            out[name[1:]] = NumericColumn(np.asarray(values, float), np.zeros(len(values), bool))
        else:
            out[name] = FactorColumn.from_labels([str(v) for v in values])
    n = len(next(iter(out.values())))
    return Dataset(out, n)


@dataclass(frozen=True)
class LongitudinalConfig:
    seed: int = 0
    n_subjects: int = 40
    n_times: int = 18
    time_step: float = 1.0
    groups: tuple[str, ...] = ("C1-4", "C5-8", "T1-S5")
    # intercept, linear and quadratic time coefficients for each group
    group_curves: tuple[tuple[float, float, float], ...] = (
        (20.0, 5.0, -0.15),
        (30.0, 5.5, -0.17),
        (40.0, 6.0, -0.19),
    )
    subject_sds: tuple[float, float, float] = (4.6, 0.9, 0.03)
    subject_corr: tuple[tuple[float, ...], ...] = (
        (1.0, -0.1, 0.0),
        (-0.1, 1.0, -0.3),
        (0.0, -0.3, 1.0),
    )
    n_sites: int = 4
    site_sd: float = 0.0
    residual_sd: float = 3.44

    def validate(self) -> None:
        if self.n_subjects < 2 or self.n_times < 1 or self.time_step <= 0:
            raise SimConfigError("need n_subjects >= 2, n_times >= 1 and a positive time step")
        if len(self.groups) != len(self.group_curves):
            raise SimConfigError("one quadratic curve is required per group")
        if self.site_sd < 0 or self.residual_sd < 0 or self.n_sites < 0:
            raise SimConfigError("SDs and site count must be non-negative")


def sim_longitudinal(cfg: LongitudinalConfig = LongitudinalConfig()) -> Dataset:
    """Quadratic growth per group with correlated subject deviates and optional sites.

    Columns: ``subject``, ``site`` (when ``n_sites > 0``), ``AIS_grade``,
    ``time`` and ``functioning``.
    """
    cfg.validate()
    factor = _cov_factor(cfg.subject_sds, cfg.subject_corr)
    n, t = cfg.n_subjects, cfg.n_times
    subj = _labels("S", n)
    grp_idx = np.arange(n) % len(cfg.groups)
    times = np.arange(t) * cfg.time_step
    dev = _mvn(substream(cfg.seed, "subject"), factor, n)
    curves = np.asarray(cfg.group_curves, float)[grp_idx] + dev  # n x 3
    y = curves[:, [0]] + curves[:, [1]] * times + curves[:, [2]] * times**2
    cols: dict[str, Any] = {"subject": np.repeat(subj, t)}
    if cfg.n_sites > 0:
        site_idx = np.arange(n) % cfg.n_sites
        site_dev = substream(cfg.seed, "site").normal(0.0, 1.0, cfg.n_sites) * cfg.site_sd
        y = y + site_dev[site_idx][:, None]
        cols["site"] = np.repeat([chr(ord("A") + i) if cfg.n_sites <= 26 else f"site{i}" for i in site_idx], t)
    y = y + substream(cfg.seed, "residual").normal(0.0, 1.0, (n, t)) * cfg.residual_sd
    cols["AIS_grade"] = np.repeat(np.asarray(cfg.groups)[grp_idx], t)
    cols["#time"] = np.tile(times, n)
    cols["#functioning"] = y.ravel()
    return _dataset(cols)


@dataclass(frozen=True)
class FactorialConfig:
    seed: int = 0
    n_subjects: int = 10
    altitude_levels: tuple[str, ...] = ("low", "high")
    condition_levels: tuple[str, ...] = ("rest", "imm", "delay")
    replicates: int = 1
    # rows: altitude levels, columns: condition levels
    cell_means: tuple[tuple[float, ...], ...] = ((55.0, 68.0, 57.0), (60.0, 76.0, 66.0))
    subject_sd: float = 8.0
    subject_altitude_sd: float = 3.0
    subject_condition_sd: float = 3.0
    residual_sd: float = 2.0

    def validate(self) -> None:
        if self.n_subjects < 2 or self.replicates < 1:
            raise SimConfigError("need n_subjects >= 2 and replicates >= 1")
        means = np.asarray(self.cell_means, float)
        if means.shape != (len(self.altitude_levels), len(self.condition_levels)):
            raise SimConfigError("cell_means must be altitude levels x condition levels")
        sds = (self.subject_sd, self.subject_altitude_sd, self.subject_condition_sd, self.residual_sd)
        if min(sds) < 0:
            raise SimConfigError("standard deviations must be non-negative")


def sim_factorial(cfg: FactorialConfig = FactorialConfig()) -> Dataset:
    """Two within-subject factors, one row per subject x altitude x condition x replicate.

    The response adds subject, subject:altitude and subject:condition
    intercepts plus residual noise to the cell means.
    """
    cfg.validate()
    n, a, c, r = cfg.n_subjects, len(cfg.altitude_levels), len(cfg.condition_levels), cfg.replicates
    means = np.asarray(cfg.cell_means, float)
    s = substream(cfg.seed, "subject").normal(0.0, 1.0, n) * cfg.subject_sd
    sa = substream(cfg.seed, "subject:altitude").normal(0.0, 1.0, (n, a)) * cfg.subject_altitude_sd
    sc = substream(cfg.seed, "subject:condition").normal(0.0, 1.0, (n, c)) * cfg.subject_condition_sd
    e = substream(cfg.seed, "residual").normal(0.0, 1.0, (n, a, c, r)) * cfg.residual_sd
    y = means[None, :, :, None] + s[:, None, None, None] + sa[:, :, None, None] + sc[:, None, :, None] + e
    idx = np.indices((n, a, c, r)).reshape(4, -1)
    cols: dict[str, Any] = {
        "subject": np.asarray(_labels("S", n))[idx[0]],
        "altitude": np.asarray(cfg.altitude_levels)[idx[1]],
        "condition": np.asarray(cfg.condition_levels)[idx[2]],
    }
    if r > 1:
        cols["#replicate"] = idx[3] + 1
    cols["#heart_rate"] = y.ravel()
    return _dataset(cols)


@dataclass(frozen=True)
class CrossedConfig:
    seed: int = 0
    n_subjects: int = 53
    n_stimuli: int = 543
    modality_levels: tuple[str, str] = ("audio", "audiovisual")
    intercept: float = 6.9
    modality_effect: float = 0.079
    subject_sd: float = 0.159
    subject_modality_sd: float = 0.075
    subject_corr: float = -0.29
    stimulus_sd: float = 0.017
    residual_sd: float = 0.245
    missing_rate: float = 0.0

    def validate(self) -> None:
        if self.n_subjects < 2 or self.n_stimuli < 2:
            raise SimConfigError("need at least 2 subjects and 2 stimuli")
        if not 0.0 <= self.missing_rate < 1.0:
            raise SimConfigError("missing_rate must be in [0, 1)")
        if min(self.subject_sd, self.subject_modality_sd, self.stimulus_sd, self.residual_sd) < 0:
            raise SimConfigError("standard deviations must be non-negative")
        if abs(self.subject_corr) > 1:
            raise SimConfigError("subject_corr must lie in [-1, 1]")


def sim_crossed(cfg: CrossedConfig = CrossedConfig()) -> Dataset:
    """Subjects crossed with stimuli; each stimulus appears in one modality per subject.

    ``log(RT)`` is intercept + modality effect + correlated subject intercept
    and modality slope + stimulus intercept + noise. Rows are deleted at
    random with probability ``missing_rate``.
    """
    cfg.validate()
    ns, nw = cfg.n_subjects, cfg.n_stimuli
    factor = _cov_factor(
        (cfg.subject_sd, cfg.subject_modality_sd),
        ((1.0, cfg.subject_corr), (cfg.subject_corr, 1.0)),
    )
    subj_dev = _mvn(substream(cfg.seed, "subject"), factor, ns)
    stim_dev = substream(cfg.seed, "stimulus").normal(0.0, 1.0, nw) * cfg.stimulus_sd
    si, wi = np.indices((ns, nw)).reshape(2, -1)
    mod = (si + wi) % 2
    log_rt = (
        cfg.intercept
        + cfg.modality_effect * mod
        + subj_dev[si, 0]
        + subj_dev[si, 1] * mod
        + stim_dev[wi]
        + substream(cfg.seed, "residual").normal(0.0, 1.0, len(si)) * cfg.residual_sd
    )
    keep = substream(cfg.seed, "missing").random(len(si)) >= cfg.missing_rate
    cols: dict[str, Any] = {
        "subject": np.asarray(_labels("P", ns))[si],
        "stimulus": np.asarray(_labels("W", nw))[wi],
        "modality": np.asarray(cfg.modality_levels)[mod],
        "#RT": np.exp(log_rt),
    }
    return _dataset(cols, keep)


FAMILIES = {
    "longitudinal": (LongitudinalConfig, sim_longitudinal),
    "factorial": (FactorialConfig, sim_factorial),
    "crossed": (CrossedConfig, sim_crossed),
}


def _coerce(value: str, default: Any) -> Any:
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        if default and isinstance(default[0], tuple):
            rows = [r for r in value.split(";") if r.strip()]
            return tuple(tuple(float(x) for x in r.split(",")) for r in rows)
        items = [x.strip() for x in value.split(",") if x.strip()]
        if default and isinstance(default[0], (int, float)):
            return tuple(float(x) for x in items)
        return tuple(items)
    return value


def make_config(family: str, settings: Mapping[str, str] | None = None):
    """Build a family config from string key/values (CLI flags or a key=value file).

    Tuples are comma separated; nested tuples use ``;`` between rows.
    """
    try:
        cls, _ = FAMILIES[family]
    except KeyError:
        raise SimConfigError(f"unknown family {family!r}; choose from {sorted(FAMILIES)}") from None
    base = cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in (settings or {}).items():
        if key not in fields:
            raise SimConfigError(f"{family} config has no setting {key!r}")
        try:
            kwargs[key] = _coerce(str(value), getattr(base, key))
        except ValueError as exc:
            raise SimConfigError(f"bad value for {key}: {value!r}") from exc
    cfg = cls(**kwargs)
    cfg.validate()
    return cfg


def read_config_file(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SimConfigError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def simulate(family: str, settings: Mapping[str, str] | None = None) -> Dataset:
    cfg = make_config(family, settings)
    return FAMILIES[family][1](cfg)
