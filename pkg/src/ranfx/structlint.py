"""Design inference and random-effects structure linting.

``infer_design`` works out which factors vary within subjects and whether
there are replicate observations; ``lint_structure`` checks a formula's
random part against that design, and ``recommend_structure`` proposes one
that lints clean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataframe import (
    DataError,
    Dataset,
    FactorColumn,
    FactorRelation,
    NumericColumn,
    classify_relation,
    cross_tabulate,
    interaction_factor,
)
from .design import DesignError, build_matrices
from .formula import FormulaAst, FormulaError, RandomTerm, expand_terms

WITHIN = "Within"
BETWEEN = "Between"
WITHIN_THRESHOLD = 0.9  # share of subjects seen at >= 2 levels
SPARSE_LEVELS = 5

ERROR, WARNING, INFO = "Error", "Warning", "Info"
_SEVERITY_ORDER = {ERROR: 0, WARNING: 1, INFO: 2}


class DesignLintError(ValueError):
    pass


def _as_factor(ds: Dataset, name: str) -> FactorColumn:
    col = ds[name]
    if isinstance(col, NumericColumn):
        return FactorColumn.from_labels([None if m else repr(float(v)) for v, m in zip(col.values, col.missing)])
    return col


def _cell_counts(codes: list[np.ndarray], keep: np.ndarray) -> np.ndarray:
    """Observation count of every observed combination of the given code columns."""
    if not keep.any():
        return np.zeros(0, dtype=int)
    stacked = np.column_stack([c[keep] for c in codes])
    _, counts = np.unique(stacked, axis=0, return_counts=True)
    return counts


@dataclass(frozen=True)
class DesignDeclaration:
    subject: str
    roles: dict[str, str]  # factor -> Within | Between
    replicates: int  # max observations per subject x within-cell
    relations: dict[tuple[str, str], FactorRelation]
    n_obs: int
    levels: dict[str, int]
    obs_per_level: dict[str, int]  # min observations per subject x level, within factors
    sampling: tuple[str, ...] = ()
    asserted_nesting: tuple[tuple[str, str], ...] = ()  # (inner, outer)
    notes: tuple[str, ...] = ()
    continuous: tuple[str, ...] = ()  # numeric candidates, modelled as slopes
    data: Dataset | None = field(default=None, repr=False, compare=False)

    @property
    def within(self) -> list[str]:
        """Within-subject design factors (sampling factors excluded)."""
        return [f for f, r in self.roles.items() if r == WITHIN and f not in self.sampling]

    @property
    def between(self) -> list[str]:
        return [f for f, r in self.roles.items() if r == BETWEEN]

    def as_dict(self) -> dict:
        return {
            "subject": self.subject,
            "roles": dict(self.roles),
            "replicates": self.replicates,
            "relations": {f"{a}|{b}": rel.value for (a, b), rel in self.relations.items()},
            "n_obs": self.n_obs,
            "levels": dict(self.levels),
            "sampling": list(self.sampling),
            "continuous": list(self.continuous),
            "notes": list(self.notes),
        }


def infer_design(
    ds: Dataset,
    subject: str,
    candidate_factors,
    sampling_factors=(),
    asserted_nesting=(),
) -> DesignDeclaration:
    """Classify candidate factors as Within or Between subjects and count replicates.

    ``sampling_factors`` name random sampling units other than subject (such
    as stimuli or sites); ``asserted_nesting`` lists ``(inner, outer)`` pairs
    the user knows to be nested by design.
    """
    if subject not in ds:
        raise DesignLintError(f"subject column {subject!r} not found")
    subj = ds[subject]
    if not isinstance(subj, FactorColumn):
        raise DesignLintError(f"subject column {subject!r} must be a factor")
    n_subj = len(subj.droplevels().levels)
    if n_subj < 2:
        raise DesignLintError("subject needs at least 2 levels")
    candidates = list(dict.fromkeys(list(candidate_factors) + list(sampling_factors)))
    for name in candidates + [n for pair in asserted_nesting for n in pair]:
        if name not in ds:
            raise DesignLintError(f"column {name!r} not found")
    roles: dict[str, str] = {}
    levels = {subject: n_subj}
    notes = []
    facs = {}
    for name in candidates:
        fac = _as_factor(ds, name)
        facs[name] = fac
        n_lev = len(fac.droplevels().levels)
        if n_lev < 2:
            raise DesignLintError(f"factor {name!r} is constant across all rows")
        levels[name] = n_lev
        inc = cross_tabulate(Dataset({"s": subj, "f": fac}, ds.n_rows), "s", "f")
        multi = float(np.mean((inc.counts > 0).sum(axis=1) >= 2))
        roles[name] = WITHIN if multi >= WITHIN_THRESHOLD else BETWEEN
        if 0.0 < multi < WITHIN_THRESHOLD:
            notes.append(
                f"{name}: {multi:.0%} of subjects see 2 or more levels; classified {roles[name]}"
            )
    within = [f for f in candidates if roles[f] == WITHIN and f not in sampling_factors]
    keep = ~subj.missing
    for f in within:
        keep &= ~facs[f].missing
    counts = _cell_counts([subj.codes] + [facs[f].codes for f in within], keep)
    replicates = int(counts.max()) if counts.size else 0
    obs_per_level = {}
    for f in within:
        k = keep & ~facs[f].missing
        c = _cell_counts([subj.codes, facs[f].codes], k)
        obs_per_level[f] = int(c.min()) if c.size else 0
    relations = {}
    for a, b in _pairs(within):
        tmp = Dataset({a: facs[a], b: facs[b]}, ds.n_rows)
        relations[(a, b)] = classify_relation(cross_tabulate(tmp, a, b))
    return DesignDeclaration(
        subject=subject,
        roles=roles,
        replicates=replicates,
        relations=relations,
        n_obs=ds.n_rows,
        levels=levels,
        obs_per_level=obs_per_level,
        sampling=tuple(sampling_factors),
        asserted_nesting=tuple(tuple(p) for p in asserted_nesting),
        notes=tuple(notes),
        continuous=tuple(f for f in candidates if isinstance(ds[f], NumericColumn)),
        data=ds,
    )


def _pairs(items):
    return [(a, b) for i, a in enumerate(items) for b in items[i + 1 :]]


@dataclass(frozen=True)
class LintFinding:
    severity: str
    code: str
    columns: tuple[str, ...]
    message: str
    suggestion: str = ""

    def as_dict(self) -> dict:
        return {
            "severity": self.severity,
            "code": self.code,
            "columns": list(self.columns),
            "message": self.message,
            "suggestion": self.suggestion,
        }


@dataclass(frozen=True)
class LintReport:
    findings: tuple[LintFinding, ...]
    recommended: str
    notes: tuple[str, ...] = ()

    @property
    def verdict(self) -> str:
        severities = {f.severity for f in self.findings}
        if ERROR in severities:
            return "Fail"
        if WARNING in severities:
            return "PassWithWarnings"
        return "Pass"

    def codes(self, severity: str | None = None) -> list[str]:
        return [f.code for f in self.findings if severity is None or f.severity == severity]

    def as_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "findings": [f.as_dict() for f in self.findings],
            "recommended": self.recommended,
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)

    def render(self) -> str:
        lines = [f"Verdict: {self.verdict}"]
        for f in self.findings:
            lines.append(f"[{f.severity}] {f.code} ({', '.join(f.columns)}): {f.message}")
            if f.suggestion:
                lines.append(f"    suggestion: {f.suggestion}")
        lines.extend(f"note: {n}" for n in self.notes)
        lines.append(f"Recommended random effects: {self.recommended}")
        return "\n".join(lines)


def _inner_vars(term: RandomTerm) -> set[str]:
    return {v for t in term.inner.terms for v in t.variables}


def _group_levels(ds: Dataset, factors: tuple[str, ...]) -> int:
    return len(interaction_factor(ds, factors).droplevels().levels)


def lint_structure(ast: FormulaAst, design: DesignDeclaration) -> LintReport:
    """Check the random part of ``ast`` against ``design``; the report is always produced."""
    ast = expand_terms(ast)
    subject = design.subject
    within = design.within
    rterms = ast.random_terms
    findings: list[LintFinding] = []
    notes = list(design.notes)
    ds = design.data

    # R1: some term grouped by subject
    if not any(r.grouping.factors == (subject,) for r in rterms):
        findings.append(
            LintFinding(
                ERROR,
                "MissingRandomIntercept",
                (subject,),
                f"no random term is grouped by {subject}; repeated observations per {subject} are treated as independent",
                f"(1|{subject})",
            )
        )

    # R2: within factor repeatedly observed per subject but unmodelled
    for w in within:
        if design.obs_per_level.get(w, 0) < 2:
            continue
        has_intercept = any(set(r.grouping.factors) == {subject, w} for r in rterms)
        has_slope = any(r.grouping.factors == (subject,) and w in _inner_vars(r) for r in rterms)
        if not (has_intercept or has_slope):
            findings.append(
                LintFinding(
                    WARNING,
                    "UnderSpecified",
                    (w, subject),
                    f"{w} varies within {subject} with {design.obs_per_level[w]}+ observations per "
                    f"{subject} and level, but neither (1|{subject}:{w}) nor a random slope of {w} by {subject} "
                    "is present; denominator degrees of freedom will be inflated",
                    f"(1|{subject}:{w})",
                )
            )

    # R3: global intercept for a factor that is crossed only within subjects
    for r in rterms:
        g = r.grouping.factors
        if len(g) == 1 and g[0] in within:
            findings.append(
                LintFinding(
                    WARNING,
                    "MisSpecified",
                    (g[0],),
                    f"(1|{g[0]}) treats {g[0]} as sampled overall, but observations are only crossed "
                    f"with {g[0]} within each {subject}",
                    f"(1|{subject}:{g[0]})",
                )
            )

    # R4: identifiability, per term, mirroring the fitter's refusal
    if ds is not None:
        try:
            mats = build_matrices(ds, ast)
        except (DesignError, DataError, FormulaError, KeyError) as exc:
            notes.append(f"identifiability not checked: {exc}")
        else:
            for block, r in zip(mats.blocks, mats.ast.random_terms):
                if block.n_coef >= mats.n:
                    cols = tuple(dict.fromkeys(block.grouping + tuple(sorted(_inner_vars(r)))))
                    findings.append(
                        LintFinding(
                            ERROR,
                            "OverSpecified",
                            cols,
                            f"number of observations ({mats.n}) <= number of random effects "
                            f"({block.n_coef}) for term {block.term}; the random-effects parameters "
                            "and the residual variance are probably unidentifiable without replicates",
                            f"(1|{subject})" + "".join(f" + (1|{subject}:{w})" for w in within),
                        )
                    )

    # R5: groupings with few levels; subject groupings are exempt since R1 demands them
    if ds is not None:
        seen = set()
        for r in rterms:
            g = r.grouping.factors
            if g in seen or subject in g:
                continue
            seen.add(g)
            try:
                n_lev = _group_levels(ds, g)
            except (DataError, KeyError):
                continue
            if n_lev < SPARSE_LEVELS:
                findings.append(
                    LintFinding(
                        WARNING,
                        "SparseGroups",
                        g,
                        f"grouping {':'.join(g)} has only {n_lev} levels; its variance is poorly estimated",
                        f"consider {':'.join(g)} as a fixed effect",
                    )
                )

    # R6: asserted nesting coded as crossing
    if ds is not None:
        for inner, outer in design.asserted_nesting:
            rel = classify_relation(cross_tabulate(ds, outer, inner))
            if rel not in (FactorRelation.FULLY_CROSSED, FactorRelation.PARTIALLY_CROSSED):
                continue
            uses_alone = any(r.grouping.factors == (inner,) for r in rterms)
            uses_joint = any({inner, outer} <= set(r.grouping.factors) for r in rterms)
            if uses_alone and not uses_joint:
                findings.append(
                    LintFinding(
                        WARNING,
                        "AmbiguousNesting",
                        (inner, outer),
                        f"{inner} is declared nested in {outer}, but its labels repeat across {outer} "
                        f"levels so the coding reads as {rel.value}",
                        f"(1|{outer}/{inner})",
                    )
                )

    # R7: replicates available but no subject slopes
    if design.replicates > 1:
        for w in within:
            if not any(r.grouping.factors == (subject,) and w in _inner_vars(r) for r in rterms):
                findings.append(
                    LintFinding(
                        INFO,
                        "ReplicatesUnused",
                        (w, subject),
                        f"up to {design.replicates} replicates per {subject} and cell allow a random "
                        f"slope of {w} by {subject}",
                        f"(1 + {w}|{subject})",
                    )
                )

    findings.sort(key=lambda f: _SEVERITY_ORDER[f.severity])
    return LintReport(tuple(findings), recommend_structure(design), tuple(notes))


def recommend_structure(design: DesignDeclaration) -> str:
    """Random part that accounts for every within-subject dependency in ``design``."""
    s = design.subject
    slopes = sorted(w for w in design.within if w in design.continuous and design.levels[w] >= 3)
    within = sorted(w for w in design.within if w not in design.continuous)
    parts: list[str] = []
    replicated = design.replicates > 1 and within
    if replicated:
        k = 1 + sum(design.levels[w] - 1 for w in within) + len(slopes)
        if k * design.levels[s] < design.n_obs:
            parts.append(f"(1 + {' + '.join(within + slopes)}|{s})")
        else:
            replicated = False
    if not replicated:
        parts.append(f"(1 + {' + '.join(slopes)}|{s})" if slopes else f"(1|{s})")
        for w in within:
            if design.obs_per_level.get(w, 0) >= 2:
                parts.append(f"(1|{s}:{w})")
        if len(within) >= 3:
            for a, b in _pairs(within):
                parts.append(f"(1|{s}:{a}:{b})")
    nested = {inner: outer for inner, outer in design.asserted_nesting}
    for f in sorted(design.sampling):
        group = f"{nested[f]}:{f}" if f in nested else f
        if design.data is None or _group_levels(design.data, tuple(group.split(":"))) >= SPARSE_LEVELS:
            parts.append(f"(1|{group})")
    return " + ".join(parts)
