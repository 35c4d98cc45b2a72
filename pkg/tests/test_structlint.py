from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import option_formula
from ranfx.dataframe import Dataset
from ranfx.design import build_matrices
from ranfx.estimate import OverSpecifiedError, fit_lmm
from ranfx.formula import parse_formula
from ranfx.simgen import CrossedConfig, FactorialConfig, LongitudinalConfig, sim_crossed, sim_factorial, sim_longitudinal
from ranfx.structlint import DesignLintError, infer_design, lint_structure, recommend_structure


@pytest.fixture(scope="module")
def design():
    return infer_design(sim_factorial(FactorialConfig(seed=5)), "subject", ["altitude", "condition"])


def lint(text, design):
    return lint_structure(parse_formula(text), design)


def findings(report):
    return sorted((f.code, f.columns) for f in report.findings)


def test_infer_factorial(design):
    assert design.roles == {"altitude": "Within", "condition": "Within"}
    assert design.replicates == 1
    assert design.n_obs == 60


def test_infer_between():
    ds = sim_longitudinal(LongitudinalConfig(n_subjects=9, n_times=4))
    d = infer_design(ds, "subject", ["AIS_grade", "time"])
    assert d.roles["AIS_grade"] == "Between"
    assert d.roles["time"] == "Within"
    assert d.continuous == ("time",)


def test_infer_crossed():
    ds = sim_crossed(CrossedConfig(n_subjects=8, n_stimuli=30))
    d = infer_design(ds, "subject", ["modality"], sampling_factors=["stimulus"])
    assert d.roles["stimulus"] == "Within"
    assert d.replicates > 1
    assert recommend_structure(d) == "(1 + modality|subject) + (1|stimulus)"


def test_infer_errors():
    ds = Dataset.from_dict({"s": ["a", "a", "b", "b"], "k": ["x"] * 4, "y": [1.0, 2.0, 3.0, 4.0]})
    with pytest.raises(DesignLintError, match="constant"):
        infer_design(ds, "s", ["k"])
    with pytest.raises(DesignLintError):
        infer_design(ds, "nope", [])


def test_option_a(design):
    r = lint(option_formula("A"), design)
    assert findings(r) == [("UnderSpecified", ("altitude", "subject")), ("UnderSpecified", ("condition", "subject"))]
    assert r.verdict == "PassWithWarnings"


def test_option_b(design):
    r = lint(option_formula("B"), design)
    codes = r.codes()
    assert codes.count("MisSpecified") == 2
    mis = [f for f in r.findings if f.code == "MisSpecified"]
    assert {f.columns[0] for f in mis} == {"altitude", "condition"}
    assert all("only crossed" in f.message for f in mis)


@pytest.mark.parametrize("key", ["C", "D"])
def test_options_c_d_clean(design, key):
    assert lint(option_formula(key), design).verdict == "Pass"


def test_option_e(design):
    r = lint(option_formula("E"), design)
    assert r.verdict == "Fail"
    assert r.codes("Error") == ["OverSpecified"]
    assert "unidentifiable" in r.findings[0].message


def test_r4_agrees_with_fitter(design):
    for key in "ABCDE":
        refused = False
        try:
            fit_lmm(build_matrices(design.data, parse_formula(option_formula(key))), max_evals_guard())
        except OverSpecifiedError:
            refused = True
        assert refused == ("OverSpecified" in lint(option_formula(key), design).codes())


def max_evals_guard():
    from ranfx.estimate import FitOptions

    return FitOptions(max_evals=20_000)


def test_missing_intercept(design):
    r = lint("heart_rate ~ condition*altitude + (1|condition)", design)
    assert "MissingRandomIntercept" in r.codes("Error")
    assert lint("heart_rate ~ condition", design).verdict == "Fail"


def test_errors_first(design):
    r = lint("heart_rate ~ condition*altitude + (1|condition)", design)
    sev = [f.severity for f in r.findings]
    assert sev == sorted(sev, key=["Error", "Warning", "Info"].index)


def test_subject_groupings_never_sparse():
    ds = sim_factorial(FactorialConfig(n_subjects=3))
    d = infer_design(ds, "subject", ["altitude", "condition"])
    assert lint(option_formula("C"), d).verdict == "Pass"


def test_sparse_and_ambiguous():
    ds = Dataset.from_dict(
        {
            "classroom": ["C1", "C1", "C2", "C2", "C3", "C3"] * 2,
            "student": ["S1", "S2"] * 6,
            "y": np.arange(12.0),
        }
    )
    d = infer_design(ds, "classroom", [], sampling_factors=["student"], asserted_nesting=[("student", "classroom")])
    r = lint("y ~ 1 + (1|classroom) + (1|student)", d)
    assert "AmbiguousNesting" in r.codes()
    amb = next(f for f in r.findings if f.code == "AmbiguousNesting")
    assert amb.suggestion == "(1|classroom/student)"
    assert "SparseGroups" in r.codes()


def test_replicates_unused():
    ds = sim_crossed(CrossedConfig(n_subjects=8, n_stimuli=30))
    d = infer_design(ds, "subject", ["modality"], sampling_factors=["stimulus"])
    r = lint("log(RT) ~ modality + (1|subject) + (1|stimulus)", d)
    assert "ReplicatesUnused" in r.codes("Info")
    assert lint("log(RT) ~ modality + (1 + modality|subject) + (1|stimulus)", d).verdict == "Pass"


def test_recommendations(design):
    assert recommend_structure(design) == "(1|subject) + (1|subject:altitude) + (1|subject:condition)"
    ds = sim_factorial(FactorialConfig(replicates=2))
    d2 = infer_design(ds, "subject", ["altitude", "condition"])
    assert recommend_structure(d2) == "(1 + altitude + condition|subject)"
    assert lint(option_formula("E"), d2).verdict != "Fail"
    plain = infer_design(ds, "subject", [])
    assert recommend_structure(plain) == "(1|subject)"


def test_report_json(design):
    doc = json.loads(lint(option_formula("A"), design).to_json())
    assert doc["verdict"] == "PassWithWarnings"
    assert {"severity", "code", "columns", "message", "suggestion"} <= set(doc["findings"][0])
    assert all(f["columns"] for f in doc["findings"])


def three_way(n_subjects, reps, levels):
    rows = {"s": [], "a": [], "b": [], "c": [], "y": []}
    rng = np.random.default_rng(n_subjects * 100 + reps)
    for i in range(n_subjects):
        for a in range(levels[0]):
            for b in range(levels[1]):
                for c in range(levels[2]):
                    for _ in range(reps):
                        rows["s"].append(f"s{i:02d}")
                        rows["a"].append(f"a{a}")
                        rows["b"].append(f"b{b}")
                        rows["c"].append(f"c{c}")
                        rows["y"].append(rng.normal())
    return Dataset.from_dict(rows)


@settings(max_examples=30, deadline=None)
@given(
    st.integers(2, 12),
    st.integers(1, 3),
    st.tuples(st.integers(2, 3), st.integers(2, 3), st.integers(1, 3)),
)
def test_recommendation_lints_clean(n_subjects, reps, levels):
    ds = three_way(n_subjects, reps, levels)
    factors = ["a", "b", "c"] if levels[2] > 1 else ["a", "b"]
    d = infer_design(ds, "s", factors)
    rec = recommend_structure(d)
    fixed = "*".join(factors)
    report = lint(f"y ~ {fixed} + {rec}", d)
    assert report.verdict == "Pass", (rec, report.render())
