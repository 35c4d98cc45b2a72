from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import option_formula
from ranfx.dataframe import Dataset
from ranfx.design import SUM, Contrasts, DesignError, build_matrices, count_random_effects, dump_matrices
from ranfx.design import RankDeficientError
from ranfx.formula import parse_formula
from ranfx.simgen import FactorialConfig, LongitudinalConfig, sim_factorial, sim_longitudinal


def build(ds, text, **kw):
    return build_matrices(ds, parse_formula(text), **kw)


def test_two_subject_matrices(heart_rate):
    m = build(heart_rate, "heart_rate ~ 1 + condition + (1|subject)")
    assert m.X.tolist() == [[1, 0], [1, 1], [1, 0], [1, 1]]
    assert m.Z.toarray().tolist() == [[1, 0], [1, 0], [0, 1], [0, 1]]
    assert m.x_names == ("(Intercept)", "condition[ex]")


def test_three_level_factor_two_columns(factorial):
    m = build(factorial, "heart_rate ~ condition + (1|subject)")
    assert m.p == 3
    m = build(factorial, "heart_rate ~ condition + (1|subject)", contrasts=SUM)
    assert m.p == 3
    assert np.allclose(m.X[:, 1:].sum(axis=0), 0)


def test_reference_level(factorial):
    m = build(factorial, "heart_rate ~ condition + (1|subject)", contrasts=Contrasts("treatment", {"condition": "rest"}))
    assert m.x_names == ("(Intercept)", "condition[delay]", "condition[imm]")


def test_power_after_centering():
    ds = Dataset.from_dict({"t": [1.0, 2.0, 3.0, 4.0], "y": [1.0, 3.0, 2.0, 5.0]})
    m = build(ds, "y ~ t + I(t^2)", centering={"t": "mean"})
    assert np.allclose(m.X[:, 1], [-1.5, -0.5, 0.5, 1.5])
    assert np.allclose(m.X[:, 2], m.X[:, 1] ** 2)
    m = build(ds, "y ~ t + I(t^2)", centering={"t": "first"})
    assert np.allclose(m.X[:, 2], [0, 1, 4, 9])


def test_count_random_effects(factorial):
    assert count_random_effects(build(factorial, option_formula("E"))) == 60
    assert count_random_effects(build(factorial, "heart_rate ~ 1 + (1|subject)")) == 10
    m = build(factorial, option_formula("C"))
    assert count_random_effects(m) == 60
    # brute force: distinct observed grouping combinations
    subj = factorial.factor("subject").labels()
    alt = factorial.factor("altitude").labels()
    cond = factorial.factor("condition").labels()
    assert len(set(subj)) + len(set(zip(subj, alt))) + len(set(zip(subj, cond))) == 60


def test_missing_rows_dropped():
    ds = Dataset.from_dict({"y": [1.0, None, 3.0, 4.0, 2.0], "g": ["a", "a", "b", "b", None], "z": ["u", None, None, None, None]})
    m = build(ds, "y ~ 1 + (1|g)")
    assert m.n == 3
    assert m.dropped_rows.tolist() == [1, 4]


@pytest.mark.parametrize(
    "text, exc",
    [
        ("y ~ x + x2 + (1|g)", RankDeficientError),
        ("y ~ 1 + (1|one)", DesignError),
        ("y ~ nope + (1|g)", DesignError),
        ("y ~ 1 + (1|x)", DesignError),
    ],
)
def test_build_errors(text, exc):
    ds = Dataset.from_dict(
        {"y": [1.0, 2.0, 3.0, 5.0], "x": [1.0, 2.0, 3.0, 4.0], "x2": [2.0, 4.0, 6.0, 8.0], "g": ["a", "a", "b", "b"], "one": ["k"] * 4}
    )
    with pytest.raises(exc):
        build(ds, text)


def test_rank_error_names_columns():
    ds = Dataset.from_dict({"y": [1.0, 2.0, 3.0], "x": [1.0, 2.0, 3.0], "x2": [2.0, 4.0, 6.0]})
    with pytest.raises(RankDeficientError) as info:
        build(ds, "y ~ x + x2")
    assert len(info.value.dependent) == 1
    assert info.value.dependent[0] in ("x", "x2")


def test_zero_rows():
    ds = Dataset.from_dict({"y": [None, None], "g": ["a", "b"]})
    with pytest.raises(DesignError, match="no rows"):
        build(ds, "y ~ 1 + (1|g)")


def test_z_block_structure():
    ds = sim_longitudinal(LongitudinalConfig(n_subjects=6, n_times=5))
    m = build(ds, "functioning ~ time + (1 + time|subject) + (1|site)")
    for block in m.blocks:
        Z = block.matrix.toarray()
        assert Z.shape == (m.n, block.n_coef)
        for i in range(m.n):
            lo = block.codes[i] * block.k
            assert np.array_equal(Z[i, lo : lo + block.k], block.inner[i])
            rest = np.delete(Z[i], range(lo, lo + block.k))
            assert not rest.any()
    assert len(set(m.x_names)) == m.p
    assert m.n_theta == 3 + 1


def test_uncorrelated_layout():
    ds = sim_longitudinal(LongitudinalConfig(n_subjects=6, n_times=5))
    m = build(ds, "functioning ~ time + (1 + time||subject)")
    assert m.n_theta == 2
    assert all(s.diagonal for s in m.theta_layout)


def test_dump(tmp_path, heart_rate):
    m = build(heart_rate, "heart_rate ~ 1 + condition + (1|subject)")
    xp, zp = dump_matrices(m, tmp_path / "fig")
    assert xp.read_text().splitlines()[:2] == ["(Intercept),condition[ex]", "1.0,0.0"]
    assert zp.read_text().splitlines()[1] == "1.0,0.0"


@settings(max_examples=25, deadline=None)
@given(st.permutations(list(range(60))))
def test_row_permutation_permutes_matrices(perm):
    ds = sim_factorial(FactorialConfig(seed=1))
    a = build(ds, option_formula("C"))
    b = build(ds.take(np.array(perm)), option_formula("C"))
    assert np.array_equal(a.X[perm], b.X)
    assert np.array_equal(a.y[perm], b.y)
    for ba, bb in zip(a.blocks, b.blocks):
        assert np.array_equal(ba.matrix.toarray()[perm], bb.matrix.toarray())
