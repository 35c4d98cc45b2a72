from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ranfx.formula import FormulaError, Var, expand_terms, format_formula, parse_formula


def terms(text):
    return [str(t) for t in expand_terms(parse_formula(text)).fixed_terms]


def randoms(text):
    return [str(r) for r in expand_terms(parse_formula(text)).random_terms]


def test_random_intercept():
    ast = expand_terms(parse_formula("DV ~ 1 + W1 + (1|subject)"))
    assert ast.intercept
    assert terms("DV ~ 1 + W1 + (1|subject)") == ["W1"]
    (r,) = ast.random_terms
    assert r.grouping.factors == ("subject",)
    assert r.inner.intercept and r.inner.terms == ()


def test_quadratic_slopes():
    ast = expand_terms(parse_formula("functioning ~ 1+time+I(time^2) + (1+time+I(time^2)|subject)"))
    assert [str(t) for t in ast.fixed_terms] == ["time", "I(time^2)"]
    assert ast.fixed_terms[1].factors == (Var("time", 2),)
    assert [str(t) for t in ast.random_terms[0].inner.terms] == ["time", "I(time^2)"]


def test_log_response():
    ast = parse_formula("log(RT) ~ modality + (1|subject)")
    assert ast.response.log and ast.response.name == "RT"


@pytest.mark.parametrize(
    "text",
    ["y ~ (1|", "y ~ a +", "y ~ a | g", "y ~ (1|)", "y ~ exp(a)", "y x", "y ~ a ~ b", "", "y ~ I(a^0)"],
)
def test_syntax_errors(text):
    with pytest.raises(FormulaError):
        parse_formula(text)


def test_error_position():
    with pytest.raises(FormulaError) as info:
        parse_formula("y ~ (1|")
    assert info.value.position is not None


def test_slash_grouping():
    assert randoms("y ~ (1|classroom/student)") == ["(1 | classroom)", "(1 | classroom:student)"]


def test_star_expansion():
    assert terms("y ~ 1 + condition*altitude") == ["condition", "altitude", "condition:altitude"]


def test_dedupe():
    assert terms("y ~ a + a") == ["a"]
    assert terms("y ~ a:b + b:a + a") == ["a", "a:b"]


def test_intercept_removal():
    assert not expand_terms(parse_formula("y ~ 0 + a")).intercept
    assert not expand_terms(parse_formula("y ~ a - 1")).intercept
    assert expand_terms(parse_formula("y ~ a")).intercept


def test_double_bar_is_one_term():
    ast = expand_terms(parse_formula("y ~ x + (1 + x || g)"))
    (r,) = ast.random_terms
    assert not r.correlated
    assert len(r.inner.terms) == 1


def test_slash_with_slopes_distributes():
    assert randoms("y ~ (1 + t|a/b)") == ["(1 + t | a)", "(1 + t | a:b)"]


def test_format_is_canonical():
    assert format_formula(parse_formula("y~a*b+(1|g/h)")) == "y ~ 1 + a + b + a:b + (1 | g) + (1 | g:h)"


names = st.sampled_from(["a", "b", "c", "x1", "time"])
groups = st.sampled_from(["g", "h", "subject"])


@st.composite
def fixed_expr(draw, depth=2):
    if depth == 0 or draw(st.booleans()):
        name = draw(names)
        return f"I({name}^{draw(st.integers(2, 3))})" if draw(st.integers(0, 5)) == 0 else name
    op = draw(st.sampled_from(["+", "*", ":"]))
    left = draw(fixed_expr(depth=depth - 1))
    right = draw(fixed_expr(depth=depth - 1))
    return f"({left} {op} {right})"


@st.composite
def formula_text(draw):
    parts = [draw(fixed_expr())]
    for _ in range(draw(st.integers(0, 2))):
        inner = draw(st.sampled_from(["1", "1 + a", "0 + b", "a*b"]))
        grouping = draw(groups)
        if draw(st.booleans()):
            grouping = f"{grouping}/{draw(groups)}"
        bar = draw(st.sampled_from(["|", "||"]))
        parts.append(f"({inner} {bar} {grouping})")
    return "y ~ " + " + ".join(parts)


@settings(max_examples=150, deadline=None)
@given(formula_text())
def test_expand_idempotent_and_round_trip(text):
    once = expand_terms(parse_formula(text))
    assert expand_terms(once) == once
    reparsed = expand_terms(parse_formula(str(once)))
    assert reparsed == once
    keys = [t.key for t in once.fixed_terms]
    assert len(keys) == len(set(keys))
    orders = [t.order for t in once.fixed_terms]
    assert orders == sorted(orders)


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(["g", "cls", "site"]), st.sampled_from(["h", "stu", "subj"]))
def test_slash_equivalence(g1, g2):
    a = expand_terms(parse_formula(f"y ~ 1 + (1|{g1}/{g2})"))
    b = expand_terms(parse_formula(f"y ~ 1 + (1|{g1}) + (1|{g1}:{g2})"))
    assert a == b
