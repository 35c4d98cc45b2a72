"""lme4-style model formulas: tokenizer, parser, term expansion and printing.

Grammar (loosest binding first)::

    formula  := response "~" sum
    response := NAME | "log" "(" NAME ")"
    sum      := prod (("+" | "-") prod)*
    prod     := inter ("*" inter)*
    inter    := nest (":" nest)*
    nest     := atom ("/" atom)*
    atom     := NAME | "1" | "0" | "I" "(" NAME "^" INT ")"
              | "(" sum ")" | "(" sum ("|" | "||") grouping ")"

Random terms (the bar forms) are only allowed as top-level summands.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union


class FormulaError(ValueError):
    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)


@dataclass(frozen=True)
class Var:
    """A variable reference, optionally raised to an integer power via ``I(x^k)``."""

    name: str
    power: int = 1

    def __str__(self) -> str:
        return self.name if self.power == 1 else f"I({self.name}^{self.power})"


@dataclass(frozen=True)
class FixedTerm:
    factors: tuple[Var, ...]

    @property
    def order(self) -> int:
        return len(self.factors)

    @property
    def key(self) -> frozenset:
        return frozenset(self.factors)

    @property
    def variables(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.factors)

    def __str__(self) -> str:
        return ":".join(str(v) for v in self.factors)


@dataclass(frozen=True)
class Const:
    value: int  # 0 or 1


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class TermList:
    """Canonical (expanded) linear predictor: intercept flag plus ordered unique terms."""

    intercept: bool
    terms: tuple[FixedTerm, ...]

    @property
    def n_terms(self) -> int:
        return int(self.intercept) + len(self.terms)

    def __str__(self) -> str:
        parts = ["1" if self.intercept else "0"] + [str(t) for t in self.terms]
        return " + ".join(parts)


Expr = Union[FixedTerm, Const, BinOp, TermList]


@dataclass(frozen=True)
class GroupName:
    name: str


@dataclass(frozen=True)
class GroupOp:
    op: str  # ":" or "/"
    left: "GroupExpr"
    right: "GroupExpr"


@dataclass(frozen=True)
class Grouping:
    """Canonical grouping: a single factor or the interaction of several."""

    factors: tuple[str, ...]

    @property
    def name(self) -> str:
        return ":".join(self.factors)

    def __str__(self) -> str:
        return self.name


GroupExpr = Union[GroupName, GroupOp, Grouping]


@dataclass(frozen=True)
class RandomTerm:
    inner: Expr
    grouping: GroupExpr
    correlated: bool = True

    @property
    def expanded(self) -> bool:
        return isinstance(self.inner, TermList) and isinstance(self.grouping, Grouping)

    def __str__(self) -> str:
        bar = "|" if self.correlated else "||"
        return f"({_expr_str(self.inner)} {bar} {_group_str(self.grouping)})"


@dataclass(frozen=True)
class Response:
    name: str
    log: bool = False

    def __str__(self) -> str:
        return f"log({self.name})" if self.log else self.name


@dataclass(frozen=True)
class FormulaAst:
    response: Response
    fixed: Expr
    random_terms: tuple[RandomTerm, ...]

    @property
    def is_expanded(self) -> bool:
        return isinstance(self.fixed, TermList) and all(r.expanded for r in self.random_terms)

    def _require_expanded(self) -> TermList:
        if not self.is_expanded:
            raise FormulaError("formula must be expanded first (see expand_terms)")
        return self.fixed  # type: ignore[return-value]

    @property
    def intercept(self) -> bool:
        return self._require_expanded().intercept

    @property
    def fixed_terms(self) -> tuple[FixedTerm, ...]:
        return self._require_expanded().terms

    def variables(self) -> list[str]:
        """Every column referenced, response first, in order of appearance."""
        out = [self.response.name]
        ast = expand_terms(self)
        for t in ast.fixed_terms:
            out.extend(t.variables)
        for r in ast.random_terms:
            for t in r.inner.terms:
                out.extend(t.variables)
            out.extend(r.grouping.factors)
        return list(dict.fromkeys(out))

    def __str__(self) -> str:
        parts = [_expr_str(self.fixed)] + [str(r) for r in self.random_terms]
        return f"{self.response} ~ " + " + ".join(parts)


def _expr_str(e: Expr) -> str:
    if isinstance(e, (FixedTerm, TermList)):
        return str(e)
    if isinstance(e, Const):
        return str(e.value)
    return f"({_expr_str(e.left)} {e.op} {_expr_str(e.right)})"


def _group_str(g: GroupExpr) -> str:
    if isinstance(g, GroupName):
        return g.name
    if isinstance(g, Grouping):
        return g.name
    return f"{_group_str(g.left)}{g.op}{_group_str(g.right)}"


# --------------------------------------------------------------------------
# Tokenizer and parser
# --------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d*)?)|(?P<name>[A-Za-z_.][A-Za-z0-9_.]*)|(?P<op>\|\||[~+\-*:/|()^]))"
)


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise FormulaError(f"unexpected character {text[pos:].lstrip()[0]!r}", pos)
        kind = m.lastgroup
        toks.append(_Tok(kind, m.group(kind), m.start(kind)))
        pos = m.end()
    toks.append(_Tok("end", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def next(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> _Tok:
        t = self.tok
        if t.text != text:
            found = "end of formula" if t.kind == "end" else repr(t.text)
            if text == ")":
                raise FormulaError(f"unmatched parenthesis: expected ')' but found {found}", t.pos)
            raise FormulaError(f"expected {text!r} but found {found}", t.pos)
        return self.next()

    def parse(self) -> FormulaAst:
        if self.text.count("~") != 1:
            raise FormulaError("formula must contain exactly one '~'")
        response = self.parse_response()
        self.expect("~")
        summands = self.parse_top_sum()
        if self.tok.kind != "end":
            raise FormulaError(f"unexpected {self.tok.text!r}", self.tok.pos)
        fixed: Expr | None = None
        randoms = []
        for sign, node in summands:
            if isinstance(node, RandomTerm):
                if sign == "-":
                    raise FormulaError("random terms cannot be subtracted")
                randoms.append(node)
            elif fixed is None:
                fixed = BinOp("-", TermList(True, ()), node) if sign == "-" else node
            else:
                fixed = BinOp(sign, fixed, node)
        if fixed is None:
            fixed = TermList(True, ())
        ast = FormulaAst(response, fixed, tuple(randoms))
        for r in expand_terms(ast).random_terms:
            if r.inner.n_terms == 0:
                raise FormulaError(f"random term {r} has no columns")
        return ast

    def parse_response(self) -> Response:
        t = self.next()
        if t.kind != "name":
            raise FormulaError("response must be a column name or log(name)", t.pos)
        if t.text == "log" and self.tok.text == "(":
            self.next()
            name = self.next()
            if name.kind != "name":
                raise FormulaError("log() takes a single column name", name.pos)
            self.expect(")")
            return Response(name.text, log=True)
        if self.tok.text == "(":
            raise FormulaError(f"unknown function {t.text!r}; only log() is allowed on the response", t.pos)
        return Response(t.text)

    def parse_top_sum(self):
        out = []
        sign = "+"
        if self.tok.text == "-":
            self.next()
            sign = "-"
        while True:
            out.append((sign, self.parse_prod(top=True)))
            if self.tok.text in ("+", "-"):
                sign = self.next().text
            elif self.tok.text in ("|", "||"):
                raise FormulaError("'|' is only allowed inside a parenthesised random term", self.tok.pos)
            else:
                return out

    def parse_sum(self) -> Expr:
        node = self.parse_prod()
        while self.tok.text in ("+", "-"):
            op = self.next().text
            node = BinOp(op, node, self.parse_prod())
        return node

    def parse_prod(self, top: bool = False):
        node = self.parse_inter(top)
        while self.tok.text == "*":
            star = self.next()
            self._no_random(node, star)
            rhs = self.parse_inter()
            node = BinOp("*", node, rhs)
        return node

    def parse_inter(self, top: bool = False):
        node = self.parse_nest(top)
        while self.tok.text == ":":
            colon = self.next()
            self._no_random(node, colon)
            node = BinOp(":", node, self.parse_nest())
        return node

    def parse_nest(self, top: bool = False):
        node = self.parse_atom(top)
        while self.tok.text == "/":
            slash = self.next()
            self._no_random(node, slash)
            node = BinOp("/", node, self.parse_atom())
        return node

    @staticmethod
    def _no_random(node, tok: _Tok) -> None:
        if isinstance(node, RandomTerm):
            raise FormulaError(f"random terms cannot be combined with {tok.text!r}", tok.pos)

    def parse_atom(self, top: bool = False):
        t = self.tok
        if t.kind == "num":
            self.next()
            if t.text not in ("0", "1"):
                raise FormulaError(f"only 0 or 1 may appear as a constant, found {t.text}", t.pos)
            return Const(int(t.text))
        if t.kind == "name":
            self.next()
            if self.tok.text == "(":
                if t.text == "I":
                    return self.parse_power()
                raise FormulaError(f"unknown function {t.text!r}; only I() is supported in predictors", t.pos)
            return FixedTerm((Var(t.text),))
        if t.text == "(":
            self.next()
            inner = self.parse_sum()
            if self.tok.text in ("|", "||"):
                bar = self.next()
                if not top:
                    raise FormulaError("random terms must appear as top-level summands", bar.pos)
                if self.tok.kind == "end":
                    raise FormulaError("unmatched parenthesis: random term is not closed", self.tok.pos)
                if self.tok.text == ")":
                    raise FormulaError("'|' with empty grouping", self.tok.pos)
                grouping = self.parse_group()
                self.expect(")")
                return RandomTerm(inner, grouping, correlated=(bar.text == "|"))
            self.expect(")")
            return inner
        if t.kind == "end":
            raise FormulaError("unexpected end of formula", t.pos)
        raise FormulaError(f"unexpected {t.text!r}", t.pos)

    def parse_power(self) -> FixedTerm:
        self.expect("(")
        name = self.next()
        if name.kind != "name":
            raise FormulaError("I() expects name^power", name.pos)
        self.expect("^")
        k = self.next()
        if k.kind != "num" or not k.text.isdigit() or int(k.text) < 1:
            raise FormulaError("power must be a positive integer", k.pos)
        self.expect(")")
        return FixedTerm((Var(name.text, int(k.text)),))

    def parse_group(self) -> GroupExpr:
        node = self.parse_group_atom()
        while self.tok.text in (":", "/"):
            op = self.next().text
            node = GroupOp(op, node, self.parse_group_atom())
        return node

    def parse_group_atom(self) -> GroupExpr:
        t = self.next()
        if t.kind == "name":
            return GroupName(t.text)
        if t.text == "(":
            node = self.parse_group()
            self.expect(")")
            return node
        raise FormulaError("grouping must be factor names joined by ':' or '/'", t.pos)


def parse_formula(text: str) -> FormulaAst:
    """Parse formula text into an unexpanded AST.

    >>> str(expand_terms(parse_formula("y ~ a*b + (1|g/h)")))
    'y ~ 1 + a + b + a:b + (1 | g) + (1 | g:h)'
    """
    if not text or not text.strip():
        raise FormulaError("empty formula")
    return _Parser(text).parse()


# --------------------------------------------------------------------------
# Expansion
# --------------------------------------------------------------------------


def _merge(x: FixedTerm, y: FixedTerm) -> FixedTerm:
    return FixedTerm(tuple(dict.fromkeys(x.factors + y.factors)))


def _dedupe(terms) -> tuple[FixedTerm, ...]:
    seen = {}
    for t in terms:
        seen.setdefault(t.key, t)
    ordered = list(seen.values())
    ordered.sort(key=lambda t: t.order)  # stable: interactions after main effects
    return tuple(ordered)


def _expand(e: Expr) -> tuple[bool | None, list[FixedTerm]]:
    if isinstance(e, TermList):
        return e.intercept, list(e.terms)
    if isinstance(e, FixedTerm):
        return None, [e]
    if isinstance(e, Const):
        return bool(e.value), []
    li, lt = _expand(e.left)
    ri, rt = _expand(e.right)
    if e.op == "+":
        return (ri if ri is not None else li), lt + rt
    if e.op == "-":
        if ri is True:
            icpt = False
        else:
            icpt = li
        drop = {t.key for t in rt}
        return icpt, [t for t in lt if t.key not in drop]
    if li is not None or ri is not None:
        raise FormulaError(f"constants cannot be combined with {e.op!r}")
    if e.op == "*":
        return None, lt + rt + [_merge(x, y) for x in lt for y in rt]
    if e.op == ":":
        return None, [_merge(x, y) for x in lt for y in rt]
    if e.op == "/":
        outer = lt[0]
        for t in lt[1:]:
            outer = _merge(outer, t)
        return None, lt + [_merge(outer, y) for y in rt]
    raise FormulaError(f"unknown operator {e.op!r}")


def _to_termlist(e: Expr) -> TermList:
    icpt, terms = _expand(e)
    return TermList(True if icpt is None else icpt, _dedupe(terms))


def _expand_group(g: GroupExpr) -> list[tuple[str, ...]]:
    if isinstance(g, Grouping):
        return [g.factors]
    if isinstance(g, GroupName):
        return [(g.name,)]
    left = _expand_group(g.left)
    right = _expand_group(g.right)
    if g.op == ":":
        return [tuple(dict.fromkeys(a + b)) for a in left for b in right]
    outer = tuple(dict.fromkeys(f for a in left for f in a))
    return left + [tuple(dict.fromkeys(outer + b)) for b in right]


def expand_terms(ast: FormulaAst) -> FormulaAst:
    """Expand ``*``, ``/`` and ``:`` shorthand into canonical term lists.

    Random terms with a nested grouping ``(x|g1/g2)`` are distributed over
    ``(x|g1) + (x|g1:g2)``. Duplicate terms keep their first position.
    """
    fixed = _to_termlist(ast.fixed)
    randoms = []
    seen = set()
    for r in ast.random_terms:
        inner = _to_termlist(r.inner)
        for factors in _expand_group(r.grouping):
            term = RandomTerm(inner, Grouping(factors), r.correlated)
            key = (inner.intercept, tuple(t.key for t in inner.terms), frozenset(factors), r.correlated)
            if key not in seen:
                seen.add(key)
                randoms.append(term)
    return FormulaAst(ast.response, fixed, tuple(randoms))


def format_formula(ast: FormulaAst) -> str:
    """Canonical printed form: explicit intercept and fully expanded terms."""
    return str(expand_terms(ast))
