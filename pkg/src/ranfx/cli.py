"""Command-line entry point: ``ranfx <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 lint failure or model error,
3 I/O error. Diagnostics go to stderr; data and reports go to stdout or
``--output``.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataframe import DataError, Dataset, FactorColumn, FactorRelation, NumericColumn, classify_relation, cross_tabulate, read_csv, write_csv_stream
from .design import SUM, TREATMENT, DesignError, build_matrices, CENTERING_CHOICES
from .estimate import FitError, FitOptions, fit_lmm, fit_text_summary, predict
from .formula import FormulaAst, FormulaError, expand_terms, parse_formula
from .inference import InferenceError, anova_satterthwaite, compare_models
from .simgen import FAMILIES, SimConfigError, read_config_file, simulate
from .structlint import DesignLintError, infer_design, lint_structure

EXIT_OK, EXIT_USAGE, EXIT_MODEL, EXIT_IO = 0, 1, 2, 3
OUTPUT_DIR_ENV = "RANFX_OUTPUT_DIR"


class UsageError(Exception):
    pass


class IOFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _key_values(items, what: str) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"{what} expects NAME=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ranfx", description="Linear mixed models with random-effects structure checks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, formula=True):
        sp.add_argument("data", help="CSV file with a header row")
        if formula:
            sp.add_argument("formula", help='model formula, e.g. "y ~ x + (1|subject)"')
        sp.add_argument("--json", action="store_true", help="machine-readable output")
        sp.add_argument("--factor", action="append", metavar="COL", help="read COL as a factor")
        sp.add_argument("--numeric", action="append", metavar="COL", help="read COL as numeric")
        sp.add_argument("-o", "--output", help=f"write output here (relative paths resolve under ${OUTPUT_DIR_ENV})")

    def model_flags(sp, default_method="REML"):
        sp.add_argument("--method", type=str.upper, choices=("REML", "ML"), default=default_method)
        sp.add_argument("--contrasts", choices=("treatment", "sum"), default="treatment")
        sp.add_argument("--center", action="append", metavar="VAR=POLICY", help=f"policy: {', '.join(CENTERING_CHOICES)}")

    sp = sub.add_parser("xtab", help="incidence matrix and nesting relation of two factors")
    common(sp, formula=False)
    sp.add_argument("row_factor")
    sp.add_argument("col_factor")

    sp = sub.add_parser("lint", help="check a random-effects structure against the design")
    common(sp)
    sp.add_argument("--subject", help="subject factor (default: first single-factor grouping)")
    sp.add_argument("--sampling", action="append", metavar="COL", help="extra random sampling factor")
    sp.add_argument("--nested", action="append", metavar="INNER:OUTER", help="declare INNER nested in OUTER")

    sp = sub.add_parser("fit", help="fit a linear mixed model")
    common(sp)
    model_flags(sp)

    sp = sub.add_parser("anova", help="F-tests with Satterthwaite df (lints first)")
    common(sp)
    model_flags(sp)
    sp.add_argument("--subject")
    sp.add_argument("--sampling", action="append", metavar="COL")
    sp.add_argument("--nested", action="append", metavar="INNER:OUTER")
    sp.add_argument("--force", action="store_true", help="run even if lint fails")

    sp = sub.add_parser("predict", help="fitted values as CSV")
    common(sp)
    model_flags(sp)
    sp.add_argument("--newdata", help="predict for these rows instead of the training data")
    group = sp.add_mutually_exclusive_group()
    group.add_argument("--fixed-only", action="store_true", help="omit all random effects")
    group.add_argument("--random", metavar="G1,G2", help="include only these groupings")

    sp = sub.add_parser("simulate", help="write a simulated dataset as CSV")
    sp.add_argument("family", choices=sorted(FAMILIES))
    sp.add_argument("--seed", type=int, help="overrides any seed in --config (default 0)")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    sp.add_argument("--config", help="flat key = value file")
    sp.add_argument("--json", action="store_true")
    sp.add_argument("-o", "--output")

    sp = sub.add_parser("compare", help="likelihood-ratio test of two nested models")
    sp.add_argument("data")
    sp.add_argument("formula_a")
    sp.add_argument("formula_b")
    sp.add_argument("--method", type=str.upper, choices=("REML", "ML"), default="ML")
    sp.add_argument("--contrasts", choices=("treatment", "sum"), default="treatment")
    sp.add_argument("--json", action="store_true")
    sp.add_argument("--factor", action="append", metavar="COL")
    sp.add_argument("--numeric", action="append", metavar="COL")
    sp.add_argument("-o", "--output")
    return p


# ---------------------------------------------------------------------------


def _output_path(path: str) -> Path:
    p = Path(path)
    base = os.environ.get(OUTPUT_DIR_ENV)
    if base and not p.is_absolute():
        p = Path(base) / p
    return p


def _emit(args, text: str) -> None:
    if getattr(args, "output", None):
        path = _output_path(args.output)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
        except OSError as exc:
            raise IOFailure(f"cannot write {path}: {exc}") from exc
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _load(args, path=None) -> Dataset:
    overrides = {c: "factor" for c in args.factor or []}
    overrides.update({c: "numeric" for c in args.numeric or []})
    try:
        return read_csv(path or args.data, overrides)
    except DataError as exc:
        raise IOFailure(str(exc)) from exc


def _parse(text: str) -> FormulaAst:
    try:
        return expand_terms(parse_formula(text))
    except FormulaError as exc:
        raise UsageError(f"bad formula: {exc}") from exc


def _contrasts(args):
    return SUM if args.contrasts == "sum" else TREATMENT


def _validate(args) -> None:
    """Check flag syntax before any file is touched."""
    args.centering = _key_values(getattr(args, "center", None), "--center")
    for var, policy in args.centering.items():
        if policy not in CENTERING_CHOICES:
            raise UsageError(f"--center {var}: policy must be one of {CENTERING_CHOICES}")
    args.nesting = []
    for item in getattr(args, "nested", None) or []:
        inner, sep, outer = item.partition(":")
        if not sep or not inner or not outer:
            raise UsageError(f"--nested expects INNER:OUTER, got {item!r}")
        args.nesting.append((inner, outer))
    args.settings = _key_values(getattr(args, "set", None), "--set")
    for attr in ("formula", "formula_a", "formula_b"):
        if getattr(args, attr, None) is not None:
            setattr(args, attr + "_ast", _parse(getattr(args, attr)))


def _fit(args, ds, ast):
    mats = build_matrices(ds, ast, _contrasts(args), args.centering)
    return fit_lmm(mats, FitOptions(args.method))


def _relation_label(rel: FactorRelation, a: str, b: str) -> str:
    if rel is FactorRelation.NESTED_A_IN_B:
        return f"Nested: {a} within {b}"
    if rel is FactorRelation.NESTED_B_IN_A:
        return f"Nested: {b} within {a}"
    if rel is FactorRelation.FULLY_CROSSED:
        return f"Fully crossed: {a} x {b}"
    return f"Partially crossed: {a} x {b}"


def _lint_report(args, ds, ast):
    groupings = [r.grouping.factors for r in ast.random_terms]
    subject = args.subject or next((g[0] for g in groupings if len(g) == 1), None)
    if subject is None:
        raise UsageError("cannot tell which column is the subject; pass --subject")
    fixed_vars = {v for t in ast.fixed_terms for v in t.variables}
    candidates = [v for v in dict.fromkeys(v for t in ast.fixed_terms for v in t.variables) if v != subject]
    sampling = list(args.sampling or [])
    for g in groupings:
        if len(g) == 1 and g[0] != subject and g[0] not in fixed_vars and g[0] not in sampling:
            sampling.append(g[0])
    design = infer_design(ds, subject, candidates, sampling, args.nesting)
    return lint_structure(ast, design)


def _cmd_xtab(args) -> int:
    ds = _load(args)
    for name in (args.row_factor, args.col_factor):
        if name not in ds:
            raise UsageError(f"no column named {name!r}")
    inc = cross_tabulate(ds, args.row_factor, args.col_factor)
    rel = classify_relation(inc)
    label = _relation_label(rel, args.row_factor, args.col_factor)
    if args.json:
        _emit(args, json.dumps({
            "row_factor": inc.row_factor,
            "col_factor": inc.col_factor,
            "row_levels": list(inc.row_levels),
            "col_levels": list(inc.col_levels),
            "counts": inc.counts.tolist(),
            "relation": rel.value,
            "label": label,
        }, indent=2))
    else:
        _emit(args, inc.render() + "\n" + label)
    return EXIT_OK


def _cmd_lint(args) -> int:
    ast = args.formula_ast
    ds = _load(args)
    report = _lint_report(args, ds, ast)
    _emit(args, report.to_json() if args.json else report.render())
    return EXIT_MODEL if report.verdict == "Fail" else EXIT_OK


def _cmd_fit(args) -> int:
    ast = args.formula_ast
    ds = _load(args)
    fit = _fit(args, ds, ast)
    _emit(args, json.dumps(fit.summary_dict(), indent=2) if args.json else fit_text_summary(fit))
    return EXIT_OK


def _cmd_anova(args) -> int:
    ast = args.formula_ast
    ds = _load(args)
    report = _lint_report(args, ds, ast)
    if report.verdict == "Fail" and not args.force:
        sys.stderr.write(report.render() + "\n")
        sys.stderr.write("refusing to run the ANOVA on a structure that fails lint; use --force to override\n")
        return EXIT_MODEL
    fit = _fit(args, ds, ast)
    table = anova_satterthwaite(fit)
    if args.json:
        _emit(args, json.dumps({**table.as_dict(), "method": fit.method, "lint": report.as_dict()}, indent=2))
    else:
        text = table.render()
        if report.findings:
            text += "\n\n" + report.render()
        _emit(args, text)
    return EXIT_OK


def _cmd_predict(args) -> int:
    ast = args.formula_ast
    ds = _load(args)
    new = _load(args, args.newdata) if args.newdata else None
    fit = _fit(args, ds, ast)
    if args.fixed_only:
        include = False
    elif args.random:
        include = [g.strip() for g in args.random.split(",") if g.strip()]
    else:
        include = True
    target = new if new is not None else fit.mats.data
    pred = predict(fit, target, include)
    if args.json:
        _emit(args, json.dumps({"predicted": pred.tolist()}, indent=2))
        return EXIT_OK
    out = target.with_column("predicted", NumericColumn(np.asarray(pred, float), np.zeros(len(pred), bool)))
    buf = io.StringIO()
    write_csv_stream(out, buf)
    _emit(args, buf.getvalue())
    return EXIT_OK


def _cmd_simulate(args) -> int:
    settings = dict(args.settings)
    if args.config:
        try:
            settings = {**read_config_file(args.config), **settings}
        except OSError as exc:
            raise IOFailure(f"cannot read {args.config}: {exc}") from exc
    if args.seed is not None:
        settings["seed"] = str(args.seed)
    ds = simulate(args.family, settings)
    if args.json:
        cols = {}
        for name in ds.names:
            col = ds[name]
            if isinstance(col, FactorColumn):
                cols[name] = col.labels()
            else:
                cols[name] = [None if m else float(v) for v, m in zip(col.values, col.missing)]
        _emit(args, json.dumps({"family": args.family, "n_rows": ds.n_rows, "columns": cols}))
    else:
        buf = io.StringIO()
        write_csv_stream(ds, buf)
        _emit(args, buf.getvalue())
    return EXIT_OK


def _cmd_compare(args) -> int:
    ast_a, ast_b = args.formula_a_ast, args.formula_b_ast
    ds = _load(args)
    fit_a = fit_lmm(build_matrices(ds, ast_a, _contrasts(args)), FitOptions(args.method))
    fit_b = fit_lmm(build_matrices(ds, ast_b, _contrasts(args)), FitOptions(args.method))
    res = compare_models(fit_a, fit_b)
    _emit(args, json.dumps(res.as_dict(), indent=2) if args.json else res.render())
    return EXIT_OK


COMMANDS = {
    "xtab": _cmd_xtab,
    "lint": _cmd_lint,
    "fit": _cmd_fit,
    "anova": _cmd_anova,
    "predict": _cmd_predict,
    "simulate": _cmd_simulate,
    "compare": _cmd_compare,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _validate(args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"ranfx: usage error: {exc}\n")
        return EXIT_USAGE
    except IOFailure as exc:
        sys.stderr.write(f"ranfx: I/O error: {exc}\n")
        return EXIT_IO
    except (DataError, DesignError, FitError, InferenceError, DesignLintError, SimConfigError) as exc:
        sys.stderr.write(f"ranfx: error: {exc}\n")
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
