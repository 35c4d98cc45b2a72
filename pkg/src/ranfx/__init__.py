"""Linear mixed-effects models with design-aware random-effects checks."""

from __future__ import annotations

__version__ = "0.1.0"

from .dataframe import (
    DataError,
    Dataset,
    FactorColumn,
    FactorRelation,
    IncidenceMatrix,
    NumericColumn,
    classify_relation,
    concat_factors,
    cross_tabulate,
    read_csv,
    write_csv,
)
from .design import SUM, TREATMENT, Contrasts, DesignError, ModelMatrices, build_matrices, count_random_effects
from .estimate import (
    FitError,
    FitOptions,
    LmmFit,
    OverSpecifiedError,
    fit_lmm,
    is_singular,
    predict,
    profiled_deviance,
    ranef,
)
from .formula import FormulaAst, FormulaError, expand_terms, format_formula, parse_formula
from .inference import AnovaTable, FTestRow, anova_satterthwaite, classical_rm_anova, compare_models, f_sf
from .nonlinear import NegExpParams, fit_negexp_population, fit_negexp_subject, negexp_predict
from .simgen import CrossedConfig, FactorialConfig, LongitudinalConfig, sim_crossed, sim_factorial, sim_longitudinal
from .structlint import DesignDeclaration, LintReport, infer_design, lint_structure, recommend_structure
