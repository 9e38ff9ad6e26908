"""Robust multi-group regression: min-max regret and friends.

Fit linear and canonical-link GLM models across heterogeneous
sub-populations by minimizing the worst per-group regret, alongside
pooled ERM, group-DRO, and maximin-explained-variance baselines; solve
the population-level duals (minimal enclosing ellipsoids and Bregman
balls); and simulate hierarchical data to stress all of them.
"""

__version__ = "0.1.0"

from .data import (
    CsvSchema,
    GroupedDataset,
    GroupSample,
    ValidationReport,
    load_grouped_csv,
    save_grouped_csv,
    validate,
)
from .duality import (
    DualSolution,
    EmpiricalCumulant,
    bregman_div,
    check_degeneration,
    conjugate_eval,
    mmr_dual_glm,
    mmr_dual_lm,
    mmv_dual_lm,
)
from .evaluate import LocoReport, auroc, brier, loco_harness
from .exceptions import (
    ConvergenceError,
    DataError,
    DomainError,
    LossMismatchError,
    MmrkitError,
    NonPsdError,
    SeparationError,
    SingularityError,
)
from .families import GlmFamily, family_eval, get_family, pointwise_loss, square_loss
from .hiersim import (
    BallRegion,
    MetaDistribution,
    ScenarioConfig,
    ScenarioReport,
    ante_worst_regret_glm,
    ante_worst_regret_lm,
    gen_lm_data,
    gen_logit_data,
    gen_uninformative_group,
    rng_for,
    run_scenario,
    sample_meta,
)
from .local_fit import LocalFit, empirical_regret, glm_newton, group_summaries, least_squares
from .numerics import (
    SimplexQpResult,
    max_eigenvalue,
    project_simplex,
    solve_simplex_qp,
    spd_solve,
)
from .solvers import (
    FitResult,
    SolverOptions,
    estimate_lipschitz,
    fit_gdro,
    fit_mmr,
    fit_mmv,
    fit_pooled,
    worst_empirical_regret,
)

__all__ = [
    "__version__",
    "BallRegion",
    "ConvergenceError",
    "CsvSchema",
    "DataError",
    "DomainError",
    "DualSolution",
    "EmpiricalCumulant",
    "FitResult",
    "GlmFamily",
    "GroupSample",
    "GroupedDataset",
    "LocalFit",
    "LocoReport",
    "LossMismatchError",
    "MetaDistribution",
    "MmrkitError",
    "NonPsdError",
    "ScenarioConfig",
    "ScenarioReport",
    "SeparationError",
    "SimplexQpResult",
    "SingularityError",
    "SolverOptions",
    "ValidationReport",
    "ante_worst_regret_glm",
    "ante_worst_regret_lm",
    "auroc",
    "bregman_div",
    "brier",
    "check_degeneration",
    "conjugate_eval",
    "empirical_regret",
    "estimate_lipschitz",
    "family_eval",
    "fit_gdro",
    "fit_mmr",
    "fit_mmv",
    "fit_pooled",
    "gen_lm_data",
    "gen_logit_data",
    "gen_uninformative_group",
    "get_family",
    "glm_newton",
    "group_summaries",
    "least_squares",
    "load_grouped_csv",
    "loco_harness",
    "max_eigenvalue",
    "mmr_dual_glm",
    "mmr_dual_lm",
    "mmv_dual_lm",
    "pointwise_loss",
    "project_simplex",
    "rng_for",
    "run_scenario",
    "sample_meta",
    "save_grouped_csv",
    "solve_simplex_qp",
    "spd_solve",
    "square_loss",
    "validate",
    "worst_empirical_regret",
]
