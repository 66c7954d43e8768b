"""Stratified randomized experiments with covariate-adjusted treatment effect estimation."""

__version__ = "0.1.0"

from .adjust import (
    AdjustedEstimate,
    LateEstimate,
    adaptive,
    aipw_varying,
    diff_means,
    estimate,
    fixed_effects,
    group_ols,
    lin,
    naive,
    partialled_lin,
    tom,
    varying_coefficient,
    wald_late,
)
from .core import CsvSchema, ExperimentData, Propensity, load_csv, solve_least_squares
from .design import (
    Design,
    GroupPairing,
    assign_coarse,
    assign_complete,
    assign_matched_tuples,
    assign_varying_propensity,
    pair_groups,
)
from .estimators import AdjustedATE, MatchedTupleDesigner, check_experiment
from .exceptions import *  # noqa: F401,F403
from .inference import VarianceReport, ehw_hc2_variance, exact_variance, late_variance
from .montecarlo import (
    SimResult,
    SimScenario,
    compute_excess_risk,
    generate_model,
    impute_replay,
    oracle_semiparam,
    run_scenario,
)
