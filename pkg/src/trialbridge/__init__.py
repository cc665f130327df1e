"""Bridged treatment comparisons across two randomized trials.

Inverse-probability-weighted Hajek estimators of the average treatment
effect between arms evaluated in different trials, a shared-arm diagnostic,
stacked-estimating-equation sandwich inference, and a simulation harness.
"""

from .data import TrialDataset
from .errors import (
    ConvergenceError,
    EstimationError,
    PositivityError,
    SeparationError,
    TrialBridgeError,
    ValidationError,
)
from .estimators import (
    AteEstimate,
    DiagnosticResult,
    NaiveVariants,
    diagnostic,
    estimate_multi_span,
    estimate_single_span,
    fit_multi_span,
    fit_single_span,
    hajek_mean_nonfocal,
    hajek_mean_target,
    naive_variants,
)
from .features import KnotSet, ModelSpec, Term, build_design, compute_knots, rcs_basis
from .glm import LogisticFit, fit_logistic, score_contributions
from .numerics import (
    EstimatingStack,
    SandwichResult,
    Z95,
    numerical_jacobian,
    sandwich,
    solve_stack,
)
from .sim import ScenarioConfig, SimSummary, generate_dataset, run_study, true_ate
from .weights import (
    WeightSet,
    missingness_weights,
    sampling_odds_weights,
    treatment_weights,
)

__version__ = "0.1.0"

__all__ = [
    "AteEstimate",
    "ConvergenceError",
    "DiagnosticResult",
    "EstimatingStack",
    "EstimationError",
    "KnotSet",
    "LogisticFit",
    "ModelSpec",
    "NaiveVariants",
    "PositivityError",
    "SandwichResult",
    "ScenarioConfig",
    "SeparationError",
    "SimSummary",
    "Term",
    "TrialBridgeError",
    "TrialDataset",
    "ValidationError",
    "WeightSet",
    "Z95",
    "build_design",
    "compute_knots",
    "diagnostic",
    "estimate_multi_span",
    "estimate_single_span",
    "fit_logistic",
    "fit_multi_span",
    "fit_single_span",
    "generate_dataset",
    "hajek_mean_nonfocal",
    "hajek_mean_target",
    "missingness_weights",
    "naive_variants",
    "numerical_jacobian",
    "rcs_basis",
    "run_study",
    "sampling_odds_weights",
    "sandwich",
    "score_contributions",
    "solve_stack",
    "treatment_weights",
    "true_ate",
]
