"""Counterfactual restricted mean durations for semi-competing promotion and
retirement processes."""

__version__ = "0.1.0"

from .analysis import TwoProcessModel, fit_models
from .cox import CoxFit, build_view, fit
from .data import (
    CovariateTrajectory,
    Dataset,
    ProcessObservation,
    RestrictionWindow,
    SubjectRecord,
    validate_dataset,
)
from .prediction import CounterfactualPolicy, restricted_means, state_probability_curve
from .variance import estimate_with_se

__all__ = [
    "CounterfactualPolicy",
    "CovariateTrajectory",
    "CoxFit",
    "Dataset",
    "ProcessObservation",
    "RestrictionWindow",
    "SubjectRecord",
    "TwoProcessModel",
    "build_view",
    "estimate_with_se",
    "fit",
    "fit_models",
    "restricted_means",
    "state_probability_curve",
    "validate_dataset",
]
