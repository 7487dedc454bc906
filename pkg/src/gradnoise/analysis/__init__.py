"""Estimators and experiments over simulated trajectories."""

from .entropy import (
    EntropyObserver,
    EntropyPair,
    QuadraticEntropy,
    QuadratureBrackets,
    SeparableBrackets,
    TestFunction,
    entropy_residual,
    make_brackets,
)
from .experiments import (
    contraction_experiment,
    entropy_deterministic_check,
    entropy_refinement_study,
    frac_regularity_check,
    initial_time_continuity,
    jsonable,
    moment_check,
    moment_uniformity,
    phi_stability_experiment,
    phi_stability_trend,
)
from .stats import EnsembleStats, fsum_mean, l1_distance

__all__ = [
    "EnsembleStats",
    "EntropyObserver",
    "EntropyPair",
    "QuadraticEntropy",
    "QuadratureBrackets",
    "SeparableBrackets",
    "TestFunction",
    "contraction_experiment",
    "entropy_deterministic_check",
    "entropy_refinement_study",
    "entropy_residual",
    "frac_regularity_check",
    "fsum_mean",
    "initial_time_continuity",
    "jsonable",
    "l1_distance",
    "make_brackets",
    "moment_check",
    "moment_uniformity",
    "phi_stability_experiment",
    "phi_stability_trend",
]
