"""Finite-volume simulation of nonlinear diffusion SPDEs with conservative
gradient noise on the torus, with Monte Carlo checks of their stability,
moment, entropy and regularity estimates.
"""

from .coefficients import ItoCoefficients, SeparableCoefficients, TrigField, TrigMode, separable
from .noise import NoisePath, pair_sum, refine, sample_path
from .nonlinearity import make_family, mcf_regularize, regularize
from .solver import GridFunction, SolverConfig, Trajectory, run, run_batch, run_coupled, run_ensemble, step

__version__ = "0.1.0"

__all__ = [
    "GridFunction",
    "ItoCoefficients",
    "NoisePath",
    "SeparableCoefficients",
    "SolverConfig",
    "Trajectory",
    "TrigField",
    "TrigMode",
    "make_family",
    "mcf_regularize",
    "pair_sum",
    "refine",
    "regularize",
    "run",
    "run_batch",
    "run_coupled",
    "run_ensemble",
    "sample_path",
    "separable",
    "step",
]
