"""Kernel equation learning: recover a differential equation and its
solutions from scarce observations by kernel optimal recovery.

Submodules
----------
kernels
    Kernel families with closed-form derivatives.
operators
    Operator bundles, solution models and the feature map.
gram
    Gram assembly, jittered Cholesky, Nystrom selection, arrowhead solver.
twostep
    Smooth-then-regress equation learning.
onestep
    Joint learning through a Levenberg-Marquardt driver.
opsolve
    Solving a learned equation for new data.
bench
    Datasets, metrics, experiment pipelines and the ``keql`` CLI.
"""

from .kernels import RBF, HybridProduct, Matern, Polynomial, RationalQuadratic, kernel_from_dict
from .onestep import LMConfig, build_problem, fit_1step, lm_minimize
from .operators import DiffOperatorSet, KnownPart, SolutionModel, feature_map
from .opsolve import AnalyticEquation, Constraint, SolveSpec, forecast_ode, solve_learned_pde
from .twostep import EquationModel, ObservationSet, fit_2step

__version__ = "0.1.0"

__all__ = [
    "RBF",
    "RationalQuadratic",
    "Matern",
    "Polynomial",
    "HybridProduct",
    "kernel_from_dict",
    "DiffOperatorSet",
    "KnownPart",
    "SolutionModel",
    "feature_map",
    "ObservationSet",
    "EquationModel",
    "fit_2step",
    "LMConfig",
    "lm_minimize",
    "build_problem",
    "fit_1step",
    "Constraint",
    "AnalyticEquation",
    "SolveSpec",
    "solve_learned_pde",
    "forecast_ode",
]
