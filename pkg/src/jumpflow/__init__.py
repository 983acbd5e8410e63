"""Simulation and verification tools for jump SDEs and nonlocal Fokker-Planck equations."""
from .empirical import MarginalFlow, MollifiedView, ProbCloud, wasserstein1_1d
from .model import CoefficientSet, JumpKernel, audit_linear_growth
from .oracle import fp_grid_solve, list_scenarios, scenario
from .simulate import PathEnsemble, simulate_base_paths, simulate_regularized_paths, time_grid
from .verify import TestFunction, apply_generator, weak_residual

__version__ = "0.1.0"

__all__ = [
    "CoefficientSet",
    "JumpKernel",
    "MarginalFlow",
    "MollifiedView",
    "PathEnsemble",
    "ProbCloud",
    "TestFunction",
    "apply_generator",
    "audit_linear_growth",
    "fp_grid_solve",
    "list_scenarios",
    "scenario",
    "simulate_base_paths",
    "simulate_regularized_paths",
    "time_grid",
    "wasserstein1_1d",
    "weak_residual",
]
