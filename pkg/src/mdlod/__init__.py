"""Localized orthogonal decomposition for mixed-dimensional elliptic problems in 2D."""
from .geometry import MixedDomain, SegmentId, build_domain, load_geometry, validate_domain
from .mesh import MeshHierarchy, agglomerate, build_hierarchy, grid_assignment, mesh_pair
from .fem import (CoefficientSet, DofMap, EnergyOperator, assemble_load, assemble_operator, build_space,
                  energy_norm, solve_dirichlet)
from .lod import (LodProblem, MultiscaleBasis, apply_Rl, assemble_constraints, build_basis, corrector_solve,
                  decay_profile, qoi, quasi_interpolate, setup, solve_multiscale)
from .experiments import ExperimentConfig, build_coefficients, fit_rates, run_experiment

__version__ = "0.1.0"

__all__ = [
    "MixedDomain", "SegmentId", "build_domain", "load_geometry", "validate_domain",
    "MeshHierarchy", "agglomerate", "build_hierarchy", "grid_assignment", "mesh_pair",
    "CoefficientSet", "DofMap", "EnergyOperator", "assemble_load", "assemble_operator", "build_space",
    "energy_norm", "solve_dirichlet",
    "LodProblem", "MultiscaleBasis", "apply_Rl", "assemble_constraints", "build_basis", "corrector_solve",
    "decay_profile", "qoi", "quasi_interpolate", "setup", "solve_multiscale",
    "ExperimentConfig", "build_coefficients", "fit_rates", "run_experiment",
]
