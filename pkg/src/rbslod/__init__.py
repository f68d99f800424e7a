"""Localized multiscale solver with reduced-basis offline compression.

Coarse-scale solutions of parametric reaction-convection-diffusion
problems on the unit square: an offline phase trains patch-local reduced
spaces greedily, the online phase assembles localized basis functions for
any parameter from precomputed tables and solves one sparse coarse system
per right-hand side.
"""

from .mesh import (BCSpec, CoarseMesh, FineMesh, Patch, build_coarse_mesh,
                   build_fine_mesh, build_patch, max_feasible_ell,
                   patch_compute_classes, patch_equivalence_classes)
from .problems import (ParametricProblem, RhsSpec, constant_rhs, gaussian_rhs,
                       get_problem, mass_transfer_problem,
                       model_diffusion_problem, sample_training_set,
                       sinusoidal_rhs)

__all__ = [
    "BCSpec", "CoarseMesh", "FineMesh", "Patch", "ParametricProblem", "RhsSpec",
    "build_coarse_mesh", "build_fine_mesh", "build_patch", "constant_rhs",
    "gaussian_rhs", "get_problem", "mass_transfer_problem", "max_feasible_ell",
    "model_diffusion_problem", "patch_compute_classes",
    "patch_equivalence_classes", "sample_training_set", "sinusoidal_rhs",
]

__version__ = "0.1.0"
