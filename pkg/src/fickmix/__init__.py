"""Kinetic derivation of Fick cross-diffusion for gaseous mixtures.

The package assembles the linearized Boltzmann collision operator for a
multi-species Maxwell-molecule mixture on a truncated velocity grid, extracts
the cross-diffusion (Fick) matrix from it, integrates the resulting fluid
system, and checks the kinetic-to-fluid limit numerically on a slab.
"""

__version__ = "0.1.0"

from .errors import BlowUpError, VerificationError
from .mixture import Mixture, maxwellian_field, reduced_maxwellian, validate_hypotheses
from .velocity_grid import VelocityGrid, build_grid, integrate
from .collision import apply_Q, entropy_production, precompute_stencil
from .linear_operator import assemble_L, explicit_constants, numeric_spectral_gap
from .fick_matrix import ComplementSolver, assemble_fick, eigen_report, matrix_function
from .fick_solver import (
    ConcentrationField,
    QuasilinearCoefficients,
    SpectralFlow,
    frozen_provider,
    hs_norm,
    kernel_drift_check,
    rescaling_residual,
    run,
    single_mode_field,
    step,
    validate_initial,
)
from .kinetic import (
    build_source,
    eps_convergence_study,
    evolve_linearized,
    moment_flux,
    well_prepared_initial,
)
from .config import RunConfig, load_config, parse_config_text

__all__ = [
    "BlowUpError",
    "VerificationError",
    "Mixture",
    "maxwellian_field",
    "reduced_maxwellian",
    "validate_hypotheses",
    "VelocityGrid",
    "build_grid",
    "integrate",
    "apply_Q",
    "entropy_production",
    "precompute_stencil",
    "assemble_L",
    "explicit_constants",
    "numeric_spectral_gap",
    "ComplementSolver",
    "assemble_fick",
    "eigen_report",
    "matrix_function",
    "ConcentrationField",
    "QuasilinearCoefficients",
    "SpectralFlow",
    "frozen_provider",
    "hs_norm",
    "kernel_drift_check",
    "rescaling_residual",
    "run",
    "single_mode_field",
    "step",
    "validate_initial",
    "build_source",
    "eps_convergence_study",
    "evolve_linearized",
    "moment_flux",
    "well_prepared_initial",
    "RunConfig",
    "load_config",
    "parse_config_text",
]
