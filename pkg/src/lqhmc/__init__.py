"""Density evolution of Hamiltonian Monte Carlo in weighted L^q spaces.

The package discretises the transfer operator that pushes a position density
through one HMC step, and checks its contraction and convergence properties
numerically against particle chains.
"""
__version__ = "0.1.0"

from .errors import ConfigError, DomainError, FlowDivergenceError, GridMismatchError, SizeGuardError
from .lq_space import ExponentPair, Grid, GridDensity, alpha, box_indicator, conjugate, norm, pairing
from .phase_flow import ExactGaussianRotation, HamiltonianEnergy, Leapfrog, PhasePoint, apply, apply_inverse
from .transfer_op import TransferOperator, apply_S, apply_T, apply_T_adjoint, assemble_matrix

__all__ = [
    "ConfigError", "DomainError", "FlowDivergenceError", "GridMismatchError", "SizeGuardError",
    "ExponentPair", "Grid", "GridDensity", "alpha", "box_indicator", "conjugate", "norm", "pairing",
    "ExactGaussianRotation", "HamiltonianEnergy", "Leapfrog", "PhasePoint", "apply", "apply_inverse",
    "TransferOperator", "apply_S", "apply_T", "apply_T_adjoint", "assemble_matrix",
]
