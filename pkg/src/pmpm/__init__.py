"""Optimal control of the twist-and-turn spin model for Fisher-information metrology."""
from .costs import CFI, QFI, Fidelity, cfi_value, measurement_distribution, qfi_value
from .dynamics import (
    AugmentedState,
    ControlProtocol,
    CostatePair,
    ProblemSpec,
    evolve_costate_backward,
    evolve_forward,
    propagate_interval,
)
from .optimizer import (
    OptimizationResult,
    OptimizerOptions,
    control_hamiltonian,
    dimensionless_rescale,
    optimize,
    optimize_continuation,
    phi_statistics,
    project_control,
    switching_function,
)
from .spin import build_operators, coherent_x_state, hl_state, jx_eigensystem

__version__ = "0.1.0"

__all__ = [
    "AugmentedState",
    "CFI",
    "ControlProtocol",
    "CostatePair",
    "Fidelity",
    "OptimizationResult",
    "OptimizerOptions",
    "ProblemSpec",
    "QFI",
    "build_operators",
    "cfi_value",
    "coherent_x_state",
    "control_hamiltonian",
    "dimensionless_rescale",
    "evolve_costate_backward",
    "evolve_forward",
    "hl_state",
    "jx_eigensystem",
    "measurement_distribution",
    "optimize",
    "optimize_continuation",
    "phi_statistics",
    "project_control",
    "propagate_interval",
    "qfi_value",
    "switching_function",
]
