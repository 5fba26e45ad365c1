"""Desk-scale laboratory for stochastic port-Hamiltonian systems."""

__version__ = "0.1.0"

from .core import (
    EnergyFunction,
    PortSignals,
    SPHSModel,
    StructureField,
    ValidationReport,
    eval_dynamics,
    linear_model,
    load_model,
    make_canonical_system,
    port_signals,
    save_model,
    validate_structure,
)
from .integrate import (
    Ensemble,
    IntegratorConfig,
    Trajectory,
    collocation_step,
    euler_maruyama_step,
    heun_stratonovich_step,
    ito_drift_correction,
    iter_simulate,
    sample_truncated_gaussian,
    simulate,
)

__all__ = [
    "EnergyFunction",
    "Ensemble",
    "IntegratorConfig",
    "PortSignals",
    "SPHSModel",
    "StructureField",
    "Trajectory",
    "ValidationReport",
    "collocation_step",
    "euler_maruyama_step",
    "eval_dynamics",
    "heun_stratonovich_step",
    "ito_drift_correction",
    "iter_simulate",
    "linear_model",
    "load_model",
    "make_canonical_system",
    "port_signals",
    "sample_truncated_gaussian",
    "save_model",
    "simulate",
    "validate_structure",
]
