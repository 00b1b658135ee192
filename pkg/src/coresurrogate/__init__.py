"""Load-follow reactor-core simulation with fast learned surrogates.

Modules:
    plant        stiff core model and equilibrium solves
    integrators  reference TR-BDF2 solver and the explicit slow-block step
    dataset      scenario generation, corpus storage and normalization
    autodiff     reverse-mode tensor engine, attention, Adam, checkpoints
    pinn         attention flux surrogate and the hybrid rollout
    gbt          vector-leaf gradient boosted trees and block rollouts
    bench        metrics, timing and report artifacts
    cli          command-line entry point
"""
from .errors import (ConfigError, ConvergenceError, CorpusError, DomainError, GenerationError,
                     InfeasibleEquilibriumError, IntegrationError, ModelError, NonFiniteError,
                     ShapeError)
from .plant import DEFAULT_CONSTANTS, PlantConstants, PowerProfile, equilibrium_state
from .trajectory import Trajectory

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ConvergenceError", "CorpusError", "DomainError", "GenerationError",
    "InfeasibleEquilibriumError", "IntegrationError", "ModelError", "NonFiniteError", "ShapeError",
    "DEFAULT_CONSTANTS", "PlantConstants", "PowerProfile", "equilibrium_state", "Trajectory",
]
