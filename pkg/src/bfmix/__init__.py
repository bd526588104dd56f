"""Multilayer variational dynamics of a 1D Bose-Fermi mixture in a trapped lattice."""

from .ansatz import MBState, init_guess, load_state, save_state
from .grid import GridSpec, build_grid
from .model import (
    InteractionSpec,
    SpeciesSpec,
    SystemSpec,
    TrapSpec,
    ValidationError,
    paper_system,
    quench,
    validate_system,
)

__version__ = "0.1.0"

__all__ = [
    "GridSpec",
    "build_grid",
    "InteractionSpec",
    "SpeciesSpec",
    "SystemSpec",
    "TrapSpec",
    "ValidationError",
    "paper_system",
    "quench",
    "validate_system",
    "MBState",
    "init_guess",
    "load_state",
    "save_state",
]
