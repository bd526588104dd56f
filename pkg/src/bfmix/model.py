"""Physical description of the 1D Bose-Fermi mixture in recoil units.

Units: hbar = M = k = 1, so lengths are in 1/k, energies follow from the
kinetic term ``-1/(2 mass) d^2/dx^2`` and the lattice has period pi.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import GridSpec, build_grid, kinetic_matrix, potential_vector

__all__ = [
    "ZETA_HALF_ABS",
    "ValidationError",
    "SpeciesSpec",
    "InteractionSpec",
    "TrapSpec",
    "SystemSpec",
    "effective_coupling_1d",
    "validate_system",
    "quench",
    "paper_system",
    "one_body_hamiltonian",
]

#: |zeta(1/2)|, Riemann zeta at one half.
ZETA_HALF_ABS = 1.4603545088095868


class ValidationError(ValueError):
    """Raised with every violated invariant, each prefixed by its field path."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


BOSONIC = "bosonic"
FERMIONIC = "fermionic"


@dataclass(frozen=True)
class SpeciesSpec:
    label: str
    count: int
    statistics: str
    mass: float = 1.0
    n_orbitals: int = 1

    def check(self, path: str) -> list[str]:
        out = []
        if self.label not in ("B", "F"):
            out.append(f"{path}.label: must be 'B' or 'F'")
        if self.statistics not in (BOSONIC, FERMIONIC):
            out.append(f"{path}.statistics: must be '{BOSONIC}' or '{FERMIONIC}'")
        if int(self.count) != self.count or self.count < 1:
            out.append(f"{path}.count: must be a positive integer")
        if not self.mass > 0:
            out.append(f"{path}.mass: must be positive")
        if int(self.n_orbitals) != self.n_orbitals or self.n_orbitals < 1:
            out.append(f"{path}.n_orbitals: must be a positive integer")
        elif self.statistics == FERMIONIC and self.n_orbitals < self.count:
            out.append(
                f"{path}.n_orbitals: Pauli exclusion needs m >= N "
                f"({self.n_orbitals} < {self.count})"
            )
        return out


@dataclass(frozen=True)
class InteractionSpec:
    """Contact couplings. Spin-polarized fermions do not interact."""

    g_bb: float = 0.05
    g_fb: float = 0.2

    @property
    def g_ff(self) -> float:
        return 0.0

    def check(self, path: str) -> list[str]:
        out = []
        if not self.g_bb >= 0:
            out.append(f"{path}.g_bb: must be >= 0")
        if not self.g_fb >= 0:
            out.append(f"{path}.g_fb: must be >= 0")
        return out


@dataclass(frozen=True)
class TrapSpec:
    omega: float = 0.1
    v0: float = 3.0
    k: float = 1.0

    @property
    def period(self) -> float:
        return math.pi / self.k

    def check(self, path: str) -> list[str]:
        out = []
        if not self.omega >= 0:
            out.append(f"{path}.omega: must be >= 0")
        if not self.v0 >= 0:
            out.append(f"{path}.v0: must be >= 0")
        if self.k != 1.0:
            out.append(f"{path}.k: lattice wavenumber is fixed to 1")
        return out


@dataclass(frozen=True)
class SystemSpec:
    bosons: SpeciesSpec
    fermions: SpeciesSpec
    interactions: InteractionSpec = field(default_factory=InteractionSpec)
    trap: TrapSpec = field(default_factory=TrapSpec)
    grid: GridSpec = field(
        default_factory=lambda: GridSpec(475, -9.5 * math.pi, 9.5 * math.pi)
    )
    schmidt_rank: int = 1

    def species(self, label: str) -> SpeciesSpec:
        if label == "B":
            return self.bosons
        if label == "F":
            return self.fermions
        raise KeyError(label)

    @property
    def configuration(self) -> tuple[int, int, int]:
        """Truncation triple ``(M; m_F; m_B)``."""
        return (self.schmidt_rank, self.fermions.n_orbitals, self.bosons.n_orbitals)

    @property
    def well_edges(self) -> np.ndarray:
        """Lattice maxima (odd multiples of pi/2) inside or on the box."""
        lo = math.ceil(self.grid.x_minus / self.trap.period - 0.5 - 1e-9)
        hi = math.floor(self.grid.x_plus / self.trap.period - 0.5 + 1e-9)
        return (np.arange(lo, hi + 1) + 0.5) * self.trap.period

    @property
    def n_wells(self) -> int:
        return max(len(self.well_edges) - 1, 0)


def effective_coupling_1d(a_s: float, a_perp: float, mass: float = 1.0) -> float:
    """Effective 1D contact strength of a transversally confined pair.

    ``g = 2 a_s / (mass a_perp^2) / (1 - |zeta(1/2)| a_s / (sqrt(2) a_perp))``
    with hbar = 1.  Raises at and beyond the confinement-induced resonance.
    """
    if not a_perp > 0:
        raise ValueError("a_perp must be positive")
    denom = 1.0 - ZETA_HALF_ABS * a_s / (math.sqrt(2.0) * a_perp)
    if denom <= 0.0:
        raise ValueError(
            "confinement-induced resonance: denominator "
            f"1 - |zeta(1/2)| a_s/(sqrt(2) a_perp) = {denom!r} <= 0"
        )
    return 2.0 * a_s / (mass * a_perp**2) / denom


def validate_system(spec: SystemSpec) -> SystemSpec:
    """Check every invariant and return the (unchanged) spec.

    Derived geometry is available as ``spec.well_edges`` / ``spec.n_wells``.
    """
    problems = []
    problems += spec.bosons.check("bosons")
    problems += spec.fermions.check("fermions")
    if spec.bosons.statistics != BOSONIC or spec.bosons.label != "B":
        problems.append("bosons: must be labelled 'B' with bosonic statistics")
    if spec.fermions.statistics != FERMIONIC or spec.fermions.label != "F":
        problems.append("fermions: must be labelled 'F' with fermionic statistics")
    problems += spec.interactions.check("interactions")
    problems += spec.trap.check("trap")
    problems += ["grid." + p for p in spec.grid.check()]
    if int(spec.schmidt_rank) != spec.schmidt_rank or spec.schmidt_rank < 1:
        problems.append("schmidt_rank: must be a positive integer")
    if problems:
        raise ValidationError(problems)
    return spec


def quench(spec: SystemSpec, omega_f: float) -> SystemSpec:
    """Sudden change of the trap frequency; every other field is kept."""
    if not omega_f >= 0:
        raise ValueError("omega_f must be >= 0")
    return dataclasses.replace(spec, trap=dataclasses.replace(spec.trap, omega=omega_f))


def paper_system(
    n_bosons: int = 20,
    n_fermions: int = 2,
    g_bb: float = 0.05,
    g_fb: float = 0.2,
    configuration: tuple[int, int, int] = (10, 8, 4),
) -> SystemSpec:
    """Full-scale nineteen-well setup with omega = 0.1, V0 = 3 and 475 points."""
    schmidt, m_f, m_b = configuration
    return validate_system(
        SystemSpec(
            bosons=SpeciesSpec("B", n_bosons, BOSONIC, 1.0, m_b),
            fermions=SpeciesSpec("F", n_fermions, FERMIONIC, 1.0, m_f),
            interactions=InteractionSpec(g_bb, g_fb),
            trap=TrapSpec(0.1, 3.0),
            grid=GridSpec(475, -9.5 * math.pi, 9.5 * math.pi),
            schmidt_rank=schmidt,
        )
    )


def one_body_hamiltonian(system: SystemSpec, label: str, grid=None) -> np.ndarray:
    """Dense single-particle Hamiltonian ``T + V`` of one species on the grid."""
    grid = grid if grid is not None else build_grid(system.grid)
    mass = system.species(label).mass
    h = kinetic_matrix(grid, mass)
    h[np.diag_indices_from(h)] += potential_vector(system.trap, grid, mass)
    return h
