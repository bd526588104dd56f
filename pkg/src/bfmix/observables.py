"""Position-space measurements on a layered state.

All grid objects use function values (``c / sqrt(dx)``) so that the
quadrature ``dx * sum`` reproduces continuum integrals.  Every function is
pure; ``system`` is only consulted for the grid and the particle species.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ansatz import MBState
from .grid import build_grid
from .model import SystemSpec
from .propagator import orbital_rdms

__all__ = [
    "DensityMatrix1",
    "DensityMatrix2Diag",
    "VarianceSeries",
    "rho1",
    "density",
    "natural_populations",
    "rho2_diag",
    "position_variance",
    "variance_from_natural_orbitals",
    "time_averaged_variance",
    "g1",
    "g2",
    "density_overlap",
    "DENSITY_FLOOR",
]

#: coherence functions are undefined where the density is below this times N/L
DENSITY_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class DensityMatrix1:
    label: str
    matrix: np.ndarray
    time: float
    dx: float

    @property
    def diagonal(self) -> np.ndarray:
        return np.real(np.diag(self.matrix)).copy()

    def trace(self) -> float:
        return float(self.dx * np.real(np.trace(self.matrix)))


@dataclass(frozen=True, eq=False)
class DensityMatrix2Diag:
    labels: tuple
    matrix: np.ndarray
    time: float
    dx: float

    def integral(self) -> float:
        return float(self.dx**2 * self.matrix.sum())


@dataclass
class VarianceSeries:
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape or self.times.ndim != 1:
            raise ValueError("times and values must be 1D arrays of equal length")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    @property
    def initial(self) -> float:
        return float(self.values[0])


def _grid(system: SystemSpec):
    return build_grid(system.grid)


def _orbital_values(state: MBState, label: str, dx: float) -> np.ndarray:
    return state.spfs[label] / np.sqrt(dx)


def rho1(state: MBState, system: SystemSpec, label: str, workspace=None) -> DensityMatrix1:
    """``rho(x_a, x_b) = <psi+(x_b) psi(x_a)>`` on the grid."""
    grid = _grid(system)
    ws = workspace if workspace is not None else orbital_rdms(state, system, with_fermion_rho2=False)
    phi = _orbital_values(state, label, grid.dx)
    mat = phi.T @ ws.rho1[label].T @ phi.conj()
    mat = 0.5 * (mat + mat.conj().T)
    return DensityMatrix1(label, mat, float(state.time), grid.dx)


def density(state: MBState, system: SystemSpec, label: str, workspace=None) -> np.ndarray:
    """Single-particle density of one species, integrating to its particle number."""
    grid = _grid(system)
    ws = workspace if workspace is not None else orbital_rdms(state, system, with_fermion_rho2=False)
    phi = _orbital_values(state, label, grid.dx)
    dens = np.einsum("pq,px,qx->x", ws.rho1[label], phi.conj(), phi)
    return np.real(dens)


def natural_populations(dm: DensityMatrix1, degeneracy_tol: float = 1e-10):
    """Natural populations (descending) and quadrature-normalized natural orbitals.

    Each orbital is phased so that its largest-magnitude entry is real and
    positive.  Populations equal within ``degeneracy_tol`` are ordered by the
    grid index of their maximal density.
    """
    w, u = np.linalg.eigh(dm.dx * dm.matrix)
    u = u.T
    big = np.argmax(np.abs(u), axis=1)
    phase = u[np.arange(len(u)), big]
    u = u * (np.abs(phase) / phase)[:, None]
    order = sorted(range(len(w)), key=lambda i: (-round(w[i] / degeneracy_tol), big[i]))
    pops = w[order]
    orbs = u[order] / np.sqrt(dm.dx)
    return pops, orbs


def rho2_diag(state: MBState, system: SystemSpec, first: str, second: str, workspace=None) -> DensityMatrix2Diag:
    """Diagonal two-body density ``<psi+_a(x) psi+_b(x') psi_b(x') psi_a(x)>``."""
    grid = _grid(system)
    ws = workspace if workspace is not None else orbital_rdms(state, system)
    phi = {s: _orbital_values(state, s, grid.dx) for s in ("F", "B")}

    def pairs(s):
        p = phi[s]
        return (p.conj()[:, None, :] * p[None, :, :]).reshape(len(p) ** 2, -1)

    if first == second:
        m = len(phi[first])
        r2 = ws.rho2[first].transpose(0, 2, 1, 3).reshape(m * m, m * m)  # [(p,r),(q,s)]
        pr = pairs(first)
        mat = pr.T @ r2 @ pr
        mat = np.real(0.5 * (mat + mat.T))
    else:
        mf, mb = len(phi["F"]), len(phi["B"])
        rfb = ws.rho_fb.transpose(0, 2, 1, 3).reshape(mf * mf, mb * mb)  # [(p,q),(r,s)]
        mat = np.real(pairs("F").T @ rfb @ pairs("B"))
        if first == "B":
            mat = mat.T
    return DensityMatrix2Diag((first, second), mat, float(state.time), grid.dx)


def _moments(x, dens, dx):
    return dx * np.sum(x * dens), dx * np.sum(x * x * dens)


def position_variance(state: MBState, system: SystemSpec, label: str, workspace=None) -> float:
    """``<x^2> - <x>^2`` with ``x = int dx x psi+ psi`` (extensive in N)."""
    grid = _grid(system)
    m1, m2 = _moments(grid.points, density(state, system, label, workspace), grid.dx)
    return float(m2 - m1**2)


def variance_from_natural_orbitals(state: MBState, system: SystemSpec, label: str) -> float:
    """Same quantity as :func:`position_variance` via the natural-orbital route."""
    grid = _grid(system)
    pops, orbs = natural_populations(rho1(state, system, label))
    dens = np.einsum("i,ix->x", pops, np.abs(orbs) ** 2)
    m1, m2 = _moments(grid.points, dens, grid.dx)
    return float(m2 - m1**2)


def time_averaged_variance(series: VarianceSeries, T: float | None = None) -> float:
    """``(1/T) int_0^T [S(t) - S(0)] dt`` by the trapezoidal rule.

    ``T`` is measured from the first recorded time and defaults to the full
    span.  A ``T`` that falls between samples is handled by linear
    interpolation.
    """
    t = series.times - series.times[0]
    if T is None:
        T = float(t[-1])
    if not T > 0:
        raise ValueError("averaging window must be positive")
    if T > t[-1] * (1 + 1e-12):
        raise ValueError(f"averaging window {T} exceeds the recorded span {t[-1]}")
    dev = series.values - series.values[0]
    keep = t < T
    tt = np.append(t[keep], T)
    vv = np.append(dev[keep], np.interp(T, t, dev))
    return float(np.trapezoid(vv, tt) / T)


def _floor(system: SystemSpec, label: str, grid) -> float:
    return DENSITY_FLOOR * system.species(label).count / grid.length


def g1(state: MBState, system: SystemSpec, label: str, workspace=None) -> np.ndarray:
    """First-order coherence; NaN where either density is below the floor."""
    grid = _grid(system)
    dm = rho1(state, system, label, workspace)
    dens = dm.diagonal
    ok = dens >= _floor(system, label, grid)
    root = np.sqrt(np.where(ok, dens, 1.0))
    out = dm.matrix / np.outer(root, root)
    out[~ok, :] = np.nan
    out[:, ~ok] = np.nan
    return out


def g2(state: MBState, system: SystemSpec, first: str, second: str, workspace=None) -> np.ndarray:
    """Second-order correlation ``rho2(x,x') / (rho_a(x) rho_b(x'))``; NaN below floor."""
    grid = _grid(system)
    ws = workspace if workspace is not None else orbital_rdms(state, system)
    r2 = rho2_diag(state, system, first, second, ws).matrix
    da = density(state, system, first, ws)
    db = density(state, system, second, ws)
    ok_a = da >= _floor(system, first, grid)
    ok_b = db >= _floor(system, second, grid)
    out = r2 / np.outer(np.where(ok_a, da, 1.0), np.where(ok_b, db, 1.0))
    out[~ok_a, :] = np.nan
    out[:, ~ok_b] = np.nan
    return out


def density_overlap(state: MBState, system: SystemSpec, workspace=None) -> float:
    """Normalized interspecies overlap ``int rB rF / sqrt(int rB^2 int rF^2)``.

    Shape-only (independent of particle numbers), 1 for identical profiles
    and 0 for disjoint supports.
    """
    ws = workspace if workspace is not None else orbital_rdms(state, system, with_fermion_rho2=False)
    rb = density(state, system, "B", ws)
    rf = density(state, system, "F", ws)
    return float(np.dot(rb, rf) / np.sqrt(np.dot(rb, rb) * np.dot(rf, rf)))
