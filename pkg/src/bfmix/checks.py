"""Brute-force verification suite behind ``bfmix oracle``.

Each check compares the layered solver (or a building block of it) with an
independent reference on a problem small enough to solve exactly.  Relaxed
states are written as BFQ1 fixtures next to a JSON manifest.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np

from . import ansatz, oracle
from .grid import GridSpec, build_grid, kinetic_matrix, kinetic_spectrum
from .model import BOSONIC, FERMIONIC, InteractionSpec, SpeciesSpec, SystemSpec, TrapSpec, validate_system
from .observables import position_variance
from .propagator import IntegratorSettings, relax

__all__ = ["pair_system", "run_oracle_suite"]


def pair_system(
    omega: float = 0.1,
    v0: float = 3.0,
    g_fb: float = 0.2,
    n_points: int = 41,
    half_extent: float = 1.5 * math.pi,
    configuration: tuple[int, int, int] = (2, 2, 2),
) -> SystemSpec:
    """One boson and one fermion, the smallest mixture with an interspecies term."""
    rank, m_f, m_b = configuration
    return validate_system(
        SystemSpec(
            bosons=SpeciesSpec("B", 1, BOSONIC, 1.0, m_b),
            fermions=SpeciesSpec("F", 1, FERMIONIC, 1.0, m_f),
            interactions=InteractionSpec(0.0, g_fb),
            trap=TrapSpec(omega, v0),
            grid=GridSpec(n_points, -half_extent, half_extent),
            schmidt_rank=rank,
        )
    )


def _result(name, value, tol, passed, detail="", seconds=0.0):
    return {
        "name": name,
        "value": float(value),
        "tolerance": float(tol),
        "passed": bool(passed),
        "detail": detail,
        "seconds": round(seconds, 3),
    }


def _check_kinetic():
    t0 = time.perf_counter()
    grid = build_grid(GridSpec(64, -5.0, 7.0))
    w = np.linalg.eigvalsh(kinetic_matrix(grid, 1.5))
    ref = kinetic_spectrum(grid, 1.5)
    err = float(np.max(np.abs(w - ref) / ref))
    return _result("kinetic-spectrum", err, 1e-9, err < 1e-9, "sine-DVR vs particle in a box", time.perf_counter() - t0)


def _check_fci_vs_grid():
    t0 = time.perf_counter()
    system = pair_system(n_points=31)
    basis = oracle.fci_basis(system, 31)
    e_fci, _ = oracle.ed_ground_state(oracle.fci_hamiltonian(system, basis))
    e_grid, _ = oracle.ed_ground_state(oracle.grid_pair_hamiltonian(system))
    err = abs(e_fci - e_grid) / abs(e_grid)
    return _result(
        "fci-complete-vs-grid", err, 1e-10, err < 1e-10,
        f"Fock-space ED {e_fci:.12g} vs first-quantized grid ED {e_grid:.12g}", time.perf_counter() - t0,
    )


def _check_harmonic(fixtures):
    t0 = time.perf_counter()
    omega = 0.5
    system = pair_system(omega=omega, v0=0.0, g_fb=0.0, n_points=61, half_extent=2.5 * math.pi,
                         configuration=(1, 1, 1))
    res = relax(ansatz.init_guess(system), system, IntegratorSettings())
    fixtures["harmonic_pair"] = (res.state, res.energy)
    err_e = abs(res.energy - omega)
    err_v = abs(position_variance(res.state, system, "B") - 1.0 / (2.0 * omega))
    ok = err_e < 1e-6 and err_v < 1e-4
    return _result(
        "harmonic-relaxation", max(err_e, err_v), 1e-6, ok,
        f"E = {res.energy:.12g} (two particles at omega/2), variance error {err_v:.2e}", time.perf_counter() - t0,
    )


def _check_ml_vs_fci(fixtures):
    t0 = time.perf_counter()
    system = pair_system()
    res = relax(ansatz.init_guess(system), system, IntegratorSettings())
    fixtures["pair_lattice"] = (res.state, res.energy)
    e_grid, vec = oracle.ed_ground_state(oracle.grid_pair_operator(system))
    ml = oracle.grid_pair_amplitudes(res.state)
    e_ml_grid = float(np.real(np.vdot(ml, oracle.grid_pair_operator(system) @ ml)))
    consistent = abs(e_ml_grid - res.energy) < 1e-10 * abs(e_grid)
    above = res.energy >= e_grid - 1e-12 * abs(e_grid)
    err = abs(res.energy - e_grid) / abs(e_grid)
    ok = consistent and above and err < 1e-2
    return _result(
        "layered-vs-grid-ed", err, 1e-2, ok,
        f"layered {res.energy:.12g}, grid ED {e_grid:.12g}, same state through the grid H {e_ml_grid:.12g}",
        time.perf_counter() - t0,
    )


def run_oracle_suite(out_dir) -> list[dict]:
    """Run every check, write fixtures plus ``oracle.json`` and return the records."""
    out = Path(out_dir)
    fix_dir = out / "fixtures"
    fix_dir.mkdir(parents=True, exist_ok=True)
    fixtures = {}
    results = [_check_kinetic(), _check_fci_vs_grid(), _check_harmonic(fixtures), _check_ml_vs_fci(fixtures)]
    manifest = {}
    for name, (state, energy) in sorted(fixtures.items()):
        data = ansatz.to_bytes(state)
        (fix_dir / f"{name}.bfq").write_bytes(data)
        manifest[name] = {"file": f"{name}.bfq", "energy": energy, "sha256": hashlib.sha256(data).hexdigest()}
    (fix_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / "oracle.json").write_text(json.dumps(results, indent=2) + "\n")
    return results
