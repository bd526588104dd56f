import dataclasses
import math
import os
import time

import numpy as np
import pytest

from bfmix.ansatz import MBState, init_guess
from bfmix.driver import format_config, preset_config, relax_ground_state, run_scan
from bfmix.grid import GridSpec
from bfmix.model import BOSONIC, FERMIONIC, InteractionSpec, SpeciesSpec, SystemSpec, TrapSpec, validate_system


def make_system(
    n_b=2,
    n_f=2,
    m_b=2,
    m_f=3,
    rank=2,
    g_bb=0.5,
    g_fb=0.3,
    omega=0.3,
    v0=1.0,
    n_points=31,
    half=1.5 * math.pi,
    mass_b=1.0,
    mass_f=1.0,
):
    return validate_system(
        SystemSpec(
            bosons=SpeciesSpec("B", n_b, BOSONIC, mass_b, m_b),
            fermions=SpeciesSpec("F", n_f, FERMIONIC, mass_f, m_f),
            interactions=InteractionSpec(g_bb, g_fb),
            trap=TrapSpec(omega, v0),
            grid=GridSpec(n_points, -half, half),
            schmidt_rank=rank,
        )
    )


def _unitary_rows(rng, rows, cols):
    z = rng.standard_normal((cols, rows)) + 1j * rng.standard_normal((cols, rows))
    q, _ = np.linalg.qr(z)
    return q.T.copy()


def random_state(system, seed=0):
    """Generic Schmidt-form state: random orthonormal SPFs and coefficient rows."""
    rng = np.random.default_rng(seed)
    base = init_guess(system)
    spfs, coeffs = {}, {}
    for s in ("B", "F"):
        m, n = base.spfs[s].shape
        spfs[s] = _unitary_rows(rng, m, n)
        coeffs[s] = _unitary_rows(rng, base.coeffs[s].shape[0], base.coeffs[s].shape[1])
    lam = np.sort(rng.uniform(0.1, 1.0, system.schmidt_rank))[::-1]
    lam /= lam.sum()
    return MBState(schmidt=lam, coeffs=coeffs, spfs=spfs, n_particles=dict(base.n_particles), time=0.0)


def smooth_state(system, seed=0, populations=(0.7, 0.3)):
    """Low-lying SPFs mixed by a random unitary, with sizeable Schmidt populations."""
    rng = np.random.default_rng(seed)
    base = init_guess(system)
    spfs, coeffs = {}, {}
    for s in ("B", "F"):
        m = base.spfs[s].shape[0]
        spfs[s] = _unitary_rows(rng, m, m) @ base.spfs[s]
        coeffs[s] = _unitary_rows(rng, base.coeffs[s].shape[0], base.coeffs[s].shape[1])
    lam = np.zeros(system.schmidt_rank)
    k = min(len(populations), system.schmidt_rank)
    lam[:k] = populations[:k]
    lam = np.maximum(lam, 1e-3)
    lam /= lam.sum()
    return MBState(schmidt=lam, coeffs=coeffs, spfs=spfs, n_particles=dict(base.n_particles), time=0.0)


@pytest.fixture
def small_system():
    return make_system()


@pytest.fixture
def small_state(small_system):
    return random_state(small_system, seed=11)


class ReducedLab:
    """Session cache of reduced-scale relaxations and scans.

    Presets that describe the same physics (``reduced-barrier-v3`` and
    ``reduced-immiscible``) share one entry.
    """

    def __init__(self, root):
        self.root = root
        self._ground = {}
        self._scan = {}
        self.relax_seconds = {}

    @staticmethod
    def _key(cfg):
        return format_config(dataclasses.replace(cfg, out_dir=""))

    def ground(self, preset):
        cfg = preset_config(preset)
        key = self._key(cfg)
        if key not in self._ground:
            t0 = time.perf_counter()
            self._ground[key] = relax_ground_state(cfg)
            self.relax_seconds[key] = time.perf_counter() - t0
        return self._ground[key]

    def relax_time(self, preset):
        self.ground(preset)
        return self.relax_seconds[self._key(preset_config(preset))]

    def scan(self, preset):
        cfg = preset_config(preset)
        key = self._key(cfg)
        if key not in self._scan:
            self._scan[key] = run_scan(
                cfg,
                workers=max(1, min(len(cfg.omega_f_list), os.cpu_count() or 1)),
                ground_state=self.ground(preset).state,
                out_dir=self.root / preset,
            )
        return self._scan[key]


@pytest.fixture(scope="session")
def reduced_lab(tmp_path_factory):
    return ReducedLab(tmp_path_factory.mktemp("reduced"))
