"""Two-layer wavefunction: Schmidt pairs of species functions over SPFs.

``Psi = sum_k sqrt(lambda_k) F_k B_k`` where each species function is a
linear combination of number states (determinants for fermions, permanents
for bosons) built from that species' single-particle functions (SPFs).

Number states are handled in second quantization; permutation sums are
never formed.  Fermionic signs follow the orbital-index ordering
``f+_1 f+_2 ... |0>``.
"""

from __future__ import annotations

import functools
import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .grid import build_grid
from .model import BOSONIC, FERMIONIC, SystemSpec, one_body_hamiltonian

__all__ = [
    "NumberStateTable",
    "MBState",
    "enumerate_occupations",
    "init_guess",
    "total_norm",
    "orthonormality_error",
    "schmidt_spectrum",
    "is_entangled",
    "configuration_amplitude",
    "species_function_values",
    "to_bytes",
    "from_bytes",
    "save_state",
    "load_state",
    "SEED_POPULATION",
]

SNAPSHOT_MAGIC = b"BFQ1"
#: Population given to every Schmidt pair beyond the first in a fresh guess.
SEED_POPULATION = 1e-6
#: Amplitude of the seeded random admixture in fresh coefficient blocks.
COEFF_PERTURBATION = 1e-3
ENTANGLEMENT_THRESHOLD = 1e-8

STATISTICS = {"B": BOSONIC, "F": FERMIONIC}


def _occupations(n: int, m: int, cap: int | None):
    """Occupation tuples, lexicographically descending."""
    if m == 1:
        if cap is None or n <= cap:
            yield (n,)
        return
    top = n if cap is None else min(n, cap)
    for first in range(top, -1, -1):
        for rest in _occupations(n - first, m - 1, cap):
            yield (first,) + rest


@dataclass(frozen=True, eq=False)
class NumberStateTable:
    """All occupation vectors of N particles in m orbitals, in fixed order."""

    statistics: str
    n_particles: int
    n_orbitals: int
    states: np.ndarray
    _codes: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def size(self) -> int:
        return len(self.states)

    def _encode(self, occ: np.ndarray) -> np.ndarray:
        base = self.n_particles + 1
        weights = base ** np.arange(self.n_orbitals - 1, -1, -1, dtype=np.int64)
        return np.asarray(occ, dtype=np.int64) @ weights

    def index(self, occupation) -> int:
        occ = tuple(int(v) for v in occupation)
        if len(occ) != self.n_orbitals:
            raise KeyError(occupation)
        i = self.lookup(np.asarray([occ]))[0]
        if i < 0:
            raise KeyError(occupation)
        return int(i)

    def occupation(self, idx: int) -> tuple[int, ...]:
        return tuple(int(v) for v in self.states[idx])

    def lookup(self, occs: np.ndarray) -> np.ndarray:
        """Vectorized occupation -> index; -1 where absent."""
        codes = self._encode(occs)
        # codes are stored descending
        rev = self._codes[::-1]
        pos = np.searchsorted(rev, codes)
        pos_c = np.clip(pos, 0, len(rev) - 1)
        found = rev[pos_c] == codes
        return np.where(found, len(rev) - 1 - pos_c, -1)

    @functools.cached_property
    def excitations(self):
        """Sparse maps of every one-body operator ``E_pq = a+_p a_q``.

        Returns ``(offsets, src, dst, coef)``: for the flat pair index
        ``P = p * m + q`` the slice ``offsets[P]:offsets[P+1]`` lists
        ``E_pq |src> = coef |dst>``.  Each slice is injective in ``dst``.
        """
        m = self.n_orbitals
        states = self.states
        all_idx = np.arange(len(states))
        offsets = [0]
        srcs, dsts, coefs = [], [], []
        fermi = self.statistics == FERMIONIC
        for p in range(m):
            for q in range(m):
                if p == q:
                    ok = states[:, q] > 0
                    src = all_idx[ok]
                    dst = src
                    coef = states[ok, q].astype(float)
                else:
                    ok = states[:, q] > 0
                    if fermi:
                        ok &= states[:, p] == 0
                    src = all_idx[ok]
                    new = states[ok].copy()
                    new[:, q] -= 1
                    new[:, p] += 1
                    dst = self.lookup(new)
                    if fermi:
                        lo, hi = min(p, q), max(p, q)
                        between = states[ok, lo + 1 : hi].sum(axis=1)
                        coef = np.where(between % 2 == 0, 1.0, -1.0)
                    else:
                        coef = np.sqrt(states[ok, q] * (states[ok, p] + 1.0))
                srcs.append(src)
                dsts.append(dst)
                coefs.append(coef)
                offsets.append(offsets[-1] + len(src))
        out = (
            np.asarray(offsets, dtype=np.int64),
            np.concatenate(srcs).astype(np.int64),
            np.concatenate(dsts).astype(np.int64),
            np.concatenate(coefs).astype(float),
        )
        for arr in out:
            arr.setflags(write=False)
        return out


@functools.lru_cache(maxsize=64)
def enumerate_occupations(statistics: str, n_particles: int, n_orbitals: int) -> NumberStateTable:
    """Complete, ordered number-state table (cached; tables are immutable)."""
    if statistics in STATISTICS:
        statistics = STATISTICS[statistics]
    if statistics not in (BOSONIC, FERMIONIC):
        raise ValueError(f"unknown statistics {statistics!r}")
    if n_particles < 1 or n_orbitals < 1:
        raise ValueError("need at least one particle and one orbital")
    if statistics == FERMIONIC and n_orbitals < n_particles:
        raise ValueError(
            f"Pauli exclusion: {n_particles} fermions do not fit in {n_orbitals} orbitals"
        )
    cap = 1 if statistics == FERMIONIC else None
    states = np.array(list(_occupations(n_particles, n_orbitals, cap)), dtype=np.int64)
    states.setflags(write=False)
    base = n_particles + 1
    weights = base ** np.arange(n_orbitals - 1, -1, -1, dtype=np.int64)
    codes = states @ weights
    codes.setflags(write=False)
    return NumberStateTable(statistics, n_particles, n_orbitals, states, codes)


@dataclass(eq=False)
class MBState:
    """Layered wavefunction in Schmidt form.

    Attributes
    ----------
    schmidt : (M,) float
        Natural species populations ``lambda_k`` (probabilities, descending).
    coeffs : dict
        ``coeffs[s]`` is a complex ``(M, D_s)`` array; row k holds the number-
        state expansion of species function k of species ``s`` ("F" or "B").
    spfs : dict
        ``spfs[s]`` is a complex ``(m_s, n_points)`` array of DVR coefficient
        vectors (unit 2-norm).
    n_particles : dict
        Particle number per species.
    time : float
    """

    schmidt: np.ndarray
    coeffs: dict
    spfs: dict
    n_particles: dict
    time: float = 0.0

    @property
    def rank(self) -> int:
        return len(self.schmidt)

    def n_orbitals(self, label: str) -> int:
        return self.spfs[label].shape[0]

    def table(self, label: str) -> NumberStateTable:
        return enumerate_occupations(STATISTICS[label], self.n_particles[label], self.n_orbitals(label))

    @property
    def n_points(self) -> int:
        return self.spfs["B"].shape[1]

    def copy(self) -> "MBState":
        return MBState(
            schmidt=self.schmidt.copy(),
            coeffs={k: v.copy() for k, v in self.coeffs.items()},
            spfs={k: v.copy() for k, v in self.spfs.items()},
            n_particles=dict(self.n_particles),
            time=float(self.time),
        )


def _orthonormalize_rows(mat: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(mat.T)
    # fix the sign freedom of QR so that the diagonal of r is positive
    signs = np.sign(np.diag(r).real)
    signs[signs == 0] = 1.0
    return (q * signs).T


def init_guess(
    system: SystemSpec,
    strategy: str = "eigen",
    seed: int = 0,
    grid=None,
) -> MBState:
    """Product-like starting state for relaxation.

    SPFs are the lowest eigenvectors of the one-body Hamiltonian of each
    species (``strategy="parity-offset"`` adds a tiny linear tilt first to
    split parity-degenerate pairs).  Species function k is dominated by
    number state k with a seeded real admixture of the others; the Schmidt
    populations are ``1 - (M-1) eps`` and ``eps``.
    """
    if strategy not in ("eigen", "parity-offset"):
        raise ValueError(f"unknown strategy {strategy!r}")
    grid = grid if grid is not None else build_grid(system.grid)
    rng = np.random.default_rng(seed)
    rank = system.schmidt_rank
    spfs, coeffs, counts = {}, {}, {}
    for label in ("F", "B"):
        sp = system.species(label)
        h = one_body_hamiltonian(system, label, grid)
        if strategy == "parity-offset":
            h = h + np.diag(1e-6 * grid.points / grid.length)
        _, vecs = np.linalg.eigh(h)
        orb = vecs[:, : sp.n_orbitals].T.copy()
        # deterministic sign: largest component positive
        big = np.argmax(np.abs(orb), axis=1)
        orb *= np.sign(orb[np.arange(len(orb)), big])[:, None]
        spfs[label] = orb.astype(complex)
        table = enumerate_occupations(sp.statistics, sp.count, sp.n_orbitals)
        if rank > table.size:
            raise ValueError(
                f"Schmidt rank {rank} exceeds the {table.size} number states of species {label}"
            )
        block = np.zeros((rank, table.size))
        block[np.arange(rank), np.arange(rank)] = 1.0
        block += COEFF_PERTURBATION * rng.standard_normal(block.shape)
        coeffs[label] = _orthonormalize_rows(block).astype(complex)
        counts[label] = sp.count
    lam = np.full(rank, SEED_POPULATION)
    lam[0] = 1.0 - (rank - 1) * SEED_POPULATION
    return MBState(schmidt=lam, coeffs=coeffs, spfs=spfs, n_particles=counts, time=0.0)


def total_norm(state: MBState) -> float:
    """``<Psi|Psi>`` from the species blocks, assuming orthonormal SPFs."""
    amp = np.sqrt(state.schmidt)
    cf, cb = state.coeffs["F"], state.coeffs["B"]
    if cf.shape[0] != len(amp) or cb.shape[0] != len(amp):
        raise ValueError("coefficient blocks do not match the Schmidt rank")
    sf = cf.conj() @ cf.T
    sb = cb.conj() @ cb.T
    return float(np.real(np.einsum("k,l,kl,kl->", amp, amp, sf, sb)))


def orthonormality_error(state: MBState) -> float:
    """Largest ``|<phi_i|phi_j> - delta_ij|`` over both species."""
    worst = 0.0
    for orb in state.spfs.values():
        ov = orb.conj() @ orb.T
        worst = max(worst, float(np.max(np.abs(ov - np.eye(len(ov))))))
    return worst


def schmidt_spectrum(state: MBState) -> np.ndarray:
    return np.sort(np.asarray(state.schmidt, dtype=float))[::-1]


def is_entangled(state: MBState, threshold: float = ENTANGLEMENT_THRESHOLD) -> bool:
    return int(np.sum(schmidt_spectrum(state) > threshold)) >= 2


def _permanent(mat: np.ndarray) -> complex:
    """Ryser's formula; fine for the handful of particles used in checks."""
    n = mat.shape[0]
    if n == 0:
        return 1.0
    total = 0.0
    for subset in range(1, 1 << n):
        cols = [j for j in range(n) if subset >> j & 1]
        total += (-1) ** len(cols) * np.prod(mat[:, cols].sum(axis=1))
    return (-1) ** n * total


def configuration_amplitude(
    orbital_values: np.ndarray,
    occupation,
    positions,
    statistics: str,
) -> complex:
    """First-quantized amplitude ``<x_1..x_N | n_1..n_m>``.

    ``orbital_values[i, j]`` is orbital i evaluated at position index j;
    ``positions`` lists the particle coordinates as column indices.  The
    permanent (bosons) or determinant (fermions) is normalized by
    ``1/sqrt(N! prod n_i!)``.  Pass the orbitals in a permuted order to see
    the exchange symmetry.
    """
    statistics = STATISTICS.get(statistics, statistics)
    rows = [i for i, n in enumerate(occupation) for _ in range(int(n))]
    mat = orbital_values[np.ix_(rows, list(positions))]
    n_part = len(rows)
    norm = math.factorial(n_part) * math.prod(math.factorial(int(n)) for n in occupation)
    if statistics == FERMIONIC:
        val = np.linalg.det(mat) if n_part else 1.0
    else:
        val = _permanent(mat)
    return val / math.sqrt(norm)


def species_function_values(state: MBState, label: str, k: int, dx: float) -> np.ndarray:
    """Species function k as a dense grid tensor (tiny particle numbers only)."""
    table = state.table(label)
    n_part = table.n_particles
    n = state.n_points
    if n_part > 3:
        raise ValueError("dense species functions are limited to <= 3 particles")
    values = state.spfs[label] / math.sqrt(dx)
    out = np.zeros((n,) * n_part, dtype=complex)
    for pos in np.ndindex(*out.shape):
        out[pos] = sum(
            state.coeffs[label][k, idx]
            * configuration_amplitude(values, table.states[idx], pos, STATISTICS[label])
            for idx in range(table.size)
        )
    return out


# -- binary snapshot -----------------------------------------------------

_DIMS = struct.Struct("<6q")


def to_bytes(state: MBState) -> bytes:
    """Serialize as ``BFQ1 | dims | time | lambda | C_F | C_B | phi_F | phi_B``.

    dims = (M, m_F, m_B, N_F, N_B, n_points) as little-endian int64; all
    floats little-endian float64, complex numbers as (re, im) pairs, arrays
    row-major.
    """
    buf = io.BytesIO()
    buf.write(SNAPSHOT_MAGIC)
    dims = (
        state.rank,
        state.n_orbitals("F"),
        state.n_orbitals("B"),
        state.n_particles["F"],
        state.n_particles["B"],
        state.n_points,
    )
    buf.write(_DIMS.pack(*dims))
    buf.write(struct.pack("<d", float(state.time)))
    buf.write(np.ascontiguousarray(state.schmidt, dtype="<f8").tobytes())
    for arr in (state.coeffs["F"], state.coeffs["B"], state.spfs["F"], state.spfs["B"]):
        buf.write(np.ascontiguousarray(arr, dtype="<c16").tobytes())
    return buf.getvalue()


def from_bytes(data: bytes, offset: int = 0) -> tuple[MBState, int]:
    """Inverse of :func:`to_bytes`; returns the state and the end offset."""
    if data[offset : offset + 4] != SNAPSHOT_MAGIC:
        raise ValueError("not a BFQ1 snapshot")
    pos = offset + 4
    rank, m_f, m_b, n_f, n_b, n_pts = _DIMS.unpack_from(data, pos)
    pos += _DIMS.size
    (time,) = struct.unpack_from("<d", data, pos)
    pos += 8
    d_f = enumerate_occupations(FERMIONIC, n_f, m_f).size
    d_b = enumerate_occupations(BOSONIC, n_b, m_b).size

    def take(dtype, shape):
        nonlocal pos
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(shape)
        pos += arr.nbytes
        return arr.astype(dtype[1:] if dtype.startswith("<") else dtype, copy=True)

    lam = take("<f8", (rank,))
    cf = take("<c16", (rank, d_f))
    cb = take("<c16", (rank, d_b))
    pf = take("<c16", (m_f, n_pts))
    pb = take("<c16", (m_b, n_pts))
    state = MBState(
        schmidt=lam,
        coeffs={"F": cf, "B": cb},
        spfs={"F": pf, "B": pb},
        n_particles={"F": n_f, "B": n_b},
        time=time,
    )
    return state, pos


def save_state(state: MBState, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(state))


def load_state(path) -> MBState:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())[0]
