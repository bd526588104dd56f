"""Brute-force reference solvers used to verify the variational code.

Nothing in here touches the layered ansatz machinery: the Fock-space code
below enumerates occupations with :mod:`itertools`, applies creation and
annihilation operators one by one and assembles sparse matrices directly.

* :func:`fci_hamiltonian` / :func:`ed_ground_state` / :func:`ed_propagate`:
  configuration interaction in a fixed basis of one-body eigenorbitals.
* :func:`grid_pair_hamiltonian` / :func:`grid_pair_operator`: the complete
  first-quantized problem of one boson and one fermion on the DVR grid (no
  orbital truncation at all), as a sparse matrix or matrix-free.
* :func:`gp_split_step`: Strang-split mean-field (Gross-Pitaevskii for the
  condensate, Hartree for the fermions) in real or imaginary time.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, eigsh, expm_multiply

from .grid import build_grid, kinetic_spectrum, sine_transform
from .model import SystemSpec, one_body_hamiltonian, potential_vector

__all__ = [
    "FCI_CAP",
    "FciBasis",
    "fci_basis",
    "fci_hamiltonian",
    "ed_ground_state",
    "ed_propagate",
    "fci_amplitudes",
    "fci_densities",
    "grid_pair_hamiltonian",
    "grid_pair_operator",
    "grid_pair_amplitudes",
    "grid_pair_densities",
    "GPResult",
    "gp_split_step",
]

FCI_CAP = 200_000


# -- Fock-space primitives ---------------------------------------------------


def _occupations(statistics: str, n_particles: int, n_orb: int) -> list[tuple]:
    """Occupation tuples, ordered by the orbital multiset in lexicographic order."""
    if statistics == "bosonic":
        picks = itertools.combinations_with_replacement(range(n_orb), n_particles)
    else:
        picks = itertools.combinations(range(n_orb), n_particles)
    out = []
    for pick in picks:
        occ = [0] * n_orb
        for j in pick:
            occ[j] += 1
        out.append(tuple(occ))
    return out


def _annihilate(occ, j, statistics):
    n = occ[j]
    if n == 0:
        return 0.0, None
    if statistics == "bosonic":
        amp = math.sqrt(n)
    else:
        amp = -1.0 if sum(occ[:j]) % 2 else 1.0
    new = list(occ)
    new[j] -= 1
    return amp, tuple(new)


def _create(occ, j, statistics):
    n = occ[j]
    if statistics == "bosonic":
        amp = math.sqrt(n + 1)
    else:
        if n == 1:
            return 0.0, None
        amp = -1.0 if sum(occ[:j]) % 2 else 1.0
    new = list(occ)
    new[j] += 1
    return amp, tuple(new)


def _apply_string(occ, ops, statistics):
    """Apply ``ops`` (rightmost first) given as ``(kind, orbital)`` pairs."""
    amp = 1.0
    for kind, j in reversed(ops):
        step = _create if kind == "+" else _annihilate
        a, occ = step(occ, j, statistics)
        if occ is None:
            return 0.0, None
        amp *= a
    return amp, occ


def _operator_matrix(configs, index, terms, statistics):
    """Sparse matrix of ``sum coeff * op_string`` on the given configurations."""
    rows, cols, vals = [], [], []
    for col, occ in enumerate(configs):
        for coeff, ops in terms:
            if coeff == 0.0:
                continue
            amp, new = _apply_string(occ, ops, statistics)
            if new is None or amp == 0.0:
                continue
            rows.append(index[new])
            cols.append(col)
            vals.append(coeff * amp)
    n = len(configs)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


# -- FCI in fixed eigenorbitals -------------------------------------------------


@dataclass(frozen=True, eq=False)
class FciBasis:
    """Product basis of bosonic permanents times fermionic determinants."""

    orbitals: dict
    orbital_energies: dict
    configs: dict
    statistics: dict
    n_orb: int
    dx: float

    @property
    def dims(self) -> tuple[int, int]:
        return len(self.configs["B"]), len(self.configs["F"])

    @property
    def dimension(self) -> int:
        db, df = self.dims
        return db * df


def fci_basis(system: SystemSpec, n_orb: int, cap: int = FCI_CAP) -> FciBasis:
    """Lowest ``n_orb`` eigenorbitals of each species' one-body Hamiltonian."""
    grid = build_grid(system.grid)
    orbitals, energies, configs, stats = {}, {}, {}, {}
    dims = {}
    for label in ("B", "F"):
        species = system.species(label)
        stats[label] = species.statistics
        n = species.count
        if species.statistics == "bosonic":
            dims[label] = math.comb(n + n_orb - 1, n_orb - 1)
        else:
            dims[label] = math.comb(n_orb, n)
    if dims["B"] * dims["F"] > cap:
        raise ValueError(f"FCI dimension {dims['B'] * dims['F']} exceeds the cap {cap}")
    for label in ("B", "F"):
        species = system.species(label)
        w, v = np.linalg.eigh(one_body_hamiltonian(system, label, grid))
        orb = v[:, :n_orb].T.copy()
        big = np.argmax(np.abs(orb), axis=1)
        orb *= np.sign(orb[np.arange(n_orb), big])[:, None]
        orbitals[label] = orb
        energies[label] = w[:n_orb]
        configs[label] = _occupations(species.statistics, species.count, n_orb)
    return FciBasis(orbitals, energies, configs, stats, n_orb, grid.dx)


def _pair_operators(basis: FciBasis, label: str):
    configs = basis.configs[label]
    index = {c: i for i, c in enumerate(configs)}
    m = basis.n_orb
    stat = basis.statistics[label]
    return {
        (p, q): _operator_matrix(configs, index, [(1.0, (("+", p), ("-", q)))], stat)
        for p in range(m)
        for q in range(m)
    }


def fci_hamiltonian(system: SystemSpec, basis: FciBasis) -> sp.csr_matrix:
    """Sparse Hamiltonian of ``system`` in the (fixed) basis ``basis``.

    Basis vectors are ordered as ``i_B * D_F + i_F``.  The one-body parts are
    projected from ``system``'s grid Hamiltonians, so a quenched system in
    the pre-quench basis gives the post-quench matrix.
    """
    grid = build_grid(system.grid)
    if not math.isclose(grid.dx, basis.dx):
        raise ValueError("basis was built on a different grid")
    m = basis.n_orb
    inv_dx = 1.0 / grid.dx
    db, df = basis.dims
    species_h = {}
    for label in ("B", "F"):
        chi = basis.orbitals[label]
        h = chi @ one_body_hamiltonian(system, label, grid) @ chi.T
        configs = basis.configs[label]
        index = {c: i for i, c in enumerate(configs)}
        stat = basis.statistics[label]
        terms = [(h[p, q], (("+", p), ("-", q))) for p in range(m) for q in range(m)]
        g = system.interactions.g_bb if label == "B" else system.interactions.g_ff
        if g != 0.0 and system.species(label).count > 1:
            v = np.einsum("px,qx,rx,sx->pqrs", chi, chi, chi, chi) * inv_dx
            for p, q, r, s in itertools.product(range(m), repeat=4):
                terms.append(
                    (0.5 * g * v[p, q, r, s], (("+", p), ("+", q), ("-", s), ("-", r)))
                )
        species_h[label] = _operator_matrix(configs, index, terms, stat)
    ham = sp.kron(species_h["B"], sp.identity(df)) + sp.kron(sp.identity(db), species_h["F"])
    g_fb = system.interactions.g_fb
    if g_fb != 0.0:
        cb, cf = basis.orbitals["B"], basis.orbitals["F"]
        v = np.einsum("px,qx,rx,sx->pqrs", cf, cf, cb, cb) * inv_dx  # f+_p f_q b+_r b_s
        eb = _pair_operators(basis, "B")
        ef = _pair_operators(basis, "F")
        pairs = list(itertools.product(range(m), repeat=2))
        # W_rs = sum_pq v[p,q,r,s] E^F_pq, all (r, s) at once
        ef_stack = sp.vstack([ef[pq].reshape(1, -1) for pq in pairs]).tocsr()
        w_all = sp.csr_matrix(v.reshape(m * m, m * m).T) @ ef_stack
        rows, cols, vals = [], [], []
        for idx, rs in enumerate(pairs):
            w = w_all[idx].reshape(df, df)
            if eb[rs].nnz == 0 or w.nnz == 0:
                continue
            block = sp.kron(eb[rs], w, format="coo")
            rows.append(block.row)
            cols.append(block.col)
            vals.append(block.data)
        if vals:
            fb = sp.coo_matrix(
                (g_fb * np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=ham.shape
            )
            ham = ham + fb.tocsr()
    ham = sp.csr_matrix(ham)
    return 0.5 * (ham + ham.T.conj())


def ed_ground_state(ham, tol: float = 1e-10) -> tuple[float, np.ndarray]:
    """Lowest eigenpair; raises if the residual exceeds ``tol``."""
    n = ham.shape[0]
    if n <= 400:
        dense = ham.toarray() if sp.issparse(ham) else ham @ np.eye(n)
        w, v = np.linalg.eigh(dense)
        e, vec = float(w[0]), v[:, 0]
    else:
        w, v = eigsh(ham, k=1, which="SA", tol=1e-14)
        e, vec = float(w[0]), v[:, 0]
    vec = vec / np.linalg.norm(vec)
    big = np.argmax(np.abs(vec))
    vec = vec * (abs(vec[big]) / vec[big])
    res = np.linalg.norm(ham @ vec - e * vec)
    if res > tol:
        raise RuntimeError(f"eigensolver residual {res:.3g} above {tol:.1g}")
    return e, vec.astype(complex)


def ed_propagate(vec: np.ndarray, ham, t: float) -> np.ndarray:
    """``exp(-i H t) vec`` by a truncated-Taylor action of the matrix exponential.

    ``ham`` is a sparse matrix or a :class:`GridPairOperator`.
    """
    vec = np.asarray(vec, complex)
    if isinstance(ham, GridPairOperator):
        return expm_multiply(-1j * t * ham, vec, traceA=-1j * t * ham.trace_value)
    return expm_multiply(-1j * t * sp.csr_matrix(ham, dtype=complex), vec)


def _permanent(mat: np.ndarray) -> complex:
    n = len(mat)
    if n == 0:
        return 1.0
    return sum(
        np.prod([mat[i, perm[i]] for i in range(n)]) for perm in itertools.permutations(range(n))
    )


def _orbital_list(occ):
    return [j for j, n in enumerate(occ) for _ in range(n)]


def _config_overlap(occ_a, occ_b, overlap, statistics):
    """``<occ_a (basis A)|occ_b (basis B)>`` given ``overlap[i, j] = <a_i|b_j>``."""
    rows = _orbital_list(occ_a)
    cols = _orbital_list(occ_b)
    sub = overlap[np.ix_(rows, cols)]
    if statistics == "fermionic":
        return np.linalg.det(sub) if len(rows) else 1.0
    norm = math.sqrt(
        math.prod(math.factorial(n) for n in occ_a) * math.prod(math.factorial(n) for n in occ_b)
    )
    return _permanent(sub) / norm


def _species_configs(statistics, n_particles, n_orb):
    return _occupations(statistics, n_particles, n_orb)


def fci_amplitudes(state, basis: FciBasis) -> np.ndarray:
    """Project a layered state onto the FCI basis (``i_B * D_F + i_F`` order).

    Uses only SPF overlaps and permanents / determinants; the state's number
    states are re-enumerated here and matched to its coefficient columns by
    the same descending lexicographic order the ansatz uses.
    """
    blocks = {}
    for label in ("B", "F"):
        stat = basis.statistics[label]
        phi = state.spfs[label]
        overlap = basis.orbitals[label].astype(complex) @ phi.T  # <chi_i|phi_j>
        ml_configs = sorted(
            _occupations(stat, state.n_particles[label], phi.shape[0]), reverse=True
        )
        proj = np.array(
            [
                [_config_overlap(a, b, overlap, stat) for b in ml_configs]
                for a in basis.configs[label]
            ]
        )
        blocks[label] = proj @ state.coeffs[label].T  # (D_fci, M)
    amp = np.sqrt(state.schmidt)
    psi = np.einsum("ik,jk,k->ij", blocks["B"], blocks["F"], amp)
    return psi.reshape(-1)


def fci_densities(vec: np.ndarray, basis: FciBasis) -> dict:
    """Grid densities (function values, integrating to N) of an FCI vector."""
    db, df = basis.dims
    psi = np.asarray(vec).reshape(db, df)
    out = {}
    for label, mat in (("B", psi @ psi.conj().T), ("F", psi.T @ psi.conj())):
        # <a+_p a_q> = trace(E_pq mat), mat traced over the other species
        ops = _pair_operators(basis, label)
        m = basis.n_orb
        rho = np.zeros((m, m), complex)
        for (p, q), op in ops.items():
            rho[p, q] = np.sum(op.toarray() * mat.T)
        chi = basis.orbitals[label]
        out[label] = np.real(np.einsum("pq,px,qx->x", rho, chi, chi)) / basis.dx
    return out


# -- complete grid problem for one boson and one fermion ------------------------


def grid_pair_hamiltonian(system: SystemSpec) -> sp.csr_matrix:
    """First-quantized ``H`` on the grid product space ``psi[x_B, x_F]``."""
    if system.bosons.count != 1 or system.fermions.count != 1:
        raise ValueError("grid product solver handles exactly one boson and one fermion")
    grid = build_grid(system.grid)
    n = grid.n_points
    hb = sp.csr_matrix(one_body_hamiltonian(system, "B", grid))
    hf = sp.csr_matrix(one_body_hamiltonian(system, "F", grid))
    eye = sp.identity(n, format="csr")
    contact = np.zeros((n, n))
    contact[np.arange(n), np.arange(n)] = system.interactions.g_fb / grid.dx
    ham = sp.kron(hb, eye) + sp.kron(eye, hf) + sp.diags(contact.ravel())
    return sp.csr_matrix(ham)


class GridPairOperator(LinearOperator):
    """Matrix-free :func:`grid_pair_hamiltonian`: ``h_B psi + psi h_F^T + contact``.

    One product costs two dense ``n x n`` matrix products instead of a
    sparse product with ``2 n^3`` stored entries.
    """

    def __init__(self, system: SystemSpec):
        if system.bosons.count != 1 or system.fermions.count != 1:
            raise ValueError("grid product solver handles exactly one boson and one fermion")
        grid = build_grid(system.grid)
        self.n = grid.n_points
        self.hb = one_body_hamiltonian(system, "B", grid)
        self.hf_t = one_body_hamiltonian(system, "F", grid).T.copy()
        self.contact = system.interactions.g_fb / grid.dx
        self.trace_value = float(
            self.n * (np.trace(self.hb) + np.trace(self.hf_t)) + self.n * self.contact
        )
        super().__init__(dtype=np.complex128, shape=(self.n**2, self.n**2))

    def _matvec(self, x):
        shape = np.shape(x)
        psi = np.asarray(x).reshape(self.n, self.n)
        out = self.hb @ psi + psi @ self.hf_t
        out[np.diag_indices(self.n)] += self.contact * np.diag(psi)
        return out.reshape(shape)

    def _rmatvec(self, x):
        # real symmetric
        return self._matvec(x)

    def _adjoint(self):
        return self


def grid_pair_operator(system: SystemSpec) -> GridPairOperator:
    return GridPairOperator(system)


def grid_pair_amplitudes(state) -> np.ndarray:
    """Layered 1B+1F state as a grid product vector ``psi[x_B, x_F]``."""
    fb = state.coeffs["B"] @ state.spfs["B"]  # (M, n): the bosonic species functions
    ff = state.coeffs["F"] @ state.spfs["F"]
    psi = np.einsum("k,kx,ky->xy", np.sqrt(state.schmidt), fb, ff)
    return psi.reshape(-1)


def grid_pair_densities(vec: np.ndarray, dx: float) -> dict:
    n = int(round(math.sqrt(len(vec))))
    psi = np.asarray(vec).reshape(n, n)
    prob = np.abs(psi) ** 2 / dx
    return {"B": prob.sum(axis=1), "F": prob.sum(axis=0)}


# -- split-step mean field ---------------------------------------------------


@dataclass
class GPResult:
    times: np.ndarray
    densities: dict  # label -> (n_times, n_points) function-value densities
    orbitals: dict  # label -> final DVR coefficient rows


def gp_split_step(
    system: SystemSpec,
    orbitals: dict,
    t_end: float,
    dt: float,
    imaginary: bool = False,
    record_every: int | None = None,
) -> GPResult:
    """Strang-split mean-field evolution of one condensate and N_F fermions.

    ``orbitals["B"]`` is a single DVR coefficient row, ``orbitals["F"]`` holds
    N_F rows.  The bosons feel ``g_bb (N_B - 1) |phi_B|^2 + g_fb sum_j |phi_Fj|^2``
    and each fermion ``g_fb N_B |phi_B|^2`` (densities as function values).
    The potential half-steps are exact because they only change phases.  In
    imaginary time each species is re-orthonormalized after every step.
    """
    grid = build_grid(system.grid)
    dx = grid.dx
    n_b = system.bosons.count
    g_bb, g_fb = system.interactions.g_bb, system.interactions.g_fb
    phi = {
        "B": np.array(orbitals["B"], dtype=complex).reshape(1, -1),
        "F": np.array(orbitals["F"], dtype=complex).reshape(-1, grid.n_points),
    }
    if len(phi["F"]) != system.fermions.count:
        raise ValueError("need one fermionic orbital per fermion")
    n_steps = int(round(t_end / dt))
    if not math.isclose(n_steps * dt, t_end, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError("t_end must be an integer multiple of dt")
    record_every = record_every or n_steps
    ext = {s: potential_vector(system.trap, grid, system.species(s).mass) for s in ("B", "F")}
    factor = -1.0 if imaginary else -1j
    kin = {
        s: np.exp(factor * dt * kinetic_spectrum(grid, system.species(s).mass)) for s in ("B", "F")
    }

    def potentials():
        rho_b = np.abs(phi["B"][0]) ** 2 / dx
        rho_f = np.sum(np.abs(phi["F"]) ** 2, axis=0) / dx
        return {
            "B": ext["B"] + g_bb * (n_b - 1) * rho_b + g_fb * rho_f,
            "F": ext["F"] + g_fb * n_b * rho_b,
        }

    def half_potential():
        pots = potentials()
        for s in ("B", "F"):
            phi[s] = phi[s] * np.exp(factor * 0.5 * dt * pots[s])

    def kinetic():
        for s in ("B", "F"):
            phi[s] = sine_transform(kin[s] * sine_transform(phi[s]))

    def dens():
        return {
            "B": n_b * np.abs(phi["B"][0]) ** 2 / dx,
            "F": np.sum(np.abs(phi["F"]) ** 2, axis=0) / dx,
        }

    times, rec = [0.0], {s: [v] for s, v in dens().items()}
    for step in range(1, n_steps + 1):
        half_potential()
        kinetic()
        half_potential()
        if imaginary:
            for s in ("B", "F"):
                q, r = np.linalg.qr(phi[s].T)
                phi[s] = (q * np.sign(np.diag(r).real)).T
        if step % record_every == 0 or step == n_steps:
            times.append(step * dt)
            for s, v in dens().items():
                rec[s].append(v)
    return GPResult(
        times=np.array(times),
        densities={s: np.array(v) for s, v in rec.items()},
        orbitals={s: v.copy() for s, v in phi.items()},
    )
