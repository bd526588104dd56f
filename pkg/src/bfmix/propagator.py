"""Variational equations of motion for the two-layer Bose-Fermi ansatz.

Internally the wavefunction is carried as

    Psi = sum_{k,l} A[k, l] F_k B_l,
    F_k = sum_n CF[k, n] |n>_F,   B_l = sum_n CB[l, n] |n>_B,

with number states built from the SPFs ``PF`` / ``PB``.  The projector gauge
is used on both lower layers (time derivatives orthogonal to the current
span), which gives

    i dA/dt  = K A                                    (M^2 linear equations)
    i dC_k/dt = (1 - P_C) rho_spec^-1 <H>_k C         (species layer)
    i dphi_j/dt = (1 - P_phi) rho^-1 dE/dphi*_j       (SPF layer)

``K`` is the Hamiltonian in the product basis of species functions, the
species-layer mean fields act on number-state vectors and the SPF mean
fields are diagonal grid potentials built from contact-interaction pair
densities.  Reduced density matrices are inverted on a regularized
eigenvalue floor.  States handed to callers are always rotated back into
Schmidt form (diagonal ``A``).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as kern
from .ansatz import MBState, enumerate_occupations
from .grid import build_grid
from .model import SystemSpec, one_body_hamiltonian

__all__ = [
    "IntegratorSettings",
    "EOMWorkspace",
    "StateDerivative",
    "IntegratorStatus",
    "PropagationError",
    "RelaxationError",
    "Engine",
    "orbital_rdms",
    "mean_field_operators",
    "orbital_gradient",
    "eom_rhs",
    "energy",
    "propagate",
    "relax",
    "regularized_inverse",
    "canonicalize",
]

log = logging.getLogger(__name__)

LABELS = ("F", "B")
ORTHO_REPAIR_THRESHOLD = 1e-12


class PropagationError(RuntimeError):
    """Integration failed; ``last_good`` holds the last accepted state."""

    def __init__(self, message, last_good=None, status=None):
        super().__init__(message)
        self.last_good = last_good
        self.status = status


class RelaxationError(RuntimeError):
    def __init__(self, message, energies=None, last_state=None):
        super().__init__(message)
        self.energies = energies or []
        self.last_state = last_state


@dataclass(frozen=True)
class IntegratorSettings:
    abs_tol: float = 1e-9
    rel_tol: float = 1e-9
    max_step: float = 0.5
    initial_step: float = 1e-3
    min_step: float = 1e-12
    rdm_regularization: float = 1e-10
    relaxation_energy_tol: float = 1e-9
    max_relaxation_time: float = 5000.0
    relaxation_abs_tol: float = 1e-7
    relaxation_rel_tol: float = 1e-7
    prerelax_energy_tol: float = 1e-6

    def __post_init__(self):
        for name in (
            "abs_tol",
            "rel_tol",
            "max_step",
            "initial_step",
            "min_step",
            "rdm_regularization",
            "relaxation_energy_tol",
            "max_relaxation_time",
            "relaxation_abs_tol",
            "relaxation_rel_tol",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.prerelax_energy_tol >= 0:
            raise ValueError("prerelax_energy_tol must be >= 0 (0 disables the stage)")


@dataclass
class EOMWorkspace:
    """Everything the right-hand side derives from one set of variables."""

    rho_species: dict
    rho1: dict
    rho2: dict
    rho_fb: np.ndarray
    hmat: dict
    contact_bb: np.ndarray
    contact_fb: np.ndarray
    energy: float
    condition: dict = field(default_factory=dict)


@dataclass
class StateDerivative:
    top: np.ndarray
    coeffs: dict
    spfs: dict


@dataclass
class IntegratorStatus:
    """Integrator memory that a checkpoint needs for exact continuation."""

    time: float = 0.0
    step: float | None = None
    err_old: float = 1e-4
    n_steps: int = 0
    n_rejected: int = 0
    n_repairs: int = 0


def regularized_inverse(rho: np.ndarray, eps: float) -> tuple[np.ndarray, float]:
    """Inverse of a Hermitian density with eigenvalues ``w + eps exp(-w/eps)``.

    Returns the inverse and the condition number of the regularized matrix.
    """
    w, u = np.linalg.eigh(rho)
    w = np.maximum(w, 0.0)
    w_reg = w + eps * np.exp(-w / eps)
    inv = (u / w_reg) @ u.conj().T
    return inv, float(w_reg.max() / w_reg.min())


def _lowdin(rows: np.ndarray) -> np.ndarray:
    s = rows.conj() @ rows.T
    w, u = np.linalg.eigh(s)
    return ((u / np.sqrt(w)) @ u.conj().T).T @ rows


def _ortho_err(rows: np.ndarray) -> float:
    s = rows.conj() @ rows.T
    return float(np.max(np.abs(s - np.eye(len(s)))))


def canonicalize(top, cf, cb, pf, pb, n_particles, time) -> MBState:
    """Rotate species functions so that the top coefficients are diagonal."""
    u, s, vh = np.linalg.svd(top)
    return MBState(
        schmidt=s**2,
        coeffs={"F": u.T @ cf, "B": vh @ cb},
        spfs={"F": pf.copy(), "B": pb.copy()},
        n_particles=dict(n_particles),
        time=float(time),
    )


class Engine:
    """Holds the static operators of one Hamiltonian and evaluates the EOMs."""

    def __init__(self, system: SystemSpec, grid=None, eps: float = 1e-10):
        self.system = system
        self.grid = grid if grid is not None else build_grid(system.grid)
        self.inv_dx = 1.0 / self.grid.dx
        self.eps = eps
        self.g_bb = system.interactions.g_bb
        self.g_fb = system.interactions.g_fb
        self.rank = system.schmidt_rank
        self.h = {s: one_body_hamiltonian(system, s, self.grid) for s in LABELS}
        self.tables = {}
        self.exc = {}
        self.m = {}
        self.dim = {}
        self.n_particles = {}
        for s in LABELS:
            sp = system.species(s)
            table = enumerate_occupations(sp.statistics, sp.count, sp.n_orbitals)
            self.tables[s] = table
            self.exc[s] = table.excitations
            self.m[s] = sp.n_orbitals
            self.dim[s] = table.size
            self.n_particles[s] = sp.count
        n = self.grid.n_points
        M = self.rank
        self.shapes = [
            (M, M),
            (M, self.dim["F"]),
            (M, self.dim["B"]),
            (self.m["F"], n),
            (self.m["B"], n),
        ]
        self.sizes = [int(np.prod(sh)) for sh in self.shapes]
        self.offsets = np.cumsum([0] + self.sizes)

    # -- packing ----------------------------------------------------------

    def pack(self, top, cf, cb, pf, pb) -> np.ndarray:
        return np.concatenate([np.ravel(v) for v in (top, cf, cb, pf, pb)]).astype(complex)

    def unpack(self, y):
        o = self.offsets
        return tuple(y[o[i] : o[i + 1]].reshape(self.shapes[i]) for i in range(5))

    def pack_state(self, state: MBState) -> np.ndarray:
        self.check_state(state)
        top = np.diag(np.sqrt(np.maximum(state.schmidt, 0.0))).astype(complex)
        return self.pack(top, state.coeffs["F"], state.coeffs["B"], state.spfs["F"], state.spfs["B"])

    def state_from(self, y, time) -> MBState:
        return canonicalize(*self.unpack(y), self.n_particles, time)

    def check_state(self, state: MBState):
        if state.rank != self.rank:
            raise ValueError(f"state rank {state.rank} != system rank {self.rank}")
        for s in LABELS:
            if state.coeffs[s].shape != (self.rank, self.dim[s]):
                raise ValueError(f"coefficient block {s} has shape {state.coeffs[s].shape}")
            if state.spfs[s].shape != (self.m[s], self.grid.n_points):
                raise ValueError(f"SPF block {s} has shape {state.spfs[s].shape}")
            if state.n_particles[s] != self.n_particles[s]:
                raise ValueError(f"particle number mismatch for species {s}")

    # -- building blocks --------------------------------------------------

    def _species_blocks(self, top, coeffs, spfs):
        out = {}
        for s in LABELS:
            off, src, dst, coef = self.exc[s]
            c = coeffs[s]
            g = kern.apply_excitations(off, src, dst, coef, c)  # (P, M, D)
            x = np.matmul(c.conj(), g.transpose(0, 2, 1))  # <C_k|E_P|C_l>
            out[s] = (g, x)
        rho_spec = {"F": top.conj() @ top.T, "B": top.conj().T @ top}
        return out, rho_spec

    def _two_body(self, g, rho_spec, rho1, m):
        """``R[p,q,r,s] = <a+_p a+_q a_s a_r>`` from excitation images."""
        n_pairs = m * m
        t = np.matmul(rho_spec, g)
        ee = g.reshape(n_pairs, -1).conj() @ t.reshape(n_pairs, -1).T
        r2 = ee.reshape(m, m, m, m).transpose(1, 2, 0, 3).copy()  # [r,p,q,s] -> [p,q,r,s]
        for q in range(m):
            r2[:, q, q, :] -= rho1
        return r2

    def _interspecies(self, top, xf, xb):
        """``R[p,r,q,s] = <f+_p f_q b+_r b_s>``."""
        mf, mb = self.m["F"], self.m["B"]
        y = np.einsum("kl,Pkm->Plm", top.conj(), xf)
        y = np.einsum("Plm,mn->Pln", y, top)
        r = y.reshape(len(xf), -1) @ xb.reshape(len(xb), -1).T  # (PF, QB)
        return r.reshape(mf, mf, mb, mb).transpose(0, 2, 1, 3)

    def workspace(self, top, cf, cb, pf, pb, with_rho2f: bool = False):
        coeffs = {"F": cf, "B": cb}
        spfs = {"F": pf, "B": pb}
        blocks, rho_spec = self._species_blocks(top, coeffs, spfs)
        hphi, hmat, rho1, rho2 = {}, {}, {}, {}
        for s in LABELS:
            m = self.m[s]
            hphi[s] = spfs[s] @ self.h[s]
            hmat[s] = spfs[s].conj() @ hphi[s].T
            g, x = blocks[s]
            rho1[s] = np.einsum("kl,Pkl->P", rho_spec[s], x).reshape(m, m)
        rho2["B"] = self._two_body(blocks["B"][0], rho_spec["B"], rho1["B"], self.m["B"])
        if with_rho2f:
            rho2["F"] = self._two_body(blocks["F"][0], rho_spec["F"], rho1["F"], self.m["F"])
        rho_fb = self._interspecies(top, blocks["F"][1], blocks["B"][1])
        v_bb = kern.contact_tensor(pb, pb, pb, pb, self.inv_dx)
        v_fb = kern.contact_tensor(pf, pb, pf, pb, self.inv_dx)  # [p,r,q,s]
        e = sum(np.sum(rho1[s] * hmat[s]) for s in LABELS)
        e += 0.5 * self.g_bb * np.sum(rho2["B"] * v_bb)
        e += self.g_fb * np.sum(rho_fb * v_fb)
        ws = EOMWorkspace(
            rho_species=rho_spec,
            rho1=rho1,
            rho2=rho2,
            rho_fb=rho_fb,
            hmat=hmat,
            contact_bb=v_bb,
            contact_fb=v_fb,
            energy=float(e.real),
        )
        ws._blocks = blocks
        ws._hphi = hphi
        return ws

    def species_hamiltonian_action(self, ws, coeffs):
        """``H_s C_k`` for every species function (number-state space)."""
        out = {}
        for s in LABELS:
            m = self.m[s]
            g, _ = ws._blocks[s]
            hc = np.tensordot(ws.hmat[s].ravel(), g, axes=1)
            if s == "B" and self.g_bb != 0.0:
                v = ws.contact_bb
                vmat = v.transpose(0, 2, 1, 3).reshape(m * m, m * m)  # [(p,r),(q,s)]
                z = (vmat @ g.reshape(m * m, -1)).reshape(g.shape)
                off, src, dst, coef = self.exc[s]
                two = kern.gather_excitations(off, src, dst, coef, z)
                w = np.einsum("pqqs->ps", v)
                two -= np.tensordot(w.ravel(), g, axes=1)
                hc = hc + 0.5 * self.g_bb * two
            out[s] = hc
        return out

    def top_action(self, ws, top, hc, coeffs):
        """``K A`` in the product basis of species functions."""
        hf = coeffs["F"].conj() @ hc["F"].T
        hb = coeffs["B"].conj() @ hc["B"].T
        out = hf @ top + top @ hb.T
        if self.g_fb != 0.0:
            xf = ws._blocks["F"][1]
            xb = ws._blocks["B"][1]
            vmat = self._vfb_mat(ws)
            y = xf @ top  # (P, k, l')
            u = np.tensordot(vmat, y, axes=(0, 0))  # (Q, k, l')
            out = out + self.g_fb * np.einsum("Qkm,Qlm->kl", u, xb)
        return out

    def _vfb_mat(self, ws):
        mf, mb = self.m["F"], self.m["B"]
        return ws.contact_fb.transpose(0, 2, 1, 3).reshape(mf * mf, mb * mb)

    def orbital_gradient(self, ws, spfs):
        """Rows ``dE/dphi*_p`` on the grid for both species."""
        grad = {}
        for s in LABELS:
            grad[s] = ws.rho1[s] @ ws._hphi[s]
        pf, pb = spfs["F"], spfs["B"]
        mf, mb = self.m["F"], self.m["B"]
        if self.g_bb != 0.0:
            pair = (pb.conj()[:, None, :] * pb[None, :, :]).reshape(mb * mb, -1)  # [q,s]
            r2 = ws.rho2["B"].transpose(0, 2, 1, 3).reshape(mb * mb, mb * mb)  # [(p,r),(q,s)]
            u = (r2 @ pair).reshape(mb, mb, -1)
            grad["B"] = grad["B"] + self.g_bb * self.inv_dx * np.einsum("prx,rx->px", u, pb)
        if self.g_fb != 0.0:
            rfb = ws.rho_fb  # [p,r,q,s]
            pair_b = (pb.conj()[:, None, :] * pb[None, :, :]).reshape(mb * mb, -1)
            uf = (rfb.transpose(0, 2, 1, 3).reshape(mf * mf, mb * mb) @ pair_b).reshape(mf, mf, -1)
            grad["F"] = grad["F"] + self.g_fb * self.inv_dx * np.einsum("pqx,qx->px", uf, pf)
            pair_f = (pf.conj()[:, None, :] * pf[None, :, :]).reshape(mf * mf, -1)
            ub = (rfb.transpose(1, 3, 0, 2).reshape(mb * mb, mf * mf) @ pair_f).reshape(mb, mb, -1)
            grad["B"] = grad["B"] + self.g_fb * self.inv_dx * np.einsum("rsx,sx->rx", ub, pb)
        return grad

    def effective_potentials(self, ws):
        """Density-weighted contact potentials acting in the SPF equations.

        ``U[s][j, q](x)`` such that the interaction part of
        ``sum_p (rho^-1)_{jp} dE/dphi*_p`` equals ``sum_q U[j,q] phi_q``.
        """
        pf, pb = ws._spfs["F"], ws._spfs["B"]
        mf, mb = self.m["F"], self.m["B"]
        n = pf.shape[1]
        u = {"F": np.zeros((mf, mf, n), complex), "B": np.zeros((mb, mb, n), complex)}
        pair_b = (pb.conj()[:, None, :] * pb[None, :, :]).reshape(mb * mb, -1)
        pair_f = (pf.conj()[:, None, :] * pf[None, :, :]).reshape(mf * mf, -1)
        if self.g_bb != 0.0:
            r2 = ws.rho2["B"].transpose(0, 2, 1, 3).reshape(mb * mb, mb * mb)
            u["B"] += self.g_bb * self.inv_dx * (r2 @ pair_b).reshape(mb, mb, -1)
        if self.g_fb != 0.0:
            rfb = ws.rho_fb
            u["F"] += self.g_fb * self.inv_dx * (
                rfb.transpose(0, 2, 1, 3).reshape(mf * mf, mb * mb) @ pair_b
            ).reshape(mf, mf, -1)
            u["B"] += self.g_fb * self.inv_dx * (
                rfb.transpose(1, 3, 0, 2).reshape(mb * mb, mf * mf) @ pair_f
            ).reshape(mb, mb, -1)
        for s in LABELS:
            inv, _ = regularized_inverse(ws.rho1[s], self.eps)
            u[s] = np.einsum("jp,pqx->jqx", inv, u[s])
        return u

    # -- right-hand side --------------------------------------------------

    def derivative(self, y, imaginary: bool = False, freeze_spfs: bool = False):
        """Time derivative of the packed variables, plus the workspace.

        ``freeze_spfs`` zeroes the SPF derivative (coefficient layers only).
        """
        top, cf, cb, pf, pb = self.unpack(y)
        coeffs = {"F": cf, "B": cb}
        spfs = {"F": pf, "B": pb}
        ws = self.workspace(top, cf, cb, pf, pb)
        ws._spfs = spfs
        hc = self.species_hamiltonian_action(ws, coeffs)

        d_top = self.top_action(ws, top, hc, coeffs)

        # species layer
        d_coeffs = {}
        vmat = self._vfb_mat(ws) if self.g_fb != 0.0 else None
        for s, other in (("F", "B"), ("B", "F")):
            c = coeffs[s]
            g, _ = ws._blocks[s]
            mf_term = hc[s].copy()
            if vmat is not None:
                x_other = ws._blocks[other][1]
                if s == "F":
                    # S[P,l,l'] = g sum_Q V[P,Q] XB[Q,l,l']
                    sop = self.g_fb * np.tensordot(vmat, x_other, axes=(1, 0))
                    w = np.einsum("kl,Plm,nm->Pkn", top.conj(), sop, top)
                else:
                    sop = self.g_fb * np.tensordot(vmat, x_other, axes=(0, 0))
                    w = np.einsum("kl,Pkm,mn->Pln", top.conj(), sop, top)
                inv, cond = regularized_inverse(ws.rho_species[s], self.eps)
                ws.condition[s + "_species"] = cond
                mf_term = mf_term + inv @ np.tensordot(w, g, axes=([0, 2], [0, 1]))
            proj = mf_term - (mf_term @ c.conj().T) @ c
            d_coeffs[s] = proj

        # SPF layer
        grad = self.orbital_gradient(ws, spfs)
        d_spfs = {}
        for s in LABELS:
            if freeze_spfs:
                d_spfs[s] = np.zeros_like(spfs[s])
                continue
            phi = spfs[s]
            gr = grad[s]
            gr = gr - (gr @ phi.conj().T) @ phi
            inv, cond = regularized_inverse(ws.rho1[s], self.eps)
            ws.condition[s + "_orbital"] = cond
            d_spfs[s] = inv @ gr

        factor = -1.0 if imaginary else -1j
        dy = self.pack(d_top, d_coeffs["F"], d_coeffs["B"], d_spfs["F"], d_spfs["B"])
        return factor * dy, ws

    def energy(self, y) -> float:
        return self.workspace(*self.unpack(y)).energy

    def repair(self, y, normalize_top: bool = True):
        """Re-orthonormalize SPFs and species functions past the threshold.

        Returns the repaired vector and whether anything was touched.
        """
        top, cf, cb, pf, pb = (v.copy() for v in self.unpack(y))
        touched = False
        blocks = [cf, cb, pf, pb]
        for i, blk in enumerate(blocks):
            if _ortho_err(blk) > ORTHO_REPAIR_THRESHOLD:
                blocks[i] = _lowdin(blk)
                touched = True
        nrm = np.linalg.norm(top)
        if normalize_top and abs(nrm**2 - 1.0) > ORTHO_REPAIR_THRESHOLD:
            top = top / nrm
            touched = True
        if not touched:
            return y, False
        return self.pack(top, *blocks), True

    def norm_error(self, y) -> float:
        top = self.unpack(y)[0]
        return abs(float(np.vdot(top, top).real) - 1.0)

    def ortho_error(self, y) -> float:
        _, cf, cb, pf, pb = self.unpack(y)
        return max(_ortho_err(pf), _ortho_err(pb))


# -- Dormand-Prince 5(4) -------------------------------------------------

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_E = _B5 - _B4

_BETA = 0.04
_EXPO = 0.2 - 0.75 * _BETA
_SAFE = 0.9
_FAC_MIN = 0.2
_FAC_MAX = 10.0


def _dopri_step(f, y, h, k1):
    ks = [k1]
    for i in range(1, 7):
        yi = y + h * sum(a * k for a, k in zip(_A[i], ks) if a != 0.0)
        ks.append(f(yi))
    y_new = y + h * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
    err_vec = h * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
    return y_new, err_vec, ks[-1]


def _error_norm(err_vec, y, y_new, atol, rtol):
    scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
    return float(np.sqrt(np.mean((np.abs(err_vec) / scale) ** 2)))


class _Stepper:
    """Adaptive DOPRI5 with a PI step-size controller."""

    def __init__(self, f, atol, rtol, max_step, min_step, status: IntegratorStatus):
        self.f = f
        self.atol = atol
        self.rtol = rtol
        self.max_step = max_step
        self.min_step = min_step
        self.status = status

    def step(self, y, t, h_max_here, k1):
        """One accepted step no longer than ``h_max_here``.

        Returns ``(y_new, t_new, k_last)``.
        """
        st = self.status
        h_prop = min(st.step, self.max_step)
        h = min(h_prop, h_max_here)
        clipped = h < h_prop
        while True:
            if h < self.min_step:
                raise PropagationError(f"step size underflow at t={t:.6g} (h={h:.3g})")
            # a wildly oversized trial step may overflow; it is rejected below
            with np.errstate(over="ignore", invalid="ignore"):
                y_new, err_vec, k_last = _dopri_step(self.f, y, h, k1)
                err = _error_norm(err_vec, y, y_new, self.atol, self.rtol)
            if not np.isfinite(err):
                st.n_rejected += 1
                h *= _FAC_MIN
                clipped = False
                continue
            fac11 = max(err, 1e-16) ** _EXPO
            fac = fac11 / st.err_old**_BETA
            fac = max(1.0 / _FAC_MAX, min(1.0 / _FAC_MIN, fac / _SAFE))
            if err <= 1.0:
                st.err_old = max(err, 1e-4)
                st.n_steps += 1
                h_next = h / fac
                # a step shortened only to land on an output time keeps the old proposal
                st.step = max(h_next, h_prop) if clipped else h_next
                return y_new, t + h, k_last
            st.n_rejected += 1
            h = h / min(1.0 / _FAC_MIN, fac11 / _SAFE)
            clipped = False


# -- public operations -----------------------------------------------------


def _engine_for(system, settings, grid=None):
    settings = settings or IntegratorSettings()
    return Engine(system, grid=grid, eps=settings.rdm_regularization), settings


def orbital_rdms(state: MBState, system: SystemSpec, with_fermion_rho2: bool = True) -> EOMWorkspace:
    """Orbital-space one- and two-body reduced densities of a state.

    ``rho1[s][p, q] = <a+_p a_q>``; ``rho2[s][p,q,r,s] = <a+_p a+_q a_s a_r>``;
    ``rho_fb[p,r,q,s] = <f+_p f_q b+_r b_s>``.
    """
    eng = Engine(system)
    top, cf, cb, pf, pb = eng.unpack(eng.pack_state(state))
    ws = eng.workspace(top, cf, cb, pf, pb, with_rho2f=with_fermion_rho2)
    ws._spfs = {"F": pf, "B": pb}
    return ws


def energy(state: MBState, system: SystemSpec) -> float:
    eng = Engine(system)
    return eng.energy(eng.pack_state(state))


@dataclass
class MeanFields:
    """Bare pair potentials ``g phi*_k phi_l / dx`` and density-weighted ones."""

    pair: dict
    effective: dict


def mean_field_operators(state: MBState, system: SystemSpec) -> MeanFields:
    """Contact mean fields on the grid.

    ``pair["BB"][k, l]`` is ``g_bb phi*_k phi_l / dx`` over bosonic SPFs,
    ``pair["FB"]`` the bosonic pair densities seen by fermions (``g_fb``),
    ``pair["BF"]`` the fermionic ones seen by bosons and ``pair["FF"]`` is zero.
    ``effective[s][j, q]`` folds in the reduced densities and the inverse
    one-body density so that the SPF equation reads
    ``i dphi_j/dt = (1-P)[h phi_j + sum_q effective[j, q] phi_q]``.
    """
    eng = Engine(system)
    top, cf, cb, pf, pb = eng.unpack(eng.pack_state(state))
    ws = eng.workspace(top, cf, cb, pf, pb)
    ws._spfs = {"F": pf, "B": pb}
    inv_dx = eng.inv_dx
    ic = system.interactions
    pair = {
        "BB": ic.g_bb * inv_dx * pb.conj()[:, None, :] * pb[None, :, :],
        "FB": ic.g_fb * inv_dx * pb.conj()[:, None, :] * pb[None, :, :],
        "BF": ic.g_fb * inv_dx * pf.conj()[:, None, :] * pf[None, :, :],
        "FF": np.zeros((len(pf), len(pf), pf.shape[1]), complex),
    }
    return MeanFields(pair=pair, effective=eng.effective_potentials(ws))


def orbital_gradient(state: MBState, system: SystemSpec) -> dict:
    """``dE/dphi*_p`` for every SPF (grid coefficient rows)."""
    eng = Engine(system)
    top, cf, cb, pf, pb = eng.unpack(eng.pack_state(state))
    ws = eng.workspace(top, cf, cb, pf, pb)
    return eng.orbital_gradient(ws, {"F": pf, "B": pb})


def eom_rhs(state: MBState, system: SystemSpec, settings: IntegratorSettings | None = None,
            imaginary: bool = False) -> StateDerivative:
    """Real- (or imaginary-) time derivative at a Schmidt-form state.

    The top-layer derivative is returned as an ``(M, M)`` matrix because the
    flow leaves Schmidt form immediately.
    """
    eng, _ = _engine_for(system, settings)
    dy, ws = eng.derivative(eng.pack_state(state), imaginary=imaginary)
    d_top, dcf, dcb, dpf, dpb = eng.unpack(dy)
    return StateDerivative(top=d_top, coeffs={"F": dcf, "B": dcb}, spfs={"F": dpf, "B": dpb})


class Propagator:
    """Real-time propagation with output cadence and exact checkpoint restarts.

    Between output times the integrator carries general top coefficients;
    at every output time the state is rotated into Schmidt form and the
    integrator restarts from it.  A checkpoint therefore only needs the
    Schmidt-form state and :class:`IntegratorStatus`.
    """

    def __init__(self, system, settings=None, grid=None):
        self.engine, self.settings = _engine_for(system, settings, grid)
        self.system = system

    def _rhs(self, y):
        return self.engine.derivative(y)[0]

    def segment(self, state: MBState, t_stop: float, status: IntegratorStatus) -> MBState:
        """Integrate from ``state.time`` to ``t_stop`` and return the Schmidt form."""
        eng = self.engine
        s = self.settings
        y = eng.pack_state(state)
        t = float(state.time)
        if status.step is None:
            status.step = s.initial_step
        stepper = _Stepper(self._rhs, s.abs_tol, s.rel_tol, s.max_step, s.min_step, status)
        k1 = self._rhs(y)
        while t < t_stop - 1e-12 * max(1.0, abs(t_stop)):
            try:
                y, t_new, k1 = stepper.step(y, t, t_stop - t, k1)
            except PropagationError as exc:
                exc.last_good = eng.state_from(y, t)
                exc.status = status
                raise
            t = t_new
            y, touched = eng.repair(y)
            if touched:
                status.n_repairs += 1
                log.debug("orthonormality repaired at t=%.6g", t)
                k1 = self._rhs(y)
        status.time = t_stop
        return eng.state_from(y, t_stop)

    def run(self, state, t_end, dt_out=None, observer=None, status=None, observe_start=True):
        status = status if status is not None else IntegratorStatus(time=state.time)
        if not t_end > state.time:
            raise ValueError("t_end must exceed the state time")
        dt_out = dt_out if dt_out is not None else t_end - state.time
        if observer is not None and observe_start:
            observer(state.copy(), status)
        # output times sit on the absolute grid j * dt_out so that a resumed run
        # hits exactly the same segment end points as an uninterrupted one
        j = int(math.floor(state.time / dt_out + 1e-9)) + 1
        current = state
        while current.time < t_end - 1e-12 * max(1.0, abs(t_end)):
            t_stop = min(j * dt_out, t_end)
            if t_end - t_stop < 1e-9 * dt_out:
                t_stop = t_end
            current = self.segment(current, t_stop, status)
            if observer is not None:
                observer(current.copy(), status)
            j += 1
        return current


def propagate(state, system, t_end, settings=None, observer=None, dt_out=None, status=None):
    """Real-time evolution under ``system`` from ``state.time`` to ``t_end``.

    ``observer(snapshot, status)`` is called at ``state.time`` and then every
    ``dt_out`` (default: only at the end).
    """
    return Propagator(system, settings).run(state, t_end, dt_out, observer, status)


@dataclass
class RelaxResult:
    state: MBState
    energy: float
    energies: list
    tau: float
    n_steps: int


def relax(state, system, settings=None, grid=None, callback=None) -> RelaxResult:
    """Imaginary-time relaxation to the ground state.

    After every accepted step the top coefficients are renormalized and the
    SPFs / species functions re-orthonormalized.  Stops once the energy
    decreases slower than ``relaxation_energy_tol`` per unit imaginary time.

    A first stage relaxes the coefficient layers with frozen SPFs (down to
    ``prerelax_energy_tol``).  Without it, nearly unoccupied seed orbitals are
    driven by the large inverse densities towards correction directions of
    the dominant orbital before their branches can build up, and the flow can
    settle in a higher stationary point.
    """
    eng, s = _engine_for(system, settings, grid)
    y = eng.pack_state(state)
    y, _ = eng.repair(y)
    energies = [eng.energy(y)]
    tau = 0.0
    n_steps = 0
    stages = [(False, s.relaxation_energy_tol)]
    if s.prerelax_energy_tol > 0:
        stages.insert(0, (True, max(s.prerelax_energy_tol, s.relaxation_energy_tol)))
    for frozen, tol in stages:
        status = IntegratorStatus(step=s.initial_step)

        def f(v, frozen=frozen):
            return eng.derivative(v, imaginary=True, freeze_spfs=frozen)[0]

        stepper = _Stepper(
            f, s.relaxation_abs_tol, s.relaxation_rel_tol, s.max_step, s.min_step, status
        )
        k1 = f(y)
        calm = 0
        while True:
            if tau > s.max_relaxation_time:
                raise RelaxationError(
                    f"no convergence within tau={s.max_relaxation_time}",
                    energies=energies,
                    last_state=eng.state_from(y, 0.0),
                )
            y, tau_new, _ = stepper.step(y, tau, np.inf, k1)
            dtau = tau_new - tau
            tau = tau_new
            y, _ = eng.repair(y)
            e_new = eng.energy(y)
            rate = abs(e_new - energies[-1]) / dtau
            energies.append(e_new)
            if callback is not None:
                callback(tau, e_new)
            calm = calm + 1 if rate < tol else 0
            if calm >= 3 and status.n_steps > 10:
                break
            k1 = f(y)
        n_steps += status.n_steps
    final = eng.state_from(y, 0.0)
    order = np.argsort(final.schmidt)[::-1]
    final.schmidt = final.schmidt[order]
    final.coeffs = {k: v[order] for k, v in final.coeffs.items()}
    return RelaxResult(final, energies[-1], energies, tau, n_steps)
