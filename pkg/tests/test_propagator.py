import math

import numpy as np
import pytest
from conftest import make_system, random_state, smooth_state

from bfmix import oracle
from bfmix.ansatz import init_guess, orthonormality_error, species_function_values, total_norm
from bfmix.grid import build_grid
from bfmix.model import one_body_hamiltonian, quench
from bfmix.propagator import (
    Engine,
    IntegratorSettings,
    IntegratorStatus,
    PropagationError,
    Propagator,
    RelaxationError,
    _lowdin,
    canonicalize,
    energy,
    eom_rhs,
    mean_field_operators,
    orbital_gradient,
    orbital_rdms,
    propagate,
    regularized_inverse,
    relax,
)


def tiny_system(**kw):
    base = dict(n_b=2, n_f=2, m_b=2, m_f=3, rank=2, n_points=9, half=1.0 * math.pi, g_bb=0.7, g_fb=0.4)
    base.update(kw)
    return make_system(**base)


def dense_wavefunction(state, system):
    """Psi[xb1, xb2, xf1, xf2] on the grid (function values)."""
    dx = build_grid(system.grid).dx
    psi = 0
    for k, lam in enumerate(state.schmidt):
        b = species_function_values(state, "B", k, dx)
        f = species_function_values(state, "F", k, dx)
        psi = psi + math.sqrt(lam) * np.multiply.outer(b, f)
    return psi, dx


def generic_point(system, seed):
    """Packed state with a full (non-Schmidt) top layer."""
    eng = Engine(system)
    rng = np.random.default_rng(seed)
    top, cf, cb, pf, pb = eng.unpack(eng.pack_state(random_state(system, seed)))
    top = top + 0.3 * (rng.standard_normal(top.shape) + 1j * rng.standard_normal(top.shape))
    top /= np.linalg.norm(top)
    return eng, eng.pack(top, cf, cb, pf, pb)


def test_regularized_inverse():
    rho = np.diag([0.7, 0.3 - 1e-3, 1e-3])
    inv, cond = regularized_inverse(rho, 1e-10)
    assert np.allclose(inv @ rho, np.eye(3), atol=1e-9)
    sing = np.diag([1.0, 0.0])
    inv, cond = regularized_inverse(sing, 1e-8)
    assert np.all(np.isfinite(inv)) and inv[1, 1] == pytest.approx(1e8)
    assert cond == pytest.approx(1e8)


def test_orbital_rdms_match_brute_force():
    system = tiny_system()
    state = random_state(system, 4)
    psi, dx = dense_wavefunction(state, system)
    assert np.sum(np.abs(psi) ** 2) * dx**4 == pytest.approx(1.0, abs=1e-10)
    ws = orbital_rdms(state, system)
    chi = {s: state.spfs[s] / math.sqrt(dx) for s in ("B", "F")}
    # one-body: G(x, x') = <psi+(x) psi(x')>
    gb = 2 * np.einsum("xabc,yabc->xy", psi.conj(), psi) * dx**3
    gf = 2 * np.einsum("abcx,abcy->xy", psi.conj(), psi) * dx**3
    for s, g in (("B", gb), ("F", gf)):
        ref = dx**2 * np.einsum("px,xy,qy->pq", chi[s], g, chi[s].conj())
        assert np.allclose(ws.rho1[s], ref, atol=1e-10)
    # two-body diagonals
    dens2 = np.abs(psi) ** 2
    bb = 2 * np.einsum("xyab->xy", dens2) * dx**2
    r2 = ws.rho2["B"]
    pb = chi["B"]
    model = np.einsum("pqrs,px,qy,rx,sy->xy", r2, pb.conj(), pb.conj(), pb, pb)
    assert np.allclose(model, bb, atol=1e-10)
    fb = 4 * np.einsum("axby->xy", dens2) * dx**2  # (x_B, x_F)
    pf = chi["F"]
    model = np.einsum("prqs,px,qx,ry,sy->yx", ws.rho_fb, pf.conj(), pf, pb.conj(), pb)
    assert np.allclose(model, fb, atol=1e-10)


def test_rdm_identities_and_pauli():
    system = tiny_system(n_f=2, m_f=4)
    state = random_state(system, 9)
    ws = orbital_rdms(state, system)
    for s, n in (("B", 2), ("F", 2)):
        r = ws.rho1[s]
        assert np.allclose(r, r.conj().T)
        assert np.trace(r).real == pytest.approx(n, abs=1e-12)
        assert np.all(np.linalg.eigvalsh(r) > -1e-12)
        # contraction: sum_q <a+p a+q a_q a_r> = (N - 1) <a+p a_r>
        r2 = ws.rho2[s]
        assert np.allclose(np.einsum("pqrq->pr", r2), (n - 1) * r, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(ws.rho1["F"]) < 1 + 1e-12)
    assert np.allclose(np.einsum("prqr->pq", ws.rho_fb), 2 * ws.rho1["F"], atol=1e-12)


def test_energy_matches_first_quantized_hamiltonian():
    system = tiny_system()
    state = random_state(system, 6)
    psi, dx = dense_wavefunction(state, system)
    n = system.grid.n_points
    hb = one_body_hamiltonian(system, "B")
    hf = one_body_hamiltonian(system, "F")
    e = 0.0
    for axis, h in ((0, hb), (1, hb), (2, hf), (3, hf)):
        hpsi = np.moveaxis(np.tensordot(h, psi, axes=([1], [axis])), 0, axis)
        e += np.vdot(psi, hpsi).real * dx**4
    dens = np.abs(psi) ** 2
    ic = system.interactions
    i = np.arange(n)
    e += ic.g_bb / dx * dens[i, i].sum() * dx**4
    for ib in (0, 1):
        for jf in (2, 3):
            diag = np.moveaxis(dens, (ib, jf), (0, 1))[i, i]
            e += ic.g_fb / dx * diag.sum() * dx**4
    assert energy(state, system) == pytest.approx(e, rel=1e-12)


def test_energy_matches_pair_grid_hamiltonian():
    system = make_system(n_b=1, n_f=1, m_b=3, m_f=3, rank=3, n_points=21)
    state = random_state(system, 2)
    vec = oracle.grid_pair_amplitudes(state)
    ham = oracle.grid_pair_hamiltonian(system)
    assert energy(state, system) == pytest.approx(np.vdot(vec, ham @ vec).real, rel=1e-12)


def _richardson(f, y, dy, d=1e-3):
    def cd(h):
        return (f(y + h * dy) - f(y - h * dy)) / (2 * h)

    return (4 * cd(d / 2) - cd(d)) / 3


def test_real_time_flow_conserves_energy_norm_and_orthonormality():
    system = tiny_system(n_points=15)
    eng, y = generic_point(system, 3)
    dy, _ = eng.derivative(y)
    d = 1e-3 / np.linalg.norm(dy)
    de = _richardson(eng.energy, y, dy, d)
    assert abs(de) < 1e-10 * max(1.0, np.linalg.norm(dy))

    def norm(v):
        return np.linalg.norm(eng.unpack(v)[0]) ** 2

    assert abs(_richardson(norm, y, dy, d)) < 1e-10
    _, cf, cb, pf, pb = eng.unpack(y)
    _, dcf, dcb, dpf, dpb = eng.unpack(dy)
    for c, dc in ((cf, dcf), (cb, dcb), (pf, dpf), (pb, dpb)):
        gram_rate = dc.conj() @ c.T + c.conj() @ dc.T
        assert np.abs(gram_rate).max() < 1e-12
    # projector gauge: SPF derivatives are orthogonal to the current span
    assert np.abs(pf.conj() @ dpf.T).max() < 1e-12


def test_imaginary_time_flow_lowers_energy():
    system = tiny_system(n_points=15)
    eng, y = generic_point(system, 8)
    dy, ws = eng.derivative(y, imaginary=True)
    assert _richardson(eng.energy, y, dy) < -1e-6
    assert ws.energy == pytest.approx(eng.energy(y), rel=1e-13)


def test_frozen_spfs_leave_orbitals_fixed():
    system = tiny_system(n_points=15)
    eng, y = generic_point(system, 1)
    dy, _ = eng.derivative(y, imaginary=True, freeze_spfs=True)
    _, _, _, dpf, dpb = eng.unpack(dy)
    assert np.all(dpf == 0) and np.all(dpb == 0)


def test_orbital_gradient_by_finite_differences():
    system = tiny_system(n_points=15)
    state = random_state(system, 12)
    grad = orbital_gradient(state, system)
    rng = np.random.default_rng(0)
    for s in ("B", "F"):
        phi = state.spfs[s]
        delta = rng.standard_normal(phi.shape) + 1j * rng.standard_normal(phi.shape)
        delta -= (delta @ phi.conj().T) @ phi  # stay orthogonal to the span
        delta *= 1e-4 / np.linalg.norm(delta)

        def e_of(h):
            st = state.copy()
            st.spfs[s] = phi + h * delta
            return energy(st, system)

        fd = (e_of(1.0) - e_of(-1.0)) / 2.0
        assert fd == pytest.approx(2 * np.real(np.vdot(grad[s], delta)), rel=1e-5, abs=1e-14)


def test_mean_fields_reproduce_spf_equation():
    system = tiny_system(n_points=15)
    state = random_state(system, 5)
    mf = mean_field_operators(state, system)
    assert np.all(mf.pair["FF"] == 0)
    assert np.allclose(mf.pair["BB"], mf.pair["BB"].conj().transpose(1, 0, 2))
    rhs = eom_rhs(state, system)
    for s in ("B", "F"):
        phi = state.spfs[s]
        h = one_body_hamiltonian(system, s)
        act = phi @ h.T + np.einsum("jqx,qx->jx", mf.effective[s], phi)
        act -= (act @ phi.conj().T) @ phi
        assert np.allclose(rhs.spfs[s], -1j * act, atol=1e-12)


def test_canonicalize_preserves_wavefunction():
    system = make_system(n_b=1, n_f=1, m_b=3, m_f=3, rank=3, n_points=21)
    eng, y = generic_point(system, 7)
    top, cf, cb, pf, pb = eng.unpack(y)
    before = oracle.grid_pair_amplitudes
    state = canonicalize(top, cf, cb, pf, pb, {"B": 1, "F": 1}, 0.0)
    assert np.all(np.diff(state.schmidt) <= 0)
    assert total_norm(state) == pytest.approx(1.0, abs=1e-13)
    # rebuild psi from the general form and compare
    fb = cb @ pb
    ff = cf @ pf
    psi = np.einsum("kl,lx,ky->xy", top, fb, ff).reshape(-1)
    after = before(state)
    assert abs(abs(np.vdot(psi, after)) - 1.0) < 1e-12


def test_lowdin_restores_orthonormality():
    rng = np.random.default_rng(0)
    rows = _lowdin(rng.standard_normal((3, 10)) + 0j)
    assert np.allclose(rows @ rows.conj().T, np.eye(3), atol=1e-14)


def test_settings_validation():
    with pytest.raises(ValueError):
        IntegratorSettings(abs_tol=0.0)
    with pytest.raises(ValueError):
        IntegratorSettings(prerelax_energy_tol=-1.0)
    IntegratorSettings(prerelax_energy_tol=0.0)


def test_relaxation_in_complete_span_is_exact():
    # one boson and one fermion on five points: M = m = 5 spans the whole space
    system = make_system(n_b=1, n_f=1, m_b=5, m_f=5, rank=5, n_points=5, half=1.0, omega=0.5, v0=0.5, g_fb=1.0)
    res = relax(init_guess(system), system)
    e_ref, _ = oracle.ed_ground_state(oracle.grid_pair_hamiltonian(system))
    assert res.energy == pytest.approx(e_ref, abs=1e-8)
    assert np.all(np.diff(res.state.schmidt) <= 0)


def test_relaxation_matches_fci_for_two_bosons():
    system = make_system(n_b=2, n_f=1, m_b=4, m_f=4, rank=4, n_points=4, half=1.0, omega=0.5, v0=0.5, g_bb=0.8, g_fb=0.6)
    res = relax(init_guess(system), system)
    basis = oracle.fci_basis(system, 4)
    e_ref, _ = oracle.ed_ground_state(oracle.fci_hamiltonian(system, basis))
    assert res.energy == pytest.approx(e_ref, abs=1e-8)


def test_harmonic_relaxation():
    omega = 0.5
    system = make_system(n_b=1, n_f=1, m_b=1, m_f=1, rank=1, n_points=61, half=2.5 * math.pi, omega=omega, v0=0.0, g_bb=0.0, g_fb=0.0)
    res = relax(init_guess(system), system)
    assert res.energy == pytest.approx(omega, abs=1e-6)


def test_relaxation_time_limit():
    system = tiny_system(n_points=15)
    with pytest.raises(RelaxationError) as info:
        relax(init_guess(system), system, IntegratorSettings(max_relaxation_time=0.05, prerelax_energy_tol=0.0))
    assert info.value.last_state is not None


def test_step_size_underflow_raises_with_last_good_state():
    system = tiny_system(n_points=15)
    settings = IntegratorSettings(abs_tol=1e-16, rel_tol=1e-16, min_step=0.1, initial_step=0.2)
    with pytest.raises(PropagationError) as info:
        propagate(random_state(system, 0), system, 1.0, settings)
    assert info.value.last_good is not None


def test_short_propagation_conserves_invariants():
    system = tiny_system(n_points=21)
    state = smooth_state(system, 3)
    post = quench(system, 0.1)
    e0 = energy(state, post)
    rows = []
    final = propagate(state, post, 2.0, observer=lambda s, st: rows.append(s), dt_out=0.5)
    assert [round(s.time, 12) for s in rows] == [0.0, 0.5, 1.0, 1.5, 2.0]
    assert abs(energy(final, post) - e0) / abs(e0) < 1e-6
    assert abs(total_norm(final) - 1.0) < 1e-12
    assert orthonormality_error(final) < 1e-10


def test_propagation_is_deterministic_and_resumable():
    system = tiny_system(n_points=21)
    state = smooth_state(system, 3)
    prop = Propagator(system)
    full = []
    prop.run(state, 1.5, 0.5, lambda s, st: full.append(s))
    again = []
    Propagator(system).run(state, 1.5, 0.5, lambda s, st: again.append(s))
    for a, b in zip(full, again):
        assert np.array_equal(a.spfs["B"], b.spfs["B"]) and np.array_equal(a.schmidt, b.schmidt)
    # stop at t = 0.5, keep the status, continue
    status = IntegratorStatus(time=0.0)
    mid = Propagator(system).run(state, 0.5, 0.5, None, status)
    import copy

    resumed = []
    Propagator(system).run(mid, 1.5, 0.5, lambda s, st: resumed.append(s), copy.deepcopy(status), observe_start=False)
    for a, b in zip(full[2:], resumed):
        assert a.time == b.time
        for s in ("B", "F"):
            assert np.max(np.abs(a.spfs[s] - b.spfs[s])) < 1e-12
            assert np.max(np.abs(a.coeffs[s] - b.coeffs[s])) < 1e-12
