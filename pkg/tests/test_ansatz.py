import itertools
import math

import numpy as np
import pytest
from conftest import make_system, random_state
from hypothesis import given, settings
from hypothesis import strategies as st

from bfmix.ansatz import (
    MBState,
    configuration_amplitude,
    enumerate_occupations,
    from_bytes,
    init_guess,
    is_entangled,
    load_state,
    orthonormality_error,
    save_state,
    schmidt_spectrum,
    species_function_values,
    to_bytes,
    total_norm,
)


def dense_excitations(table):
    off, src, dst, coef = table.excitations
    m = table.n_orbitals
    mats = np.zeros((m, m, table.size, table.size))
    for pair in range(m * m):
        p, q = divmod(pair, m)
        for e in range(off[pair], off[pair + 1]):
            mats[p, q, dst[e], src[e]] = coef[e]
    return mats


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 6), m=st.integers(1, 5))
def test_bosonic_table_size_and_order(n, m):
    t = enumerate_occupations("bosonic", n, m)
    assert t.size == math.comb(n + m - 1, m - 1)
    assert np.all(t.states.sum(axis=1) == n)
    codes = [tuple(s) for s in t.states]
    assert codes == sorted(codes, reverse=True)
    for i in range(t.size):
        assert t.index(t.occupation(i)) == i


@settings(max_examples=30, deadline=None)
@given(m=st.integers(1, 7), data=st.data())
def test_fermionic_table_obeys_pauli(m, data):
    n = data.draw(st.integers(1, m))
    t = enumerate_occupations("fermionic", n, m)
    assert t.size == math.comb(m, n)
    assert np.all(t.states <= 1)


def test_pauli_violation_rejected():
    with pytest.raises(ValueError):
        enumerate_occupations("fermionic", 3, 2)


def test_missing_occupation_raises_key_error():
    t = enumerate_occupations("fermionic", 2, 4)
    with pytest.raises(KeyError):
        t.index((2, 0, 0, 0))


@pytest.mark.parametrize("stats,n,m", [("bosonic", 3, 3), ("fermionic", 2, 4), ("bosonic", 4, 2), ("fermionic", 3, 5)])
def test_pair_operators_satisfy_commutation_relations(stats, n, m):
    e = dense_excitations(enumerate_occupations(stats, n, m))
    for p, q, r, s in itertools.product(range(m), repeat=4):
        lhs = e[p, q] @ e[r, s] - e[r, s] @ e[p, q]
        rhs = (q == r) * e[p, s] - (p == s) * e[r, q]
        assert np.abs(lhs - rhs).max() < 1e-12
    for p, q in itertools.product(range(m), repeat=2):
        assert np.array_equal(e[p, q].T, e[q, p])
    number = sum(e[p, p] for p in range(m))
    assert np.allclose(number, n * np.eye(len(number)))


def test_init_guess_is_normalized_and_orthonormal(small_system):
    s = init_guess(small_system)
    assert total_norm(s) == pytest.approx(1.0, abs=1e-14)
    assert orthonormality_error(s) < 1e-13
    assert s.schmidt[0] > 0.99 and np.all(s.schmidt > 0)
    assert is_entangled(s)
    assert np.array_equal(init_guess(small_system, seed=3).coeffs["B"], init_guess(small_system, seed=3).coeffs["B"])
    with pytest.raises(ValueError):
        init_guess(small_system, strategy="nope")


def test_init_guess_rank_larger_than_space_rejected():
    system = make_system(n_b=1, n_f=1, m_b=1, m_f=1, rank=2)
    with pytest.raises(ValueError):
        init_guess(system)


def test_schmidt_helpers():
    s = MBState(np.array([0.2, 0.8]), {}, {}, {}, 0.0)
    assert np.allclose(schmidt_spectrum(s), [0.8, 0.2])
    assert is_entangled(s)
    assert not is_entangled(MBState(np.array([1.0, 1e-12]), {}, {}, {}, 0.0))


def test_configuration_amplitude_symmetry():
    rng = np.random.default_rng(0)
    vals = rng.standard_normal((3, 6))
    occ_f = (1, 1, 0)
    a = configuration_amplitude(vals, occ_f, (1, 4), "fermionic")
    assert configuration_amplitude(vals, occ_f, (4, 1), "fermionic") == pytest.approx(-a)
    occ_b = (2, 1, 0)
    b = configuration_amplitude(vals, occ_b, (0, 2, 5), "bosonic")
    for perm in itertools.permutations((0, 2, 5)):
        assert configuration_amplitude(vals, occ_b, perm, "bosonic") == pytest.approx(b)
    # permanent 2 phi^2 over sqrt(2! 2!)
    assert configuration_amplitude(vals, (2, 0, 0), (3, 3), "bosonic") == pytest.approx(vals[0, 3] ** 2)


def test_species_function_is_normalized(small_system, small_state):
    dx = 3 * math.pi / 32
    for label in ("B", "F"):
        f = species_function_values(small_state, label, 0, dx)
        assert np.sum(np.abs(f) ** 2) * dx ** f.ndim == pytest.approx(1.0, abs=1e-10)


def test_snapshot_round_trip(tmp_path, small_state):
    small_state.time = 3.25
    data = to_bytes(small_state)
    assert data[:4] == b"BFQ1"
    back, end = from_bytes(data)
    assert end == len(data)
    assert back.time == 3.25
    for s in ("B", "F"):
        assert np.array_equal(back.coeffs[s], small_state.coeffs[s])
        assert np.array_equal(back.spfs[s], small_state.spfs[s])
    assert np.array_equal(back.schmidt, small_state.schmidt)
    save_state(small_state, tmp_path / "s.bfq")
    assert to_bytes(load_state(tmp_path / "s.bfq")) == data
    with pytest.raises(ValueError):
        from_bytes(b"XXXX" + data[4:])


def test_total_norm_of_random_state(small_system):
    s = random_state(small_system, 5)
    assert total_norm(s) == pytest.approx(1.0, abs=1e-13)
