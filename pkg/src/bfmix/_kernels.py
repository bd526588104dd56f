"""Hot loops of the equations of motion.

Every kernel has a pure-numpy implementation and, when numba is importable,
an ``@njit`` twin.  ``BFMIX_NUMBA=0`` in the environment forces numpy; the
choice is made once at import time and exposed as ``BACKEND``.
``contact_tensor`` is a BLAS matrix product, which beats the loop twin, so
it dispatches to numpy under both backends.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "BACKEND",
    "apply_excitations",
    "gather_excitations",
    "contact_tensor",
    "np_apply_excitations",
    "np_gather_excitations",
    "np_contact_tensor",
    "nb_contact_tensor",
]


def np_apply_excitations(offsets, src, dst, coef, vecs):
    """``out[P, k] = E_P vecs[k]`` for every pair operator P."""
    n_pairs = len(offsets) - 1
    out = np.zeros((n_pairs,) + vecs.shape, dtype=np.result_type(vecs, 1.0))
    for pair in range(n_pairs):
        lo, hi = offsets[pair], offsets[pair + 1]
        if hi > lo:
            out[pair][:, dst[lo:hi]] = coef[lo:hi] * vecs[:, src[lo:hi]]
    return out


def np_gather_excitations(offsets, src, dst, coef, z):
    """``out[k] = sum_P E_P z[P, k]``."""
    n_pairs = len(offsets) - 1
    out = np.zeros(z.shape[1:], dtype=z.dtype)
    for pair in range(n_pairs):
        lo, hi = offsets[pair], offsets[pair + 1]
        if hi > lo:
            # dst is unique within a pair, so fancy-index accumulation is safe
            out[:, dst[lo:hi]] += coef[lo:hi] * z[pair][:, src[lo:hi]]
    return out


def np_contact_tensor(a, b, c, d, scale):
    """``T[p,q,r,s] = scale * sum_x conj(a_p) conj(b_q) c_r d_s``."""
    left = (a.conj()[:, None, :] * c[None, :, :]).reshape(-1, a.shape[1])
    right = (b.conj()[:, None, :] * d[None, :, :]).reshape(-1, a.shape[1])
    t = (left @ right.T).reshape(len(a), len(c), len(b), len(d))
    return scale * t.transpose(0, 2, 1, 3)


try:
    if os.environ.get("BFMIX_NUMBA", "1").lower() in ("0", "false", "no", "off"):
        raise ImportError("numba disabled by BFMIX_NUMBA")
    from numba import njit
except ImportError:  # pragma: no cover - exercised with BFMIX_NUMBA=0
    BACKEND = "numpy"
    apply_excitations = np_apply_excitations
    gather_excitations = np_gather_excitations
    contact_tensor = np_contact_tensor
    nb_contact_tensor = None
else:
    BACKEND = "numba"

    @njit(cache=True)
    def _nb_apply(offsets, src, dst, coef, vecs, out):
        n_pairs = offsets.shape[0] - 1
        n_vec = vecs.shape[0]
        for pair in range(n_pairs):
            for e in range(offsets[pair], offsets[pair + 1]):
                s = src[e]
                t = dst[e]
                c = coef[e]
                for k in range(n_vec):
                    out[pair, k, t] = c * vecs[k, s]

    @njit(cache=True)
    def _nb_gather(offsets, src, dst, coef, z, out):
        n_pairs = offsets.shape[0] - 1
        n_vec = z.shape[1]
        for pair in range(n_pairs):
            for e in range(offsets[pair], offsets[pair + 1]):
                s = src[e]
                t = dst[e]
                c = coef[e]
                for k in range(n_vec):
                    out[k, t] += c * z[pair, k, s]

    @njit(cache=True)
    def _nb_contact(a, b, c, d, scale, out):
        ma, mb, mc, md = a.shape[0], b.shape[0], c.shape[0], d.shape[0]
        n = a.shape[1]
        ac = np.empty((ma, mc, n), dtype=np.complex128)
        for p in range(ma):
            for r in range(mc):
                for x in range(n):
                    ac[p, r, x] = np.conj(a[p, x]) * c[r, x]
        bd = np.empty((mb, md, n), dtype=np.complex128)
        for q in range(mb):
            for s in range(md):
                for x in range(n):
                    bd[q, s, x] = np.conj(b[q, x]) * d[s, x]
        for p in range(ma):
            for q in range(mb):
                for r in range(mc):
                    for s in range(md):
                        acc = 0j
                        for x in range(n):
                            acc += ac[p, r, x] * bd[q, s, x]
                        out[p, q, r, s] = scale * acc

    def apply_excitations(offsets, src, dst, coef, vecs):
        vecs = np.ascontiguousarray(vecs, dtype=np.complex128)
        out = np.zeros((len(offsets) - 1,) + vecs.shape, dtype=np.complex128)
        _nb_apply(offsets, src, dst, coef, vecs, out)
        return out

    def gather_excitations(offsets, src, dst, coef, z):
        z = np.ascontiguousarray(z, dtype=np.complex128)
        out = np.zeros(z.shape[1:], dtype=np.complex128)
        _nb_gather(offsets, src, dst, coef, z, out)
        return out

    contact_tensor = np_contact_tensor

    def nb_contact_tensor(a, b, c, d, scale):
        arrs = [np.ascontiguousarray(v, dtype=np.complex128) for v in (a, b, c, d)]
        out = np.empty((len(a), len(b), len(c), len(d)), dtype=np.complex128)
        _nb_contact(*arrs, float(scale), out)
        return out
