"""Compare the numba kernels with their pure-numpy fallbacks.

Run with ``python3 benchmarks/bench_kernels.py``.  Each kernel is timed on
full-scale table sizes (20 bosons in 4 SPFs, 2 fermions in 8 SPFs, 475 grid
points); a second section times one equation-of-motion evaluation in a
subprocess per backend, selected through ``BFMIX_NUMBA``.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from bfmix import _kernels
from bfmix.ansatz import enumerate_occupations

RHS_SNIPPET = """
import time, numpy as np
from bfmix import init_guess
from bfmix.driver import preset_config, system_from_config
from bfmix.propagator import Engine
cfg = preset_config({preset!r})
system = system_from_config(cfg)
eng = Engine(system)
y = eng.pack_state(init_guess(system))
eng.derivative(y)
t0 = time.perf_counter()
for _ in range({repeat}):
    eng.derivative(y)
print((time.perf_counter() - t0) / {repeat})
"""


def _best(fn, number, repeat=5):
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def bench_kernels(number: int):
    rng = np.random.default_rng(0)
    rows = []
    for label, stats, n, m in (("bosons 20/4", "bosonic", 20, 4), ("fermions 2/8", "fermionic", 2, 8)):
        table = enumerate_occupations(stats, n, m)
        exc = table.excitations
        vecs = rng.standard_normal((10, table.size)) + 1j * rng.standard_normal((10, table.size))
        z = rng.standard_normal((m * m, 10, table.size)) + 0j
        for name, fast, slow, arg in (
            ("apply_excitations", _kernels.apply_excitations, _kernels.np_apply_excitations, vecs),
            ("gather_excitations", _kernels.gather_excitations, _kernels.np_gather_excitations, z),
        ):
            assert np.allclose(fast(*exc, arg), slow(*exc, arg))
            rows.append((f"{name} [{label}]", _best(lambda: fast(*exc, arg), number), _best(lambda: slow(*exc, arg), number)))
    spf = rng.standard_normal((8, 475)) + 1j * rng.standard_normal((8, 475))
    args = (spf[:4], spf, spf[:4], spf, 1.0 / 0.06)
    if _kernels.nb_contact_tensor is None:
        return rows
    assert np.allclose(_kernels.nb_contact_tensor(*args), _kernels.np_contact_tensor(*args))
    rows.append(
        (
            "contact_tensor loops vs BLAS [4x8x4x8, 475 pts]",
            _best(lambda: _kernels.nb_contact_tensor(*args), number),
            _best(lambda: _kernels.np_contact_tensor(*args), number),
        )
    )
    return rows


def bench_rhs(preset: str, repeat: int):
    out = {}
    for flag in ("1", "0"):
        env = dict(os.environ, BFMIX_NUMBA=flag)
        code = RHS_SNIPPET.format(preset=preset, repeat=repeat)
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        out["numba" if flag == "1" else "numpy"] = float(res.stdout.strip().splitlines()[-1])
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--number", type=int, default=20, help="calls per timing sample")
    parser.add_argument("--rhs-preset", default="reduced-immiscible", help="preset for the RHS timing")
    parser.add_argument("--rhs-repeat", type=int, default=50)
    args = parser.parse_args(argv)
    print(f"kernel backend at import: {_kernels.BACKEND}")
    print(f"{'kernel':45s} {'numba [ms]':>12s} {'numpy [ms]':>12s} {'speedup':>8s}")
    for name, fast, slow in bench_kernels(args.number):
        print(f"{name:45s} {1e3 * fast:12.4f} {1e3 * slow:12.4f} {slow / fast:8.2f}")
    rhs = bench_rhs(args.rhs_preset, args.rhs_repeat)
    print(
        f"{'derivative [' + args.rhs_preset + ']':45s} {1e3 * rhs['numba']:12.4f} {1e3 * rhs['numpy']:12.4f} "
        f"{rhs['numpy'] / rhs['numba']:8.2f}"
    )


if __name__ == "__main__":
    main()
