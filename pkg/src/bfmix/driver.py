"""Run orchestration: configuration, presets, quench runs, scans and ladders.

Config files are line oriented::

    # comment
    n_bosons = 8
    omega_f_list = 0.0, 0.01, 0.02
    x_half_extent = 4.5pi

Every key is a field of :class:`RunConfig`; unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ansatz
from .ansatz import MBState, init_guess, orthonormality_error
from .grid import GridSpec
from .model import (
    BOSONIC,
    FERMIONIC,
    InteractionSpec,
    SpeciesSpec,
    SystemSpec,
    TrapSpec,
    ValidationError,
    quench,
    validate_system,
)
from .observables import VarianceSeries, time_averaged_variance
from .propagator import (
    Engine,
    IntegratorSettings,
    IntegratorStatus,
    PropagationError,
    Propagator,
    relax,
)

__all__ = [
    "ConfigError",
    "RunConfig",
    "PRESETS",
    "REDUCED_SCAN",
    "preset_config",
    "parse_config",
    "format_config",
    "system_from_config",
    "settings_from_config",
    "trajectory_columns",
    "relax_ground_state",
    "RunArtifacts",
    "run_single",
    "ScanRow",
    "ScanResult",
    "run_scan",
    "LadderResult",
    "run_ladder",
    "read_trajectory",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"BFCK"
_CK_HEADER = struct.Struct("<4sI6dqqq")

REDUCED_SCAN = (0.0, 0.01, 0.02, 0.04, 0.06, 0.08)


class ConfigError(ValueError):
    """Config problems, each as ``line N: key: message``."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class RunConfig:
    # system
    n_bosons: int = 20
    n_fermions: int = 2
    g_bb: float = 0.05
    g_fb: float = 0.2
    v0: float = 3.0
    omega_i: float = 0.1
    mass_b: float = 1.0
    mass_f: float = 1.0
    grid_points: int = 475
    x_half_extent: float = 9.5 * math.pi
    # ansatz
    M: int = 10
    m_f: int = 8
    m_b: int = 4
    # protocol
    omega_f: float | None = None
    omega_f_list: tuple = ()
    t_final: float = 300.0
    dt_out: float = 1.0
    T_average: float | None = None
    ladder: tuple = ()
    # integrator overrides (None keeps the IntegratorSettings default)
    abs_tol: float | None = None
    rel_tol: float | None = None
    max_step: float | None = None
    initial_step: float | None = None
    rdm_regularization: float | None = None
    relaxation_energy_tol: float | None = None
    max_relaxation_time: float | None = None
    # bookkeeping
    seed: int = 0
    out_dir: str = "out"
    checkpoint_interval: float = 600.0
    snapshot_times: tuple = ()

    @property
    def configuration(self) -> tuple[int, int, int]:
        return (self.M, self.m_f, self.m_b)

    @property
    def averaging_window(self) -> float:
        return self.t_final if self.T_average is None else self.T_average


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_INT_KEYS = {"n_bosons", "n_fermions", "grid_points", "M", "m_f", "m_b", "seed"}
_STR_KEYS = {"out_dir"}
_FLOAT_LIST_KEYS = {"omega_f_list", "snapshot_times"}
_OPTIONAL = {
    "omega_f",
    "T_average",
    "abs_tol",
    "rel_tol",
    "max_step",
    "initial_step",
    "rdm_regularization",
    "relaxation_energy_tol",
    "max_relaxation_time",
}


def _reduced(**extra):
    base = dict(
        n_bosons=8,
        grid_points=121,
        x_half_extent=4.5 * math.pi,
        M=6,
        m_f=6,
        m_b=3,
        t_final=100.0,
        dt_out=0.5,
        omega_f_list=REDUCED_SCAN,
        ladder=((4, 4, 2), (6, 6, 3), (8, 8, 4)),
    )
    base.update(extra)
    return base


_PHYSICS = {
    "immiscible": dict(g_bb=0.05, g_fb=0.2),
    "miscible": dict(g_bb=1.0, g_fb=0.05),
    "barrier-v1": dict(v0=1.0),
    "barrier-v3": dict(v0=3.0),
    "barrier-v6": dict(v0=6.0),
    "mass-imbalance": dict(mass_b=2.0, mass_f=1.0),
}

PRESETS = dict(_PHYSICS)
PRESETS.update({f"reduced-{name}": _reduced(**values) for name, values in _PHYSICS.items()})


def preset_config(name: str, **overrides) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError([f"preset: unknown preset {name!r} (known: {', '.join(sorted(PRESETS))})"])
    values = dict(PRESETS[name])
    values.update(overrides)
    return dataclasses.replace(RunConfig(), **values)


def _parse_float(text: str) -> float:
    t = text.strip().lower().replace(" ", "")
    if t.endswith("pi"):
        head = t[:-2].rstrip("*")
        return (float(head) if head not in ("", "+") else 1.0) * math.pi
    return float(t)


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _OPTIONAL and raw.lower() in ("none", ""):
        return None
    if key in _INT_KEYS:
        value = float(raw)
        if value != int(value):
            raise ValueError("expected an integer")
        return int(value)
    if key in _STR_KEYS:
        return raw
    if key in _FLOAT_LIST_KEYS:
        return tuple(_parse_float(v) for v in raw.split(",") if v.strip())
    if key == "ladder":
        rungs = []
        for item in (v for v in raw.split(",") if v.strip()):
            parts = item.replace(";", "/").replace(":", "/").split("/")
            if len(parts) != 3:
                raise ValueError("ladder rungs are M/m_f/m_b")
            rungs.append(tuple(int(p) for p in parts))
        return tuple(rungs)
    return _parse_float(raw)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines on top of ``base`` (paper defaults)."""
    values = {}
    lines = {}
    problems = []
    for number, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            problems.append(f"line {number}: expected 'key = value'")
            continue
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in _FIELDS:
            problems.append(f"line {number}: {key}: unknown key")
            continue
        if key in values:
            problems.append(f"line {number}: {key}: duplicate key")
            continue
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as exc:
            problems.append(f"line {number}: {key}: {exc}")
            continue
        lines[key] = number
    if problems:
        raise ConfigError(problems)
    cfg = dataclasses.replace(base or RunConfig(), **values)
    check_config(cfg, lines)
    return cfg


def check_config(cfg: RunConfig, lines: dict | None = None) -> RunConfig:
    lines = lines or {}

    def where(key):
        return f"line {lines[key]}: {key}" if key in lines else key

    problems = []
    for key in ("t_final", "dt_out"):
        if not getattr(cfg, key) > 0:
            problems.append(f"{where(key)}: must be positive")
    if cfg.T_average is not None and not 0 < cfg.T_average <= cfg.t_final:
        problems.append(f"{where('T_average')}: must lie in (0, t_final]")
    if cfg.omega_f is not None and not cfg.omega_f >= 0:
        problems.append(f"{where('omega_f')}: must be >= 0")
    if any(not w >= 0 for w in cfg.omega_f_list):
        problems.append(f"{where('omega_f_list')}: frequencies must be >= 0")
    if not cfg.checkpoint_interval >= 0:
        problems.append(f"{where('checkpoint_interval')}: must be >= 0")
    try:
        system_from_config(cfg)
    except ValidationError as exc:
        key_of = {
            "fermions.n_orbitals": "m_f",
            "bosons.n_orbitals": "m_b",
            "fermions.count": "n_fermions",
            "bosons.count": "n_bosons",
            "bosons.mass": "mass_b",
            "fermions.mass": "mass_f",
            "interactions.g_bb": "g_bb",
            "interactions.g_fb": "g_fb",
            "trap.omega": "omega_i",
            "trap.v0": "v0",
            "grid.n_points": "grid_points",
            "schmidt_rank": "M",
        }
        for p in exc.problems:
            path = p.split(":", 1)[0]
            key = key_of.get(path)
            problems.append(f"{where(key)}: {p}" if key else p)
    try:
        settings_from_config(cfg)
    except ValueError as exc:
        problems.append(f"integrator: {exc}")
    if problems:
        raise ConfigError(problems)
    return cfg


def format_config(cfg: RunConfig) -> str:
    """Canonical text form; ``parse_config(format_config(c)) == c``."""
    out = []
    for name, f in _FIELDS.items():
        value = getattr(cfg, name)
        if value is None:
            text = "none"
        elif name == "ladder":
            text = ", ".join("/".join(str(v) for v in rung) for rung in value)
        elif isinstance(value, tuple):
            text = ", ".join(repr(float(v)) for v in value)
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        out.append(f"{name} = {text}")
    return "\n".join(out) + "\n"


def system_from_config(cfg: RunConfig) -> SystemSpec:
    return validate_system(
        SystemSpec(
            bosons=SpeciesSpec("B", cfg.n_bosons, BOSONIC, cfg.mass_b, cfg.m_b),
            fermions=SpeciesSpec("F", cfg.n_fermions, FERMIONIC, cfg.mass_f, cfg.m_f),
            interactions=InteractionSpec(cfg.g_bb, cfg.g_fb),
            trap=TrapSpec(cfg.omega_i, cfg.v0),
            grid=GridSpec(cfg.grid_points, -cfg.x_half_extent, cfg.x_half_extent),
            schmidt_rank=cfg.M,
        )
    )


def settings_from_config(cfg: RunConfig) -> IntegratorSettings:
    names = (
        "abs_tol",
        "rel_tol",
        "max_step",
        "initial_step",
        "rdm_regularization",
        "relaxation_energy_tol",
        "max_relaxation_time",
    )
    overrides = {n: getattr(cfg, n) for n in names if getattr(cfg, n) is not None}
    return IntegratorSettings(**overrides)


# -- trajectory rows ----------------------------------------------------------


def trajectory_columns(cfg: RunConfig) -> list[str]:
    cols = ["t", "energy", "norm_error", "ortho_error", "var_b", "var_f"]
    cols += [f"lambda_{k + 1}" for k in range(cfg.M)]
    cols += [f"nat_pop_b_{k + 1}" for k in range(cfg.m_b)]
    cols += [f"nat_pop_f_{k + 1}" for k in range(cfg.m_f)]
    return cols


class _Recorder:
    """Turns snapshots into trajectory rows and density samples."""

    def __init__(self, engine: Engine):
        self.engine = engine
        self.grid = engine.grid

    def measure(self, state: MBState):
        eng = self.engine
        y = eng.pack_state(state)
        top, cf, cb, pf, pb = eng.unpack(y)
        ws = eng.workspace(top, cf, cb, pf, pb)
        x = self.grid.points
        dx = self.grid.dx
        row = [state.time, ws.energy, abs(float(np.sum(state.schmidt)) - 1.0), orthonormality_error(state)]
        dens = {}
        for s in ("B", "F"):
            phi = state.spfs[s] / np.sqrt(dx)
            d = np.real(np.einsum("pq,px,qx->x", ws.rho1[s], phi.conj(), phi))
            dens[s] = d
        for s in ("B", "F"):
            m1 = dx * np.dot(x, dens[s])
            m2 = dx * np.dot(x * x, dens[s])
            row.append(m2 - m1 * m1)
        row += list(state.schmidt)
        for s in ("B", "F"):
            row += list(np.sort(np.linalg.eigvalsh(ws.rho1[s]))[::-1])
        return [float(v) for v in row], dens


def _fmt(row) -> str:
    return ",".join("%.17g" % v for v in row)


def read_trajectory(path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        data = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
    return header, np.array(data).reshape(len(data), len(header))


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path, state: MBState, status: IntegratorStatus, omega_f: float, t_final: float, n_rows: int):
    """Snapshot plus integrator memory, written atomically."""
    head = _CK_HEADER.pack(
        CHECKPOINT_MAGIC,
        1,
        status.time,
        status.step if status.step is not None else float("nan"),
        status.err_old,
        omega_f,
        t_final,
        0.0,
        status.n_steps,
        status.n_rejected,
        n_rows,
    )
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(head + struct.pack("<q", status.n_repairs) + ansatz.to_bytes(state))
    os.replace(tmp, path)


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (_, version, t, step, err_old, omega_f, t_final, _, n_steps, n_rej, n_rows) = _CK_HEADER.unpack_from(data)
    if version != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = _CK_HEADER.size
    (n_repairs,) = struct.unpack_from("<q", data, off)
    state, _ = ansatz.from_bytes(data, off + 8)
    status = IntegratorStatus(
        time=t,
        step=None if math.isnan(step) else step,
        err_old=err_old,
        n_steps=n_steps,
        n_rejected=n_rej,
        n_repairs=n_repairs,
    )
    return state, status, dict(omega_f=omega_f, t_final=t_final, n_rows=n_rows)


# -- runs ------------------------------------------------------------------------


def relax_ground_state(cfg: RunConfig):
    system = system_from_config(cfg)
    guess = init_guess(system, seed=cfg.seed)
    return relax(guess, system, settings_from_config(cfg))


@dataclass
class RunArtifacts:
    out_dir: Path
    trajectory: Path
    final_state: Path
    densities: dict
    rows: np.ndarray
    columns: list
    sbar_b: float
    sbar_f: float
    wall_time: float
    interrupted: bool = False


class _Interrupted(Exception):
    pass


def _append_density(path: Path, values: np.ndarray):
    with open(path, "ab") as fh:
        fh.write(np.asarray(values, "<f8").tobytes())


def _write_density_sidecar(out: Path, grid, n_rows: int):
    text = (
        "format = raw little-endian float64, row-major\n"
        f"shape = {n_rows} x {grid.n_points}\n"
        "axis0 = time (rows of trajectory.csv, same order)\n"
        "axis1 = x (grid points listed in grid.txt)\n"
        "value = single-particle density, integrates to the particle number\n"
    )
    (out / "densities.txt").write_text(text)
    (out / "grid.txt").write_text("\n".join("%.17g" % v for v in grid.points) + "\n")


def _truncate_outputs(out: Path, n_rows: int, n_points: int):
    lines = (out / "trajectory.csv").read_text().splitlines(keepends=True)
    (out / "trajectory.csv").write_text("".join(lines[: n_rows + 1]))
    for s in ("b", "f"):
        p = out / f"density_{s}.f64"
        data = p.read_bytes()[: 8 * n_points * n_rows]
        p.write_bytes(data)


def run_single(
    cfg: RunConfig,
    ground_state: MBState | None = None,
    resume: str | os.PathLike | None = None,
    out_dir: str | os.PathLike | None = None,
    stop_after_outputs: int | None = None,
) -> RunArtifacts:
    """Relax (unless given a ground state), quench to ``cfg.omega_f`` and propagate.

    Writes ``trajectory.csv``, per-species density files with a sidecar,
    ``ground_state.bfq``, ``final_state.bfq`` and ``checkpoint.bfck``.
    ``stop_after_outputs`` stops cleanly after that many output rows (the
    checkpoint is current), which is how interruptions are exercised.
    """
    if cfg.omega_f is None:
        raise ConfigError(["omega_f: a single run needs omega_f"])
    wall0 = time.perf_counter()
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    system = system_from_config(cfg)
    settings = settings_from_config(cfg)
    post = quench(system, cfg.omega_f)
    prop = Propagator(post, settings)
    recorder = _Recorder(prop.engine)
    grid = prop.engine.grid
    ck_path = out / "checkpoint.bfck"
    traj = out / "trajectory.csv"
    columns = trajectory_columns(cfg)

    if resume is not None:
        state, status, meta = load_checkpoint(resume)
        if meta["omega_f"] != cfg.omega_f:
            raise ConfigError([f"resume: checkpoint was written for omega_f={meta['omega_f']}"])
        n_rows = int(meta["n_rows"])
        _truncate_outputs(out, n_rows, grid.n_points)
        observe_start = False
    else:
        (out / "config.txt").write_text(format_config(cfg))
        if ground_state is None:
            ground_state = relax_ground_state(cfg).state
        ansatz.save_state(ground_state, out / "ground_state.bfq")
        state = ground_state.copy()
        state.time = 0.0
        status = IntegratorStatus(time=0.0)
        traj.write_text(",".join(columns) + "\n")
        for s in ("b", "f"):
            (out / f"density_{s}.f64").write_bytes(b"")
        n_rows = 0
        observe_start = True

    snap_left = sorted(t for t in cfg.snapshot_times if t >= state.time)
    counter = {"rows": n_rows, "since": 0, "last_ck": time.monotonic()}

    def observer(snap: MBState, st: IntegratorStatus):
        row, dens = recorder.measure(snap)
        with open(traj, "a") as fh:
            fh.write(_fmt(row) + "\n")
        _append_density(out / "density_b.f64", dens["B"])
        _append_density(out / "density_f.f64", dens["F"])
        counter["rows"] += 1
        counter["since"] += 1
        while snap_left and snap_left[0] <= snap.time + 1e-9:
            ansatz.save_state(snap, out / f"snapshot_t{snap_left.pop(0):g}.bfq")
        now = time.monotonic()
        if cfg.checkpoint_interval == 0 or now - counter["last_ck"] >= cfg.checkpoint_interval:
            save_checkpoint(ck_path, snap, st, cfg.omega_f, cfg.t_final, counter["rows"])
            counter["last_ck"] = now
        if stop_after_outputs is not None and counter["since"] >= stop_after_outputs:
            save_checkpoint(ck_path, snap, st, cfg.omega_f, cfg.t_final, counter["rows"])
            raise _Interrupted

    interrupted = False
    final = state
    if state.time < cfg.t_final - 1e-12:
        try:
            final = prop.run(state, cfg.t_final, cfg.dt_out, observer, status, observe_start)
        except _Interrupted:
            interrupted = True
        except PropagationError as exc:
            if exc.last_good is not None:
                save_checkpoint(ck_path, exc.last_good, exc.status or status, cfg.omega_f, cfg.t_final, counter["rows"])
            raise PropagationError(f"{exc} (checkpoint: {ck_path})", exc.last_good, exc.status) from exc
    if not interrupted:
        ansatz.save_state(final, out / "final_state.bfq")
        save_checkpoint(ck_path, final, status, cfg.omega_f, cfg.t_final, counter["rows"])
    _write_density_sidecar(out, grid, counter["rows"])
    header, rows = read_trajectory(traj)
    sbar_b = sbar_f = float("nan")
    if not interrupted and len(rows) > 1:
        window = cfg.averaging_window
        sbar_b = time_averaged_variance(VarianceSeries(rows[:, 0], rows[:, 4]), window)
        sbar_f = time_averaged_variance(VarianceSeries(rows[:, 0], rows[:, 5]), window)
    n = grid.n_points
    dens = {
        s.upper(): np.frombuffer((out / f"density_{s}.f64").read_bytes(), "<f8").reshape(-1, n)
        for s in ("b", "f")
    }
    return RunArtifacts(
        out_dir=out,
        trajectory=traj,
        final_state=out / "final_state.bfq",
        densities=dens,
        rows=rows,
        columns=header,
        sbar_b=sbar_b,
        sbar_f=sbar_f,
        wall_time=time.perf_counter() - wall0,
        interrupted=interrupted,
    )


# -- scans -----------------------------------------------------------------------


@dataclass
class ScanRow:
    omega_f: float
    sbar_b: float
    sbar_f: float
    final_energy: float
    max_norm_error: float
    wall_time: float
    ok: bool = True
    error: str = ""


@dataclass
class ScanResult:
    rows: list = field(default_factory=list)
    ground_energy: float = float("nan")

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def write_csv(self, path):
        lines = ["omega_f,sbar_b,sbar_f,final_energy,max_norm_error,wall_time,ok,error"]
        for r in self.rows:
            lines.append(
                "%.17g,%.17g,%.17g,%.17g,%.17g,%.6f,%d,%s"
                % (r.omega_f, r.sbar_b, r.sbar_f, r.final_energy, r.max_norm_error, r.wall_time, r.ok, json.dumps(r.error))
            )
        Path(path).write_text("\n".join(lines) + "\n")


def _scan_row(args) -> ScanRow:
    cfg, gs_bytes, out = args
    t0 = time.perf_counter()
    try:
        gs, _ = ansatz.from_bytes(gs_bytes)
        art = run_single(cfg, ground_state=gs, out_dir=out)
        rows = art.rows
        max_norm = float(np.max(rows[:, 2]))
        ok = max_norm < 1e-10
        return ScanRow(
            cfg.omega_f,
            art.sbar_b,
            art.sbar_f,
            float(rows[-1, 1]),
            max_norm,
            time.perf_counter() - t0,
            ok,
            "" if ok else "norm error above 1e-10",
        )
    except Exception as exc:  # noqa: BLE001 - a failed row must not stop the scan
        log.exception("scan row omega_f=%s failed", cfg.omega_f)
        nan = float("nan")
        return ScanRow(cfg.omega_f, nan, nan, nan, nan, time.perf_counter() - t0, False, f"{type(exc).__name__}: {exc}")


def run_scan(cfg: RunConfig, workers: int = 1, ground_state: MBState | None = None, out_dir=None) -> ScanResult:
    """Relax once, then quench to every ``omega_f_list`` entry (rows in request order)."""
    if not cfg.omega_f_list:
        raise ConfigError(["omega_f_list: a scan needs at least one frequency"])
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = ScanResult()
    if ground_state is None:
        relaxed = relax_ground_state(cfg)
        ground_state = relaxed.state
        result.ground_energy = relaxed.energy
    ansatz.save_state(ground_state, out / "ground_state.bfq")
    gs_bytes = ansatz.to_bytes(ground_state)
    jobs = [
        (dataclasses.replace(cfg, omega_f=w, omega_f_list=()), gs_bytes, out / f"omega_f_{w:.6g}")
        for w in cfg.omega_f_list
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            result.rows = list(pool.map(_scan_row, jobs))
    else:
        result.rows = [_scan_row(job) for job in jobs]
    result.write_csv(out / "scan.csv")
    return result


# -- convergence ladder ----------------------------------------------------------


@dataclass
class LadderResult:
    rungs: list
    times: np.ndarray
    variances: dict  # rung -> {"B": array, "F": array}
    max_deviation: list  # per successive pair: {"B": .., "F": ..} maximal relative deviation
    final_deviation: list  # same, at the final time


def run_ladder(cfg: RunConfig, ladder=None, out_dir=None) -> LadderResult:
    """Run the same quench for each truncation and compare variance traces."""
    ladder = [tuple(r) for r in (ladder or cfg.ladder)]
    if len(ladder) < 2:
        raise ConfigError(["ladder: need at least two rungs"])
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    variances = {}
    times = None
    for rung in ladder:
        m, m_f, m_b = rung
        rcfg = dataclasses.replace(cfg, M=m, m_f=m_f, m_b=m_b, omega_f_list=())
        check_config(rcfg)
        art = run_single(rcfg, out_dir=out / f"rung_{m}_{m_f}_{m_b}")
        times = art.rows[:, 0]
        variances[rung] = {"B": art.rows[:, 4], "F": art.rows[:, 5]}
    max_dev, fin_dev = [], []
    for a, b in zip(ladder[:-1], ladder[1:]):
        md, fd = {}, {}
        for s in ("B", "F"):
            rel = np.abs(variances[b][s] - variances[a][s]) / np.abs(variances[b][s])
            md[s] = float(np.max(rel))
            fd[s] = float(rel[-1])
        max_dev.append(md)
        fin_dev.append(fd)
    lines = ["rung_a,rung_b,max_dev_b,max_dev_f,final_dev_b,final_dev_f"]
    for (a, b), md, fd in zip(zip(ladder[:-1], ladder[1:]), max_dev, fin_dev):
        lines.append(
            "%s,%s,%.17g,%.17g,%.17g,%.17g"
            % ("/".join(map(str, a)), "/".join(map(str, b)), md["B"], md["F"], fd["B"], fd["F"])
        )
    (out / "ladder.csv").write_text("\n".join(lines) + "\n")
    return LadderResult(ladder, times, variances, max_dev, fin_dev)
