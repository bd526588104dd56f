"""Plots and plain-text summaries of run, scan and ladder directories.

SVG output is byte-stable: the hash salt is fixed and no date is embedded.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .driver import read_trajectory  # noqa: E402

__all__ = ["ReportError", "emit_report"]

_RC = {"svg.hashsalt": "bfmix-report", "svg.fonttype": "path", "font.size": 9}


class ReportError(RuntimeError):
    pass


def _save(fig, path: Path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _variance_plot(header, rows, path):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    t = rows[:, header.index("t")]
    for key, label in (("var_b", "bosons"), ("var_f", "fermions")):
        ax.plot(t, rows[:, header.index(key)], label=label, marker="o" if len(t) == 1 else None)
    ax.set_xlabel("t")
    ax.set_ylabel(r"$\Sigma^2_x(t)$")
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def _heatmap(dens, grid_points, times, title, path):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    extent = [grid_points[0], grid_points[-1], times[0], times[-1] if len(times) > 1 else times[0] + 1]
    im = ax.imshow(dens, aspect="auto", origin="lower", extent=extent, interpolation="nearest")
    ax.set_xlabel("x")
    ax.set_ylabel("t")
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    _save(fig, path)


def _scan_plot(data, path):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for key, label in (("sbar_b", "bosons"), ("sbar_f", "fermions")):
        ax.plot(data["omega_f"], data[key], marker="o", label=label)
    ax.set_xlabel(r"$\omega_f$")
    ax.set_ylabel(r"$\bar{\Sigma}^2_x$")
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def _read_scan(path: Path) -> dict:
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    cols = {h: [] for h in header[:6]}
    for line in lines[1:]:
        parts = line.split(",")
        for h, v in zip(header[:6], parts[:6]):
            cols[h].append(float(v))
    return {h: np.array(v) for h, v in cols.items()}


def _run_report(run: Path, out: Path) -> list[Path]:
    traj = run / "trajectory.csv"
    if not traj.exists():
        raise ReportError(f"{run}: no trajectory.csv")
    header, rows = read_trajectory(traj)
    if len(rows) == 0:
        raise ReportError(f"{traj}: trajectory is empty")
    files = []
    p = out / "variance.svg"
    _variance_plot(header, rows, p)
    files.append(p)
    grid_file = run / "grid.txt"
    if grid_file.exists():
        x = np.array([float(v) for v in grid_file.read_text().split()])
        for s, name in (("b", "bosons"), ("f", "fermions")):
            raw = run / f"density_{s}.f64"
            if raw.exists() and raw.stat().st_size:
                dens = np.frombuffer(raw.read_bytes(), "<f8").reshape(-1, len(x))[: len(rows)]
                p = out / f"density_{s}.svg"
                _heatmap(dens, x, rows[:, 0], f"density, {name}", p)
                files.append(p)
    t = rows[:, 0]
    lines = [
        f"run: {run.name}",
        f"outputs: {len(rows)} (t = {t[0]:g} .. {t[-1]:g})",
        f"energy: first {rows[0, 1]:.12g}, last {rows[-1, 1]:.12g}, "
        f"relative drift {abs(rows[-1, 1] - rows[0, 1]) / abs(rows[0, 1]):.3e}",
        f"max norm error: {np.max(rows[:, 2]):.3e}",
        f"max SPF orthonormality error: {np.max(rows[:, 3]):.3e}",
        f"variance bosons: {rows[0, 4]:.8g} -> {rows[-1, 4]:.8g}",
        f"variance fermions: {rows[0, 5]:.8g} -> {rows[-1, 5]:.8g}",
    ]
    p = out / "summary.txt"
    p.write_text("\n".join(lines) + "\n")
    files.append(p)
    return files


def emit_report(run_dir, out_dir=None) -> list[Path]:
    """Write plots and ``summary.txt`` for a run, scan or ladder directory."""
    run = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run / "report"
    out.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(_RC):
        scan = run / "scan.csv"
        if scan.exists():
            data = _read_scan(scan)
            if len(data["omega_f"]) == 0:
                raise ReportError(f"{scan}: scan is empty")
            files = []
            p = out / "scan.svg"
            _scan_plot(data, p)
            files.append(p)
            lines = ["omega_f  sbar_b  sbar_f"]
            for w, b, f in zip(data["omega_f"], data["sbar_b"], data["sbar_f"]):
                lines.append(f"{w:.6g}  {b:.8g}  {f:.8g}")
            p = out / "summary.txt"
            p.write_text("\n".join(lines) + "\n")
            files.append(p)
            return files
        ladder = run / "ladder.csv"
        if ladder.exists():
            p = out / "summary.txt"
            p.write_text(ladder.read_text())
            return [p]
        return _run_report(run, out)
