"""Command line entry point: ``bfmix {relax,run,scan,ladder,report,oracle}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
import traceback
from pathlib import Path

from . import ansatz
from .driver import (
    ConfigError,
    RunConfig,
    check_config,
    format_config,
    parse_config,
    preset_config,
    relax_ground_state,
    run_ladder,
    run_scan,
    run_single,
)

log = logging.getLogger("bfmix")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bfmix", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("relax", "relax the ground state and save it"),
        ("run", "relax, quench to omega_f and propagate"),
        ("scan", "one relaxation, then a quench per omega_f_list entry"),
        ("ladder", "repeat one quench for a ladder of truncations"),
        ("report", "plots and summary for an existing output directory"),
        ("oracle", "run the brute-force verification checks"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="key = value configuration file")
        p.add_argument("--preset", help="named preset applied before --config")
        p.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
        p.add_argument("--workers", type=int, default=1, help="worker processes for scans")
        p.add_argument("--resume", type=Path, help="checkpoint file to continue from")
        p.add_argument("--seed", type=int, help="seed for the initial guess")
    return parser


def _load_config(args) -> RunConfig:
    base = preset_config(args.preset) if args.preset else RunConfig()
    cfg = base
    if args.config is not None:
        cfg = parse_config(args.config.read_text(encoding="utf-8"), base=base)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=str(args.out))
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return check_config(cfg)


def _log_error(out_dir: Path, command: str, exc: BaseException):
    record = {
        "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "command": command,
        "error": type(exc).__name__,
        "message": str(exc),
    }
    if isinstance(exc, ConfigError):
        record["problems"] = exc.problems
    line = json.dumps(record, sort_keys=True)
    print(line, file=sys.stderr)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "errors.jsonl", "a") as fh:
            fh.write(line + "\n")
    except OSError:
        pass


def _cmd_relax(cfg: RunConfig, args):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = relax_ground_state(cfg)
    ansatz.save_state(res.state, out / "ground_state.bfq")
    (out / "config.txt").write_text(format_config(cfg))
    summary = {"energy": res.energy, "tau": res.tau, "steps": res.n_steps,
               "schmidt": [float(v) for v in res.state.schmidt]}
    (out / "relax.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))


def _cmd_run(cfg: RunConfig, args):
    art = run_single(cfg, resume=args.resume)
    print(json.dumps({"trajectory": str(art.trajectory), "sbar_b": art.sbar_b, "sbar_f": art.sbar_f,
                      "wall_time": art.wall_time}))


def _cmd_scan(cfg: RunConfig, args):
    res = run_scan(cfg, workers=args.workers)
    for row in res.rows:
        print(json.dumps(dataclasses.asdict(row)))
    if not all(r.ok for r in res.rows):
        raise RuntimeError("some scan rows failed; see scan.csv")


def _cmd_ladder(cfg: RunConfig, args):
    res = run_ladder(cfg)
    for (a, b), dev in zip(zip(res.rungs[:-1], res.rungs[1:]), res.final_deviation):
        print(json.dumps({"from": a, "to": b, "final_deviation": dev}))


def _cmd_report(cfg: RunConfig, args):
    from .report import emit_report

    for p in emit_report(Path(cfg.out_dir)):
        print(p)


def _cmd_oracle(cfg: RunConfig, args):
    from .checks import run_oracle_suite

    results = run_oracle_suite(Path(cfg.out_dir))
    for r in results:
        print(json.dumps(r))
    if not all(r["passed"] for r in results):
        raise RuntimeError("oracle checks failed")


_COMMANDS = {
    "relax": _cmd_relax,
    "run": _cmd_run,
    "scan": _cmd_scan,
    "ladder": _cmd_ladder,
    "report": _cmd_report,
    "oracle": _cmd_oracle,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    out_guess = args.out or Path("out")
    try:
        cfg = _load_config(args)
        out_guess = Path(cfg.out_dir)
        _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        _log_error(out_guess, args.command, exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes a JSON log line
        log.debug("%s", traceback.format_exc())
        _log_error(out_guess, args.command, exc)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
