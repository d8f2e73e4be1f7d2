"""Command-line entry point: ``odetrans run ...`` and ``odetrans report ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .harness import MODES, ConfigError, RunConfig, report, run
from .integrate import Scheme
from .metrics import MetricError
from .pool import POOL_NAMES, ProblemError


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _meshes(text: str):
    if text in ("shipped", "smallest"):
        return text
    return tuple(int(v) for v in text.split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="odetrans", description="Direct-transcription ODE parameter estimation runs.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="expand a configuration matrix and execute it")
    r.add_argument("--problems", type=_names, default=POOL_NAMES,
                   help="comma-separated pool names or problem files (default: whole pool)")
    r.add_argument("--schemes", type=_names, default=tuple(s.value for s in Scheme))
    r.add_argument("--meshes", type=_meshes, default="shipped", help="'shipped', 'smallest' or sizes like 230,2300")
    r.add_argument("--formulations", type=_names, default=("Baseline", "ExtraTol", "SoftCons"))
    r.add_argument("--eps", type=_floats, default=(1e-4, 1e-6), help="ExtraTol tolerances")
    r.add_argument("--eps-presets", action="store_true",
                   help="use the problem-specific tolerance lists for lv_p and crauste_*")
    r.add_argument("--penalty", type=_floats, default=(1e3, 1e5), help="SoftCons penalties")
    r.add_argument("--mode", choices=MODES, default="local")
    r.add_argument("--starts", type=int, default=1, help="multistart count")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--time-limit", type=float, default=600.0, help="seconds per run")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--data-dir", type=Path, default=None, help="directory of <problem>.csv measurement files")
    r.add_argument("--out", type=Path, default=Path("results"))
    r.add_argument("--group-by", default=None, help="grouping printed after the run, e.g. problem,scheme")

    p = sub.add_parser("report", help="render summary tables from a records file")
    p.add_argument("records", type=Path)
    p.add_argument("--group-by", default=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            sys.stdout.write(report(args.records, args.group_by))
            return 0
        mode = "multistart" if args.mode == "local" and args.starts > 1 else args.mode
        cfg = RunConfig(
            problems=args.problems,
            schemes=args.schemes,
            meshes=args.meshes,
            formulations=args.formulations,
            eps=args.eps,
            penalty=args.penalty,
            eps_presets=args.eps_presets,
            mode=mode,
            starts=args.starts,
            seed=args.seed,
            time_limit_s=args.time_limit,
            workers=args.workers,
            out=args.out,
            data_dir=args.data_dir,
        )
        result = run(cfg)
    except (ConfigError, ProblemError, MetricError, ValueError, OSError) as exc:
        print(f"odetrans: error: {exc}", file=sys.stderr)
        return 2
    if cfg.mode == "export":
        print(f"{len(result.exports)} exports written to {result.out / 'exports'}")
        return 0
    print(f"{len(result.records)} records written to {result.out / 'records.csv'}")
    if args.group_by:
        sys.stdout.write(report(result.out / "records.csv", args.group_by))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
