"""The 50-run configuration matrix for one problem, followed by its summary tables.

Equivalent to the CLI call

    odetrans run --problems harmonic --meshes 10,20 --out results/harmonic

but kept as a script so the configuration lives in a dataclass.

    python scripts/run_matrix.py --problem harmonic --meshes 10,20 --workers 4
"""

import argparse
from pathlib import Path

from odetrans.harness import RECORDS_FILE, RunConfig, report, run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--problem", default="harmonic")
    ap.add_argument("--meshes", default="shipped")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--starts", type=int, default=1)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--time-limit", type=float, default=600.0)
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()
    meshes = args.meshes if args.meshes in ("shipped", "smallest") else tuple(int(v) for v in args.meshes.split(","))
    cfg = RunConfig(
        problems=(args.problem,),
        meshes=meshes,
        seed=args.seed,
        mode="local" if args.starts == 1 else "multistart",
        starts=args.starts,
        workers=args.workers,
        time_limit_s=args.time_limit,
        out=args.out or Path("results") / args.problem,
    )
    out = run(cfg)
    print(f"{len(out.records)} records in {out.out / RECORDS_FILE}")
    print(report(out.out / RECORDS_FILE, "scheme,formulation"))


if __name__ == "__main__":
    main()
