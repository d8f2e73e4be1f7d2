"""Observed convergence orders of every scheme on dx/dt = -x over [0, 1].

Prints the orders of the shipped pipeline (multistep schemes started with
Trapezoid steps) next to those of the multistep recurrences alone, started
from exact values.

    python scripts/convergence_orders.py --meshes 10,20,40,80
"""

import argparse
import math
from pathlib import Path

from odetrans.integrate import Scheme, step_scheme
from odetrans.pool import load_problem

PROBLEM = Path(__file__).resolve().parents[1] / "tests" / "data" / "negx.yaml"


def orders(problem, scheme, meshes, exact_start):
    errs = []
    for M in meshes:
        boot = None
        if exact_start and scheme in (Scheme.ADAMS_MOULTON3, Scheme.SIMPSON):
            k = 2 if scheme is Scheme.ADAMS_MOULTON3 else 1
            boot = [[math.exp(-(i + 1) / M)] for i in range(k)]
        x = step_scheme(problem, [1.0], scheme, M, bootstrap=boot).states[-1, 0]
        errs.append(abs(x - math.exp(-1.0)))
    return [math.log2(a / b) for a, b in zip(errs, errs[1:])]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--meshes", default="10,20,40")
    args = ap.parse_args()
    meshes = [int(v) for v in args.meshes.split(",")]
    prob = load_problem(PROBLEM)
    print(f"{'scheme':<15}{'pipeline':<28}exact start")
    for s in Scheme:
        a = " ".join(f"{q:5.2f}" for q in orders(prob, s, meshes, False))
        b = " ".join(f"{q:5.2f}" for q in orders(prob, s, meshes, True))
        print(f"{s.value:<15}{a:<28}{b}")


if __name__ == "__main__":
    main()
