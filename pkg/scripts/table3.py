"""Convergence test against the exact cylinder on (0, 2 pi)^2.

For each refinement level l the step size is 2^-l / 25 and the inner
tolerance 1e-4; the scaled L2 and H1 errors are evaluated with one Gauss
point per cell.
"""
import argparse
import json
import logging
from pathlib import Path

import numpy as np

from bilayer.experiments import convergence_run


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--levels", type=int, nargs="+", default=[3, 4])
    p.add_argument("--stop-tol", type=float, default=1e-6)
    p.add_argument("--out", type=Path, default=Path("runs/table3.json"))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    rows = []
    print(f"{'level':>5} {'tau':>9} {'steps':>8} {'L2':>8} {'H1':>8}")
    for lvl in args.levels:
        r = convergence_run(lvl, stop_tol=args.stop_tol)
        rows.append(r.as_dict())
        print(f"{lvl:5d} {r.tau:9.6f} {r.steps:8d} {r.extra['l2_error']:8.4f} {r.extra['h1_error']:8.4f}", flush=True)
    for a, b in zip(rows, rows[1:]):
        print(f"L2 ratio {a['refinements']}->{b['refinements']}: "
              f"{a['extra']['l2_error'] / b['extra']['l2_error']:.3f}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
