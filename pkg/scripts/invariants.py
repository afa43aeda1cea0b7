"""Structural invariants of every preset on mesh #3 with a 500-step cap.

Prints, per preset, the number of steps taken, the largest inner iteration
count and the worst values of the energy-decrease slack, nodal metric
eigenvalue and linearised constraint residual.
"""
import argparse

from bilayer.cli import PRESETS
from bilayer.experiments import preset_invariants


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--refinements", type=int, default=3)
    p.add_argument("--max-outer", type=int, default=500)
    args = p.parse_args()
    for name in sorted(PRESETS):
        r = preset_invariants(name, args.refinements, args.max_outer)
        print(f"{name:20s} steps={r['steps']:4d} max_inner={r['max_inner']:2d} "
              f"energy_slack={r['energy_slack']:.2e} min_metric={r['min_metric_excess']:.2e} "
              f"constraint={r['max_constraint_residual']:.2e} status={r['status']}")


if __name__ == "__main__":
    main()
