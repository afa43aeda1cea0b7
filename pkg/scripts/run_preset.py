"""Run one or more named presets through the command-line runner.

Full-scale presets (benchmark, ishape, oshape, corkscrew and the other
mesh #5 experiments) take hours on one core; use ``--refinements`` and
``--max-outer`` for quick looks.
"""
import argparse
import sys
from dataclasses import replace

from bilayer.cli import PRESETS, _run_config, preset


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("names", nargs="+", choices=sorted(PRESETS))
    p.add_argument("--refinements", type=int)
    p.add_argument("--max-outer", type=int)
    args = p.parse_args()
    status = 0
    for name in args.names:
        cfg = preset(name)
        if args.refinements is not None:
            cfg = replace(cfg, refinements=args.refinements, refinement_sweep=())
        if args.max_outer is not None:
            cfg = replace(cfg, max_outer=args.max_outer)
        status = max(status, _run_config(cfg))
    return status


if __name__ == "__main__":
    sys.exit(main())
