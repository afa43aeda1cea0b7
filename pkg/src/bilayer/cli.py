"""Experiment runner: configuration files, presets, and output writers.

Configuration grammar
---------------------
One ``key = value`` pair per line; ``#`` starts a comment; blank lines are
ignored.  Keys are dotted (``section.name``).  Accepted keys::

    domain.shape        rectangle | ishape | oshape
    domain.bounds       x0 x1 y0 y1            (rectangle only)
    domain.refinements  integer >= 0
    domain.dirichlet    segments separated by ";", e.g. x=-5:-2..2
    problem.Z           z11 z12 z21 z22        (symmetric)
    problem.f           f1 f2 f3
    flow.tau, flow.delta_stop, flow.stop_tol   positive floats
    flow.max_outer, flow.max_inner             positive integers
    output.directory    path (relative paths resolve against $BILAYER_OUTPUT)
    output.snapshot_stride                     positive integer
    output.trace_every                         positive integer
    run.name            free text label
    run.tau_sweep       space separated step sizes (one run per value)
    run.refinement_sweep  space separated refinement levels
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .energy import InadmissibleStateError, ProblemData, reporting_energy
from .flow import FlowConfig, InvariantViolation, NoConvergenceError, TraceRecord, classify_shape, run_flow
from .kirchhoff import DeformationField
from .mesh import DomainSpec, Mesh, MeshError, Segment, build_mesh

log = logging.getLogger(__name__)

OUTPUT_ENV = "BILAYER_OUTPUT"
EXIT_OK, EXIT_CONFIG, EXIT_NOC, EXIT_INVARIANT = 0, 2, 3, 4
TRACE_HEADER = ["k", "time", "energy", "bending", "coupling", "constant", "load",
                "reporting_energy", "defect", "inner_iters", "wall_ms"]


class ConfigError(ValueError):
    """Invalid experiment configuration (carries the offending line when known)."""


def _floats(text: str, n: int | None, key: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(t) for t in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"{key}: expected numbers, got {text!r}") from exc
    if n is not None and len(vals) != n:
        raise ConfigError(f"{key}: expected {n} numbers, got {len(vals)}")
    return vals


def _fmt(vals) -> str:
    return " ".join(repr(float(v)) for v in vals)


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    shape: str = "rectangle"
    bounds: tuple[float, float, float, float] = (-5.0, 5.0, -2.0, 2.0)
    refinements: int = 4
    dirichlet: tuple[str, ...] = ("x=-5:-2..2",)
    Z: tuple[float, float, float, float] = (-1.0, 0.0, 0.0, -1.0)
    f: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tau: float = 0.005
    delta_stop: float = 1e-4
    stop_tol: float = 1e-6
    max_outer: int = 1_000_000
    max_inner: int = 50
    directory: str = "run"
    snapshot_stride: int = 1000
    trace_every: int = 1
    tau_sweep: tuple[float, ...] = ()
    refinement_sweep: tuple[int, ...] = ()

    KEYS = {
        "run.name": "name", "domain.shape": "shape", "domain.bounds": "bounds",
        "domain.refinements": "refinements", "domain.dirichlet": "dirichlet", "problem.Z": "Z",
        "problem.f": "f", "flow.tau": "tau", "flow.delta_stop": "delta_stop", "flow.stop_tol": "stop_tol",
        "flow.max_outer": "max_outer", "flow.max_inner": "max_inner", "output.directory": "directory",
        "output.snapshot_stride": "snapshot_stride", "output.trace_every": "trace_every",
        "run.tau_sweep": "tau_sweep", "run.refinement_sweep": "refinement_sweep",
    }

    def validate(self) -> "ExperimentConfig":
        if self.shape not in ("rectangle", "ishape", "oshape"):
            raise ConfigError(f"domain.shape: unknown shape {self.shape!r}")
        x0, x1, y0, y1 = self.bounds
        if not (x1 > x0 and y1 > y0):
            raise ConfigError("domain.bounds: need x0 < x1 and y0 < y1")
        if self.refinements < 0 or any(r < 0 for r in self.refinement_sweep):
            raise ConfigError("domain.refinements: must be nonnegative")
        if not self.dirichlet:
            raise ConfigError("domain.dirichlet: the flow needs a clamped boundary part")
        for s in self.dirichlet:
            try:
                Segment.parse(s)
            except MeshError as exc:
                raise ConfigError(f"domain.dirichlet: {exc}") from exc
        z = np.array(self.Z).reshape(2, 2)
        if not np.all(np.isfinite(z)) or abs(z[0, 1] - z[1, 0]) > 1e-14 * max(1.0, np.abs(z).max()):
            raise ConfigError("problem.Z: spontaneous curvature must be a finite symmetric matrix")
        for key in ("tau", "delta_stop", "stop_tol"):
            v = getattr(self, key)
            if not (v > 0 and math.isfinite(v)):
                raise ConfigError(f"flow.{key}: must be positive")
        if any(not t > 0 for t in self.tau_sweep):
            raise ConfigError("run.tau_sweep: step sizes must be positive")
        for key in ("max_outer", "max_inner", "snapshot_stride", "trace_every"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be a positive integer")
        return self

    # -- serialisation -------------------------------------------------------

    def dumps(self) -> str:
        out = []
        for key, attr in self.KEYS.items():
            v = getattr(self, attr)
            if attr == "dirichlet":
                text = "; ".join(v)
            elif attr in ("bounds", "Z", "f", "tau_sweep"):
                text = _fmt(v)
            elif attr == "refinement_sweep":
                text = " ".join(str(int(r)) for r in v)
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = str(v)
            out.append(f"{key} = {text}")
        return "\n".join(out) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in cls.KEYS:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            attr = cls.KEYS[key]
            try:
                kw[attr] = cls._parse_value(attr, value, types[attr], key)
            except ConfigError as exc:
                raise ConfigError(f"line {lineno}: {exc}") from exc
        return cls(**kw).validate()

    @staticmethod
    def _parse_value(attr, value, typ, key):
        if attr == "dirichlet":
            return tuple(s.strip() for s in value.split(";") if s.strip())
        if attr in ("bounds", "Z"):
            return _floats(value, 4, key)
        if attr == "f":
            return _floats(value, 3, key)
        if attr == "tau_sweep":
            return _floats(value, None, key)
        if attr == "refinement_sweep":
            try:
                return tuple(int(t) for t in value.split())
            except ValueError as exc:
                raise ConfigError(f"{key}: expected integers") from exc
        if typ == "int":
            try:
                return int(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: expected an integer, got {value!r}") from exc
        if typ == "float":
            try:
                return float(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: expected a number, got {value!r}") from exc
        return value

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())

    # -- derived objects -----------------------------------------------------

    def domain(self, refinements: int | None = None) -> DomainSpec:
        k = self.refinements if refinements is None else refinements
        segs = tuple(Segment.parse(s) for s in self.dirichlet)
        if self.shape == "ishape":
            return DomainSpec.ishape(k, segs)
        if self.shape == "oshape":
            return DomainSpec.oshape(k, segs)
        return DomainSpec.rectangle(*self.bounds, refinements=k, dirichlet=segs)

    def problem(self) -> ProblemData:
        return ProblemData(Z=np.array(self.Z).reshape(2, 2), f=np.array(self.f))

    def flow_config(self, tau: float | None = None) -> FlowConfig:
        return FlowConfig(tau=self.tau if tau is None else tau, delta_stop=self.delta_stop,
                          stop_tol=self.stop_tol, max_outer=self.max_outer, max_inner=self.max_inner,
                          trace_every=self.trace_every)

    def runs(self):
        """Expand the sweeps into (label, refinements, tau) triples."""
        ks = self.refinement_sweep or (self.refinements,)
        taus = self.tau_sweep or (self.tau,)
        if self.refinement_sweep and self.tau_sweep and len(ks) == len(taus):
            pairs = list(zip(ks, taus))  # paired sweep: one step size per mesh
        else:
            pairs = [(k, t) for k in ks for t in taus]
        single = len(pairs) == 1
        return [("" if single else f"k{k}_tau{t:g}", k, t) for k, t in pairs]


# ---------------------------------------------------------------------------
# presets

_BENCH = dict(shape="rectangle", bounds=(-5.0, 5.0, -2.0, 2.0), dirichlet=("x=-5:-2..2",),
              Z=(-1.0, 0.0, 0.0, -1.0), tau=0.005, delta_stop=1e-4)
_ANISO = dict(shape="rectangle", bounds=(-2.0, 2.0, -3.0, 3.0), dirichlet=("x=-2:-3..3",),
              tau=0.005, delta_stop=1e-3, refinements=5)

PRESETS = {
    "benchmark": dict(_BENCH, refinements=5),
    "table1": dict(_BENCH, refinements=4, delta_stop=1e-3, tau_sweep=(0.02, 0.01, 0.005, 0.0025)),
    "table2": dict(_BENCH, refinements=4, delta_stop=1e-3, stop_tol=1e-5,
                   tau_sweep=(0.02, 0.01, 0.005, 0.0025)),
    "table3-convergence": dict(shape="rectangle", bounds=(0.0, 2 * math.pi, 0.0, 2 * math.pi),
                               dirichlet=(f"x=0:0..{2 * math.pi!r}",), Z=(-1.0, 0.0, 0.0, -0.5),
                               delta_stop=1e-4, refinements=3, tau=0.005,
                               refinement_sweep=(3, 4, 5, 6),
                               tau_sweep=(2**-3 / 25, 2**-4 / 25, 2**-5 / 25, 2**-6 / 25)),
    "aspect-ratio": dict(_BENCH, refinements=5, bounds=(-2.0, 2.0, -2.0, 2.0), dirichlet=("x=-2:-2..2",)),
    "corner-clamp": dict(shape="rectangle", bounds=(-3.0, 3.0, -2.0, 2.0), refinements=5,
                         dirichlet=("x=-3:-2..0", "y=-2:-3..0"), Z=(-1.0, 0.0, 0.0, -1.0),
                         tau=0.005, delta_stop=1e-4),
    "ishape": dict(shape="ishape", refinements=5, dirichlet=("x=-5:-2..2",), Z=(-5.0, 0.0, 0.0, -5.0),
                   tau=0.005, delta_stop=1e-3),
    "oshape": dict(shape="oshape", refinements=5, dirichlet=("x=-5:-2..2",), Z=(-5.0, 0.0, 0.0, -5.0),
                   tau=0.005, delta_stop=1e-3),
    "aniso-dominant": dict(_ANISO, Z=(-5.0, 0.0, 0.0, -1.0)),
    "aniso-opposite": dict(_ANISO, Z=(-5.0, 0.0, 0.0, 5.0)),
    "corkscrew": dict(_ANISO, Z=(-3.0, 2.0, 2.0, -3.0)),
}


def preset(name: str) -> ExperimentConfig:
    """Parameter set of a named experiment."""
    try:
        kw = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    return ExperimentConfig(name=name, directory=name, **kw).validate()


# ---------------------------------------------------------------------------
# writers


def export_vtk(y: DeformationField, mesh: Mesh, path) -> Path:
    """Legacy ASCII unstructured grid: deformed vertices, quads, displacement and metric defect."""
    if y.mesh is not mesh and y.values.shape[0] != mesh.n_vertices:
        raise ValueError("state and mesh are inconsistent")
    path = Path(path)
    pts = y.values
    disp = pts.copy()
    disp[:, :2] -= mesh.vertices
    defect = np.abs(y.nodal_metric() - np.eye(2)).sum(axis=(1, 2))
    n, m = mesh.n_vertices, mesh.n_cells
    lines = ["# vtk DataFile Version 3.0", "bilayer plate", "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {n} double"]
    lines += [f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}" for p in pts]
    lines.append(f"CELLS {m} {5 * m}")
    lines += [f"4 {c[0]} {c[1]} {c[2]} {c[3]}" for c in mesh.cells]
    lines.append(f"CELL_TYPES {m}")
    lines += ["9"] * m
    lines += [f"POINT_DATA {n}", "VECTORS displacement double"]
    lines += [f"{d[0]:.17g} {d[1]:.17g} {d[2]:.17g}" for d in disp]
    lines += ["SCALARS metric_defect double 1", "LOOKUP_TABLE default"]
    lines += [f"{v:.17g}" for v in defect]
    path.write_text("\n".join(lines) + "\n")
    return path


def write_trace(trace: list[TraceRecord], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_HEADER)
        w.writeheader()
        for rec in trace:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in rec.row().items()})
    return path


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def run_single(cfg: ExperimentConfig, refinements: int, tau: float, outdir: Path) -> dict:
    """One flow run; writes trace, snapshots and returns the summary dict."""
    outdir.mkdir(parents=True, exist_ok=True)
    mesh = build_mesh(cfg.domain(refinements))
    data = cfg.problem()
    fcfg = cfg.flow_config(tau)

    def snapshot(state, info, rec):
        if state.k % cfg.snapshot_stride == 0:
            export_vtk(state.y, mesh, outdir / f"state_{state.k:07d}.vtk")

    summary = {"name": cfg.name, "refinements": refinements, "tau": tau, "n_cells": mesh.n_cells}
    try:
        state, trace = run_flow(mesh, data, fcfg, callback=snapshot)
    except NoConvergenceError as exc:
        summary.update(status="NoC", step=exc.step, message=str(exc))
        (outdir / "summary.json").write_text(json.dumps(summary, indent=2))
        raise
    write_trace(trace, outdir / "trace.csv")
    export_vtk(state.y, mesh, outdir / "final.vtk")
    shape = classify_shape(state.y)
    summary.update(
        status="converged" if state.converged else "max_outer",
        steps=state.k, pseudo_time=state.elapsed, energy=state.energy.as_dict(),
        reporting_energy=reporting_energy(state.y, data.Z), defect=state.defect,
        max_inner_iters=max(state.inner_counts, default=0), shape=shape.as_dict(),
    )
    (outdir / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def run_experiment(config_path) -> int:
    """Run every (mesh, step size) combination of a configuration file; return the exit status."""
    try:
        cfg = ExperimentConfig.load(config_path)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return _run_config(cfg)


def _run_config(cfg: ExperimentConfig) -> int:
    base = Path(cfg.directory)
    if not base.is_absolute():
        base = output_root() / base
    status = EXIT_OK
    for label, k, tau in cfg.runs():
        outdir = base / label if label else base
        try:
            s = run_single(cfg, k, tau, outdir)
            print(f"{label or cfg.name}: {s['status']} after {s['steps']} steps, "
                  f"reporting energy {s['reporting_energy']:.4f}, defect {s['defect']:.4g}, "
                  f"shape {s['shape']['label']}")
        except NoConvergenceError as exc:
            print(f"{label or cfg.name}: NoC ({exc})", file=sys.stderr)
            status = max(status, EXIT_NOC)
        except (InvariantViolation, InadmissibleStateError) as exc:
            print(f"{label or cfg.name}: invariant violation ({exc})", file=sys.stderr)
            return EXIT_INVARIANT
        except MeshError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    return status


def run_check() -> int:
    """Invariant suite on a tiny clamped plate (mesh #2, 50 steps)."""
    cfg = replace(preset("benchmark"), refinements=2, max_outer=50, stop_tol=1e-6)
    mesh = build_mesh(cfg.domain())
    data = cfg.problem()
    try:
        state, trace = run_flow(mesh, data, cfg.flow_config())
    except NoConvergenceError as exc:
        print(f"check: NoC ({exc})", file=sys.stderr)
        return EXIT_NOC
    except (InvariantViolation, InadmissibleStateError) as exc:
        print(f"check: invariant violation ({exc})", file=sys.stderr)
        return EXIT_INVARIANT
    energies = [r.energy.total for r in trace]
    print(f"check: {state.k} steps, energy {energies[0]:.6f} -> {energies[-1]:.6f}, defect {state.defect:.3e}, "
          f"max inner {max(state.inner_counts)}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bilayer", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run a configuration file")
    p_run.add_argument("config")
    p_pre = sub.add_parser("preset", help="run or print a named preset")
    p_pre.add_argument("name")
    p_pre.add_argument("--emit-config", action="store_true", help="print the configuration instead of running")
    sub.add_parser("check", help="run the invariant suite on a tiny fixture")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if args.command == "run":
        return run_experiment(args.config)
    if args.command == "preset":
        try:
            cfg = preset(args.name)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        if args.emit_config:
            sys.stdout.write(cfg.dumps())
            return EXIT_OK
        return _run_config(cfg)
    return run_check()


if __name__ == "__main__":
    sys.exit(main())
