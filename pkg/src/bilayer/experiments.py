"""Reusable experiment drivers shared by the scripts and the acceptance suite."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .energy import ProblemData, centre_errors, reporting_energy
from .flow import FlowConfig, NoConvergenceError, classify_shape, run_flow
from .mesh import DomainSpec, Segment, build_mesh

log = logging.getLogger(__name__)

BENCHMARK_CLAMP = (Segment("x", -5.0, -2.0, 2.0),)
TWO_PI = 2 * math.pi


def cylinder_value(p):
    return np.array([np.sin(p[0]), p[1], 1 - np.cos(p[0])])


def cylinder_gradient(p):
    return np.array([[np.cos(p[0]), 0.0], [0.0, 1.0], [np.sin(p[0]), 0.0]])


@dataclass
class RunResult:
    refinements: int
    tau: float
    status: str  # converged | max_outer | NoC
    steps: int = 0
    energy: float = float("nan")
    reporting_energy: float = float("nan")
    defect: float = float("nan")
    shape: str = ""
    max_inner: int = 0
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _progress(every):
    def cb(state, info, rec):
        if every and state.k % every == 0 and state.k:
            log.info("k=%d energy=%.6f", state.k, state.energy.total)
    return cb


def benchmark_run(refinements: int, tau: float, Z=-np.eye(2), delta_stop: float = 1e-3,
                  stop_tol: float = 1e-5, max_outer: int = 10**6, log_every: int = 5000) -> RunResult:
    """Clamped plate (-5, 5) x (-2, 2) from the flat state."""
    mesh = build_mesh(DomainSpec.rectangle(-5, 5, -2, 2, refinements, BENCHMARK_CLAMP))
    data = ProblemData(Z=np.asarray(Z, dtype=float))
    cfg = FlowConfig(tau=tau, delta_stop=delta_stop, stop_tol=stop_tol, max_outer=max_outer,
                     trace_every=max_outer)
    t0 = time.perf_counter()
    try:
        state, _ = run_flow(mesh, data, cfg, callback=_progress(log_every))
    except NoConvergenceError as exc:
        return RunResult(refinements, tau, "NoC", steps=exc.step or 0, seconds=time.perf_counter() - t0)
    return RunResult(
        refinements, tau, "converged" if state.converged else "max_outer", state.k, state.energy.total,
        reporting_energy(state.y, data.Z), state.defect, classify_shape(state.y).label,
        max(state.inner_counts, default=0), time.perf_counter() - t0,
    )


def convergence_run(refinements: int, tau: float | None = None, delta_stop: float = 1e-4,
                    stop_tol: float = 1e-6, max_outer: int = 10**6, log_every: int = 5000) -> RunResult:
    """Square (0, 2 pi)^2 clamped at x = 0 with Z = -diag(1, 1/2); errors against the exact cylinder."""
    if tau is None:
        tau = 2.0**-refinements / 25
    mesh = build_mesh(DomainSpec.rectangle(0, TWO_PI, 0, TWO_PI, refinements, (Segment("x", 0.0, 0.0, TWO_PI),)))
    data = ProblemData(Z=np.diag([-1.0, -0.5]))
    cfg = FlowConfig(tau=tau, delta_stop=delta_stop, stop_tol=stop_tol, max_outer=max_outer, trace_every=max_outer)
    t0 = time.perf_counter()
    state, _ = run_flow(mesh, data, cfg, callback=_progress(log_every))
    l2, h1 = centre_errors(state.y, cylinder_value, cylinder_gradient)
    return RunResult(
        refinements, tau, "converged" if state.converged else "max_outer", state.k, state.energy.total,
        reporting_energy(state.y, data.Z), state.defect, classify_shape(state.y).label,
        max(state.inner_counts, default=0), time.perf_counter() - t0, {"l2_error": l2, "h1_error": h1},
    )


def preset_invariants(name: str, refinements: int = 3, max_outer: int = 500) -> dict:
    """Run a preset on a coarse mesh and record the worst invariant values.

    Sweeping presets run every step size that belongs to the requested mesh
    (all of them when the sweep is over step sizes only).
    """
    from .cli import preset
    from .flow import ENERGY_TOL, GradientFlow

    cfg = preset(name)
    pairs = [(k, t) for _, k, t in cfg.runs()]
    if cfg.refinement_sweep:
        taus = [t for k, t in pairs if k == refinements] or [pairs[0][1]]
    else:
        taus = sorted({t for _, t in pairs}, reverse=True)
    mesh = build_mesh(cfg.domain(refinements))
    data = cfg.problem()
    out = {"name": name, "taus": taus, "steps": 0, "max_inner": 0, "energy_slack": -np.inf,
           "min_metric_excess": np.inf, "max_constraint_residual": 0.0, "status": "ok"}
    for tau in taus:
        # invariants are measured here instead of raising inside the loop
        fcfg = replace(cfg.flow_config(tau), max_outer=max_outer, check_invariants=False)
        flow = GradientFlow(mesh, data, fcfg)
        prev = None
        try:
            for state, info in flow.iterate():
                if prev is not None:
                    diss = info.increment_norm**2 / (2 * tau)
                    slack = (state.energy.total + diss - prev) / abs(prev)
                    out["energy_slack"] = max(out["energy_slack"], slack)
                    out["max_inner"] = max(out["max_inner"], info.inner_iters)
                    out["max_constraint_residual"] = max(out["max_constraint_residual"],
                                                         flow.constraint_residual(prev_y, state.y))
                    out["steps"] += 1
                excess = float(np.min(np.linalg.eigvalsh(state.y.nodal_metric() - np.eye(2))))
                out["min_metric_excess"] = min(out["min_metric_excess"], excess)
                prev, prev_y = state.energy.total, state.y
        except NoConvergenceError:
            out["status"] = f"NoC at tau={tau}"
    out["energy_ok"] = out["energy_slack"] <= ENERGY_TOL
    return out

