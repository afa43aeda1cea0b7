"""Discrete H^2 gradient flow with a linearised nodal isometry constraint.

Each outer step moves ``y_k`` to ``y_{k+1} = y_k + d`` with ``d`` in the
pseudo tangent space at ``y_k`` (``sym([grad d(z)]^T grad y_k(z)) = 0`` at
every free vertex).  The nonlinear Euler-Lagrange equation of the step is
solved by the fixed-point iteration

    (1/tau + 1) K d^{l+1} = F(y_k + d^l) - K y_k,

where ``F`` collects minus the derivative of the curvature coupling term plus
the load.  ``K`` never changes, the constraint only changes between outer
steps.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .energy import (
    EnergyBreakdown,
    EnergyOperators,
    InadmissibleStateError,
    ProblemData,
    isometry_defect,
    reporting_energy,
)
from .kirchhoff import DeformationField, apply_discrete_gradient, interpolate_I3
from .linsys import (
    D1_SLOTS,
    D2_SLOTS,
    NullspaceSystem,
    compose_and_factor,
    constraint_blocks,
    constraint_matrix,
    local_bases,
)
from .mesh import Mesh

log = logging.getLogger(__name__)

ENERGY_TOL = 1e-10
METRIC_MONOTONE_TOL = 1e-10
CONSTRAINT_TOL = 1e-9


class NoConvergenceError(RuntimeError):
    """Fixed-point iteration did not reach ``delta_stop`` within ``max_inner``."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class InvariantViolation(RuntimeError):
    """Energy increase or loss of the nodal metric bound during the flow."""


@dataclass
class FlowConfig:
    tau: float = 0.005
    delta_stop: float = 1e-4
    stop_tol: float = 1e-6
    max_outer: int = 1_000_000
    max_inner: int = 50
    trace_every: int = 1
    solver: str = "nullspace"  # or "saddle"
    check_invariants: bool = True
    debug: bool = False

    def __post_init__(self):
        for name in ("tau", "delta_stop", "stop_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_inner < 1 or self.max_outer < 0:
            raise ValueError("iteration caps must be positive")
        if self.solver not in ("nullspace", "saddle"):
            raise ValueError(f"unknown solver {self.solver!r}")


@dataclass
class TraceRecord:
    k: int
    time: float
    energy: EnergyBreakdown
    reporting_energy: float
    defect: float
    inner_iters: int
    wall_ms: float

    def row(self) -> dict:
        e = self.energy
        return {
            "k": self.k, "time": self.time, "energy": e.total, "bending": e.bending,
            "coupling": e.coupling, "constant": e.constant, "load": e.load,
            "reporting_energy": self.reporting_energy, "defect": self.defect,
            "inner_iters": self.inner_iters, "wall_ms": self.wall_ms,
        }


@dataclass
class StepInfo:
    inner_iters: int
    increment_norm: float  # || grad grad_h (y_{k+1} - y_k) ||
    inner_diffs: list = field(default_factory=list)
    constraint_residual: float = 0.0

    @property
    def contraction_ratios(self) -> list:
        d = self.inner_diffs
        return [d[i] / d[i - 1] for i in range(1, len(d)) if d[i - 1] > 0]


@dataclass
class FlowState:
    k: int
    y: DeformationField
    energy: EnergyBreakdown
    defect: float
    tau: float
    inner_counts: list = field(default_factory=list)
    converged: bool = False
    dissipation: float = 0.0  # sum over steps of |grad grad_h (y_{l+1} - y_l)|^2 / (2 tau)

    @property
    def elapsed(self) -> float:
        return self.k * self.tau


def initial_state(mesh: Mesh, data: ProblemData, y0: DeformationField | None = None,
                  tol: float = 1e-12) -> DeformationField:
    """Flat map (or the supplied nodal isometry) with clamped DOFs overwritten."""
    if y0 is None:
        vals = np.zeros((mesh.n_vertices, 3))
        vals[:, :2] = mesh.vertices
        y = DeformationField(mesh, vals, np.broadcast_to(np.eye(3, 2), (mesh.n_vertices, 3, 2)).copy())
    else:
        y = y0.copy()
        defect = np.abs(y.nodal_metric() - np.eye(2)).max()
        if defect > tol:
            raise InadmissibleStateError(f"initial nodal metric differs from identity by {defect:.2e}")
    dv = mesh.dirichlet_vertices
    if dv.any():
        yd = interpolate_I3(data.y_dirichlet, data.grad_dirichlet, mesh)
        y.values[dv] = yd.values[dv]
        y.grads[dv] = yd.grads[dv]
        defect = np.abs(y.nodal_metric()[dv] - np.eye(2)).max()
        if defect > tol:
            raise InadmissibleStateError(f"clamped gradient data is not an isometry (defect {defect:.2e})")
    return y


class GradientFlow:
    """Outer loop driver holding operators that stay fixed during a run."""

    def __init__(self, mesh: Mesh, data: ProblemData, cfg: FlowConfig):
        self.mesh = mesh
        self.data = data
        self.cfg = cfg
        self.ops = EnergyOperators(mesh, data)
        dv = mesh.dirichlet_vertices
        if not dv.any():
            raise InadmissibleStateError("no clamped vertices: the flow needs Dirichlet data")
        self.free_vertices = np.flatnonzero(~dv)
        self.free = (9 * self.free_vertices[:, None] + np.arange(9)[None, :]).ravel()
        K = self.ops.K
        self.K_free = K[self.free][:, self.free].tocsr()
        self.scale = 1.0 / cfg.tau + 1.0
        self._nullspace = None
        if cfg.solver == "nullspace":
            self._nullspace = NullspaceSystem(self.scale * self.K_free, len(self.free_vertices), debug=cfg.debug)

    # -- single step ----------------------------------------------------------

    def build_constraints(self, y: DeformationField):
        """Constraint blocks at the free vertices (3 rows per free vertex)."""
        return constraint_blocks(y.grads[self.free_vertices])

    def step(self, y_k: DeformationField) -> tuple[DeformationField, StepInfo]:
        """One outer step: fixed-point iteration for the constrained increment."""
        cfg, ops = self.cfg, self.ops
        Y0 = y_k.dofs()
        base = -(ops.K @ Y0)[self.free]
        gk = y_k.grads[self.free_vertices]
        if self._nullspace is not None:
            self._nullspace.factor(local_bases(gk))
            solve = self._nullspace.solve
        else:
            C = constraint_matrix(gk, len(self.free_vertices))
            sys = compose_and_factor(self.K_free, C, cfg.tau, debug=cfg.debug)
            nc = C.shape[0]

            def solve(r):
                return sys.solve(np.concatenate([r, np.zeros(nc)]))[0]

        d_prev = np.zeros(len(self.free))
        Y = Y0.copy()
        diffs = []
        for ell in range(1, cfg.max_inner + 1):
            grads = Y.reshape(-1, 3, 3)[:, :, 1:]
            rhs = ops.force_vector(grads)[self.free] + base
            d = solve(rhs)
            full = np.zeros_like(Y0)
            full[self.free] = d - d_prev
            diff = ops.hessian_norm(full)
            diffs.append(diff)
            Y = Y0.copy()
            Y[self.free] += d
            d_prev = d
            if not np.isfinite(diff) or diff > 1e8:
                raise NoConvergenceError(f"fixed-point iteration diverged (difference {diff:.3e})")
            if diff <= cfg.delta_stop:
                break
        else:
            raise NoConvergenceError(
                f"fixed-point iteration not converged after {cfg.max_inner} iterations "
                f"(last difference {diffs[-1]:.3e})")
        y_next = DeformationField.from_dofs(self.mesh, Y)
        full = np.zeros_like(Y0)
        full[self.free] = d_prev
        info = StepInfo(ell, ops.hessian_norm(full), diffs)
        if cfg.check_invariants:
            info.constraint_residual = self.constraint_residual(y_k, y_next)
        return y_next, info

    def constraint_residual(self, y_k: DeformationField, y_next: DeformationField) -> float:
        fv = self.free_vertices
        dg = y_next.grads[fv] - y_k.grads[fv]
        g = y_k.grads[fv]
        s = np.einsum("nki,nkj->nij", dg, g)
        return float(np.max(np.abs(s + np.swapaxes(s, 1, 2)), initial=0.0))

    # -- outer loop -------------------------------------------------------------

    def iterate(self, y0: DeformationField | None = None) -> Iterator[tuple[FlowState, StepInfo | None]]:
        """Yield the state after every accepted step (and the initial one)."""
        cfg, ops = self.cfg, self.ops
        y = initial_state(self.mesh, self.data, y0)
        energy = ops.energy(y)
        state = FlowState(0, y, energy, isometry_defect(y), cfg.tau)
        yield state, None
        min_excess = np.inf
        for k in range(1, cfg.max_outer + 1):
            try:
                y_next, info = self.step(state.y)
            except NoConvergenceError as exc:
                exc.step = k
                raise
            e_next = ops.energy(y_next)
            dissipation = info.increment_norm**2 / (2 * cfg.tau)
            if cfg.check_invariants:
                e_old = state.energy.total
                if e_next.total + dissipation > e_old + ENERGY_TOL * abs(e_old):
                    raise InvariantViolation(
                        f"energy increase at step {k}: {e_next.total + dissipation:.12g} > {e_old:.12g}")
                excess = float(np.min(np.linalg.eigvalsh(y_next.nodal_metric() - np.eye(2))))
                min_excess = min(min_excess, excess)
                if excess < -METRIC_MONOTONE_TOL:
                    raise InvariantViolation(f"nodal metric below identity at step {k}: {excess:.3e}")
                if info.constraint_residual > CONSTRAINT_TOL:
                    raise InvariantViolation(
                        f"linearised constraint residual {info.constraint_residual:.3e} at step {k}")
            converged = abs(e_next.total - state.energy.total) / cfg.tau <= cfg.stop_tol
            state = FlowState(k, y_next, e_next, float("nan"), cfg.tau, state.inner_counts + [info.inner_iters],
                              converged, state.dissipation + dissipation)
            yield state, info
            if converged:
                return


def run_flow(mesh: Mesh, data: ProblemData, cfg: FlowConfig, y0: DeformationField | None = None,
             callback: Callable[[FlowState, StepInfo | None, TraceRecord | None], None] | None = None):
    """Run the flow to the stopping criterion; return final state and trace."""
    flow = GradientFlow(mesh, data, cfg)
    trace: list[TraceRecord] = []
    t0 = time.perf_counter()
    state = None
    last_info = None
    for state, info in flow.iterate(y0):
        last_info = info
        rec = None
        if state.k % cfg.trace_every == 0 or state.converged or state.k == cfg.max_outer:
            state.defect = isometry_defect(state.y)
            rec = TraceRecord(state.k, state.elapsed, state.energy, reporting_energy(state.y, data.Z),
                              state.defect, info.inner_iters if info else 0,
                              1e3 * (time.perf_counter() - t0))
            trace.append(rec)
        if callback is not None:
            callback(state, info, rec)
    state.defect = isometry_defect(state.y)
    if not trace or trace[-1].k != state.k:
        trace.append(TraceRecord(state.k, state.elapsed, state.energy, reporting_energy(state.y, data.Z),
                                 state.defect, last_info.inner_iters if last_info else 0,
                                 1e3 * (time.perf_counter() - t0)))
    return state, trace


def fixed_point_solve(y_k: DeformationField, data: ProblemData, cfg: FlowConfig):
    """Single outer step from ``y_k``; returns ``(y_next, inner_iters)``."""
    flow = GradientFlow(y_k.mesh, data, cfg)
    y_next, info = flow.step(y_k)
    return y_next, info.inner_iters


# ---------------------------------------------------------------------------
# shape summary


@dataclass
class ShapeSummary:
    label: str
    bbox_min: list
    bbox_max: list
    max_curvature: float
    mean_h11: float
    mean_h22: float
    h11_rel_spread: float
    h22_rel: float
    fold_direction: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


CYLINDER_SPREAD = 0.35
CYLINDER_OFF_AXIS = 0.15
FLAT_CURVATURE = 1e-3


def _weighted_median(values: np.ndarray, weights: np.ndarray) -> float:
    order = np.argsort(values)
    cum = np.cumsum(weights[order])
    return float(values[order][np.searchsorted(cum, 0.5 * cum[-1])])


def classify_shape(y: DeformationField) -> ShapeSummary:
    """Cylinder test on the cell averages of ``H_h``.

    A state is a cylinder when one coordinate direction carries an almost
    constant curvature and the other almost none.  Both are measured by
    area-weighted medians relative to the mean dominant curvature: the
    deviation of the dominant diagonal entry, and the size of the remaining
    entries.  Zero curvature is classified as "other".
    """
    from .energy import second_fundamental_form  # local: avoids a cycle in type hints

    phi = apply_discrete_gradient(y)
    H, w = second_fundamental_form(phi)
    Hc = np.einsum("mq,mqij->mij", w, H) / w.sum(axis=1)[:, None, None]
    Hc = 0.5 * (Hc + np.swapaxes(Hc, 1, 2))
    area = w.sum(axis=1)
    h11, h22 = Hc[:, 0, 0], Hc[:, 1, 1]
    m11 = float(np.sum(area * h11) / area.sum())
    m22 = float(np.sum(area * h22) / area.sum())
    fold = 0 if abs(m11) >= abs(m22) else 1
    dom, weak = (h11, h22) if fold == 0 else (h22, h11)
    mdom = m11 if fold == 0 else m22
    curv = np.linalg.norm(Hc, axis=(1, 2))
    max_curv = float(curv.max())
    if abs(mdom) < FLAT_CURVATURE:
        spread, off = float("inf"), float("inf")
    else:
        # bulk statistics: free edges carry a curled boundary layer that should not
        # decide the label, so medians replace means
        spread = _weighted_median(np.abs(dom - mdom), area) / abs(mdom)
        off = _weighted_median(np.sqrt(weak**2 + 2 * Hc[:, 0, 1] ** 2), area) / abs(mdom)
    is_cyl = spread < CYLINDER_SPREAD and off < CYLINDER_OFF_AXIS
    pts = y.values
    return ShapeSummary("cylinder" if is_cyl else "other", pts.min(axis=0).tolist(), pts.max(axis=0).tolist(),
                        max_curv, m11, m22, spread, off, fold)


__all__ = [
    "FlowConfig", "FlowState", "GradientFlow", "InvariantViolation", "NoConvergenceError", "ShapeSummary",
    "StepInfo", "TraceRecord", "classify_shape", "fixed_point_solve", "initial_state", "run_flow",
]
