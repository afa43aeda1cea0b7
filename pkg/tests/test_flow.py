import numpy as np
import pytest

from bilayer.energy import InadmissibleStateError, ProblemData, flat_state, isometry_defect, vertex_weights
from bilayer.flow import (
    FlowConfig,
    GradientFlow,
    InvariantViolation,
    NoConvergenceError,
    classify_shape,
    fixed_point_solve,
    initial_state,
    run_flow,
)
from bilayer.kirchhoff import interpolate_I3
from bilayer.linsys import nullspace_blocks
from bilayer.mesh import DomainSpec, Segment, build_mesh
from conftest import benchmark_mesh

P = 2 * np.pi
CYL_VALUE = lambda p: (np.sin(p[0]), p[1], 1 - np.cos(p[0]))
CYL_GRAD = lambda p: np.array([[np.cos(p[0]), 0], [0, 1], [np.sin(p[0]), 0]])


def test_config_validation():
    with pytest.raises(ValueError):
        FlowConfig(tau=0)
    with pytest.raises(ValueError):
        FlowConfig(max_inner=0)
    with pytest.raises(ValueError):
        FlowConfig(solver="cg")


def test_initial_state_flat(mesh2):
    y = initial_state(mesh2, ProblemData())
    assert np.array_equal(y.nodal_metric(), np.broadcast_to(np.eye(2), (mesh2.n_vertices, 2, 2)))
    assert isometry_defect(y) == 0
    assert np.allclose(y.values[:, :2], mesh2.vertices) and np.all(y.values[:, 2] == 0)


def test_initial_state_user_states():
    m = build_mesh(DomainSpec.rectangle(0, P, 0, P, 2, (Segment("x", 0, 0, P),)))
    cyl = interpolate_I3(CYL_VALUE, CYL_GRAD, m)
    y = initial_state(m, ProblemData(), cyl)
    assert np.allclose(y.values, cyl.values)
    bad = cyl.copy()
    bad.grads[5] *= 1.01
    with pytest.raises(InadmissibleStateError):
        initial_state(m, ProblemData(), bad)


def test_initial_state_overwrites_dirichlet(mesh2):
    y = flat_state(mesh2)
    y.values[:, 2] = 0.0
    data = ProblemData(y_dirichlet=lambda p: (p[0], p[1], 1.0))
    out = initial_state(mesh2, data, y)
    dv = mesh2.dirichlet_vertices
    assert np.all(out.values[dv, 2] == 1.0) and np.all(out.values[~dv, 2] == 0.0)


def test_unforced_flow_is_stationary(mesh2):
    data = ProblemData(Z=np.zeros((2, 2)))
    y0 = initial_state(mesh2, data)
    y1, inner = fixed_point_solve(y0, data, FlowConfig(tau=0.01))
    assert inner == 1
    assert np.allclose(y1.dofs(), y0.dofs(), atol=1e-13)


def test_build_constraints_rank(mesh3, rng):
    flow = GradientFlow(mesh3, ProblemData(), FlowConfig())
    blocks = flow.build_constraints(flat_state(mesh3))
    assert blocks.shape == (len(flow.free_vertices), 3, 6)
    assert len(flow.free_vertices) == mesh3.n_vertices - mesh3.dirichlet_vertices.sum()
    y = flat_state(mesh3)
    y.grads += 0.1 * rng.standard_normal(y.grads.shape)
    assert np.all(np.linalg.matrix_rank(flow.build_constraints(y)) == 3)
    nullspace_blocks(y.grads)


def test_no_clamping_rejected():
    m = build_mesh(DomainSpec.rectangle(0, 1, 0, 1, 1))
    with pytest.raises(InadmissibleStateError):
        GradientFlow(m, ProblemData(), FlowConfig())


def _run_steps(mesh, data, cfg, n):
    flow = GradientFlow(mesh, data, cfg)
    states = []
    for st, info in flow.iterate():
        states.append((st, info))
        if st.k >= n:
            break
    return states


def test_benchmark_invariants(mesh3):
    data = ProblemData()
    cfg = FlowConfig(tau=0.005, delta_stop=1e-4)
    states = _run_steps(mesh3, data, cfg, 60)
    energies = np.array([s.energy.total for s, _ in states])
    assert np.all(np.diff(energies) < 0)
    inner = [i.inner_iters for _, i in states[1:]]
    assert 1 <= min(inner) and max(inner) <= 3
    for _, info in states[1:]:
        assert info.constraint_residual <= 1e-9
        assert all(r < 1 for r in info.contraction_ratios)
    # telescoping nodal identity: metric - I equals the sum of increment Gram matrices
    acc = np.zeros((mesh3.n_vertices, 2, 2))
    for (a, _), (b, _) in zip(states[:-1], states[1:]):
        dg = b.y.grads - a.y.grads
        acc += np.einsum("nki,nkj->nij", dg, dg)
    last = states[-1][0].y
    err = last.nodal_metric() - np.eye(2) - acc
    assert np.abs(err).max() < 1e-10
    defect = np.sum(vertex_weights(mesh3) * np.abs(acc).sum(axis=(1, 2))) / mesh3.area
    assert isometry_defect(last) == pytest.approx(defect, rel=1e-8)


def test_saddle_and_nullspace_trajectories_agree(mesh2):
    data = ProblemData(Z=[[-2.0, 0.5], [0.5, -1.0]])
    a = _run_steps(mesh2, data, FlowConfig(tau=0.01, solver="nullspace"), 15)
    b = _run_steps(mesh2, data, FlowConfig(tau=0.01, solver="saddle"), 15)
    for (sa, ia), (sb, ib) in zip(a, b):
        assert np.allclose(sa.y.dofs(), sb.y.dofs(), atol=1e-10)
        assert sa.energy.total == pytest.approx(sb.energy.total, rel=1e-12)


def test_run_flow_converges_and_traces(mesh2):
    data = ProblemData()
    cfg = FlowConfig(tau=0.02, delta_stop=1e-4, stop_tol=1e-3, trace_every=5)
    seen = []
    state, trace = run_flow(mesh2, data, cfg, callback=lambda s, i, r: seen.append(s.k))
    assert state.converged and state.k < 5000
    assert trace[0].k == 0 and trace[-1].k == state.k
    assert all(r.k % 5 == 0 for r in trace[:-1])
    e = [r.energy.total for r in trace]
    assert np.all(np.diff(e) <= 0)
    assert seen == list(range(state.k + 1))
    assert state.elapsed == pytest.approx(state.k * 0.02)
    assert set(trace[-1].row()) == {"k", "time", "energy", "bending", "coupling", "constant", "load",
                                    "reporting_energy", "defect", "inner_iters", "wall_ms"}


def test_noc_for_large_curvature_and_step():
    # far above the contraction threshold for Z = -5 I
    m = benchmark_mesh(3)
    with pytest.raises(NoConvergenceError) as exc:
        run_flow(m, ProblemData(Z=-5 * np.eye(2)), FlowConfig(tau=0.08, delta_stop=1e-3, max_outer=20))
    assert exc.value.step is not None


def test_invariant_violation_detected(mesh2, monkeypatch):
    flow = GradientFlow(mesh2, ProblemData(), FlowConfig(tau=0.01))
    orig = flow.step

    def bad_step(y):
        y_next, info = orig(y)
        y_next.values[~mesh2.dirichlet_vertices, 2] += 1.0  # breaks energy decrease
        return y_next, info

    flow.step = bad_step
    with pytest.raises(InvariantViolation):
        for _ in flow.iterate():
            pass


def test_classify_shape():
    m = build_mesh(DomainSpec.rectangle(0, P, 0, P, 3, (Segment("x", 0, 0, P),)))
    cyl = classify_shape(interpolate_I3(CYL_VALUE, CYL_GRAD, m))
    assert cyl.label == "cylinder" and cyl.fold_direction == 0
    assert cyl.mean_h11 == pytest.approx(1.0, rel=0.1)
    flat = classify_shape(flat_state(m))
    assert flat.label == "other" and flat.max_curvature < 1e-12
    # a saddle is not a cylinder
    sad = interpolate_I3(lambda p: (p[0], p[1], 0.1 * (p[0] - 3) * (p[1] - 3)),
                         lambda p: np.array([[1, 0], [0, 1], [0.1 * (p[1] - 3), 0.1 * (p[0] - 3)]]), m)
    assert classify_shape(sad).label == "other"
    assert set(cyl.as_dict()) >= {"label", "bbox_min", "bbox_max", "max_curvature"}
