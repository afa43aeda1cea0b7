"""Kirchhoff quadrilaterals: nodal deformation fields and the discrete gradient.

A deformation stores, per vertex, the value ``y(z)`` in R^3 and the gradient
``grad y(z)`` in R^{3x2}.  Its discrete gradient lives in the continuous
biquadratic space: on each cell it is fixed by 9 Lagrange points (4 vertices,
4 edge midpoints, the centre).  At vertices it copies the gradient DOFs, at
edge midpoints it takes the tangential derivative of the cubic Hermite trace
and the average of the endpoint normal derivatives, and at the centre it is
the mean of the vertex gradients.

Local DOF order per scalar component is ``[w, d1 w, d2 w]`` for each of the
four cell vertices (12 values).  Local Q2 points are ordered
``v0, v1, v2, v3, bottom, right, top, left, centre``.  Global DOF ``9*v + 3*c
+ s`` holds component ``c`` of vertex ``v``, with ``s = 0`` the value and
``s = 1, 2`` the partial derivatives.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh

# (ix, iy) tensor indices of the local Q2 points, 0 / 1 / 2 = start / middle / end
Q2_POINTS = np.array([(0, 0), (2, 0), (2, 2), (0, 2), (1, 0), (2, 1), (1, 2), (0, 1), (1, 1)])
VERTEX_REF = np.array([(0, 0), (1, 0), (1, 1), (0, 1)], dtype=float)

GAUSS3_NODES = 0.5 + 0.5 * np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
GAUSS3_WEIGHTS = 0.5 * np.array([5.0, 8.0, 5.0]) / 9.0


class KirchhoffError(ValueError):
    """Invalid cell geometry, inconsistent field, or failed evaluation."""


# ---------------------------------------------------------------------------
# local discrete gradient


def _hermite_midpoint_slope(length: float) -> tuple[float, float]:
    """Coefficients ``(c_value, c_slope)`` of the midpoint derivative of a cubic.

    For endpoint values ``p0, p1`` and endpoint slopes ``t0, t1`` (physical
    units) the derivative at the midpoint is
    ``c_value * (p1 - p0) + c_slope * (t0 + t1)``.
    """
    return 1.5 / length, -0.25


def _local_gradient_parts() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split the 18x12 local matrix as ``D0 + Dx / width + Dy / height``."""
    D0 = np.zeros((18, 12))
    Dx = np.zeros((18, 12))
    Dy = np.zeros((18, 12))
    w, g1, g2 = 0, 1, 2

    def dof(v, s):
        return 3 * v + s

    for v in range(4):
        D0[2 * v, dof(v, g1)] = 1.0
        D0[2 * v + 1, dof(v, g2)] = 1.0
    cv, cs = _hermite_midpoint_slope(1.0)
    # (point, start vertex, end vertex, tangential derivative index)
    for p, a, b, t in ((4, 0, 1, 0), (5, 1, 2, 1), (6, 3, 2, 0), (7, 0, 3, 1)):
        n = 1 - t
        scale = Dx if t == 0 else Dy
        row_t, row_n = 2 * p + t, 2 * p + n
        scale[row_t, dof(b, w)] += cv
        scale[row_t, dof(a, w)] -= cv
        D0[row_t, dof(a, 1 + t)] += cs
        D0[row_t, dof(b, 1 + t)] += cs
        D0[row_n, dof(a, 1 + n)] += 0.5
        D0[row_n, dof(b, 1 + n)] += 0.5
    for v in range(4):
        D0[16, dof(v, g1)] = 0.25
        D0[17, dof(v, g2)] = 0.25
    return D0, Dx, Dy


_D0, _DX, _DY = _local_gradient_parts()


def local_discrete_gradient(cell_extent) -> np.ndarray:
    """18x12 matrix from the 12 Kirchhoff DOFs of one scalar to the Q2 values.

    Row ``2*p + j`` is derivative ``j`` at local Q2 point ``p``.
    """
    width, height = (float(x) for x in cell_extent)
    if not (width > 0 and height > 0 and np.isfinite(width) and np.isfinite(height)):
        raise KirchhoffError(f"degenerate cell extent {(width, height)}")
    return _D0 + _DX / width + _DY / height


def local_discrete_gradients(extents: np.ndarray) -> np.ndarray:
    ext = np.asarray(extents, dtype=float)
    if np.any(ext <= 0):
        raise KirchhoffError("degenerate cell extent")
    return _D0[None] + _DX[None] / ext[:, 0, None, None] + _DY[None] / ext[:, 1, None, None]


# ---------------------------------------------------------------------------
# 1D bases


def lagrange_q2_1d(s):
    """Quadratic Lagrange basis on nodes 0, 1/2, 1 and its derivative."""
    s = np.asarray(s, dtype=float)
    val = np.stack([2 * (s - 0.5) * (s - 1), -4 * s * (s - 1), 2 * s * (s - 0.5)], axis=-1)
    der = np.stack([4 * s - 3, -8 * s + 4, 4 * s - 1], axis=-1)
    return val, der


def hermite_1d(s):
    """Cubic Hermite basis ``[H0, H1, H2, H3]`` for ``p(0), p'(0), p(1), p'(1)``.

    Returns values, first and second derivatives with respect to ``s``.
    """
    s = np.asarray(s, dtype=float)
    val = np.stack([1 - 3 * s**2 + 2 * s**3, s - 2 * s**2 + s**3, 3 * s**2 - 2 * s**3, -s**2 + s**3], axis=-1)
    d1 = np.stack([-6 * s + 6 * s**2, 1 - 4 * s + 3 * s**2, 6 * s - 6 * s**2, -2 * s + 3 * s**2], axis=-1)
    d2 = np.stack([-6 + 12 * s, -4 + 6 * s, 6 - 12 * s, -2 + 6 * s], axis=-1)
    return val, d1, d2


def q2_stiffness(cell_extent) -> np.ndarray:
    """9x9 Laplace stiffness of the Q2 basis on a ``width x height`` rectangle."""
    a, b = cell_extent
    L, dL = lagrange_q2_1d(GAUSS3_NODES)
    M1 = np.einsum("q,qi,qj->ij", GAUSS3_WEIGHTS, L, L)
    K1 = np.einsum("q,qi,qj->ij", GAUSS3_WEIGHTS, dL, dL)
    ix, iy = Q2_POINTS[:, 0], Q2_POINTS[:, 1]
    return (b / a) * K1[np.ix_(ix, ix)] * M1[np.ix_(iy, iy)] + (a / b) * M1[np.ix_(ix, ix)] * K1[np.ix_(iy, iy)]


# ---------------------------------------------------------------------------
# fields


@dataclass(eq=False)
class DeformationField:
    """Element of ``W_h^3`` given by its nodal values and gradients."""

    mesh: Mesh
    values: np.ndarray  # (N, 3)
    grads: np.ndarray  # (N, 3, 2)

    def __post_init__(self):
        n = self.mesh.n_vertices
        self.values = np.asarray(self.values, dtype=float)
        self.grads = np.asarray(self.grads, dtype=float)
        if self.values.shape != (n, 3) or self.grads.shape != (n, 3, 2):
            raise KirchhoffError(
                f"field shapes {self.values.shape}, {self.grads.shape} do not match {n} vertices")

    def dofs(self) -> np.ndarray:
        out = np.empty((self.mesh.n_vertices, 3, 3))
        out[:, :, 0] = self.values
        out[:, :, 1:] = self.grads
        return out.reshape(-1)

    @classmethod
    def from_dofs(cls, mesh: Mesh, dofs: np.ndarray) -> "DeformationField":
        d = np.asarray(dofs, dtype=float).reshape(mesh.n_vertices, 3, 3)
        return cls(mesh, d[:, :, 0].copy(), d[:, :, 1:].copy())

    def copy(self) -> "DeformationField":
        return DeformationField(self.mesh, self.values.copy(), self.grads.copy())

    def nodal_metric(self) -> np.ndarray:
        """``[grad y(z)]^T grad y(z)`` at every vertex, shape (N, 2, 2)."""
        return np.einsum("nki,nkj->nij", self.grads, self.grads)


@dataclass(eq=False)
class GradientField:
    """Element of ``Gamma_h^3``: per cell, 3x2 matrices at the 9 Q2 points."""

    mesh: Mesh
    values: np.ndarray  # (M, 9, 3, 2)

    def vertex_values(self) -> np.ndarray:
        """Values at mesh vertices, shape (N, 3, 2) (taken from any incident cell)."""
        out = np.empty((self.mesh.n_vertices, 3, 2))
        out[self.mesh.cells.ravel()] = self.values[:, :4].reshape(-1, 3, 2)
        return out

    def continuity_jump(self) -> float:
        """Max mismatch of values at shared vertices and edge midpoints."""
        mesh = self.mesh
        jump = 0.0
        vv = np.full((mesh.n_vertices, 3, 2), np.nan)
        for k in range(4):
            idx = mesh.cells[:, k]
            seen = ~np.isnan(vv[idx, 0, 0])
            if seen.any():
                jump = max(jump, float(np.max(np.abs(vv[idx][seen] - self.values[seen, k]), initial=0.0)))
            vv[idx] = self.values[:, k]
        ev = np.full((mesh.n_edges, 3, 2), np.nan)
        for k in range(4):
            idx = mesh.cell_edges[:, k]
            seen = ~np.isnan(ev[idx, 0, 0])
            if seen.any():
                jump = max(jump, float(np.max(np.abs(ev[idx][seen] - self.values[seen, 4 + k]), initial=0.0)))
            ev[idx] = self.values[:, 4 + k]
        return jump


def cell_dofs(y: DeformationField) -> np.ndarray:
    """Gather local scalar DOFs, shape (M, 3 components, 12)."""
    d = y.dofs().reshape(y.mesh.n_vertices, 3, 3)[y.mesh.cells]  # (M, 4, comp, s)
    return d.transpose(0, 2, 1, 3).reshape(len(y.mesh.cells), 3, 12)


def apply_discrete_gradient(y: DeformationField) -> GradientField:
    """Discrete gradient of ``y`` as a continuous biquadratic field."""
    mesh = y.mesh
    D = local_discrete_gradients(mesh.cell_extent)  # (M, 18, 12)
    out = np.einsum("mrk,mck->mcr", D, cell_dofs(y))  # (M, comp, 18)
    out = out.reshape(mesh.n_cells, 3, 9, 2).transpose(0, 2, 1, 3)
    return GradientField(mesh, np.ascontiguousarray(out))


def discrete_gradient_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Sparse map from scalar nodal DOFs (3 per vertex) to cellwise Q2 values.

    Row ``18*m + 2*p + j`` is derivative ``j`` at Q2 point ``p`` of cell ``m``.
    """
    D = local_discrete_gradients(mesh.cell_extent)
    M = mesh.n_cells
    cols = (3 * mesh.cells[:, :, None] + np.arange(3)[None, None, :]).reshape(M, 12)
    rows = 18 * np.arange(M)[:, None] + np.arange(18)[None, :]
    R = np.broadcast_to(rows[:, :, None], (M, 18, 12))
    C = np.broadcast_to(cols[:, None, :], (M, 18, 12))
    G = sp.coo_matrix((D.ravel(), (R.ravel(), C.ravel())), shape=(18 * M, 3 * mesh.n_vertices))
    G = G.tocsr()
    G.eliminate_zeros()
    return G


# ---------------------------------------------------------------------------
# interpolation operators


def _eval_matrix_fn(fn: Callable, points: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    try:
        out = np.array([np.asarray(fn(p), dtype=float) for p in points])
    except Exception as exc:  # user callbacks may raise anything
        raise KirchhoffError(f"evaluation of data function failed: {exc}") from exc
    out = out.reshape((len(points),) + shape)
    if not np.all(np.isfinite(out)):
        raise KirchhoffError("data function returned non-finite values")
    return out


def interpolate_I3(value_fn: Callable, gradient_fn: Callable, mesh: Mesh) -> DeformationField:
    """Nodal interpolant: value and gradient sampled at every vertex."""
    vals = _eval_matrix_fn(value_fn, mesh.vertices, (3,))
    grads = _eval_matrix_fn(gradient_fn, mesh.vertices, (3, 2))
    return DeformationField(mesh, vals, grads)


def interpolate_I2(field_fn: Callable, mesh: Mesh, shape: tuple[int, ...] = (3, 2)) -> GradientField:
    """Q2 interpolant with the centre value replaced by the vertex mean."""
    corners = mesh.vertices[mesh.cells]  # (M, 4, 2)
    mids = mesh.edge_midpoints[mesh.cell_edges]  # (M, 4, 2)
    pts = np.concatenate([corners, mids], axis=1).reshape(-1, 2)
    vals = _eval_matrix_fn(field_fn, pts, shape).reshape((mesh.n_cells, 8) + shape)
    centre = vals[:, :4].mean(axis=1, keepdims=True)
    return GradientField(mesh, np.concatenate([vals, centre], axis=1))


def interpolate_I1(corner_values, cell_extent, point) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear interpolant on one cell.

    ``corner_values`` are ordered like the cell vertices (counterclockwise from
    the lower-left corner) and may carry trailing component axes.  ``point`` is
    relative to the lower-left corner.  Returns value and gradient (gradient
    axis last).
    """
    v = np.asarray(corner_values, dtype=float)
    a, b = cell_extent
    s, t = point[0] / a, point[1] / b
    wts = np.array([(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t])
    ds = np.array([-(1 - t), 1 - t, t, -t]) / a
    dt = np.array([-(1 - s), -s, s, 1 - s]) / b
    val = np.tensordot(wts, v, axes=(0, 0))
    grad = np.stack([np.tensordot(ds, v, axes=(0, 0)), np.tensordot(dt, v, axes=(0, 0))], axis=-1)
    return val, grad


# ---------------------------------------------------------------------------
# evaluation


def q2_shape(cell_extent, ref_point) -> tuple[np.ndarray, np.ndarray]:
    """Q2 basis values (9,) and physical gradients (9, 2) at a reference point."""
    a, b = cell_extent
    Lx, dLx = lagrange_q2_1d(ref_point[0])
    Ly, dLy = lagrange_q2_1d(ref_point[1])
    ix, iy = Q2_POINTS[:, 0], Q2_POINTS[:, 1]
    val = Lx[ix] * Ly[iy]
    grad = np.stack([dLx[ix] * Ly[iy] / a, Lx[ix] * dLy[iy] / b], axis=-1)
    return val, grad


def eval_q2(phi: GradientField, cell: int, point) -> tuple[np.ndarray, np.ndarray]:
    """Value (3, 2) and gradient (3, 2, 2) of ``phi`` at a physical point.

    The last gradient axis is the differentiation direction, so
    ``grad[k, j, i] = d_i Phi_{kj}``.
    """
    mesh = phi.mesh
    x0 = mesh.vertices[mesh.cells[cell, 0]]
    ext = mesh.cell_extent[cell]
    ref = (np.asarray(point, dtype=float) - x0) / ext
    if np.any(ref < -1e-12) or np.any(ref > 1 + 1e-12):
        raise KirchhoffError(f"point {point} lies outside cell {cell}")
    N, dN = q2_shape(ext, ref)
    vals = phi.values[cell]  # (9, 3, 2)
    return np.einsum("p,pkj->kj", N, vals), np.einsum("pi,pkj->kji", dN, vals)


def eval_q2_gradient(phi: GradientField, cell: int, point) -> np.ndarray:
    return eval_q2(phi, cell, point)[1]


def gauss_tables(extents: np.ndarray):
    """3x3 Gauss rule on every cell.

    Returns ``N`` (9q, 9), ``dN`` (M, 9q, 9, 2) and weights (M, 9q).
    """
    ext = np.asarray(extents, dtype=float)
    L, dL = lagrange_q2_1d(GAUSS3_NODES)
    ix, iy = Q2_POINTS[:, 0], Q2_POINTS[:, 1]
    # quadrature point index q = 3 * qy + qx
    N = (L[None, :, ix] * L[:, None, iy]).reshape(9, 9)
    Nx = (dL[None, :, ix] * L[:, None, iy]).reshape(9, 9)
    Ny = (L[None, :, ix] * dL[:, None, iy]).reshape(9, 9)
    dN = np.stack([Nx[None] / ext[:, 0, None, None], Ny[None] / ext[:, 1, None, None]], axis=-1)
    w = np.outer(GAUSS3_WEIGHTS, GAUSS3_WEIGHTS).reshape(9)
    return N, dN, w[None, :] * (ext[:, 0] * ext[:, 1])[:, None]


# ---------------------------------------------------------------------------
# cubic reconstruction (diagnostics only)


def q3_eval(y: DeformationField, cell: int, ref_point) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Value, gradient and Hessian of the Q3 representative of ``y`` on ``cell``.

    The cell space contains a bubble ``s(1-s)(1-2s) t(1-t)(1-2t)`` that is
    invisible to the nodal DOFs and to the discrete gradient; the
    representative used here has zero twist ``d12 w`` at the vertices, i.e.
    zero bubble.  Value and gradient at the cell centre do not depend on this
    choice.
    """
    mesh = y.mesh
    a, b = mesh.cell_extent[cell]
    Hs, dHs, ddHs = hermite_1d(ref_point[0])
    Ht, dHt, ddHt = hermite_1d(ref_point[1])
    val = np.zeros(3)
    grad = np.zeros((3, 2))
    hess = np.zeros((3, 2, 2))
    for k, v in enumerate(mesh.cells[cell]):
        sx, sy = VERTEX_REF[k].astype(int)
        i0, i1 = 2 * sx, 2 * sx + 1  # value / slope basis index along s
        j0, j1 = 2 * sy, 2 * sy + 1
        coeffs = (
            (y.values[v], i0, j0),
            (y.grads[v, :, 0] * a, i1, j0),
            (y.grads[v, :, 1] * b, i0, j1),
        )
        for c, i, j in coeffs:
            val += c * Hs[i] * Ht[j]
            grad[:, 0] += c * dHs[i] * Ht[j] / a
            grad[:, 1] += c * Hs[i] * dHt[j] / b
            hess[:, 0, 0] += c * ddHs[i] * Ht[j] / a**2
            hess[:, 1, 1] += c * Hs[i] * ddHt[j] / b**2
            hess[:, 0, 1] += c * dHs[i] * dHt[j] / (a * b)
    hess[:, 1, 0] = hess[:, 0, 1]
    return val, grad, hess
