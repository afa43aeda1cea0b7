"""Discrete bending energy, its derivative, and diagnostic quantities.

The energy of a nodal deformation ``y`` is

    1/2 int |grad grad_h y|^2
    + sum_ij ( d_i I1[grad_h y e_j] . n(y), Z_ij )_h
    + 1/2 (Z, Z)_h - (f, y)_h,

where ``n`` is the cross product of the normalised gradient columns and
``(.,.)_h`` is the vertex quadrature ``sum_T |T|/4 sum_{z in T}``.  Everything
except the first term only touches vertex data: ``d_i I1`` of the bilinear
interpolant of the vertex gradients at a cell corner is a one-sided
difference along the cell edge.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .kirchhoff import (
    DeformationField,
    GradientField,
    apply_discrete_gradient,
    discrete_gradient_matrix,
    gauss_tables,
    local_discrete_gradients,
    q2_stiffness,
    q3_eval,
)
from .mesh import Mesh

METRIC_TOL = 1e-9


class InadmissibleStateError(RuntimeError):
    """Nodal metric below the identity or a degenerate normalisation."""


def _flat_value(x):
    return np.array([x[0], x[1], 0.0])


def _flat_grad(x):
    return np.eye(3, 2)


@dataclass
class ProblemData:
    """Spontaneous curvature, load and clamping data.

    ``Z`` is a constant symmetric 2x2 matrix or an (M, 2, 2) array of cell
    values; ``f`` a constant 3-vector or an (M, 3) array.
    """

    Z: np.ndarray = field(default_factory=lambda: -np.eye(2))
    f: np.ndarray = field(default_factory=lambda: np.zeros(3))
    y_dirichlet: Callable = _flat_value
    grad_dirichlet: Callable = _flat_grad

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=float)
        self.f = np.asarray(self.f, dtype=float)
        if self.Z.shape[-2:] != (2, 2):
            raise ValueError(f"Z must be 2x2 per cell, got shape {self.Z.shape}")
        if not np.allclose(self.Z, np.swapaxes(self.Z, -1, -2), atol=1e-14):
            raise ValueError("Z must be symmetric")
        if self.f.shape[-1] != 3:
            raise ValueError(f"f must be a 3-vector per cell, got shape {self.f.shape}")

    def Z_cells(self, mesh: Mesh) -> np.ndarray:
        return np.broadcast_to(self.Z, (mesh.n_cells, 2, 2)).copy()

    def f_cells(self, mesh: Mesh) -> np.ndarray:
        return np.broadcast_to(self.f, (mesh.n_cells, 3)).copy()


@dataclass(frozen=True)
class EnergyBreakdown:
    bending: float
    coupling: float
    constant: float
    load: float

    @property
    def total(self) -> float:
        return self.bending + self.coupling + self.constant - self.load

    def as_dict(self) -> dict:
        return {"energy": self.total, "bending": self.bending, "coupling": self.coupling,
                "constant": self.constant, "load": self.load}


def projection(a: np.ndarray) -> np.ndarray:
    """``P_a = (I - a a^T / |a|^2) / |a|``, the derivative of ``a / |a|``.

    Works on stacks of vectors (last axis of length 3).
    """
    a = np.asarray(a, dtype=float)
    n = np.linalg.norm(a, axis=-1)[..., None, None]
    outer = a[..., :, None] * a[..., None, :]
    return (np.eye(3) - outer / n**2) / n


# ---------------------------------------------------------------------------
# quadrature helpers


def corner_weights(mesh: Mesh) -> np.ndarray:
    """Weights ``|T|/4`` per (cell, corner), shape (M, 4)."""
    return np.repeat(mesh.cell_area[:, None] / 4.0, 4, axis=1)


def discrete_inner_product(mesh: Mesh, phi, psi) -> float:
    """Vertex-quadrature inner product of cellwise corner values.

    ``phi`` and ``psi`` have shape (M, 4, ...) and are contracted over all
    trailing axes.
    """
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    prod = (phi * psi).reshape(mesh.n_cells, 4, -1).sum(axis=-1)
    return float(np.sum(corner_weights(mesh) * prod))


def lp_h_norm(mesh: Mesh, phi, p: float = 2.0) -> float:
    """Discrete ``L^p_h`` norm of scalar (or vector, Euclidean) corner values."""
    phi = np.asarray(phi, dtype=float).reshape(mesh.n_cells, 4, -1)
    mag = np.linalg.norm(phi, axis=-1)
    return float(np.sum(corner_weights(mesh) * mag**p) ** (1.0 / p))


def corner_values(mesh: Mesh, nodal: np.ndarray) -> np.ndarray:
    """Restrict vertex values to (cell, corner) slots."""
    return np.asarray(nodal)[mesh.cells]


def vertex_weights(mesh: Mesh) -> np.ndarray:
    w = np.zeros(mesh.n_vertices)
    np.add.at(w, mesh.cells.ravel(), corner_weights(mesh).ravel())
    return w


# ---------------------------------------------------------------------------
# stiffness


def scalar_gradient_operator(mesh: Mesh) -> sp.csr_matrix:
    """Map scalar DOFs to ``sqrt(w_q) d_i Phi_j`` at the 3x3 Gauss points.

    ``B^T B`` is the stiffness and ``|B w|^2 = int |grad grad_h w|^2``.
    """
    G = discrete_gradient_matrix(mesh)
    _, dN, w = gauss_tables(mesh.cell_extent)  # dN (M, q, p, i)
    M = mesh.n_cells
    sw = np.sqrt(w)
    # local block (q, i, j) x (p, j'): sqrt(w_q) dN[q, p, i] delta_jj'
    loc = np.einsum("mq,mqpi,jk->mqijpk", sw, dN, np.eye(2)).reshape(M, 36, 18)
    rows = 36 * np.arange(M)[:, None, None] + np.arange(36)[None, :, None]
    cols = 18 * np.arange(M)[:, None, None] + np.arange(18)[None, None, :]
    R = np.broadcast_to(rows, loc.shape).ravel()
    C = np.broadcast_to(cols, loc.shape).ravel()
    Q = sp.csr_matrix((loc.ravel(), (R, C)), shape=(36 * M, 18 * M))
    return (Q @ G).tocsr()


def scalar_stiffness(mesh: Mesh) -> sp.csr_matrix:
    """Stiffness on the scalar DOFs ``3*v + s`` of one component."""
    B = scalar_gradient_operator(mesh)
    K = (B.T @ B).tocsr()
    K.sum_duplicates()
    return K


def expand_components(Ks: sp.spmatrix, n_vertices: int) -> sp.csr_matrix:
    """Lift a scalar-DOF matrix to the 9-per-vertex layout (same for each component)."""
    Ks = Ks.tocoo()
    r_v, r_s = np.divmod(Ks.row, 3)
    c_v, c_s = np.divmod(Ks.col, 3)
    rows, cols, vals = [], [], []
    for c in range(3):
        rows.append(9 * r_v + 3 * c + r_s)
        cols.append(9 * c_v + 3 * c + c_s)
        vals.append(Ks.data)
    n = 9 * n_vertices
    K = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return K.tocsr()


def assemble_stiffness(mesh: Mesh) -> sp.csr_matrix:
    """``K[a, b] = int grad(G e_a) : grad(G e_b)`` on the full 9-per-vertex DOFs."""
    return expand_components(scalar_stiffness(mesh), mesh.n_vertices)


def bending_energy_quadrature(phi: GradientField) -> float:
    """``1/2 int |grad Phi|^2`` by 3x3 Gauss quadrature (independent of ``K``)."""
    mesh = phi.mesh
    _, dN, w = gauss_tables(mesh.cell_extent)
    dphi = np.einsum("mqpi,mpkj->mqkji", dN, phi.values)
    return 0.5 * float(np.einsum("mq,mqkji->", w, dphi**2))


# ---------------------------------------------------------------------------
# the discrete energy


class EnergyOperators:
    """Precomputed sparse operators for one mesh and one set of data.

    The coupling and load terms are evaluated from vertex data through
    sparse gather/difference matrices on the (cell, corner) slots.
    """

    def __init__(self, mesh: Mesh, data: ProblemData):
        self.mesh = mesh
        self.data = data
        self.B = scalar_gradient_operator(mesh)
        self.K = expand_components((self.B.T @ self.B).tocsr(), mesh.n_vertices)
        M, N = mesh.n_cells, mesh.n_vertices
        ext = mesh.cell_extent
        rows = np.arange(4 * M)
        self.gather = sp.csr_matrix((np.ones(4 * M), (rows, mesh.cells.ravel())), shape=(4 * M, N))
        # one-sided differences of the bilinear interpolant at each corner
        # corner k -> (vertex pair along x, vertex pair along y), as (from, to)
        xpairs = ((0, 1), (0, 1), (3, 2), (3, 2))
        ypairs = ((0, 3), (1, 2), (1, 2), (0, 3))
        D = []
        for pairs, h in ((xpairs, ext[:, 0]), (ypairs, ext[:, 1])):
            r, c, v = [], [], []
            for k, (i0, i1) in enumerate(pairs):
                slot = 4 * np.arange(M) + k
                r += [slot, slot]
                c += [mesh.cells[:, i1], mesh.cells[:, i0]]
                v += [1.0 / h, -1.0 / h]
            D.append(sp.csr_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))), shape=(4 * M, N)))
        self.D1, self.D2 = D
        # A = sum_ij Z_ij d_i I1[Phi_j] = E_0 Phi_1 + E_1 Phi_2 on the corner slots
        Zs = np.repeat(data.Z_cells(mesh), 4, axis=0)
        self.E = [(sp.diags(Zs[:, 0, j]) @ self.D1 + sp.diags(Zs[:, 1, j]) @ self.D2).tocsr() for j in range(2)]
        self.weights = corner_weights(mesh).ravel()
        self.Zc = np.repeat(data.Z_cells(mesh), 4, axis=0)  # (4M, 2, 2)
        self.fc = np.repeat(data.f_cells(mesh), 4, axis=0)  # (4M, 3)
        self.load_vector_values = self.gather.T @ (self.weights[:, None] * self.fc)  # (N, 3)
        self.constant = 0.5 * float(np.sum(self.weights * np.sum(self.Zc**2, axis=(1, 2))))
        self.area = mesh.area
        wg = (sp.diags(self.weights) @ self.gather).tocsr()
        self._normal_to_grad = [(E.T @ wg).tocsr() for E in self.E]

    # -- vertex-level pieces ------------------------------------------------

    def _corner_terms(self, grads: np.ndarray):
        return self.E[0] @ grads[:, :, 0] + self.E[1] @ grads[:, :, 1]

    def normals(self, grads: np.ndarray, check: bool = True):
        a, b = grads[:, :, 0], grads[:, :, 1]
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        if check and (np.min(na) < 1 - METRIC_TOL or np.min(nb) < 1 - METRIC_TOL):
            raise InadmissibleStateError(
                f"gradient column norm below 1: min |d1 y| = {np.min(na):.3e}, min |d2 y| = {np.min(nb):.3e}")
        ah = a / na[:, None]
        bh = b / nb[:, None]
        return ah, bh, np.cross(ah, bh)

    def coupling(self, grads: np.ndarray, check: bool = True) -> float:
        _, _, n = self.normals(grads, check)
        A = self._corner_terms(grads)
        nc = self.gather @ n
        return float(np.sum(self.weights * np.sum(A * nc, axis=1)))

    def coupling_gradient(self, grads: np.ndarray, check: bool = True) -> np.ndarray:
        """Derivative of the coupling term with respect to the vertex gradients, (N, 3, 2)."""
        ah, bh, n = self.normals(grads, check)
        A = self._corner_terms(grads)
        w = self.weights
        out = np.empty_like(grads)
        # derivative through d_i I1[Phi_j]
        for j in range(2):
            out[:, :, j] = self._normal_to_grad[j] @ n
        # derivative through the normal
        a, b = grads[:, :, 0], grads[:, :, 1]
        Pa = projection(a)
        Pb = projection(b)
        bc = self.gather @ bh
        ac = self.gather @ ah
        t1 = self.gather.T @ (w[:, None] * np.cross(bc, A))
        t2 = self.gather.T @ (w[:, None] * np.cross(A, ac))
        out[:, :, 0] += np.einsum("nkl,nl->nk", Pa, t1)
        out[:, :, 1] += np.einsum("nkl,nl->nk", Pb, t2)
        return out

    def load(self, y: DeformationField) -> float:
        return float(np.sum(self.load_vector_values * y.values))

    def hessian_norm(self, dofs: np.ndarray) -> float:
        """``|| grad grad_h y ||_{L^2}`` of a full DOF vector."""
        comp = np.asarray(dofs).reshape(-1, 3, 3).transpose(1, 0, 2).reshape(3, -1)
        return float(np.linalg.norm(self.B @ comp.T))

    def bending(self, dofs: np.ndarray) -> float:
        return 0.5 * self.hessian_norm(dofs) ** 2

    def energy(self, y: DeformationField, check: bool = True) -> EnergyBreakdown:
        if check:
            check_metric(y)
        return EnergyBreakdown(
            bending=self.bending(y.dofs()),
            coupling=self.coupling(y.grads, check),
            constant=self.constant,
            load=self.load(y),
        )

    def force_vector(self, grads: np.ndarray) -> np.ndarray:
        """``-dG/dy + F`` as a full DOF vector (the Z and load part of the RHS)."""
        N = self.mesh.n_vertices
        out = np.zeros((N, 3, 3))
        out[:, :, 0] = self.load_vector_values
        out[:, :, 1:] = -self.coupling_gradient(grads)
        return out.reshape(-1)


def check_metric(y: DeformationField, tol: float = METRIC_TOL) -> float:
    """Return ``min lambda_min(metric - I)`` and raise if below ``-tol``."""
    lam = nodal_metric_excess(y)
    if lam < -tol:
        raise InadmissibleStateError(f"nodal metric below identity: lambda_min(g - I) = {lam:.3e}")
    return lam


def nodal_metric_excess(y: DeformationField) -> float:
    g = y.nodal_metric() - np.eye(2)
    return float(np.min(np.linalg.eigvalsh(g)))


def discrete_energy(y: DeformationField, data: ProblemData, ops: EnergyOperators | None = None) -> EnergyBreakdown:
    ops = ops or EnergyOperators(y.mesh, data)
    return ops.energy(y)


def assemble_flow_rhs(y_k: DeformationField, phi_l: GradientField, data: ProblemData, tau: float,
                      ops: EnergyOperators | None = None) -> np.ndarray:
    """Right-hand side of one fixed-point step as a full DOF vector.

    The iterate solves ``(1/tau + 1) K y = rhs`` on ``y_k + F_h[y_k]``.
    """
    ops = ops or EnergyOperators(y_k.mesh, data)
    return ops.K @ y_k.dofs() / tau + ops.force_vector(phi_l.vertex_values())


# ---------------------------------------------------------------------------
# diagnostics


def second_fundamental_form(phi: GradientField):
    """``H_h`` at the 3x3 Gauss points of every cell, with quadrature weights.

    ``H_ij = (Phi_1 x Phi_2) . d_i Phi_j`` without normalisation.
    """
    mesh = phi.mesh
    N, dN, w = gauss_tables(mesh.cell_extent)
    vals = np.einsum("qp,mpkj->mqkj", N, phi.values)
    dvals = np.einsum("mqpi,mpkj->mqkji", dN, phi.values)  # d_i Phi_kj
    nu = np.cross(vals[..., 0], vals[..., 1])
    H = np.einsum("mqk,mqkji->mqij", nu, dvals)
    return H, w


def reporting_energy(y: DeformationField, Z) -> float:
    """``1/2 int |H_h + Z|^2`` with 3x3 Gauss quadrature."""
    phi = apply_discrete_gradient(y)
    H, w = second_fundamental_form(phi)
    Zc = np.broadcast_to(np.asarray(Z, dtype=float), (y.mesh.n_cells, 2, 2))
    return 0.5 * float(np.einsum("mq,mqij->", w, (H + Zc[:, None]) ** 2))


def isometry_defect(y: DeformationField) -> float:
    """Area-normalised ``L^1_h`` norm of the nodal metric defect (entrywise sum)."""
    mesh = y.mesh
    g = y.nodal_metric() - np.eye(2)
    pointwise = np.abs(g).sum(axis=(1, 2))
    return float(np.sum(vertex_weights(mesh) * pointwise) / mesh.area)


def flat_state(mesh: Mesh) -> DeformationField:
    vals = np.zeros((mesh.n_vertices, 3))
    vals[:, :2] = mesh.vertices
    return DeformationField(mesh, vals, np.broadcast_to(np.eye(3, 2), (mesh.n_vertices, 3, 2)).copy())


__all__ = [
    "EnergyBreakdown", "EnergyOperators", "InadmissibleStateError", "ProblemData", "assemble_flow_rhs",
    "assemble_stiffness", "bending_energy_quadrature", "check_metric", "discrete_energy",
    "discrete_inner_product", "flat_state", "isometry_defect", "lp_h_norm", "projection",
    "reporting_energy", "second_fundamental_form", "local_discrete_gradients",
]


def centre_errors(y: DeformationField, value_fn, gradient_fn) -> tuple[float, float]:
    """Area-scaled ``L^2`` errors of value and gradient, one-point Gauss rule per cell.

    The discrete deformation is evaluated at the cell centres through its
    cubic Hermite reconstruction; value and gradient there do not depend on
    the choice of the invisible bubble.
    """
    mesh = y.mesh
    ev, eg = 0.0, 0.0
    centres = mesh.cell_midpoints
    area = mesh.cell_area
    for m in range(mesh.n_cells):
        val, grad, _ = q3_eval(y, m, (0.5, 0.5))
        ev += area[m] * np.sum((np.asarray(value_fn(centres[m])) - val) ** 2)
        eg += area[m] * np.sum((np.asarray(gradient_fn(centres[m])) - grad) ** 2)
    return float(np.sqrt(ev / mesh.area)), float(np.sqrt(eg / mesh.area))
