"""Direct solvers for the constrained linear step.

Two equivalent routes are provided.

``SaddleSystem`` composes ``[[A, C^T], [C, 0]]`` with node-local Lagrange
multipliers and factors it with a sparse LU.  ``NullspaceSystem`` eliminates
the same constraints exactly: at every free vertex the admissible gradient
increments form a 3-dimensional subspace, so the increment is written in a
local orthonormal basis and the reduced symmetric positive definite matrix is
factored by banded Cholesky.  The flow uses the second route by default;
the first is kept as the reference.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .energy import InadmissibleStateError

RESIDUAL_TOL = 1e-9

# slots of the 9 vertex DOFs: values, d1-columns, d2-columns
VALUE_SLOTS = np.array([0, 3, 6])
D1_SLOTS = np.array([1, 4, 7])
D2_SLOTS = np.array([2, 5, 8])
GRAD_SLOTS = np.concatenate([D1_SLOTS, D2_SLOTS])


class SolverError(RuntimeError):
    """Linear solve did not meet its residual tolerance."""


def constraint_blocks(grads: np.ndarray) -> np.ndarray:
    """Per-vertex 3x6 blocks of ``sym([grad w]^T Phi) = 0`` acting on ``(d1 w, d2 w)``.

    ``grads`` has shape (n, 3, 2); the result has shape (n, 3, 6).
    """
    a, b = grads[:, :, 0], grads[:, :, 1]
    z = np.zeros_like(a)
    rows = [np.concatenate([a, z], axis=1), np.concatenate([z, b], axis=1), np.concatenate([b, a], axis=1)]
    return np.stack(rows, axis=1)


def constraint_matrix(grads: np.ndarray, n_free_vertices: int) -> sp.csr_matrix:
    """Global constraint matrix on the free DOFs (9 per free vertex, same order)."""
    blocks = constraint_blocks(grads)
    n = len(blocks)
    rows = np.repeat(3 * np.arange(n)[:, None] + np.arange(3)[None, :], 6, axis=1).reshape(n, 3, 6)
    cols = np.broadcast_to((9 * np.arange(n)[:, None] + GRAD_SLOTS[None, :])[:, None, :], (n, 3, 6))
    return sp.csr_matrix((blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(3 * n, 9 * n_free_vertices))


def nullspace_blocks(grads: np.ndarray, rank_tol: float = 1e-10) -> np.ndarray:
    """Orthonormal bases (n, 6, 3) of the kernels of the 3x6 constraint blocks.

    With ``a, b`` the columns of the gradient and ``n = a x b`` the kernel is
    spanned by ``(n, 0)``, ``(0, n)`` and the infinitesimal rotation
    ``(n x a, n x b)``; the three are mutually orthogonal, so normalising
    them gives the basis.  A (nearly) parallel pair ``a, b`` makes the block
    rank deficient.
    """
    a, b = grads[:, :, 0], grads[:, :, 1]
    n = np.cross(a, b)
    nn = np.linalg.norm(n, axis=1)
    scale = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    bad = nn <= rank_tol * scale
    if np.any(bad):
        raise InadmissibleStateError(f"constraint block of free vertex {int(np.argmax(bad))} is rank deficient")
    nu = n / nn[:, None]
    rot = np.concatenate([np.cross(nu, a), np.cross(nu, b)], axis=1)
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    out = np.zeros((len(grads), 6, 3))
    out[:, :3, 0] = nu
    out[:, 3:, 1] = nu
    out[:, :, 2] = rot
    return out


def nullspace_blocks_svd(grads: np.ndarray, rank_tol: float = 1e-10) -> np.ndarray:
    """Reference kernel bases from a full SVD of every constraint block."""
    C = constraint_blocks(grads)
    _, s, vt = np.linalg.svd(C)
    if np.any(s[:, -1] <= rank_tol * s[:, 0]):
        bad = int(np.argmin(s[:, -1] / s[:, 0]))
        raise InadmissibleStateError(f"constraint block of free vertex {bad} is rank deficient")
    return np.swapaxes(vt[:, 3:, :], 1, 2)


# ---------------------------------------------------------------------------
# saddle-point route


class SaddleSystem:
    """Factorisation of ``[[A, C^T], [C, 0]]`` with ``A = (1/tau + 1) K``."""

    def __init__(self, A: sp.spmatrix, C: sp.spmatrix, debug: bool = False):
        self.A = sp.csc_matrix(A)
        self.C = sp.csr_matrix(C)
        self.n_free = self.A.shape[0]
        self.n_constraints = self.C.shape[0]
        if self.C.shape[1] != self.n_free:
            raise ValueError(f"constraint block has {self.C.shape[1]} columns, expected {self.n_free}")
        self.matrix = sp.bmat([[self.A, self.C.T], [self.C, None]], format="csc")
        self.debug = debug
        try:
            self._lu = spla.splu(self.matrix, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise InadmissibleStateError(f"singular saddle system: {exc}") from exc
        d = np.abs(self._lu.U.diagonal())
        scale = d.max()
        small = np.flatnonzero(d <= 1e-13 * scale)
        if len(small):
            raise InadmissibleStateError(f"singular saddle system: pivot {int(self._lu.perm_c[small[0]])} vanishes")

    def solve(self, rhs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape != (self.n_free + self.n_constraints,):
            raise ValueError("right-hand side has the wrong length")
        x = self._lu.solve(rhs)
        if self.debug:
            check_residual(self.matrix, x, rhs)
        return x[: self.n_free], x[self.n_free:]


def compose_and_factor(K: sp.spmatrix, C: sp.spmatrix, tau: float, debug: bool = False) -> SaddleSystem:
    """Saddle system for one outer step (``K`` already restricted to free DOFs)."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    return SaddleSystem((1.0 / tau + 1.0) * K, C, debug=debug)


def check_residual(M, x, b, tol: float = RESIDUAL_TOL) -> float:
    nb = np.linalg.norm(b)
    res = np.linalg.norm(M @ x - b) / (nb if nb > 0 else 1.0)
    if res > tol:
        raise SolverError(f"relative residual {res:.2e} exceeds {tol:.0e}")
    return float(res)


# ---------------------------------------------------------------------------
# null-space route


class NullspaceSystem:
    """Banded Cholesky solver for ``T^T A T`` with block-diagonal ``T``.

    ``A`` acts on 9 DOFs per free vertex.  The symbolic part (block pattern,
    band index maps) is fixed at construction; ``factor`` only refills values
    for new constraint bases.
    """

    def __init__(self, A: sp.spmatrix, n_vertices: int, debug: bool = False):
        self.n_vertices = n_vertices
        self.n = 6 * n_vertices
        self.debug = debug
        self.A = sp.csr_matrix(A)
        bsr = sp.bsr_matrix(self.A, blocksize=(9, 9))
        bsr.sort_indices()
        self._blocks = bsr.data.copy()  # (nb, 9, 9)
        indptr, self._bcol = bsr.indptr, bsr.indices
        self._brow = np.repeat(np.arange(n_vertices), np.diff(indptr))
        self.block_bandwidth = int(np.max(np.abs(self._brow - self._bcol)))
        self.u = 6 * self.block_bandwidth + 5
        # band storage (upper form): ab[u + i - j, j] = R[i, j] for i <= j
        ii = 6 * self._brow[:, None, None] + np.arange(6)[None, :, None]
        jj = 6 * self._bcol[:, None, None] + np.arange(6)[None, None, :]
        ii, jj = np.broadcast_arrays(ii, jj)
        self._upper = (ii <= jj)
        self._band_index = ((self.u + ii - jj) * self.n + jj)[self._upper]
        self._T = None
        self._chol = None

    def factor(self, T: np.ndarray) -> None:
        """Factor ``T^T A T`` where ``T`` holds (n_vertices, 9, 6) local bases."""
        self._T = T
        R = np.matmul(np.matmul(np.swapaxes(T[self._brow], 1, 2), self._blocks), T[self._bcol])
        ab = np.zeros((self.u + 1) * self.n)
        ab[self._band_index] = R[self._upper]
        try:
            self._chol = sla.cholesky_banded(ab.reshape(self.u + 1, self.n), lower=False, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise InadmissibleStateError(f"reduced system not positive definite: {exc}") from exc

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``A x + C^T lambda = rhs``, ``C x = 0``; return ``x``."""
        T = self._T
        r = np.einsum("vik,vi->vk", T, rhs.reshape(self.n_vertices, 9)).ravel()
        u = sla.cho_solve_banded((self._chol, False), r, check_finite=False)
        x = np.einsum("vik,vk->vi", T, u.reshape(self.n_vertices, 6)).ravel()
        if self.debug:
            Tm = self.basis_matrix()
            check_residual(Tm.T @ self.A @ Tm, u, r)
        return x

    def basis_matrix(self) -> sp.csr_matrix:
        return sp.block_diag(list(self._T), format="csr")


def local_bases(grads: np.ndarray) -> np.ndarray:
    """Block ``T_v`` (n, 9, 6): 3 value directions plus 3 admissible gradient directions."""
    n = len(grads)
    T = np.zeros((n, 9, 6))
    T[:, VALUE_SLOTS, np.arange(3)] = 1.0
    Nb = nullspace_blocks(grads)
    T[:, GRAD_SLOTS[:, None], 3 + np.arange(3)[None, :]] = Nb
    return T
