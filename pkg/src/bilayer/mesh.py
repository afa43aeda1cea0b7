"""Conforming rectangle partitions of plate domains.

A domain is a tensor grid of coarse blocks (given by break points in x and
y) with a mask selecting the active blocks.  Every active block is bisected
``refinements`` times in both directions, so neighbouring blocks always share
whole edges and the result has no hanging nodes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DIRICHLET = 1
FREE = 0

_TOL = 1e-10


class MeshError(ValueError):
    """Invalid domain specification or boundary selector."""


@dataclass(frozen=True)
class Segment:
    """Axis-aligned boundary segment ``{axis = value} x [lo, hi]``."""

    axis: str  # "x" or "y": the coordinate held fixed
    value: float
    lo: float
    hi: float

    def __post_init__(self):
        if self.axis not in ("x", "y"):
            raise MeshError(f"segment axis must be 'x' or 'y', got {self.axis!r}")
        if not self.hi > self.lo:
            raise MeshError(f"empty segment interval [{self.lo}, {self.hi}]")

    def contains(self, p: np.ndarray, q: np.ndarray) -> bool:
        k, t = (0, 1) if self.axis == "x" else (1, 0)
        if abs(p[k] - self.value) > _TOL or abs(q[k] - self.value) > _TOL:
            return False
        lo, hi = sorted((p[t], q[t]))
        return lo >= self.lo - _TOL and hi <= self.hi + _TOL

    def __str__(self):
        return f"{self.axis}={self.value:g}:{self.lo:g}..{self.hi:g}"

    @classmethod
    def parse(cls, text: str) -> "Segment":
        """Parse ``"x=-5:-2..2"``."""
        try:
            lhs, rng = text.strip().split(":")
            axis, value = lhs.split("=")
            lo, hi = rng.split("..")
            return cls(axis.strip(), float(value), float(lo), float(hi))
        except ValueError as exc:
            raise MeshError(f"cannot parse boundary segment {text!r}") from exc


@dataclass(frozen=True)
class DomainSpec:
    """Blocked rectangular domain plus refinement level and clamped boundary.

    ``mask[j][i]`` activates the block ``[xb[i], xb[i+1]] x [yb[j], yb[j+1]]``.
    """

    x_breaks: tuple[float, ...]
    y_breaks: tuple[float, ...]
    refinements: int = 0
    dirichlet: tuple[Segment, ...] = ()
    mask: tuple[tuple[bool, ...], ...] | None = None
    name: str = "rectangle"

    @classmethod
    def rectangle(cls, x0, x1, y0, y1, refinements=0, dirichlet=()):
        return cls((float(x0), float(x1)), (float(y0), float(y1)), refinements, tuple(dirichlet))

    @classmethod
    def ishape(cls, refinements=5, dirichlet=None):
        # 10 x 4 box; flanges 5/2 wide over the full height, web 5 x 5/2
        xb = (-5.0, -2.5, 2.5, 5.0)
        yb = (-2.0, -1.25, 1.25, 2.0)
        mask = ((True, False, True), (True, True, True), (True, False, True))
        if dirichlet is None:
            dirichlet = (Segment("x", -5.0, -2.0, 2.0),)
        return cls(xb, yb, refinements, tuple(dirichlet), mask, "ishape")

    @classmethod
    def oshape(cls, refinements=5, dirichlet=None):
        # 10 x 4 box with a centred 20/3 x 8/3 hole
        xb = (-5.0, -5.0 + 5.0 / 3.0, 5.0 - 5.0 / 3.0, 5.0)
        yb = (-2.0, -2.0 + 2.0 / 3.0, 2.0 - 2.0 / 3.0, 2.0)
        mask = ((True, True, True), (True, False, True), (True, True, True))
        if dirichlet is None:
            dirichlet = (Segment("x", -5.0, -2.0, 2.0),)
        return cls(xb, yb, refinements, tuple(dirichlet), mask, "oshape")

    def block_mask(self) -> np.ndarray:
        nbx, nby = len(self.x_breaks) - 1, len(self.y_breaks) - 1
        if self.mask is None:
            return np.ones((nby, nbx), dtype=bool)
        m = np.asarray(self.mask, dtype=bool)
        if m.shape != (nby, nbx):
            raise MeshError(f"mask shape {m.shape} does not match blocks {(nby, nbx)}")
        return m

    @property
    def area(self) -> float:
        dx = np.diff(self.x_breaks)
        dy = np.diff(self.y_breaks)
        return float(np.sum(np.outer(dy, dx)[self.block_mask()]))


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable conforming partition into axis-aligned rectangles.

    Cells list their vertices counterclockwise starting at the lower-left
    corner; ``cell_edges`` lists bottom, right, top, left edges.
    """

    vertices: np.ndarray  # (N, 2)
    cells: np.ndarray  # (M, 4)
    edges: np.ndarray  # (E, 2) vertex pairs, increasing coordinate along the edge
    edge_cells: np.ndarray  # (E, 2), -1 where missing
    cell_edges: np.ndarray  # (M, 4)
    boundary_tags: dict = field(default_factory=dict)  # boundary edge -> DIRICHLET | FREE
    domain: DomainSpec | None = None

    def __post_init__(self):
        for name in ("vertices", "cells", "edges", "edge_cells", "cell_edges"):
            getattr(self, name).setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def cell_extent(self) -> np.ndarray:
        v = self.vertices
        return np.stack([v[self.cells[:, 1], 0] - v[self.cells[:, 0], 0],
                         v[self.cells[:, 3], 1] - v[self.cells[:, 0], 1]], axis=1)

    @property
    def cell_area(self) -> np.ndarray:
        ext = self.cell_extent
        return ext[:, 0] * ext[:, 1]

    @property
    def area(self) -> float:
        return float(self.cell_area.sum())

    @property
    def h(self) -> float:
        return float(np.max(np.hypot(*self.cell_extent.T)))

    @property
    def shape_regularity(self) -> float:
        ext = self.cell_extent
        return float(np.max(np.maximum(ext[:, 0] / ext[:, 1], ext[:, 1] / ext[:, 0])))

    @property
    def cell_midpoints(self) -> np.ndarray:
        return self.vertices[self.cells].mean(axis=1)

    @property
    def edge_midpoints(self) -> np.ndarray:
        return self.vertices[self.edges].mean(axis=1)

    @property
    def edge_tangents(self) -> np.ndarray:
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    @property
    def edge_normals(self) -> np.ndarray:
        t = self.edge_tangents
        return np.stack([t[:, 1], -t[:, 0]], axis=1)

    @property
    def boundary_edges(self) -> np.ndarray:
        return np.flatnonzero(self.edge_cells[:, 1] < 0)

    @property
    def dirichlet_edges(self) -> np.ndarray:
        return np.array(sorted(e for e, t in self.boundary_tags.items() if t == DIRICHLET), dtype=int)

    @property
    def dirichlet_vertices(self) -> np.ndarray:
        """Boolean mask of vertices touching at least one clamped edge."""
        mask = np.zeros(self.n_vertices, dtype=bool)
        de = self.dirichlet_edges
        if len(de):
            mask[self.edges[de].ravel()] = True
        return mask

    def vertex_cells(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.n_vertices)]
        for m, cell in enumerate(self.cells):
            for v in cell:
                out[v].append(m)
        return out


def _fine_lines(breaks: Sequence[float], n_sub: int) -> np.ndarray:
    pieces = [np.linspace(a, b, n_sub + 1)[:-1] for a, b in zip(breaks[:-1], breaks[1:])]
    return np.concatenate(pieces + [np.array([breaks[-1]])])


def build_mesh(spec: DomainSpec) -> Mesh:
    """Build the refined, boundary-tagged mesh for ``spec``."""
    if spec.refinements < 0:
        raise MeshError("refinements must be nonnegative")
    for br in (spec.x_breaks, spec.y_breaks):
        if len(br) < 2 or np.any(np.diff(br) <= 0):
            raise MeshError(f"break points must be strictly increasing, got {br}")
    blocks = spec.block_mask()
    if not blocks.any():
        raise MeshError("domain has no active blocks")

    n_sub = 2 ** spec.refinements
    xs = _fine_lines(spec.x_breaks, n_sub)
    ys = _fine_lines(spec.y_breaks, n_sub)
    nx, ny = len(xs) - 1, len(ys) - 1
    active = np.repeat(np.repeat(blocks, n_sub, axis=0), n_sub, axis=1)  # (ny, nx)

    # grid-point usage, numbered y-major
    used = np.zeros((ny + 1, nx + 1), dtype=bool)
    jj, ii = np.nonzero(active)
    for dj, di in ((0, 0), (0, 1), (1, 1), (1, 0)):
        used[jj + dj, ii + di] = True
    index = -np.ones(used.shape, dtype=int)
    index[used] = np.arange(used.sum())
    gy, gx = np.nonzero(used)
    vertices = np.stack([xs[gx], ys[gy]], axis=1)

    order = np.lexsort((ii, jj))
    jj, ii = jj[order], ii[order]
    cells = np.stack([index[jj, ii], index[jj, ii + 1], index[jj + 1, ii + 1], index[jj + 1, ii]], axis=1)

    edge_id: dict[tuple[int, int], int] = {}
    edges: list[tuple[int, int]] = []
    edge_cells: list[list[int]] = []
    cell_edges = np.empty((len(cells), 4), dtype=int)
    local = ((0, 1), (1, 2), (3, 2), (0, 3))  # bottom, right, top, left
    for m, cell in enumerate(cells):
        for k, (a, b) in enumerate(local):
            key = (int(cell[a]), int(cell[b]))
            e = edge_id.get(key)
            if e is None:
                e = edge_id[key] = len(edges)
                edges.append(key)
                edge_cells.append([m, -1])
            else:
                edge_cells[e][1] = m
            cell_edges[m, k] = e

    mesh = Mesh(
        vertices=vertices,
        cells=cells,
        edges=np.array(edges, dtype=int),
        edge_cells=np.array(edge_cells, dtype=int),
        cell_edges=cell_edges,
        boundary_tags={},
        domain=spec,
    )
    if spec.dirichlet:
        mesh = tag_boundary(mesh, spec.dirichlet)
    else:
        mesh = Mesh(mesh.vertices, mesh.cells, mesh.edges, mesh.edge_cells, mesh.cell_edges,
                    {int(e): FREE for e in mesh.boundary_edges}, spec)
    return mesh


def tag_boundary(mesh: Mesh, dirichlet: Sequence[Segment]) -> Mesh:
    """Return a copy of ``mesh`` whose boundary edges are tagged clamped or free."""
    segs = tuple(dirichlet)
    tags = {}
    v = mesh.vertices
    for e in mesh.boundary_edges:
        a, b = mesh.edges[e]
        hit = any(s.contains(v[a], v[b]) for s in segs)
        tags[int(e)] = DIRICHLET if hit else FREE
    if not any(t == DIRICHLET for t in tags.values()):
        raise MeshError("Dirichlet selector matches no boundary edge; the flow needs a clamped part")
    return Mesh(mesh.vertices, mesh.cells, mesh.edges, mesh.edge_cells, mesh.cell_edges, tags, mesh.domain)
