"""Structured quadrilateral meshes, face connectivity, and refinement.

Cells are ordered lexicographically, cell (i, j) -> j*nx + i.  Interior face
normals point from the lower-index cell to its neighbour; boundary normals
point outward.  Boundary faces carry a Dirichlet/Neumann tag once
:func:`boundary_tag_assign` has run.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

__all__ = [
    "DIRICHLET",
    "NEUMANN",
    "Face",
    "StructuredQuadMesh",
    "MeshHierarchy",
    "ParentChildMap",
    "uniform_mesh",
    "refine",
    "boundary_tag_assign",
    "all_dirichlet",
    "build_hierarchy",
]

DIRICHLET = "dirichlet"
NEUMANN = "neumann"

# Boundary sides in canonical order; faces are enumerated side by side.
SIDES = ("bottom", "right", "top", "left")


@dataclass(frozen=True)
class Face:
    """One mesh face: interior (two cells) or boundary (one cell plus tag)."""

    kind: str  # "interior" | "boundary"
    cells: tuple
    normal: tuple
    h: float
    center: tuple
    tag: str | None = None
    side: str | None = None


@dataclass(frozen=True)
class StructuredQuadMesh:
    """Uniform nx-by-ny quadrilateral mesh of [x0, x1] x [y0, y1]."""

    nx: int
    ny: int
    x0: float = 0.0
    y0: float = 0.0
    x1: float = 1.0
    y1: float = 1.0
    level: int = 0
    boundary_tags: np.ndarray | None = None  # per boundary face, canonical order

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("cell counts must be >= 1")
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError("degenerate domain extents")

    @property
    def hx(self) -> float:
        return (self.x1 - self.x0) / self.nx

    @property
    def hy(self) -> float:
        return (self.y1 - self.y0) / self.ny

    @property
    def ncells(self) -> int:
        return self.nx * self.ny

    def cell_index(self, i: int, j: int) -> int:
        return j * self.nx + i

    @cached_property
    def cell_origins(self) -> np.ndarray:
        """Lower-left corner of every cell, shape (ncells, 2)."""
        i = np.arange(self.nx)
        j = np.arange(self.ny)
        xx = self.x0 + i * self.hx
        yy = self.y0 + j * self.hy
        ox, oy = np.meshgrid(xx, yy)
        return np.column_stack([ox.ravel(), oy.ravel()])

    @cached_property
    def cell_centroids(self) -> np.ndarray:
        return self.cell_origins + 0.5 * np.array([self.hx, self.hy])

    @property
    def n_interior_faces(self) -> int:
        return (self.nx - 1) * self.ny + self.nx * (self.ny - 1)

    @property
    def n_boundary_faces(self) -> int:
        return 2 * (self.nx + self.ny)

    def interior_faces(self) -> list[Face]:
        """Interior faces: vertical (normal +x) first, then horizontal (+y)."""
        faces = []
        for j in range(self.ny):
            for i in range(self.nx - 1):
                left = self.cell_index(i, j)
                ctr = (self.x0 + (i + 1) * self.hx, self.y0 + (j + 0.5) * self.hy)
                faces.append(Face("interior", (left, left + 1), (1.0, 0.0), self.hy, ctr))
        for j in range(self.ny - 1):
            for i in range(self.nx):
                low = self.cell_index(i, j)
                ctr = (self.x0 + (i + 0.5) * self.hx, self.y0 + (j + 1) * self.hy)
                faces.append(Face("interior", (low, low + self.nx), (0.0, 1.0), self.hx, ctr))
        return faces

    def boundary_faces(self) -> list[Face]:
        """Boundary faces in canonical side order (bottom, right, top, left)."""
        faces = []
        tags = self.boundary_tags
        idx = 0
        for side in SIDES:
            for cell, ctr, normal, h in self._side_geometry(side):
                tag = None if tags is None else str(tags[idx])
                faces.append(Face("boundary", (cell,), normal, h, ctr, tag=tag, side=side))
                idx += 1
        return faces

    def _side_geometry(self, side: str):
        hx, hy = self.hx, self.hy
        if side == "bottom":
            for i in range(self.nx):
                yield self.cell_index(i, 0), (self.x0 + (i + 0.5) * hx, self.y0), (0.0, -1.0), hx
        elif side == "right":
            for j in range(self.ny):
                yield self.cell_index(self.nx - 1, j), (self.x1, self.y0 + (j + 0.5) * hy), (1.0, 0.0), hy
        elif side == "top":
            for i in range(self.nx):
                yield self.cell_index(i, self.ny - 1), (self.x0 + (i + 0.5) * hx, self.y1), (0.0, 1.0), hx
        elif side == "left":
            for j in range(self.ny):
                yield self.cell_index(0, j), (self.x0, self.y0 + (j + 0.5) * hy), (-1.0, 0.0), hy
        else:
            raise ValueError(side)


def uniform_mesh(nx: int, ny: int, extents=(0.0, 0.0, 1.0, 1.0), level: int = 0) -> StructuredQuadMesh:
    x0, y0, x1, y1 = extents
    return StructuredQuadMesh(nx, ny, x0, y0, x1, y1, level=level)


@dataclass(frozen=True)
class ParentChildMap:
    """Cell maps between a mesh and its uniform refinement."""

    parent_of: np.ndarray  # (ncells_fine,)
    children_of: np.ndarray  # (ncells_coarse, 4)


def refine(mesh: StructuredQuadMesh) -> tuple[StructuredQuadMesh, ParentChildMap]:
    """Double nx and ny; each parent cell is tiled by exactly 4 children."""
    fine = StructuredQuadMesh(
        2 * mesh.nx, 2 * mesh.ny, mesh.x0, mesh.y0, mesh.x1, mesh.y1, level=mesh.level + 1
    )
    fi = np.arange(fine.nx)
    fj = np.arange(fine.ny)
    ii, jj = np.meshgrid(fi, fj)
    parent = (jj // 2) * mesh.nx + (ii // 2)
    parent_of = parent.ravel()
    children_of = np.empty((mesh.ncells, 4), dtype=int)
    for c in range(mesh.ncells):
        ci, cj = c % mesh.nx, c // mesh.nx
        children_of[c] = [
            fine.cell_index(2 * ci + di, 2 * cj + dj) for dj in (0, 1) for di in (0, 1)
        ]
    return fine, ParentChildMap(parent_of=parent_of, children_of=children_of)


def boundary_tag_assign(mesh: StructuredQuadMesh, rule) -> StructuredQuadMesh:
    """Tag every boundary face exactly once via a total per-face predicate."""
    tags = []
    untagged = replace(mesh, boundary_tags=None)
    for face in untagged.boundary_faces():
        tag = rule(face)
        if tag not in (DIRICHLET, NEUMANN):
            raise ValueError(f"rule returned invalid tag {tag!r}")
        tags.append(tag)
    return replace(mesh, boundary_tags=np.array(tags, dtype=object))


def all_dirichlet(_face: Face) -> str:
    return DIRICHLET


@dataclass(frozen=True)
class MeshHierarchy:
    """Nested meshes coarsest to finest with parent-child cell maps."""

    levels: tuple
    maps: tuple  # maps[i] links levels[i] -> levels[i+1]

    @property
    def finest(self) -> StructuredQuadMesh:
        return self.levels[-1]

    @property
    def num_levels(self) -> int:
        return len(self.levels)


def build_hierarchy(coarse: StructuredQuadMesh, refinements: int, tag_rule=None) -> MeshHierarchy:
    """Refine `coarse` the given number of times, re-tagging every level."""
    mesh = coarse if tag_rule is None else boundary_tag_assign(coarse, tag_rule)
    levels, maps = [mesh], []
    for _ in range(refinements):
        fine, pcmap = refine(levels[-1])
        if tag_rule is not None:
            fine = boundary_tag_assign(fine, tag_rule)
        levels.append(fine)
        maps.append(pcmap)
    return MeshHierarchy(levels=tuple(levels), maps=tuple(maps))
