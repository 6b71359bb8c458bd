"""Q2 vector velocity and discontinuous P1 pressure spaces on quad meshes.

Velocity uses continuous biquadratic elements with 9 nodes per cell and two
components per node; coefficient vectors are flat with layout
``index = 2*node + component`` (equivalently ``coeffs.reshape(-1, 2)``).
Pressure uses the discontinuous local basis {1, x-1/2, y-1/2} on the
reference cell, three coefficients per cell.

Reference cell is the unit square [0,1]^2; the geometry map of a uniform
mesh has the constant diagonal Jacobian diag(hx, hy), so physical gradients
are reference gradients scaled by (1/hx, 1/hy).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .mesh import StructuredQuadMesh

__all__ = [
    "SpatialQuadrature",
    "VelocitySpace",
    "PressureSpace",
    "gauss_1d",
    "tensor_gauss",
    "q2_shapes",
    "q2_grads",
    "p1disc_shapes",
    "p1disc_grads_ref",
    "shape_eval",
    "dof_counts",
    "interpolate_velocity",
    "interpolate_pressure",
    "velocity_mass",
    "pressure_mass_diag",
    "evaluate_velocity",
    "evaluate_velocity_gradient",
    "evaluate_pressure",
]


def gauss_1d(q: int) -> tuple[np.ndarray, np.ndarray]:
    """q-point Gauss-Legendre rule on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(q)
    return (x + 1.0) / 2.0, w / 2.0


@dataclass(frozen=True)
class SpatialQuadrature:
    """Tensor Gauss rule on the reference square, exact per direction to 2q-1."""

    q: int
    points: np.ndarray  # (nq, 2)
    weights: np.ndarray  # (nq,)


def tensor_gauss(q: int) -> SpatialQuadrature:
    x, w = gauss_1d(q)
    xx, yy = np.meshgrid(x, x, indexing="ij")
    ww = np.outer(w, w)
    return SpatialQuadrature(q, np.column_stack([xx.ravel(), yy.ravel()]), ww.ravel())


def _lag1d(x):
    x = np.asarray(x, dtype=float)
    return np.stack([(1.0 - x) * (1.0 - 2.0 * x), 4.0 * x * (1.0 - x), x * (2.0 * x - 1.0)])


def _lag1d_deriv(x):
    x = np.asarray(x, dtype=float)
    return np.stack([4.0 * x - 3.0, 4.0 - 8.0 * x, 4.0 * x - 1.0])


def q2_shapes(points: np.ndarray) -> np.ndarray:
    """Biquadratic shape values, (9, npts); local node a = 3*jy + ix."""
    pts = np.atleast_2d(points)
    lx, ly = _lag1d(pts[:, 0]), _lag1d(pts[:, 1])
    return np.stack([ly[a // 3] * lx[a % 3] for a in range(9)])


def q2_grads(points: np.ndarray) -> np.ndarray:
    """Reference gradients of the biquadratic shapes, (9, npts, 2)."""
    pts = np.atleast_2d(points)
    lx, ly = _lag1d(pts[:, 0]), _lag1d(pts[:, 1])
    dlx, dly = _lag1d_deriv(pts[:, 0]), _lag1d_deriv(pts[:, 1])
    out = np.empty((9, pts.shape[0], 2))
    for a in range(9):
        ix, jy = a % 3, a // 3
        out[a, :, 0] = ly[jy] * dlx[ix]
        out[a, :, 1] = dly[jy] * lx[ix]
    return out


def p1disc_shapes(points: np.ndarray) -> np.ndarray:
    """Discontinuous linear pressure shapes {1, x-1/2, y-1/2}, (3, npts)."""
    pts = np.atleast_2d(points)
    return np.stack([np.ones(pts.shape[0]), pts[:, 0] - 0.5, pts[:, 1] - 0.5])


def p1disc_grads_ref() -> np.ndarray:
    """Constant reference gradients of the pressure shapes, (3, 2)."""
    return np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


class VelocitySpace:
    """Continuous Q2 vector space; M_v = 2 (2nx+1)(2ny+1) dofs."""

    def __init__(self, mesh: StructuredQuadMesh):
        self.mesh = mesh
        self.nodes_x = 2 * mesh.nx + 1
        self.nodes_y = 2 * mesh.ny + 1
        self.nnodes = self.nodes_x * self.nodes_y
        self.ndof = 2 * self.nnodes

    @cached_property
    def node_coords(self) -> np.ndarray:
        """(nnodes, 2), nodes on the half-cell grid in row-major y, x order."""
        xs = self.mesh.x0 + 0.5 * self.mesh.hx * np.arange(self.nodes_x)
        ys = self.mesh.y0 + 0.5 * self.mesh.hy * np.arange(self.nodes_y)
        xx, yy = np.meshgrid(xs, ys)
        return np.column_stack([xx.ravel(), yy.ravel()])

    @cached_property
    def cell_nodes(self) -> np.ndarray:
        """Global node indices of each cell's 3x3 node patch, (ncells, 9)."""
        mesh = self.mesh
        out = np.empty((mesh.ncells, 9), dtype=int)
        for c in range(mesh.ncells):
            ci, cj = c % mesh.nx, c // mesh.nx
            base_x, base_y = 2 * ci, 2 * cj
            out[c] = [
                (base_y + jy) * self.nodes_x + (base_x + ix)
                for jy in range(3)
                for ix in range(3)
            ]
        return out

    def grad_scale(self) -> np.ndarray:
        return np.array([1.0 / self.mesh.hx, 1.0 / self.mesh.hy])


class PressureSpace:
    """Discontinuous P1 pressure; 3 dofs per cell, M_p = 3 ncells."""

    def __init__(self, mesh: StructuredQuadMesh):
        self.mesh = mesh
        self.ndof = 3 * mesh.ncells

    @cached_property
    def cell_dofs(self) -> np.ndarray:
        return (3 * np.arange(self.mesh.ncells)[:, None] + np.arange(3)[None, :])


def dof_counts(mesh: StructuredQuadMesh) -> tuple[int, int]:
    """Closed-form (M_v, M_p) for the Q2/P1disc pair on a structured mesh."""
    return 2 * (2 * mesh.nx + 1) * (2 * mesh.ny + 1), 3 * mesh.ncells


def shape_eval(space, cell: int, point) -> tuple[np.ndarray, np.ndarray]:
    """Values and physical gradients of all local basis functions at a
    reference-cell point."""
    pt = np.atleast_2d(np.asarray(point, dtype=float))
    mesh = space.mesh
    scale = np.array([1.0 / mesh.hx, 1.0 / mesh.hy])
    if isinstance(space, VelocitySpace):
        return q2_shapes(pt)[:, 0], q2_grads(pt)[:, 0, :] * scale
    if isinstance(space, PressureSpace):
        return p1disc_shapes(pt)[:, 0], p1disc_grads_ref() * scale
    raise TypeError(f"unsupported space {type(space)!r}")


def interpolate_velocity(space: VelocitySpace, fn, t: float) -> np.ndarray:
    """Nodal interpolation of a vector function fn(x, y, t), flat layout."""
    xy = space.node_coords
    vals = np.asarray(fn(xy[:, 0], xy[:, 1], t), dtype=float)
    if vals.shape != (space.nnodes, 2):
        vals = np.broadcast_to(np.moveaxis(vals, 0, -1), (space.nnodes, 2))
    return vals.reshape(-1).copy()


def interpolate_pressure(space: PressureSpace, fn, t: float, quad: SpatialQuadrature | None = None) -> np.ndarray:
    """Cellwise L2 projection of a scalar function onto the P1disc basis."""
    quad = quad or tensor_gauss(4)
    mesh = space.mesh
    shapes = p1disc_shapes(quad.points)  # (3, nq)
    # Reference mass of {1, x-1/2, y-1/2} is diag(1, 1/12, 1/12).
    inv_mass = np.array([1.0, 12.0, 12.0])
    origins = mesh.cell_origins
    pts = origins[:, None, :] + quad.points[None, :, :] * np.array([mesh.hx, mesh.hy])
    vals = np.asarray(fn(pts[..., 0], pts[..., 1], t), dtype=float)
    rhs = np.einsum("q,jq,cq->cj", quad.weights, shapes, vals)
    return (rhs * inv_mass).reshape(-1)


def velocity_mass(space: VelocitySpace, quad: SpatialQuadrature | None = None) -> sp.csr_matrix:
    """Consistent Q2 vector mass matrix, (M_v, M_v) sparse."""
    quad = quad or tensor_gauss(4)
    mesh = space.mesh
    shapes = q2_shapes(quad.points)
    area = mesh.hx * mesh.hy
    local = area * np.einsum("q,aq,bq->ab", quad.weights, shapes, shapes)  # (9, 9)
    cn = space.cell_nodes
    rows = np.repeat(cn, 9, axis=1).ravel()
    cols = np.tile(cn, (1, 9)).ravel()
    vals = np.tile(local.ravel(), mesh.ncells)
    m_node = sp.coo_matrix((vals, (rows, cols)), shape=(space.nnodes, space.nnodes)).tocsr()
    return sp.kron(m_node, sp.identity(2, format="csr"), format="csr")


def pressure_mass_diag(space: PressureSpace) -> np.ndarray:
    """Diagonal of the P1disc mass matrix (the basis is L2-orthogonal)."""
    area = space.mesh.hx * space.mesh.hy
    return np.tile(area * np.array([1.0, 1.0 / 12.0, 1.0 / 12.0]), space.mesh.ncells)


def _locate(mesh: StructuredQuadMesh, x, y):
    """Containing cell and reference coordinates for physical points."""
    ci = np.clip(((x - mesh.x0) / mesh.hx).astype(int), 0, mesh.nx - 1)
    cj = np.clip(((y - mesh.y0) / mesh.hy).astype(int), 0, mesh.ny - 1)
    xi = (x - mesh.x0) / mesh.hx - ci
    eta = (y - mesh.y0) / mesh.hy - cj
    return cj * mesh.nx + ci, np.column_stack([xi, eta])


def evaluate_velocity(space: VelocitySpace, coeffs: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Evaluate a velocity coefficient vector at physical points, (npts, 2)."""
    pts = np.atleast_2d(points)
    cells, ref = _locate(space.mesh, pts[:, 0], pts[:, 1])
    shapes = q2_shapes(ref)  # (9, npts)
    local = coeffs.reshape(-1, 2)[space.cell_nodes[cells]]  # (npts, 9, 2)
    return np.einsum("ap,pad->pd", shapes, local)


def evaluate_velocity_gradient(space: VelocitySpace, coeffs: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Gradient dv_d/dx_k of a velocity field at physical points, (npts, 2, 2)."""
    pts = np.atleast_2d(points)
    cells, ref = _locate(space.mesh, pts[:, 0], pts[:, 1])
    grads = q2_grads(ref) * space.grad_scale()  # (9, npts, 2)
    local = coeffs.reshape(-1, 2)[space.cell_nodes[cells]]
    return np.einsum("apk,pad->pdk", grads, local)


def evaluate_pressure(space: PressureSpace, coeffs: np.ndarray, points: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(points)
    cells, ref = _locate(space.mesh, pts[:, 0], pts[:, 1])
    shapes = p1disc_shapes(ref)  # (3, npts)
    local = coeffs.reshape(-1, 3)[cells]  # (npts, 3)
    return np.einsum("jp,pj->p", shapes, local)
