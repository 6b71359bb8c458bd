"""Spatial residual and Jacobian blocks at one temporal node.

The spatial semilinear form combines the shear-thinning viscous term, the
divergence-form convective term with its full-boundary flux, the mixed
pressure coupling, weak Dirichlet (Nitsche) boundary terms with viscous
coefficients frozen at a fixed lifting of the boundary data, and
convection-aligned interior-penalty (CIP) stabilization.

Residual convention: right-hand side minus left-hand side, so the residual
at a state u is  r(u) = <f, w> + B_gamma(g_hat, w) - A_gamma(u)(w)  tested
against every basis function, excluding the time derivative and the
inter-step jump (those belong to the slab operator).  The Jacobian
convention is J = D[A_gamma] = -Dr, so central differences of the residual
approximate -J.

The linearization variants differ only in the constitutive tangent used for
the viscous volume term and the matching state-dependent boundary flux; the
inflow weight (v.n)^- and the CIP weight |v.n_F| are evaluated from the
lagged iterate and never differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import constitutive as law
from .constitutive import ModelParams, TangentVariant
from .femspace import (
    PressureSpace,
    VelocitySpace,
    gauss_1d,
    p1disc_shapes,
    pressure_mass_diag,
    q2_grads,
    q2_shapes,
    tensor_gauss,
    velocity_mass,
)
from .mesh import DIRICHLET, StructuredQuadMesh, all_dirichlet, boundary_tag_assign

__all__ = [
    "DiscretizationConfig",
    "SpatialState",
    "ProblemData",
    "Discretization",
    "spatial_residual",
    "SpatialLinearization",
    "spatial_jacobian_apply",
    "spatial_jacobian_assemble",
    "nitsche_boundary_vector",
    "coercivity_check",
]

_I2 = np.eye(2)


@dataclass
class DiscretizationConfig:
    """Stabilization and boundary-condition parameters.

    g_hat is the velocity-space coefficient vector of the Dirichlet lifting
    (None means the zero lifting); the Nitsche coefficients eta_D and the
    frozen stress derivative are evaluated at its symmetric gradient.  The
    enable_* switches are diagnostic hooks that drop whole term groups, e.g.
    for the pure-mass ODE reduction or the Stokes limit.
    """

    gamma1: float = 1.0e3
    gamma2: float = 1.0e3
    gamma_cip: float = 1.0
    g_hat: np.ndarray | None = None
    enable_viscous: bool = True
    enable_convection: bool = True
    enable_pressure: bool = True

    def __post_init__(self):
        if self.gamma1 <= 0.0 or self.gamma2 <= 0.0:
            raise ValueError("Nitsche penalties gamma1, gamma2 must be positive")
        if self.gamma_cip < 0.0:
            raise ValueError("gamma_cip must be >= 0")


@dataclass
class SpatialState:
    """Velocity/pressure coefficients at one temporal node time t."""

    v: np.ndarray
    pi: np.ndarray
    t: float


@dataclass
class ProblemData:
    """Body force f(x,y,t) -> (...,2), Dirichlet trace g_d, initial velocity v0."""

    f: object
    g_d: object
    v0: object


@dataclass
class _SideGroup:
    side: str
    cells: np.ndarray
    normal: np.ndarray
    h: float  # face length; doubles as the local boundary mesh size
    w: np.ndarray  # (nfq,) 1D weights scaled by face length
    NV: np.ndarray  # (9, nfq)
    dNV: np.ndarray  # (9, nfq, 2) physical gradients
    NP: np.ndarray  # (3, nfq)
    coords: np.ndarray  # (nf, nfq, 2)
    dmask: np.ndarray  # (nf,) True on Dirichlet faces

    @property
    def gan(self) -> np.ndarray:
        """(g_a . n) for every shape at every face point, (9, nfq)."""
        return self.dNV @ self.normal


@dataclass
class _CipGroup:
    cells_l: np.ndarray
    cells_r: np.ndarray
    normal: np.ndarray
    h: float
    w: np.ndarray
    NV_l: np.ndarray
    dNV_l: np.ndarray
    dNV_r: np.ndarray


class Discretization:
    """Mesh-bound Q2/P1disc discretization with precomputed shape tables.

    Untagged meshes are treated as all-Dirichlet.  Volume quadrature is a
    q x q tensor Gauss rule (default q = 4, over-integrating every
    polynomial bilinear form of the pair); faces use q-point 1D Gauss.
    """

    def __init__(self, mesh: StructuredQuadMesh, quad_order: int = 4, face_quad_order: int = 4):
        if mesh.boundary_tags is None:
            mesh = boundary_tag_assign(mesh, all_dirichlet)
        self.mesh = mesh
        self.velocity = VelocitySpace(mesh)
        self.pressure = PressureSpace(mesh)
        self.quad = tensor_gauss(quad_order)
        self.face_q = face_quad_order
        self._build_volume_tables()
        self._build_side_groups()
        self._build_cip_groups()

    @property
    def n_velocity(self) -> int:
        return self.velocity.ndof

    @property
    def n_pressure(self) -> int:
        return self.pressure.ndof

    @property
    def ndof(self) -> int:
        return self.n_velocity + self.n_pressure

    @property
    def all_dirichlet(self) -> bool:
        return all(g.dmask.all() for g in self.side_groups)

    @property
    def mass_v(self) -> sp.csr_matrix:
        if not hasattr(self, "_mass_v"):
            self._mass_v = velocity_mass(self.velocity, self.quad)
        return self._mass_v

    @property
    def mass_p_diag(self) -> np.ndarray:
        if not hasattr(self, "_mass_p"):
            self._mass_p = pressure_mass_diag(self.pressure)
        return self._mass_p

    def _build_volume_tables(self):
        mesh = self.mesh
        q = self.quad
        self.NV = q2_shapes(q.points)
        self.dNV = q2_grads(q.points) * self.velocity.grad_scale()
        self.NP = p1disc_shapes(q.points)
        self.wq = q.weights * (mesh.hx * mesh.hy)
        cell_size = np.array([mesh.hx, mesh.hy])
        self.cell_qpoints = mesh.cell_origins[:, None, :] + q.points[None, :, :] * cell_size
        self.cell_nodes = self.velocity.cell_nodes
        self.cell_vdofs = (2 * self.cell_nodes[:, :, None] + np.arange(2)).reshape(-1, 18)
        self.cell_pdofs = self.pressure.cell_dofs
        # Spatial patch dofs of one cell: 18 velocity then 3 pressure ids.
        self.cell_patch_dofs = np.hstack([self.cell_vdofs, self.n_velocity + self.cell_pdofs])

    def _edge_points(self, side: str, s: np.ndarray) -> np.ndarray:
        if side == "bottom":
            return np.column_stack([s, np.zeros_like(s)])
        if side == "right":
            return np.column_stack([np.ones_like(s), s])
        if side == "top":
            return np.column_stack([s, np.ones_like(s)])
        if side == "left":
            return np.column_stack([np.zeros_like(s), s])
        raise ValueError(side)

    def _build_side_groups(self):
        mesh = self.mesh
        s, w1 = gauss_1d(self.face_q)
        scale = self.velocity.grad_scale()
        tags = mesh.boundary_tags
        normals = {
            "bottom": np.array([0.0, -1.0]),
            "right": np.array([1.0, 0.0]),
            "top": np.array([0.0, 1.0]),
            "left": np.array([-1.0, 0.0]),
        }
        offset = 0
        self.side_groups: list[_SideGroup] = []
        for side in ("bottom", "right", "top", "left"):
            if side in ("bottom", "top"):
                j = 0 if side == "bottom" else mesh.ny - 1
                cells = np.array([mesh.cell_index(i, j) for i in range(mesh.nx)])
                h = mesh.hx
            else:
                i = mesh.nx - 1 if side == "right" else 0
                cells = np.array([mesh.cell_index(i, j) for j in range(mesh.ny)])
                h = mesh.hy
            pts = self._edge_points(side, s)
            cell_size = np.array([mesh.hx, mesh.hy])
            coords = mesh.cell_origins[cells][:, None, :] + pts[None, :, :] * cell_size
            dmask = np.array([t == DIRICHLET for t in tags[offset : offset + cells.size]])
            offset += cells.size
            self.side_groups.append(
                _SideGroup(
                    side=side,
                    cells=cells,
                    normal=normals[side],
                    h=h,
                    w=w1 * h,
                    NV=q2_shapes(pts),
                    dNV=q2_grads(pts) * scale,
                    NP=p1disc_shapes(pts),
                    coords=coords,
                    dmask=dmask,
                )
            )

    def _build_cip_groups(self):
        mesh = self.mesh
        s, w1 = gauss_1d(self.face_q)
        scale = self.velocity.grad_scale()
        self.cip_groups: list[_CipGroup] = []
        if mesh.nx > 1:
            cl = np.array([mesh.cell_index(i, j) for j in range(mesh.ny) for i in range(mesh.nx - 1)])
            self.cip_groups.append(
                _CipGroup(
                    cells_l=cl,
                    cells_r=cl + 1,
                    normal=np.array([1.0, 0.0]),
                    h=mesh.hy,
                    w=w1 * mesh.hy,
                    NV_l=q2_shapes(self._edge_points("right", s)),
                    dNV_l=q2_grads(self._edge_points("right", s)) * scale,
                    dNV_r=q2_grads(self._edge_points("left", s)) * scale,
                )
            )
        if mesh.ny > 1:
            cl = np.array([mesh.cell_index(i, j) for j in range(mesh.ny - 1) for i in range(mesh.nx)])
            self.cip_groups.append(
                _CipGroup(
                    cells_l=cl,
                    cells_r=cl + mesh.nx,
                    normal=np.array([0.0, 1.0]),
                    h=mesh.hx,
                    w=w1 * mesh.hx,
                    NV_l=q2_shapes(self._edge_points("top", s)),
                    dNV_l=q2_grads(self._edge_points("top", s)) * scale,
                    dNV_r=q2_grads(self._edge_points("bottom", s)) * scale,
                )
            )

    def velocity_at_cells(self, vflat: np.ndarray) -> np.ndarray:
        return vflat.reshape(-1, 2)[self.cell_nodes]

    def velocity_on_quad(self, vflat: np.ndarray):
        """State velocity (nc,nq,2) and gradient (nc,nq,2,2), grad[...,d,k] = d_k v_d."""
        local = self.velocity_at_cells(vflat)
        v = np.einsum("aq,cad->cqd", self.NV, local)
        g = np.einsum("aqk,cad->cqdk", self.dNV, local)
        return v, g

    def pressure_on_quad(self, pflat: np.ndarray) -> np.ndarray:
        return np.einsum("jq,cj->cq", self.NP, pflat.reshape(-1, 3))

    def side_fields(self, grp: _SideGroup, vflat: np.ndarray):
        local = self.velocity_at_cells(vflat)[grp.cells]
        v = np.einsum("aq,fad->fqd", grp.NV, local)
        g = np.einsum("aqk,fad->fqdk", grp.dNV, local)
        return v, g


# -- small tensor helpers (symmetric 2x2 tensors as (..., 3) components) ----


def _sym3(grad: np.ndarray) -> np.ndarray:
    return np.stack(
        [grad[..., 0, 0], grad[..., 1, 1], 0.5 * (grad[..., 0, 1] + grad[..., 1, 0])],
        axis=-1,
    )


def _norm_sq3(a3: np.ndarray) -> np.ndarray:
    return a3[..., 0] ** 2 + a3[..., 1] ** 2 + 2.0 * a3[..., 2] ** 2


def _dot3(a3: np.ndarray, b3: np.ndarray) -> np.ndarray:
    return a3[..., 0] * b3[..., 0] + a3[..., 1] * b3[..., 1] + 2.0 * a3[..., 2] * b3[..., 2]


def _mat(a3: np.ndarray) -> np.ndarray:
    out = np.empty(a3.shape[:-1] + (2, 2))
    out[..., 0, 0] = a3[..., 0]
    out[..., 1, 1] = a3[..., 1]
    out[..., 0, 1] = a3[..., 2]
    out[..., 1, 0] = a3[..., 2]
    return out


def _tensor_vec(a3: np.ndarray, vec: np.ndarray) -> np.ndarray:
    out = np.empty(a3.shape[:-1] + (2,))
    out[..., 0] = a3[..., 0] * vec[..., 0] + a3[..., 2] * vec[..., 1]
    out[..., 1] = a3[..., 2] * vec[..., 0] + a3[..., 1] * vec[..., 1]
    return out


def _neg_part(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.abs(x) - x)


def _lifting_coeffs(disc, grp, config, params):
    """Lifting trace, symmetric gradient, and frozen viscous coefficients at
    the face quadrature points of one side group."""
    nf, nfq = grp.cells.size, grp.w.size
    if config.g_hat is None:
        gh = np.zeros((nf, nfq, 2))
        dgh3 = np.zeros((nf, nfq, 3))
    else:
        gh, ggrad = disc.side_fields(grp, config.g_hat)
        dgh3 = _sym3(ggrad)
    a_sq = _norm_sq3(dgh3)
    eta_d = law.eta_field(params, a_sq)
    beta_d = law.rank_one_coeff_exact(params, a_sq)
    return gh, dgh3, eta_d, beta_d


def _bsp_vector(grp, eta_d, beta_d, dgh3, vf):
    """Velocity-test rows of <v, DS(Dg_hat)[D psi] n> for a field v at face
    points; returns (nf, 9, 2) quadrature-summed contributions."""
    n = grp.normal
    gan = grp.gan
    dgn = _tensor_vec(dgh3, n)
    dgga = np.einsum("fqde,aqe->fqad", _mat(dgh3), grp.dNV)
    bs = 0.5 * eta_d[..., None, None] * (
        np.einsum("aq,fqd->fqad", gan, vf)
        + np.einsum("fqa,d->fqad", np.einsum("aqe,fqe->fqa", grp.dNV, vf), n)
    )
    bs = bs + (beta_d * np.einsum("fqd,fqd->fq", dgn, vf))[..., None, None] * dgga
    return np.einsum("q,fqad->fad", grp.w, bs)


def nitsche_boundary_vector(
    disc: Discretization,
    params: ModelParams,
    config: DiscretizationConfig,
    vcoeffs: np.ndarray | None,
) -> np.ndarray:
    """Assemble B_gamma(v, .) over all Dirichlet faces as a residual-sized
    vector.

    The first argument enters only through its boundary trace; the viscous
    coefficients are frozen at the lifting stored in `config`.  The residual
    right-hand side is this vector evaluated at the lifting itself.
    """
    r_v = np.zeros((disc.velocity.nnodes, 2))
    r_p = np.zeros((disc.mesh.ncells, 3))
    if vcoeffs is None:
        return np.concatenate([r_v.reshape(-1), r_p.reshape(-1)])
    for grp in disc.side_groups:
        if not np.any(grp.dmask):
            continue
        dm = grp.dmask.astype(float)
        vf, _ = disc.side_fields(grp, vcoeffs)
        n = grp.normal
        vn = vf @ n
        bc = np.zeros((grp.cells.size, 9, 2))
        bp = np.zeros((grp.cells.size, 3))
        gh, dgh3, eta_d, beta_d = _lifting_coeffs(disc, grp, config, params)
        if config.enable_viscous:
            bc -= _bsp_vector(grp, eta_d, beta_d, dgh3, vf)
            pen = config.gamma1 / grp.h * eta_d[..., None] * vf
            pen = pen + config.gamma2 / grp.h * vn[..., None] * n
            bc += np.einsum("q,fqd,aq->fad", grp.w, pen, grp.NV)
        if config.enable_convection:
            bc -= np.einsum("q,fq,fqd,aq->fad", grp.w, _neg_part(vn), vf, grp.NV)
        if config.enable_pressure:
            bp += np.einsum("q,fq,jq->fj", grp.w, vn, grp.NP)
        np.add.at(r_v, disc.cell_nodes[grp.cells], bc * dm[:, None, None])
        np.add.at(r_p, grp.cells, bp * dm[:, None])
    return np.concatenate([r_v.reshape(-1), r_p.reshape(-1)])


def _cip_term(disc, config, adv_v, arg_v, r_v):
    """Accumulate -s_CIP(adv; arg, .) into the velocity residual r_v."""
    for grp in disc.cip_groups:
        n = grp.normal
        local_l = disc.velocity_at_cells(arg_v)[grp.cells_l]
        local_r = disc.velocity_at_cells(arg_v)[grp.cells_r]
        local_a = disc.velocity_at_cells(adv_v)[grp.cells_l]
        gl = np.einsum("aqk,fad,k->fqd", grp.dNV_l, local_l, n)
        gr = np.einsum("aqk,fad,k->fqd", grp.dNV_r, local_r, n)
        jump = gl - gr
        vhat_n = np.abs(np.einsum("aq,fad,d->fq", grp.NV_l, local_a, n))
        coef = config.gamma_cip * grp.h**2
        gan_l = grp.dNV_l @ n
        gan_r = grp.dNV_r @ n
        cl = -coef * np.einsum("q,fq,fqd,aq->fad", grp.w, vhat_n, jump, gan_l)
        cr = coef * np.einsum("q,fq,fqd,aq->fad", grp.w, vhat_n, jump, gan_r)
        np.add.at(r_v, disc.cell_nodes[grp.cells_l], cl)
        np.add.at(r_v, disc.cell_nodes[grp.cells_r], cr)


def spatial_residual(
    disc: Discretization,
    state: SpatialState,
    data: ProblemData,
    params: ModelParams,
    config: DiscretizationConfig,
    advect: SpatialState | None = None,
) -> np.ndarray:
    """Assembled spatial residual <f,w> + B_gamma(g_hat,w) - A_gamma(u)(w).

    `advect` supplies the lagged field for the CIP and inflow weights and
    defaults to the state itself.
    """
    if params.delta <= 0.0:
        raise law.ConstitutiveDomainError("spatial residual requires delta > 0")
    advect = advect if advect is not None else state
    r_v = np.zeros((disc.velocity.nnodes, 2))
    r_p = np.zeros((disc.mesh.ncells, 3))

    # Volume terms.
    vq, gq = disc.velocity_on_quad(state.v)
    a3 = _sym3(gq)
    xq = disc.cell_qpoints
    fq = np.asarray(data.f(xq[..., 0], xq[..., 1], state.t), dtype=float)
    contrib = np.einsum("q,cqd,aq->cad", disc.wq, fq, disc.NV)
    if config.enable_viscous:
        s3 = law.eta_field(params, _norm_sq3(a3))[..., None] * a3
        sga = np.einsum("cqde,aqe->cqad", _mat(s3), disc.dNV)
        contrib -= np.einsum("q,cqad->cad", disc.wq, sga)
    if config.enable_convection:
        contrib += np.einsum("q,cqd,cqe,aqe->cad", disc.wq, vq, vq, disc.dNV)
    if config.enable_pressure:
        pq = disc.pressure_on_quad(state.pi)
        contrib += np.einsum("q,cq,aqd->cad", disc.wq, pq, disc.dNV)
        divv = gq[..., 0, 0] + gq[..., 1, 1]
        r_p += np.einsum("q,cq,jq->cj", disc.wq, divv, disc.NP)
    np.add.at(r_v, disc.cell_nodes, contrib)

    # Boundary terms of -A_gamma(u)(w).
    for grp in disc.side_groups:
        vf, gf = disc.side_fields(grp, state.v)
        n = grp.normal
        vn = vf @ n
        advf, _ = disc.side_fields(grp, advect.v)
        adv_neg = _neg_part(advf @ n)
        bc = np.zeros((grp.cells.size, 9, 2))
        bp = np.zeros((grp.cells.size, 3))
        if config.enable_convection:
            # Divergence-form convective flux acts on the full boundary.
            bc -= np.einsum("q,fq,fqd,aq->fad", grp.w, vn, vf, grp.NV)
        if np.any(grp.dmask):
            dm = grp.dmask.astype(float)
            gh, dgh3, eta_d, beta_d = _lifting_coeffs(disc, grp, config, params)
            af3 = _sym3(gf)
            db = np.zeros_like(bc)
            dbp = np.zeros_like(bp)
            if config.enable_viscous:
                sf3 = law.eta_field(params, _norm_sq3(af3))[..., None] * af3
                db += np.einsum("q,fqd,aq->fad", grp.w, _tensor_vec(sf3, n), grp.NV)
                db += _bsp_vector(grp, eta_d, beta_d, dgh3, vf)
                pen = config.gamma1 / grp.h * eta_d[..., None] * vf
                pen = pen + config.gamma2 / grp.h * vn[..., None] * n
                db -= np.einsum("q,fqd,aq->fad", grp.w, pen, grp.NV)
            if config.enable_convection:
                db += np.einsum("q,fq,fqd,aq->fad", grp.w, adv_neg, vf, grp.NV)
            if config.enable_pressure:
                pf = np.einsum("jq,fj->fq", grp.NP, state.pi.reshape(-1, 3)[grp.cells])
                db -= np.einsum("q,fq,aq->fa", grp.w, pf, grp.NV)[..., None] * n
                dbp -= np.einsum("q,fq,jq->fj", grp.w, vn, grp.NP)
            bc += db * dm[:, None, None]
            bp += dbp * dm[:, None]
        np.add.at(r_v, disc.cell_nodes[grp.cells], bc)
        np.add.at(r_p, grp.cells, bp)

    # CIP stabilization, lagged advective weight.
    if config.enable_convection and config.gamma_cip > 0.0:
        _cip_term(disc, config, advect.v, state.v, r_v)

    res = np.concatenate([r_v.reshape(-1), r_p.reshape(-1)])
    if config.g_hat is not None:
        res += nitsche_boundary_vector(disc, params, config, config.g_hat)
    return res


class SpatialLinearization:
    """Frozen-coefficient spatial Jacobian J_mu at one node state.

    Evaluates the matrix-free action J @ x and, on demand, the assembled
    sparse matrix; both paths draw on identical quadrature-point coefficient
    arrays, so they agree to rounding.
    """

    def __init__(
        self,
        disc: Discretization,
        state: SpatialState,
        variant: TangentVariant,
        params: ModelParams,
        config: DiscretizationConfig,
        advect: SpatialState | None = None,
    ):
        if params.delta <= 0.0:
            raise law.ConstitutiveDomainError("jacobian requires delta > 0")
        advect = advect if advect is not None else state
        self.disc = disc
        self.variant = variant
        self.params = params
        self.config = config

        vq, gq = disc.velocity_on_quad(state.v)
        self.vm = vq
        a3 = _sym3(gq)
        self.a3 = a3
        self.eta, self.gamma = law.tangent_coeffs_field(variant, params, _norm_sq3(a3))
        self.amat = _mat(a3)

        self.sides = []
        for grp in disc.side_groups:
            vf, gf = disc.side_fields(grp, state.v)
            af3 = _sym3(gf)
            eta_f, gamma_f = law.tangent_coeffs_field(variant, params, _norm_sq3(af3))
            advf, _ = disc.side_fields(grp, advect.v)
            gh, dgh3, eta_d, beta_d = _lifting_coeffs(disc, grp, config, params)
            self.sides.append(
                dict(
                    grp=grp,
                    vf=vf,
                    vn=vf @ grp.normal,
                    wneg=_neg_part(advf @ grp.normal),
                    af3=af3,
                    eta_f=eta_f,
                    gamma_f=gamma_f,
                    dgh3=dgh3,
                    eta_d=eta_d,
                    beta_d=beta_d,
                )
            )

        self.cip = []
        if config.enable_convection and config.gamma_cip > 0.0:
            for grp in disc.cip_groups:
                local_a = disc.velocity_at_cells(advect.v)[grp.cells_l]
                vhat_n = np.abs(np.einsum("aq,fad,d->fq", grp.NV_l, local_a, grp.normal))
                self.cip.append((grp, vhat_n))

    # -- matrix-free action ------------------------------------------------
    def apply(self, x: np.ndarray) -> np.ndarray:
        disc, config = self.disc, self.config
        mv = disc.n_velocity
        du = x[:mv]
        dp = x[mv:]
        y_v = np.zeros((disc.velocity.nnodes, 2))
        y_p = np.zeros((disc.mesh.ncells, 3))

        duq, dgq = disc.velocity_on_quad(du)
        da3 = _sym3(dgq)
        contrib = np.zeros((disc.mesh.ncells, 9, 2))
        if config.enable_viscous:
            t3 = self.eta[..., None] * da3 + (self.gamma * _dot3(self.a3, da3))[..., None] * self.a3
            contrib += np.einsum("q,cqde,aqe->cad", disc.wq, _mat(t3), disc.dNV)
        if config.enable_convection:
            contrib -= np.einsum("q,cqd,cqe,aqe->cad", disc.wq, duq, self.vm, disc.dNV)
            contrib -= np.einsum("q,cqd,cqe,aqe->cad", disc.wq, self.vm, duq, disc.dNV)
        if config.enable_pressure:
            dpq = disc.pressure_on_quad(dp)
            contrib -= np.einsum("q,cq,aqd->cad", disc.wq, dpq, disc.dNV)
            divdu = dgq[..., 0, 0] + dgq[..., 1, 1]
            y_p -= np.einsum("q,cq,jq->cj", disc.wq, divdu, disc.NP)
        np.add.at(y_v, disc.cell_nodes, contrib)

        for side in self.sides:
            grp = side["grp"]
            n = grp.normal
            duf, dgf = disc.side_fields(grp, du)
            dun = duf @ n
            bc = np.zeros((grp.cells.size, 9, 2))
            bp = np.zeros((grp.cells.size, 3))
            if config.enable_convection:
                bc += np.einsum("q,fq,fqd,aq->fad", grp.w, side["vn"], duf, grp.NV)
                bc += np.einsum("q,fq,fqd,aq->fad", grp.w, dun, side["vf"], grp.NV)
            if np.any(grp.dmask):
                dm = grp.dmask.astype(float)
                db = np.zeros_like(bc)
                dbp = np.zeros_like(bp)
                da3f = _sym3(dgf)
                if config.enable_viscous:
                    t3f = side["eta_f"][..., None] * da3f
                    t3f += (side["gamma_f"] * _dot3(side["af3"], da3f))[..., None] * side["af3"]
                    db -= np.einsum("q,fqd,aq->fad", grp.w, _tensor_vec(t3f, n), grp.NV)
                    db -= _bsp_vector(grp, side["eta_d"], side["beta_d"], side["dgh3"], duf)
                    pen = config.gamma1 / grp.h * side["eta_d"][..., None] * duf
                    pen = pen + config.gamma2 / grp.h * dun[..., None] * n
                    db += np.einsum("q,fqd,aq->fad", grp.w, pen, grp.NV)
                if config.enable_convection:
                    db -= np.einsum("q,fq,fqd,aq->fad", grp.w, side["wneg"], duf, grp.NV)
                if config.enable_pressure:
                    dpf = np.einsum("jq,fj->fq", grp.NP, dp.reshape(-1, 3)[grp.cells])
                    db += np.einsum("q,fq,aq->fa", grp.w, dpf, grp.NV)[..., None] * n
                    dbp += np.einsum("q,fq,jq->fj", grp.w, dun, grp.NP)
                bc += db * dm[:, None, None]
                bp += dbp * dm[:, None]
            np.add.at(y_v, disc.cell_nodes[grp.cells], bc)
            np.add.at(y_p, grp.cells, bp)

        for grp, vhat_n in self.cip:
            n = grp.normal
            local_l = disc.velocity_at_cells(du)[grp.cells_l]
            local_r = disc.velocity_at_cells(du)[grp.cells_r]
            gl = np.einsum("aqk,fad,k->fqd", grp.dNV_l, local_l, n)
            gr = np.einsum("aqk,fad,k->fqd", grp.dNV_r, local_r, n)
            jump = gl - gr
            coef = config.gamma_cip * grp.h**2
            cl = coef * np.einsum("q,fq,fqd,aq->fad", grp.w, vhat_n, jump, grp.dNV_l @ n)
            cr = -coef * np.einsum("q,fq,fqd,aq->fad", grp.w, vhat_n, jump, grp.dNV_r @ n)
            np.add.at(y_v, disc.cell_nodes[grp.cells_l], cl)
            np.add.at(y_v, disc.cell_nodes[grp.cells_r], cr)

        return np.concatenate([y_v.reshape(-1), y_p.reshape(-1)])

    # -- sparse assembly -----------------------------------------------------
    def assemble(self) -> sp.csr_matrix:
        disc, config = self.disc, self.config
        nc = disc.mesh.ncells
        rows, cols, vals = [], [], []

        def push(block, rdofs, cdofs):
            nb, nr, ncol = block.shape
            rows.append(np.broadcast_to(rdofs[:, :, None], block.shape).ravel())
            cols.append(np.broadcast_to(cdofs[:, None, :], block.shape).ravel())
            vals.append(block.ravel())

        # Volume velocity-velocity block, (nc, 9, 2, 9, 2).
        vv = np.zeros((nc, 9, 2, 9, 2))
        if config.enable_viscous:
            t1 = np.einsum("q,cq,aqk,bqk->cab", disc.wq, self.eta, disc.dNV, disc.dNV)
            vv += 0.5 * t1[:, :, None, :, None] * _I2[None, None, :, None, :]
            vv += 0.5 * np.einsum("q,cq,aqe,bqd->cadbe", disc.wq, self.eta, disc.dNV, disc.dNV)
            ag = np.einsum("cqde,aqe->cqad", self.amat, disc.dNV)
            vv += np.einsum("q,cq,cqad,cqbe->cadbe", disc.wq, self.gamma, ag, ag)
        if config.enable_convection:
            c1 = np.einsum("q,cqe,aqe,bq->cab", disc.wq, self.vm, disc.dNV, disc.NV)
            vv -= c1[:, :, None, :, None] * _I2[None, None, :, None, :]
            vv -= np.einsum("q,cqd,aqe,bq->cadbe", disc.wq, self.vm, disc.dNV, disc.NV)
        push(vv.reshape(nc, 18, 18), disc.cell_vdofs, disc.cell_vdofs)

        if config.enable_pressure:
            vp = -np.einsum("q,aqd,jq->adj", disc.wq, disc.dNV, disc.NP)
            vp = np.broadcast_to(vp.reshape(1, 18, 3), (nc, 18, 3))
            push(np.ascontiguousarray(vp), disc.cell_vdofs, disc.n_velocity + disc.cell_pdofs)
            pv = -np.einsum("q,jq,bqe->jbe", disc.wq, disc.NP, disc.dNV)
            pv = np.broadcast_to(pv.reshape(1, 3, 18), (nc, 3, 18))
            push(np.ascontiguousarray(pv), disc.n_velocity + disc.cell_pdofs, disc.cell_vdofs)

        for side in self.sides:
            grp = side["grp"]
            nf = grp.cells.size
            n = grp.normal
            vdofs = disc.cell_vdofs[grp.cells]
            pdofs = disc.n_velocity + disc.cell_pdofs[grp.cells]
            bvv = np.zeros((nf, 9, 2, 9, 2))
            if config.enable_convection:
                b1 = np.einsum("q,fq,aq,bq->fab", grp.w, side["vn"], grp.NV, grp.NV)
                bvv += b1[:, :, None, :, None] * _I2[None, None, :, None, :]
                bvv += np.einsum("q,fqd,aq,bq,e->fadbe", grp.w, side["vf"], grp.NV, grp.NV, n)
            if np.any(grp.dmask):
                dm = grp.dmask.astype(float)
                dvv = np.zeros_like(bvv)
                gan = grp.gan
                if config.enable_viscous:
                    gbn = gan
                    m1 = np.einsum("q,fq,aq,bq->fab", grp.w, side["eta_f"], grp.NV, gbn)
                    dvv -= 0.5 * m1[:, :, None, :, None] * _I2[None, None, :, None, :]
                    dvv -= 0.5 * np.einsum(
                        "q,fq,aq,bqd,e->fadbe", grp.w, side["eta_f"], grp.NV, grp.dNV, n
                    )
                    an = _tensor_vec(side["af3"], n)
                    agb = np.einsum("fqek,bqk->fqbe", _mat(side["af3"]), grp.dNV)
                    dvv -= np.einsum(
                        "q,fq,aq,fqd,fqbe->fadbe", grp.w, side["gamma_f"], grp.NV, an, agb
                    )
                    # B^s rows: frozen stress derivative acting on the test side.
                    s1 = np.einsum("q,fq,aq,bq->fab", grp.w, side["eta_d"], gan, grp.NV)
                    dvv -= 0.5 * s1[:, :, None, :, None] * _I2[None, None, :, None, :]
                    dvv -= 0.5 * np.einsum(
                        "q,fq,aqe,bq,d->fadbe", grp.w, side["eta_d"], grp.dNV, grp.NV, n
                    )
                    dgga = np.einsum("fqde,aqe->fqad", _mat(side["dgh3"]), grp.dNV)
                    dgn = _tensor_vec(side["dgh3"], n)
                    dvv -= np.einsum(
                        "q,fq,fqad,fqe,bq->fadbe", grp.w, side["beta_d"], dgga, dgn, grp.NV
                    )
                    p1 = config.gamma1 / grp.h * np.einsum(
                        "q,fq,aq,bq->fab", grp.w, side["eta_d"], grp.NV, grp.NV
                    )
                    dvv += p1[:, :, None, :, None] * _I2[None, None, :, None, :]
                    p2 = config.gamma2 / grp.h * np.einsum("q,aq,bq->ab", grp.w, grp.NV, grp.NV)
                    dvv += p2[None, :, None, :, None] * np.einsum("d,e->de", n, n)[None, None, :, None, :]
                if config.enable_convection:
                    bcc = np.einsum("q,fq,aq,bq->fab", grp.w, side["wneg"], grp.NV, grp.NV)
                    dvv -= bcc[:, :, None, :, None] * _I2[None, None, :, None, :]
                bvv += dvv * dm[:, None, None, None, None]
                if config.enable_pressure:
                    fvp = np.einsum("q,aq,jq->aj", grp.w, grp.NV, grp.NP)
                    fvp = fvp[None, :, None, :] * n[None, None, :, None] * dm[:, None, None, None]
                    push(fvp.reshape(nf, 18, 3), vdofs, pdofs)
                    fpv = np.einsum("q,jq,bq->jb", grp.w, grp.NP, grp.NV)
                    fpv = fpv[None, :, :, None] * n[None, None, None, :] * dm[:, None, None, None]
                    push(fpv.reshape(nf, 3, 18), pdofs, vdofs)
            push(bvv.reshape(nf, 18, 18), vdofs, vdofs)

        for grp, vhat_n in self.cip:
            n = grp.normal
            nf = grp.cells_l.size
            coef = config.gamma_cip * grp.h**2
            gl = grp.dNV_l @ n
            gr = grp.dNV_r @ n
            dl = disc.cell_vdofs[grp.cells_l]
            dr = disc.cell_vdofs[grp.cells_r]
            for ga, dof_a, sa in ((gl, dl, 1.0), (gr, dr, -1.0)):
                for gb, dof_b, sb in ((gl, dl, 1.0), (gr, dr, -1.0)):
                    blk = coef * sa * sb * np.einsum("q,fq,aq,bq->fab", grp.w, vhat_n, ga, gb)
                    full = blk[:, :, None, :, None] * _I2[None, None, :, None, :]
                    push(full.reshape(nf, 18, 18), dof_a, dof_b)

        nd = disc.ndof
        mat = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nd, nd)
        )
        return mat.tocsr()


def spatial_jacobian_apply(
    disc: Discretization,
    state: SpatialState,
    variant: TangentVariant,
    params: ModelParams,
    config: DiscretizationConfig,
    direction: np.ndarray,
    advect: SpatialState | None = None,
) -> np.ndarray:
    """One-shot matrix-free Jacobian action J_mu @ direction (J = -Dr)."""
    return SpatialLinearization(disc, state, variant, params, config, advect).apply(direction)


def spatial_jacobian_assemble(
    disc: Discretization,
    state: SpatialState,
    variant: TangentVariant,
    params: ModelParams,
    config: DiscretizationConfig,
    advect: SpatialState | None = None,
) -> sp.csr_matrix:
    """Sparse spatial Jacobian whose action matches the matrix-free path."""
    return SpatialLinearization(disc, state, variant, params, config, advect).assemble()


def coercivity_check(
    disc: Discretization,
    v: np.ndarray,
    state_v: np.ndarray,
    variant: TangentVariant,
    params: ModelParams,
    config: DiscretizationConfig,
) -> tuple[float, float]:
    """Evaluate the linearized viscous-Nitsche form a_*(v, v) and its
    coercivity bound.

    Returns (lhs, rhs) with
    lhs = (T(Dv), Dv) - <T(Dv)n, v> - <v, DS(Dg_hat)[Dv]n> + penalties and
    rhs = nu_inf/2 |Dv|^2 + (gamma1 nu_inf - C) X^2 + gamma2 Y^2, where X, Y
    are the scaled boundary norms and C is estimated from the measured trace
    ratio of the cross terms.  Requires nu_inf > 0 (uniformly elliptic
    regime).
    """
    if params.nu_inf <= 0.0:
        raise law.ConstitutiveDomainError("coercivity check requires nu_inf > 0")
    _, gq = disc.velocity_on_quad(v)
    a3 = _sym3(gq)
    _, gq_s = disc.velocity_on_quad(state_v)
    as3 = _sym3(gq_s)
    eta, gamma = law.tangent_coeffs_field(variant, params, _norm_sq3(as3))
    t3 = eta[..., None] * a3 + (gamma * _dot3(as3, a3))[..., None] * as3
    volume = float(np.einsum("q,cq->", disc.wq, _dot3(t3, a3)))
    dnorm_sq = float(np.einsum("q,cq->", disc.wq, _norm_sq3(a3)))

    cross = 0.0
    x_sq = 0.0
    y_sq = 0.0
    penalty = 0.0
    for grp in disc.side_groups:
        if not np.any(grp.dmask):
            continue
        dm = grp.dmask.astype(float)
        n = grp.normal
        vf, gf = disc.side_fields(grp, v)
        vn = vf @ n
        af3 = _sym3(gf)
        _, gfs = disc.side_fields(grp, state_v)
        afs3 = _sym3(gfs)
        eta_f, gamma_f = law.tangent_coeffs_field(variant, params, _norm_sq3(afs3))
        t3f = eta_f[..., None] * af3 + (gamma_f * _dot3(afs3, af3))[..., None] * afs3
        gh, dgh3, eta_d, beta_d = _lifting_coeffs(disc, grp, config, params)
        term1 = np.einsum("q,fqd,fqd,f->", grp.w, _tensor_vec(t3f, n), vf, dm)
        ds_v = eta_d[..., None] * af3 + (beta_d * _dot3(dgh3, af3))[..., None] * dgh3
        term2 = np.einsum("q,fqd,fqd,f->", grp.w, _tensor_vec(ds_v, n), vf, dm)
        cross += float(term1 + term2)
        x_sq += float(np.einsum("q,fq,f->", grp.w, np.einsum("fqd,fqd->fq", vf, vf), dm)) / grp.h
        y_sq += float(np.einsum("q,fq,f->", grp.w, vn**2, dm)) / grp.h
        penalty += config.gamma1 / grp.h * float(
            np.einsum("q,fq,fq,f->", grp.w, eta_d, np.einsum("fqd,fqd->fq", vf, vf), dm)
        )
        penalty += config.gamma2 / grp.h * float(np.einsum("q,fq,f->", grp.w, vn**2, dm))

    lhs = volume - cross + penalty
    if dnorm_sq > 0.0 and x_sq > 0.0:
        c_trace = (abs(cross) / (np.sqrt(dnorm_sq) * np.sqrt(x_sq))) ** 2
    else:
        c_trace = 0.0
    rhs = (
        0.5 * params.nu_inf * dnorm_sq
        + (config.gamma1 * params.nu_inf - c_trace / (2.0 * params.nu_inf)) * x_sq
        + config.gamma2 * y_sq
    )
    return lhs, rhs
