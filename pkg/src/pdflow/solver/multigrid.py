"""Monolithic space-time multigrid preconditioner with Vanka smoothing.

One V-cycle acts on the slab system of a single time step.  Levels share
the temporal basis; coarsening is spatial only, with geometric Q2/P1disc
embeddings as prolongation, their transposes as restriction, and coarse
operators defined per node block either by the Petrov-Galerkin triple
product (default) or by rediscretizing at the injected Newton state.

The smoother is an additive Schwarz sweep over cell patches: all velocity
and pressure dofs of a cell, replicated across the k+1 temporal nodes.
On the finest level the patch matrices may use the surrogate assembly that
freezes all state-dependent coefficients at one representative time of the
step; the temporal coupling factors are kept exact.  Coarser levels always
extract exact patch matrices from the level operators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from ..forms import Discretization, SpatialLinearization
from ..timebasis import lagrange_eval

__all__ = [
    "MgConfig",
    "Transfer",
    "transfer_build",
    "MgGeometry",
    "MgLevel",
    "PatchSet",
    "SingularPatchError",
    "build_patches",
    "coarse_operator",
    "vanka_smooth",
    "mg_vcycle",
    "rebuild_policy",
    "patch_perturbation_report",
    "StmgPreconditioner",
]


class SingularPatchError(RuntimeError):
    """A local Vanka patch matrix was numerically singular."""

    def __init__(self, level: int, patch: int):
        super().__init__(f"singular patch matrix (level {level}, patch {patch})")
        self.level = level
        self.patch = patch


@dataclass
class MgConfig:
    """Smoothing, surrogate, and rebuild parameters of the V-cycle."""

    pre_smooth: int = 2
    post_smooth: int = 2
    omega: float = 0.7
    surrogate: bool = True
    rep_fraction: float = 0.5  # representative time at t_start + fraction * tau
    rebuild_rho: float = 0.9
    rebuild_factor: float = 2.0
    coarse_mode: str = "galerkin"  # or "rediscretize"
    min_cells: int = 4  # coarsest-level cells per direction

    def __post_init__(self):
        if not 0.0 < self.omega <= 1.0:
            raise ValueError("omega must lie in (0, 1]")
        if self.coarse_mode not in ("galerkin", "rediscretize"):
            raise ValueError(f"unknown coarse mode {self.coarse_mode!r}")


@dataclass
class Transfer:
    """Spatial prolongation blocks from a coarse to a fine discretization."""

    P_v: sp.csr_matrix
    P_p: sp.csr_matrix
    P: sp.csr_matrix  # blockdiag(P_v, P_p)
    inject_v: np.ndarray  # fine velocity dof index of every coarse velocity dof


def _q2_1d(x: np.ndarray) -> np.ndarray:
    return np.stack([(1.0 - x) * (1.0 - 2.0 * x), 4.0 * x * (1.0 - x), x * (2.0 * x - 1.0)])


def transfer_build(coarse: Discretization, fine: Discretization) -> Transfer:
    """Geometric embeddings of nested Q2 and P1disc spaces.

    Velocity prolongation is nodal interpolation of the coarse field at the
    fine nodes (exact on nested meshes); pressure prolongation rewrites each
    coarse linear polynomial in the child-cell bases.  Restrictions are the
    transposes.
    """
    cm, fm = coarse.mesh, fine.mesh
    if fm.nx != 2 * cm.nx or fm.ny != 2 * cm.ny:
        raise ValueError("transfer requires a mesh refined exactly once")

    # Velocity: fine node (ix, iy) on the half-cell grid lies in coarse cell
    # (ix // 4, iy // 4) at the quarter-point local coordinates.
    nfx, nfy = 2 * fm.nx + 1, 2 * fm.ny + 1
    ncx = 2 * cm.nx + 1
    ix = np.arange(nfx)
    iy = np.arange(nfy)
    IX, IY = np.meshgrid(ix, iy)
    cx = np.clip(IX // 4, 0, cm.nx - 1)
    cy = np.clip(IY // 4, 0, cm.ny - 1)
    xi = IX / 4.0 - cx
    eta = IY / 4.0 - cy
    lx = _q2_1d(xi.ravel())  # (3, nfine)
    ly = _q2_1d(eta.ravel())
    nfine = nfx * nfy
    rows = np.repeat(np.arange(nfine), 9)
    cols = np.empty(nfine * 9, dtype=int)
    vals = np.empty(nfine * 9)
    cxr, cyr = cx.ravel(), cy.ravel()
    k = 0
    for jy in range(3):
        for jx in range(3):
            cols[k::9] = (2 * cyr + jy) * ncx + (2 * cxr + jx)
            vals[k::9] = ly[jy] * lx[jx]
            k += 1
    p_node = sp.coo_matrix((vals, (rows, cols)), shape=(nfine, ncx * (2 * cm.ny + 1))).tocsr()
    p_node.eliminate_zeros()
    P_v = sp.kron(p_node, sp.identity(2, format="csr"), format="csr")

    # Pressure: coarse {1, x-1/2, y-1/2} restricted to child (ox, oy) becomes
    # c0 + c1 (2ox-1)/4 + c2 (2oy-1)/4, c1/2, c2/2 in the child basis.
    rows_p, cols_p, vals_p = [], [], []
    for c in range(cm.ncells):
        ci, cj = c % cm.nx, c // cm.nx
        for oy in (0, 1):
            for ox in (0, 1):
                child = (2 * cj + oy) * fm.nx + (2 * ci + ox)
                base_f, base_c = 3 * child, 3 * c
                rows_p += [base_f, base_f, base_f, base_f + 1, base_f + 2]
                cols_p += [base_c, base_c + 1, base_c + 2, base_c + 1, base_c + 2]
                vals_p += [1.0, (2 * ox - 1) / 4.0, (2 * oy - 1) / 4.0, 0.5, 0.5]
    P_p = sp.coo_matrix((vals_p, (rows_p, cols_p)), shape=(3 * fm.ncells, 3 * cm.ncells)).tocsr()

    P = sp.block_diag([P_v, P_p], format="csr")
    # Coarse node (i, j) coincides with fine node (2i, 2j).
    cix = np.arange(ncx)
    ciy = np.arange(2 * cm.ny + 1)
    CIX, CIY = np.meshgrid(cix, ciy)
    fine_node = (2 * CIY) * nfx + 2 * CIX
    inject_node = fine_node.ravel()
    inject_v = np.empty(2 * inject_node.size, dtype=int)
    inject_v[0::2] = 2 * inject_node
    inject_v[1::2] = 2 * inject_node + 1
    return Transfer(P_v=P_v, P_p=P_p, P=P, inject_v=inject_v)


@dataclass
class MgGeometry:
    """State-independent level data shared by every slab and Newton step."""

    discs: list  # Discretization, coarsest first
    transfers: list  # transfers[i]: level i -> level i+1

    @classmethod
    def from_fine(cls, fine: Discretization, min_cells: int = 4) -> "MgGeometry":
        from ..mesh import StructuredQuadMesh, boundary_tag_assign

        meshes = [fine.mesh]
        m = fine.mesh
        while m.nx > min_cells and m.nx % 2 == 0 and m.ny > min_cells and m.ny % 2 == 0:
            coarse = StructuredQuadMesh(
                m.nx // 2, m.ny // 2, m.x0, m.y0, m.x1, m.y1, level=max(m.level - 1, 0)
            )
            # Coarse faces inherit the side tags of the fine mesh.
            fine_tags = m.boundary_tags
            fm = m

            def rule(face, fine_tags=fine_tags, fm=fm):
                offsets = {"bottom": 0, "right": fm.nx, "top": fm.nx + fm.ny, "left": 2 * fm.nx + fm.ny}
                return fine_tags[offsets[face.side]]

            coarse = boundary_tag_assign(coarse, rule)
            meshes.append(coarse)
            m = coarse
        meshes.reverse()
        discs = [
            fine if mm is fine.mesh else Discretization(mm, fine.quad.q, fine.face_q)
            for mm in meshes
        ]
        transfers = [transfer_build(discs[i], discs[i + 1]) for i in range(len(discs) - 1)]
        return cls(discs=discs, transfers=transfers)

    @property
    def num_levels(self) -> int:
        return len(self.discs)


@dataclass
class PatchSet:
    """Factorized cell-patch matrices of one level.

    ids[(cell, :)] are the slab dof indices of the patch: the cell's 18
    velocity and 3 pressure dofs replicated over the k+1 temporal nodes.
    """

    ids: np.ndarray  # (npatch, D)
    matrices: np.ndarray  # (npatch, D, D)
    inverses: np.ndarray  # (npatch, D, D)
    level: int


@dataclass
class MgLevel:
    """One multigrid level: spatial blocks, operator access, patches."""

    index: int
    disc: Discretization
    j_nodes: list  # per-node spatial Jacobian blocks (csr); finest may be None
    mass_v: sp.csr_matrix
    K_t: np.ndarray
    tau_w: np.ndarray  # tau * Gauss-Radau weights
    matvec: object  # callable on flat slab vectors
    patches: PatchSet | None = None

    @property
    def n_nodes(self) -> int:
        return self.tau_w.size

    @property
    def slab_dim(self) -> int:
        return self.n_nodes * self.disc.ndof


def _sparse_level_matvec(disc, j_nodes, mass_v, K_t, tau_w):
    mv = disc.n_velocity
    nd = disc.ndof
    k1 = tau_w.size

    def matvec(x):
        X = x.reshape(k1, nd)
        out = np.empty_like(X)
        for mu in range(k1):
            out[mu] = tau_w[mu] * (j_nodes[mu] @ X[mu])
        W = K_t @ X[:, :mv]
        out[:, :mv] += (mass_v @ W.T).T
        return out.reshape(-1)

    return matvec


def _extract_blocks(A: sp.csr_matrix, ids: np.ndarray) -> np.ndarray:
    """Dense patch blocks A[ids[c], ids[c]] for every patch c."""
    npatch, d = ids.shape
    out = np.empty((npatch, d, d))
    for c in range(npatch):
        rows = A[ids[c]]
        out[c] = rows[:, ids[c]].toarray()
    return out


def build_patches(level: MgLevel, j_node_blocks: list, mg_index: int | None = None) -> PatchSet:
    """Compose and factorize the cell-patch matrices of one level.

    j_node_blocks holds the spatial blocks to use per temporal node: the
    exact node blocks, or (finest-level surrogate) the representative block
    repeated k+1 times.  The temporal factors K_t (x) M_x and the diagonal
    Gauss-Radau mass scaling stay exact in either case, so the composed
    patch equals R_K A R_K' whenever the node blocks are exact.
    """
    disc = level.disc
    k1 = level.n_nodes
    nd = disc.ndof
    spatial_ids = disc.cell_patch_dofs  # (nc, 21)
    nc, d_sp = spatial_ids.shape
    ids = np.concatenate([spatial_ids + mu * nd for mu in range(k1)], axis=1)

    mass_blocks = _extract_blocks(level.mass_v, disc.cell_vdofs)  # (nc, 18, 18)
    node_blocks = [_extract_blocks(jb, spatial_ids) for jb in j_node_blocks]

    D = k1 * d_sp
    A = np.zeros((nc, D, D))
    for mu in range(k1):
        sl_mu = slice(mu * d_sp, mu * d_sp + 18)
        for nu in range(k1):
            sl_nu = slice(nu * d_sp, nu * d_sp + 18)
            A[:, sl_mu, sl_nu] += level.K_t[mu, nu] * mass_blocks
        blk = slice(mu * d_sp, (mu + 1) * d_sp)
        A[:, blk, blk] += level.tau_w[mu] * node_blocks[mu]

    try:
        inv = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        for c in range(nc):
            try:
                np.linalg.inv(A[c])
            except np.linalg.LinAlgError:
                raise SingularPatchError(level.index if mg_index is None else mg_index, c) from None
        raise
    return PatchSet(ids=ids, matrices=A, inverses=inv, level=level.index)


def coarse_operator(
    fine_level: MgLevel,
    transfer: Transfer,
    coarse_disc: Discretization,
    mode: str,
    rediscretize_args: tuple | None = None,
) -> list:
    """Per-node coarse spatial blocks.

    `galerkin` forms the sparse triple products P' J P; `rediscretize`
    assembles the blocks on the coarse mesh at the injected Newton state.
    """
    if mode == "galerkin":
        P = transfer.P
        return [(P.T @ jb @ P).tocsr() for jb in fine_level.j_nodes]
    if mode != "rediscretize":
        raise ValueError(mode)
    variant, params, config, node_states = rediscretize_args
    blocks = []
    for state in node_states:
        lin = SpatialLinearization(coarse_disc, state, variant, params, config)
        blocks.append(lin.assemble())
    return blocks


def vanka_smooth(level: MgLevel, d: np.ndarray, r: np.ndarray, steps: int, omega: float) -> np.ndarray:
    """Damped additive Schwarz sweeps d <- d + omega sum_K R_K' A_K^-1 R_K (r - A d).

    The patch loop is a Jacobi-type additive update, so the result does not
    depend on patch order.
    """
    patches = level.patches
    out = np.array(d, dtype=float)
    for _ in range(steps):
        defect = r - level.matvec(out)
        local = defect[patches.ids]  # (npatch, D)
        upd = np.einsum("pij,pj->pi", patches.inverses, local)
        np.add.at(out, patches.ids, omega * upd)
    return out


def rebuild_policy(residual_ratio: float, last_n_l: int, previous_n_l: int, rho: float, factor: float) -> bool:
    """Trigger a preconditioner rebuild on stalling residuals or a Krylov
    iteration blow-up."""
    if residual_ratio > rho:
        return True
    if previous_n_l > 0 and last_n_l > factor * previous_n_l:
        return True
    return False


def patch_perturbation_report(exact: PatchSet, surrogate: PatchSet):
    """Per-patch perturbation measures of the surrogate patch matrices.

    Returns a list of dicts with the spectral norms |E|, eps = |A^-1 E|, and
    the maximum eigenvalue distance of A^-1 At from 1, which Lemma-style
    perturbation bounds confine to the disk |z - 1| <= eps.  Singular exact
    patches are reported and skipped.
    """
    if exact.ids.shape != surrogate.ids.shape or not np.array_equal(exact.ids, surrogate.ids):
        raise ValueError("patch sets do not match")
    report = []
    for c in range(exact.ids.shape[0]):
        A = exact.matrices[c]
        At = surrogate.matrices[c]
        entry = {"patch": c}
        E = At - A
        entry["norm_e"] = float(np.linalg.norm(E, 2))
        try:
            ainv_e = np.linalg.solve(A, E)
        except np.linalg.LinAlgError:
            entry["singular"] = True
            report.append(entry)
            continue
        entry["singular"] = False
        eps = float(np.linalg.norm(ainv_e, 2))
        entry["eps"] = eps
        eig = np.linalg.eigvals(np.eye(A.shape[0]) + ainv_e)
        entry["max_eig_dist"] = float(np.max(np.abs(eig - 1.0)))
        entry["within_disk"] = bool(entry["max_eig_dist"] <= eps + 1e-10)
        report.append(entry)
    return report


class StmgPreconditioner:
    """One state-bound space-time multigrid V-cycle.

    Built from the geometric hierarchy and a Newton state; holds coarse
    Galerkin (or rediscretized) node blocks, factorized Vanka patches, and a
    pinned direct solve on the coarsest level.  `apply` runs one V-cycle on
    a flat slab residual with zero initial guess.
    """

    def __init__(
        self,
        geometry: MgGeometry,
        ctx,
        U: np.ndarray,
        variant,
        mg: MgConfig,
        reuse_fine_patches: PatchSet | None = None,
    ):
        if geometry.discs[-1] is not ctx.disc:
            raise ValueError("hierarchy finest level must match the slab discretization")
        self.geometry = geometry
        self.mg = mg
        self.ctx = ctx
        k1 = ctx.n_nodes
        tau_w = ctx.tau * ctx.basis.weights
        K_t = ctx.tmat.K_t

        # Finest level: matrix-free action, assembled node blocks for the
        # hierarchy, optional surrogate block for the patches.
        from ..slab import SlabJacobian

        jac = SlabJacobian(ctx, U, variant)
        fine_disc = ctx.disc
        j_fine = [lin.assemble() for lin in jac.node_linearizations]
        levels: list[MgLevel] = [None] * geometry.num_levels
        fine_idx = geometry.num_levels - 1
        levels[fine_idx] = MgLevel(
            index=fine_idx,
            disc=fine_disc,
            j_nodes=j_fine,
            mass_v=fine_disc.mass_v,
            K_t=K_t,
            tau_w=tau_w,
            matvec=jac.matvec,
        )

        # Coarse levels by spatial coarsening of the node blocks.
        node_states = [ctx.node_state(U, mu) for mu in range(k1)] if mg.coarse_mode == "rediscretize" else None
        redisc_cfg = ctx.config
        for ell in range(fine_idx - 1, -1, -1):
            tr = geometry.transfers[ell]
            coarse_disc = geometry.discs[ell]
            if mg.coarse_mode == "rediscretize":
                from dataclasses import replace

                from ..forms import SpatialState

                node_states = [
                    SpatialState(
                        v=st.v[tr.inject_v],
                        pi=np.zeros(coarse_disc.n_pressure),
                        t=st.t,
                    )
                    for st in node_states
                ]
                if redisc_cfg.g_hat is not None:
                    redisc_cfg = replace(redisc_cfg, g_hat=redisc_cfg.g_hat[tr.inject_v])
                blocks = coarse_operator(
                    levels[ell + 1], tr, coarse_disc, "rediscretize",
                    (variant, ctx.params, redisc_cfg, node_states),
                )
                mass_c = coarse_disc.mass_v
            else:
                blocks = coarse_operator(levels[ell + 1], tr, coarse_disc, "galerkin")
                mass_c = (tr.P_v.T @ levels[ell + 1].mass_v @ tr.P_v).tocsr()
            levels[ell] = MgLevel(
                index=ell,
                disc=coarse_disc,
                j_nodes=blocks,
                mass_v=mass_c,
                K_t=K_t,
                tau_w=tau_w,
                matvec=None,
            )
            levels[ell].matvec = _sparse_level_matvec(coarse_disc, blocks, mass_c, K_t, tau_w)

        # Patches: surrogate on the finest level (optional), exact elsewhere.
        # The finest-level patch factorizations may be reused from the
        # previous Newton step; the rebuild policy decides upstream.
        for ell, lvl in enumerate(levels):
            if ell == fine_idx:
                if reuse_fine_patches is not None:
                    lvl.patches = reuse_fine_patches
                elif mg.surrogate:
                    rep_state = ctx.state_at(U, mg.rep_fraction) if k1 > 1 else ctx.node_state(U, 0)
                    rep_block = SpatialLinearization(
                        fine_disc, rep_state, variant, ctx.params, ctx.config
                    ).assemble()
                    lvl.patches = build_patches(lvl, [rep_block] * k1)
                else:
                    lvl.patches = build_patches(lvl, lvl.j_nodes)
            else:
                lvl.patches = build_patches(lvl, lvl.j_nodes)

        self.levels = levels
        self._build_coarse_solver()
        self._all_dirichlet = ctx.disc.all_dirichlet

    def _build_coarse_solver(self):
        lvl = self.levels[0]
        disc = lvl.disc
        k1 = lvl.n_nodes
        nd = disc.ndof
        mv = disc.n_velocity
        A = np.zeros((k1 * nd, k1 * nd))
        for mu in range(k1):
            for nu in range(k1):
                A[mu * nd : mu * nd + mv, nu * nd : nu * nd + mv] += (
                    lvl.K_t[mu, nu] * lvl.mass_v.toarray()
                )
            A[mu * nd : (mu + 1) * nd, mu * nd : (mu + 1) * nd] += (
                lvl.tau_w[mu] * lvl.j_nodes[mu].toarray()
            )
        if disc.all_dirichlet:
            # Pin the per-node constant pressure modes of the singular
            # all-Dirichlet system; the pinning acts only on the nullspace.
            scale = np.mean(np.abs(A.diagonal()))
            for mu in range(k1):
                z = np.zeros(k1 * nd)
                zp = np.zeros(disc.n_pressure)
                zp[0::3] = disc.mass_p_diag[0::3]
                z[mu * nd + mv : (mu + 1) * nd] = zp
                z /= np.linalg.norm(z)
                A += scale * np.outer(z, z)
        self._coarse_lu = sla.lu_factor(A)

    # -- V-cycle ----------------------------------------------------------
    def _restrict(self, ell: int, r: np.ndarray) -> np.ndarray:
        tr = self.geometry.transfers[ell - 1]
        k1 = self.levels[ell].n_nodes
        nd_f = self.levels[ell].disc.ndof
        nd_c = self.levels[ell - 1].disc.ndof
        R = np.empty(k1 * nd_c)
        rf = r.reshape(k1, nd_f)
        for mu in range(k1):
            R[mu * nd_c : (mu + 1) * nd_c] = tr.P.T @ rf[mu]
        return R

    def _prolong(self, ell: int, e: np.ndarray) -> np.ndarray:
        tr = self.geometry.transfers[ell - 1]
        k1 = self.levels[ell].n_nodes
        nd_f = self.levels[ell].disc.ndof
        nd_c = self.levels[ell - 1].disc.ndof
        E = np.empty(k1 * nd_f)
        ec = e.reshape(k1, nd_c)
        for mu in range(k1):
            E[mu * nd_f : (mu + 1) * nd_f] = tr.P @ ec[mu]
        return E

    def vcycle(self, ell: int, b: np.ndarray) -> np.ndarray:
        if ell == 0:
            return sla.lu_solve(self._coarse_lu, b)
        lvl = self.levels[ell]
        d = np.zeros_like(b)
        d = vanka_smooth(lvl, d, b, self.mg.pre_smooth, self.mg.omega)
        r = b - lvl.matvec(d)
        e = self.vcycle(ell - 1, self._restrict(ell, r))
        d = d + self._prolong(ell, e)
        d = vanka_smooth(lvl, d, b, self.mg.post_smooth, self.mg.omega)
        return d

    def _project_nullspace(self, x: np.ndarray) -> np.ndarray:
        """Remove the per-node constant pressure modes (mass-orthogonal).

        With every boundary face Dirichlet these are the exact nullspace of
        the slab operator; keeping the correction orthogonal to them stops
        the Krylov iterates from drifting along the undetermined constant.
        """
        ctx = self.ctx
        mv = ctx.disc.n_velocity
        mp = ctx.disc.mass_p_diag
        area = mp[0::3].sum()
        X = x.reshape(ctx.n_nodes, ctx.disc.ndof)
        for mu in range(ctx.n_nodes):
            p = X[mu, mv:]
            p[0::3] -= float(np.dot(mp[0::3], p[0::3])) / area
        return x

    def apply(self, r: np.ndarray) -> np.ndarray:
        z = self.vcycle(len(self.levels) - 1, r)
        if self._all_dirichlet:
            z = self._project_nullspace(z)
        return z


def mg_vcycle(precond: StmgPreconditioner, rhs: np.ndarray) -> np.ndarray:
    """One V-cycle applied to a flat slab right-hand side."""
    return precond.apply(rhs)
