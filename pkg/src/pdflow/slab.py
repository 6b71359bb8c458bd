"""Per-time-step monolithic residual and Jacobian, plus time marching.

A slab vector stacks (k+1) spatial blocks of (M_v + M_p) coefficients,
ordered temporal node first.  With the reference temporal matrices and the
affine pullback (mass scales with tau, derivative and jump terms are
scale-free), the residual and Jacobian of one step read

    R_n(U) = -[(K_t x M_x) V - (m_t x M_x) v_minus; 0]
             + tau (diag(w) x I) F(U),
    J_n(U) =  [(K_t x M_x), 0; 0, 0] + tau (diag(w) x I) diag(J_1..J_{k+1}),

where F stacks the spatial residual at the Gauss-Radau node times and w are
the Gauss-Radau weights (the temporal mass in the nodal basis).  J = -DR,
so the Newton correction solves J dU = R with additive update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constitutive import ModelParams, TangentVariant
from .forms import (
    Discretization,
    DiscretizationConfig,
    ProblemData,
    SpatialLinearization,
    SpatialState,
    spatial_residual,
)
from .timebasis import TemporalBasis, TemporalMatrices, TimePartition, temporal_matrices

__all__ = [
    "SlabContext",
    "SlabProblem",
    "SlabSolveError",
    "MarchError",
    "slab_residual",
    "spatial_residual_stack",
    "SlabJacobian",
    "slab_jacobian_apply",
    "left_trace",
    "velocity_at_left_endpoint",
    "initial_guess",
    "march",
]


class SlabSolveError(RuntimeError):
    """A slab solve failed; `kind` is one of line_search, max_iterations,
    krylov, and `diagnostics` carries the partial statistics."""

    def __init__(self, kind: str, message: str, diagnostics=None):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.diagnostics = diagnostics


class MarchError(RuntimeError):
    """Time marching aborted at slab `index` because of `cause`."""

    def __init__(self, index: int, cause: SlabSolveError, partial_traj, partial_stats):
        super().__init__(f"slab {index} failed ({cause})")
        self.index = index
        self.cause = cause
        self.partial_traj = partial_traj
        self.partial_stats = partial_stats


@dataclass
class SlabContext:
    """Everything needed to evaluate one time step (t_start, t_start+tau]."""

    disc: Discretization
    params: ModelParams
    config: DiscretizationConfig
    data: ProblemData
    basis: TemporalBasis
    tmat: TemporalMatrices
    t_start: float
    tau: float
    v_minus: np.ndarray

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")

    @property
    def node_times(self) -> np.ndarray:
        return self.t_start + self.tau * self.basis.nodes

    @property
    def n_nodes(self) -> int:
        return self.basis.k + 1

    @property
    def ndof(self) -> int:
        return self.n_nodes * self.disc.ndof

    def node_state(self, U: np.ndarray, mu: int) -> SpatialState:
        mv = self.disc.n_velocity
        return SpatialState(v=U[mu, :mv], pi=U[mu, mv:], t=float(self.node_times[mu]))

    def state_at(self, U: np.ndarray, that: float) -> SpatialState:
        """Evaluate the temporal Lagrange expansion at reference point `that`."""
        from .timebasis import lagrange_eval

        mv = self.disc.n_velocity
        coeff = np.array([lagrange_eval(self.basis, mu, that) for mu in range(self.n_nodes)])
        blend = coeff @ U
        return SpatialState(v=blend[:mv], pi=blend[mv:], t=float(self.t_start + self.tau * that))


@dataclass
class SlabProblem:
    """Time-independent pieces of a marching run, a slab-context factory."""

    disc: Discretization
    params: ModelParams
    config: DiscretizationConfig
    data: ProblemData
    basis: TemporalBasis
    tmat: TemporalMatrices = None

    def __post_init__(self):
        if self.tmat is None:
            self.tmat = temporal_matrices(self.basis)

    def context(self, t0: float, t1: float, v_minus: np.ndarray) -> SlabContext:
        return SlabContext(
            disc=self.disc,
            params=self.params,
            config=self.config,
            data=self.data,
            basis=self.basis,
            tmat=self.tmat,
            t_start=t0,
            tau=t1 - t0,
            v_minus=v_minus,
        )


def spatial_residual_stack(
    ctx: SlabContext, U: np.ndarray, advect: np.ndarray | None = None
) -> np.ndarray:
    """Spatial residual F_mu at every Gauss-Radau node, (k+1, M_v+M_p).

    Each block depends only on the coefficients at its own node, so the
    stack decouples across temporal nodes.  `advect` optionally freezes the
    lagged CIP/inflow weights at a different slab state (used by finite
    difference oracles); it defaults to U itself.
    """
    out = np.empty_like(U)
    for mu in range(ctx.n_nodes):
        state = ctx.node_state(U, mu)
        adv = None if advect is None else ctx.node_state(advect, mu)
        out[mu] = spatial_residual(ctx.disc, state, ctx.data, ctx.params, ctx.config, advect=adv)
    return out


def _time_block(ctx: SlabContext, V: np.ndarray) -> np.ndarray:
    """(K_t x M_x) V - (m_t x M_x) v_minus on the velocity part."""
    W = ctx.tmat.K_t @ V - np.outer(ctx.tmat.m_t, ctx.v_minus)
    return (ctx.disc.mass_v @ W.T).T


def slab_residual(ctx: SlabContext, U: np.ndarray, advect: np.ndarray | None = None) -> np.ndarray:
    """Monolithic slab residual R_n(U), shape (k+1, M_v + M_p)."""
    mv = ctx.disc.n_velocity
    R = ctx.tau * ctx.basis.weights[:, None] * spatial_residual_stack(ctx, U, advect)
    R[:, :mv] -= _time_block(ctx, U[:, :mv])
    return R


class SlabJacobian:
    """Matrix-free slab Jacobian at a fixed Newton state (J = -DR).

    Builds one frozen-coefficient spatial linearization per temporal node;
    `apply` acts on (k+1, ndof) blocks and `matvec` on flat vectors.
    """

    def __init__(self, ctx: SlabContext, U: np.ndarray, variant: TangentVariant):
        self.ctx = ctx
        self.variant = variant
        self.node_linearizations = [
            SpatialLinearization(
                ctx.disc, ctx.node_state(U, mu), variant, ctx.params, ctx.config
            )
            for mu in range(ctx.n_nodes)
        ]

    def apply(self, dU: np.ndarray) -> np.ndarray:
        ctx = self.ctx
        mv = ctx.disc.n_velocity
        out = np.empty_like(dU)
        for mu, lin in enumerate(self.node_linearizations):
            out[mu] = ctx.tau * ctx.basis.weights[mu] * lin.apply(dU[mu])
        W = ctx.tmat.K_t @ dU[:, :mv]
        out[:, :mv] += (ctx.disc.mass_v @ W.T).T
        return out

    def matvec(self, x: np.ndarray) -> np.ndarray:
        shape = (self.ctx.n_nodes, self.ctx.disc.ndof)
        return self.apply(x.reshape(shape)).reshape(-1)


def slab_jacobian_apply(
    ctx: SlabContext, U: np.ndarray, variant: TangentVariant, dU: np.ndarray
) -> np.ndarray:
    """One-shot slab Jacobian action (builds the linearization and applies)."""
    return SlabJacobian(ctx, U, variant).apply(dU)


def left_trace(U: np.ndarray, n_velocity: int) -> np.ndarray:
    """Velocity block at the last temporal node, the trace at t_n^-.

    The right endpoint is a Gauss-Radau node, so the trace is a nodal value.
    """
    return U[-1, :n_velocity]


def velocity_at_left_endpoint(tmat: TemporalMatrices, U: np.ndarray, n_velocity: int) -> np.ndarray:
    """Velocity at t_{n-1}^+ via the Lagrange expansion, sum_mu m_t[mu] V_mu."""
    return tmat.m_t @ U[:, :n_velocity]


def initial_guess(ctx: SlabContext, p_prev: np.ndarray | None = None) -> np.ndarray:
    """Constant-in-time extension of the incoming left trace.

    Pressure blocks repeat the previous slab's last node (zero on slab 1).
    """
    mv, mp = ctx.disc.n_velocity, ctx.disc.n_pressure
    U0 = np.zeros((ctx.n_nodes, mv + mp))
    U0[:, :mv] = ctx.v_minus
    if p_prev is not None:
        U0[:, mv:] = p_prev
    return U0


def march(problem: SlabProblem, partition: TimePartition, v0: np.ndarray, solve_slab):
    """Sequentially solve every slab; v_minus chains through left traces.

    `solve_slab(ctx, U0) -> (U, stats)` is the nonlinear solver handle.  A
    slab failure raises :class:`MarchError` carrying the failing index and
    everything solved so far.
    """
    mv = problem.disc.n_velocity
    traj, stats = [], []
    v_minus = np.array(v0, dtype=float)
    p_prev = None
    for n, (t0, t1) in enumerate(partition.intervals()):
        ctx = problem.context(t0, t1, v_minus)
        U0 = initial_guess(ctx, p_prev)
        try:
            U, st = solve_slab(ctx, U0)
        except SlabSolveError as err:
            raise MarchError(n, err, traj, stats) from err
        traj.append(U)
        stats.append(st)
        v_minus = left_trace(U, mv).copy()
        p_prev = U[-1, mv:].copy()
    return traj, stats
