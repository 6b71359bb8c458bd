"""Nonlinear slab solves: Picard and (modified) Newton with line search.

All variants iterate J_n dU = R_n with additive update U <- U + lambda dU
on one fixed residual; they differ only in the constitutive tangent inside
J_n.  Exact and modified Newton use adaptive Eisenstat-Walker forcing for
the inner FGMRES solve and Armijo backtracking on the merit function
phi = 1/2 |R|_M^2; Picard takes full steps against a fixed relative Krylov
tolerance.  Convergence is declared in the block mass-weighted norm once
the absolute or relative residual test holds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..constitutive import PIC, TangentVariant
from ..slab import SlabContext, SlabJacobian, SlabSolveError, slab_residual
from .krylov import KrylovConfig, fgmres
from .multigrid import MgConfig, MgGeometry, StmgPreconditioner, rebuild_policy

__all__ = [
    "NewtonConfig",
    "NewtonStepStats",
    "SlabStats",
    "MassNorm",
    "nonlinear_solve_slab",
    "mass_weighted_norm",
    "StmgFactory",
    "make_slab_solver",
]


@dataclass
class NewtonConfig:
    """Termination, globalization, and forcing parameters."""

    variant: TangentVariant
    abs_tol: float = 1.0e-12
    rel_tol: float = 1.0e-10
    max_nonlinear: int = 50
    armijo_c1: float = 1.0e-4
    armijo_backtrack: float = 0.5
    armijo_lambda_min: float = 2.0**-10
    forcing_eta0: float = 1.0e-2
    forcing_exponent: float = 2.0
    forcing_gamma: float = 0.9
    forcing_cap: float = 0.9
    forcing_safeguard: float = 0.1
    picard_fixed_tol: float = 1.0e-4

    def __post_init__(self):
        if self.abs_tol <= 0.0 or self.rel_tol <= 0.0:
            raise ValueError("tolerances must be positive")
        if not 0.0 < self.armijo_c1 < 1.0:
            raise ValueError("armijo_c1 must lie in (0, 1)")


@dataclass
class NewtonStepStats:
    """Per-step record: Krylov effort, damping, forcing, residual norms."""

    n_l: int
    lam: float
    eta: float
    res_before: float
    res_after: float
    lin_res: float
    rebuilt: bool


@dataclass
class SlabStats:
    """One slab solve: step records, rebuild count, and outcome."""

    steps: list = field(default_factory=list)
    initial_res: float = 0.0
    final_res: float = 0.0
    converged: bool = False
    failure: str | None = None

    @property
    def n_nl(self) -> int:
        return len(self.steps)

    @property
    def n_l_total(self) -> int:
        return sum(s.n_l for s in self.steps)

    @property
    def rebuilds(self) -> int:
        return sum(1 for s in self.steps if s.rebuilt)


class MassNorm:
    """Block mass-weighted norm of slab vectors.

    |r|^2 = sum_mu tau w_mu (r_v' M_x r_v + r_p' M_p r_p), i.e. the slab
    velocity/pressure mass blocks are the temporal mass (tau-scaled
    Gauss-Radau weights) tensored with the spatial mass matrices.
    """

    def __init__(self, ctx: SlabContext):
        self.mass_v = ctx.disc.mass_v
        self.mass_p = ctx.disc.mass_p_diag
        self.tau_w = ctx.tau * ctx.basis.weights
        self.mv = ctx.disc.n_velocity
        self.ndof = ctx.disc.ndof
        self.k1 = ctx.n_nodes

    def apply(self, x: np.ndarray) -> np.ndarray:
        X = x.reshape(self.k1, self.ndof)
        out = np.empty_like(X)
        out[:, : self.mv] = self.tau_w[:, None] * (self.mass_v @ X[:, : self.mv].T).T
        out[:, self.mv :] = self.tau_w[:, None] * (self.mass_p * X[:, self.mv :])
        return out.reshape(x.shape)

    def norm(self, x: np.ndarray) -> float:
        flat = x.reshape(-1)
        return float(np.sqrt(np.dot(flat, self.apply(flat))))


def mass_weighted_norm(ctx: SlabContext, r: np.ndarray) -> float:
    """Block mass-weighted norm of a slab residual."""
    return MassNorm(ctx).norm(r)


class StmgFactory:
    """Builds state-bound STMG preconditioners over a fixed geometry."""

    def __init__(self, geometry: MgGeometry, mg: MgConfig):
        self.geometry = geometry
        self.mg = mg

    def build(self, ctx, U, variant) -> StmgPreconditioner:
        return StmgPreconditioner(self.geometry, ctx, U, variant, self.mg)


def _forcing(newton: NewtonConfig, m: int, rnorm: float, rnorm_prev: float, eta_prev: float) -> float:
    """Eisenstat-Walker choice 2 with the power safeguard and a hard cap."""
    if m == 0:
        return newton.forcing_eta0
    eta = newton.forcing_gamma * (rnorm / rnorm_prev) ** newton.forcing_exponent
    guard = newton.forcing_gamma * eta_prev**newton.forcing_exponent
    if guard > newton.forcing_safeguard:
        eta = max(eta, guard)
    return min(eta, newton.forcing_cap)


def _normalize_pressure(ctx: SlabContext, U: np.ndarray) -> np.ndarray:
    """Zero the mass-weighted pressure mean per temporal node (the pressure
    is determined only up to a constant when no Neumann face exists)."""
    if not ctx.disc.all_dirichlet:
        return U
    mv = ctx.disc.n_velocity
    mp = ctx.disc.mass_p_diag
    area = mp[0::3].sum()
    out = U.copy()
    for mu in range(ctx.n_nodes):
        p = out[mu, mv:]
        mean = float(np.dot(mp[0::3], p[0::3])) / area
        p[0::3] -= mean
    return out


def nonlinear_solve_slab(
    ctx: SlabContext,
    U0: np.ndarray,
    newton: NewtonConfig,
    krylov: KrylovConfig | None = None,
    precond_factory: StmgFactory | None = None,
) -> tuple[np.ndarray, SlabStats]:
    """Solve one slab system R_n(U) = 0 with the configured linearization.

    Raises :class:`SlabSolveError` with kind "line_search",
    "max_iterations", or "krylov" on failure; on success the returned
    pressure is normalized to zero mean per node when the problem is
    all-Dirichlet.
    """
    krylov = krylov or KrylovConfig()
    norm = MassNorm(ctx)
    is_picard = newton.variant.kind == PIC

    U = np.array(U0, dtype=float)
    R = slab_residual(ctx, U)
    rnorm = norm.norm(R)
    stats = SlabStats(initial_res=rnorm)
    r0 = rnorm

    precond = None
    eta_prev = newton.forcing_eta0
    rnorm_prev = rnorm
    prev_n_l = 0

    for m in range(newton.max_nonlinear):
        if rnorm <= newton.abs_tol or rnorm <= newton.rel_tol * r0:
            stats.converged = True
            stats.final_res = rnorm
            return _normalize_pressure(ctx, U), stats

        jac = SlabJacobian(ctx, U, newton.variant)
        rebuilt = False
        if precond_factory is not None:
            ratio = rnorm / rnorm_prev if m > 0 else 0.0
            last_n_l = stats.steps[-1].n_l if stats.steps else 0
            if precond is None or rebuild_policy(
                ratio, last_n_l, prev_n_l, precond_factory.mg.rebuild_rho, precond_factory.mg.rebuild_factor
            ):
                precond = precond_factory.build(ctx, U, newton.variant)
                rebuilt = True
            prev_n_l = stats.steps[-1].n_l if stats.steps else 0

        eta = newton.picard_fixed_tol if is_picard else _forcing(newton, m, rnorm, rnorm_prev, eta_prev)
        result = fgmres(
            jac.matvec,
            R.reshape(-1),
            eta,
            krylov,
            precond=precond.apply if precond is not None else None,
            mass=norm,
        )
        if not result.converged:
            stats.failure = "krylov"
            stats.final_res = rnorm
            raise SlabSolveError(
                "krylov",
                f"FGMRES stalled at |r|={result.residual_norm:.3e} (target {result.target:.3e})",
                stats,
            )
        dU = result.x.reshape(U.shape)

        phi = 0.5 * rnorm**2
        lam = 1.0
        if is_picard:
            U = U + dU
            R_new = slab_residual(ctx, U)
            rnorm_new = norm.norm(R_new)
        else:
            while True:
                U_try = U + lam * dU
                R_new = slab_residual(ctx, U_try)
                rnorm_new = norm.norm(R_new)
                if 0.5 * rnorm_new**2 <= (1.0 - newton.armijo_c1 * lam) * phi:
                    U = U_try
                    break
                lam *= newton.armijo_backtrack
                if lam < newton.armijo_lambda_min:
                    stats.failure = "line_search"
                    stats.final_res = rnorm
                    raise SlabSolveError(
                        "line_search",
                        f"no sufficient decrease above lambda={lam:.2e} at |R|={rnorm:.3e}",
                        stats,
                    )

        stats.steps.append(
            NewtonStepStats(
                n_l=result.iterations,
                lam=lam,
                eta=eta,
                res_before=rnorm,
                res_after=rnorm_new,
                lin_res=result.residual_norm,
                rebuilt=rebuilt,
            )
        )
        rnorm_prev = rnorm
        rnorm = rnorm_new
        eta_prev = eta
        R = R_new

    if rnorm <= newton.abs_tol or rnorm <= newton.rel_tol * r0:
        stats.converged = True
        stats.final_res = rnorm
        return _normalize_pressure(ctx, U), stats
    stats.failure = "max_iterations"
    stats.final_res = rnorm
    raise SlabSolveError(
        "max_iterations",
        f"|R|={rnorm:.3e} after {newton.max_nonlinear} iterations (target "
        f"abs {newton.abs_tol:.1e} / rel {newton.rel_tol * r0:.1e})",
        stats,
    )


def make_slab_solver(
    newton: NewtonConfig,
    krylov: KrylovConfig | None = None,
    precond_factory: StmgFactory | None = None,
):
    """Bind solver configuration into a `solve_slab(ctx, U0)` handle for
    time marching."""

    def solve(ctx, U0):
        return nonlinear_solve_slab(ctx, U0, newton, krylov, precond_factory)

    return solve
