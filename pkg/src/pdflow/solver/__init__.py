"""Nonlinear, Krylov, and multigrid solver components."""

from .krylov import FgmresResult, KrylovConfig, fgmres
from .multigrid import (
    MgConfig,
    MgGeometry,
    MgLevel,
    PatchSet,
    SingularPatchError,
    StmgPreconditioner,
    Transfer,
    build_patches,
    coarse_operator,
    mg_vcycle,
    patch_perturbation_report,
    rebuild_policy,
    transfer_build,
    vanka_smooth,
)
from .newton import (
    MassNorm,
    NewtonConfig,
    NewtonStepStats,
    SlabStats,
    StmgFactory,
    make_slab_solver,
    mass_weighted_norm,
    nonlinear_solve_slab,
)

__all__ = [
    "FgmresResult",
    "KrylovConfig",
    "fgmres",
    "MgConfig",
    "MgGeometry",
    "MgLevel",
    "PatchSet",
    "SingularPatchError",
    "StmgPreconditioner",
    "Transfer",
    "build_patches",
    "coarse_operator",
    "mg_vcycle",
    "patch_perturbation_report",
    "rebuild_policy",
    "transfer_build",
    "vanka_smooth",
    "MassNorm",
    "NewtonConfig",
    "NewtonStepStats",
    "SlabStats",
    "StmgFactory",
    "make_slab_solver",
    "mass_weighted_norm",
    "nonlinear_solve_slab",
]
