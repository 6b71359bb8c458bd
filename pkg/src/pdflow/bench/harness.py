"""Experiment orchestration: single runs, convergence studies, sweeps."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from ..constitutive import (
    ModelParams,
    TangentVariant,
    exact_newton,
    modified_newton,
    picard,
)
from ..femspace import interpolate_velocity
from ..forms import Discretization, DiscretizationConfig
from ..mesh import all_dirichlet, boundary_tag_assign, uniform_mesh
from ..slab import MarchError, SlabProblem, march
from ..solver import (
    KrylovConfig,
    MgConfig,
    MgGeometry,
    NewtonConfig,
    StmgFactory,
    make_slab_solver,
)
from ..timebasis import gauss_radau, uniform_partition
from .manufactured import ManufacturedCase
from .metrics import RunRecord, error_norms, work

__all__ = [
    "SOLVER_NAMES",
    "make_variant",
    "InstanceSpec",
    "BenchSetup",
    "build_setup",
    "run_instance",
    "convergence_study",
    "desk_sweep_specs",
    "run_sweep",
]

SOLVER_NAMES = ("pic", "exn", "modn")


def make_variant(name: str, params: ModelParams, sigma_max: float | None = None) -> TangentVariant:
    """Build a tangent variant; the modified-Newton clip bound defaults to
    nu, the stress magnitude at unit shear in the small-delta limit."""
    if name == "pic":
        return picard()
    if name == "exn":
        return exact_newton()
    if name == "modn":
        return modified_newton(params.nu if sigma_max is None else sigma_max)
    raise ValueError(f"unknown solver {name!r}")


@dataclass(frozen=True)
class InstanceSpec:
    """One benchmark instance: model parameters and space-time resolution."""

    params: ModelParams
    cells: int  # total cell count, a perfect square
    steps: int

    @property
    def nx(self) -> int:
        nx = int(round(math.sqrt(self.cells)))
        if nx * nx != self.cells:
            raise ValueError(f"cells = {self.cells} is not a perfect square")
        return nx


@dataclass
class BenchSetup:
    """Assembled problem pieces shared by all solver variants of a run."""

    problem: SlabProblem
    partition: object
    case: ManufacturedCase
    geometry: MgGeometry
    v0: np.ndarray

    @property
    def n_dof_slab(self) -> int:
        return (self.problem.basis.k + 1) * self.problem.disc.ndof


def build_setup(
    params: ModelParams,
    nx: int,
    steps: int,
    k: int = 1,
    T: float = 1.0,
    config: DiscretizationConfig | None = None,
    mg: MgConfig | None = None,
    quad_order: int = 4,
) -> BenchSetup:
    """Uniform all-Dirichlet manufactured problem on nx x nx cells."""
    mg = mg or MgConfig()
    mesh = boundary_tag_assign(uniform_mesh(nx, nx), all_dirichlet)
    disc = Discretization(mesh, quad_order=quad_order)
    case = ManufacturedCase(params)
    config = config or DiscretizationConfig()
    basis = gauss_radau(k)
    problem = SlabProblem(
        disc=disc, params=params, config=config, data=case.problem_data(), basis=basis
    )
    geometry = MgGeometry.from_fine(disc, min_cells=mg.min_cells)
    v0 = interpolate_velocity(disc.velocity, case.velocity, 0.0)
    return BenchSetup(
        problem=problem,
        partition=uniform_partition(T, steps),
        case=case,
        geometry=geometry,
        v0=v0,
    )


def run_instance(
    spec: InstanceSpec,
    solver: str,
    k: int = 1,
    newton: NewtonConfig | None = None,
    krylov: KrylovConfig | None = None,
    mg: MgConfig | None = None,
    sigma_max: float | None = None,
    setup: BenchSetup | None = None,
) -> tuple[RunRecord, list | None]:
    """March one instance with one solver; failures become failed records."""
    mg = mg or MgConfig()
    setup = setup or build_setup(spec.params, spec.nx, spec.steps, k=k, mg=mg)
    variant = make_variant(solver, spec.params, sigma_max)
    newton = newton or NewtonConfig(variant=variant)
    if newton.variant is not variant:
        newton = NewtonConfig(**{**newton.__dict__, "variant": variant})
    factory = StmgFactory(setup.geometry, mg)
    solve = make_slab_solver(newton, krylov or KrylovConfig(), factory)

    t_begin = time.perf_counter()
    try:
        traj, stats = march(setup.problem, setup.partition, setup.v0, solve)
        success = True
    except MarchError as err:
        traj = None
        stats = err.partial_stats
        success = False
    wall = time.perf_counter() - t_begin

    if success:
        e_phi, e_div = error_norms(
            setup.problem.disc, setup.problem.basis, setup.partition, traj, setup.case
        )
    else:
        e_phi = e_div = float("nan")
    nnl = [s.n_nl for s in stats] or [0]
    nls = [st.n_l for s in stats for st in s.steps] or [0]
    record = RunRecord(
        p=spec.params.p,
        delta=spec.params.delta,
        nu=spec.params.nu,
        nu_inf=spec.params.nu_inf,
        cells=spec.cells,
        steps=spec.steps,
        solver=solver,
        success=success,
        work=work(stats, setup.n_dof_slab),
        mean_nnl=float(np.mean(nnl)),
        max_nnl=int(np.max(nnl)),
        mean_nl=float(np.mean(nls)),
        max_nl=int(np.max(nls)),
        e_phi=e_phi,
        e_div=e_div,
        wall_s=wall,
    )
    return record, traj


def convergence_study(
    params: ModelParams,
    levels: list,
    solver: str = "modn",
    steps_for=None,
    k: int = 1,
    newton: NewtonConfig | None = None,
    mg: MgConfig | None = None,
):
    """Errors and rates over nested meshes.

    levels are cells-per-direction (powers of two); the default pairs every
    level with steps = cells-per-direction so space and time refine
    together.  Returns a list of row dicts (h, e_phi, eoc_phi, e_div,
    eoc_div).
    """
    from .metrics import eoc

    steps_for = steps_for or (lambda nx: nx)
    rows = []
    errs_phi, errs_div = [], []
    for nx in levels:
        spec = InstanceSpec(params=params, cells=nx * nx, steps=steps_for(nx))
        record, _ = run_instance(spec, solver, k=k, newton=newton, mg=mg)
        if not record.success:
            raise RuntimeError(f"convergence run failed on the {nx}x{nx} mesh")
        errs_phi.append(record.e_phi)
        errs_div.append(record.e_div)
        rows.append({"h": 1.0 / nx, "e_phi": record.e_phi, "e_div": record.e_div})
    r_phi = [None] + eoc(errs_phi)
    r_div = [None] + eoc(errs_div)
    for row, rp, rd in zip(rows, r_phi, r_div):
        row["eoc_phi"] = rp
        row["eoc_div"] = rd
    return rows


def desk_sweep_specs(full_grid: bool = False) -> list:
    """Instance grid of the solver comparison sweep.

    The desk-scale default keeps runtimes moderate; the full grid mirrors
    the complete parameter set behind a flag.
    """
    if full_grid:
        ps = (1.16, 1.2, 1.25, 1.33, 1.5, 1.66)
        deltas = (1e-5, 1e-10, 1e-15, 1e-20)
        nus = (1e-1, 1e-2, 1e-3)
        nu_infs = (1e-5, 0.0)
        cell_counts = (16, 64, 256, 1024)
    else:
        ps = (1.25, 1.5)
        deltas = (1e-5, 1e-10)
        nus = (1e-2, 1e-3)
        nu_infs = (0.0, 1e-5)
        cell_counts = (16, 64, 256, 1024)
    specs = []
    for p in ps:
        for delta in deltas:
            for nu in nus:
                for nu_inf in nu_infs:
                    for cells in cell_counts:
                        nx = int(round(math.sqrt(cells)))
                        specs.append(
                            InstanceSpec(
                                params=ModelParams(p=p, delta=delta, nu=nu, nu_inf=nu_inf),
                                cells=cells,
                                steps=nx,
                            )
                        )
    return specs


def run_sweep(
    specs,
    solvers=SOLVER_NAMES,
    k: int = 1,
    newton_for=None,
    mg: MgConfig | None = None,
) -> list:
    """Run every (instance, solver) pair; failed solves yield failed records."""
    records = []
    for spec in specs:
        setup = build_setup(spec.params, spec.nx, spec.steps, k=k, mg=mg or MgConfig())
        for solver in solvers:
            newton = newton_for(solver, spec) if newton_for else None
            record, _ = run_instance(spec, solver, k=k, newton=newton, mg=mg, setup=setup)
            records.append(record)
    return records
