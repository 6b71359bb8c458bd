"""Error norms, convergence rates, work, and performance profiles."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields

import numpy as np

from ..constitutive import ModelParams, phi_scale_field
from ..femspace import q2_grads, tensor_gauss
from ..forms import Discretization
from ..timebasis import TemporalBasis, TimePartition, lagrange_eval

__all__ = [
    "error_norms",
    "eoc",
    "work",
    "apparent_reynolds",
    "RunRecord",
    "ProfileTable",
    "dolan_more",
    "records_to_csv",
    "records_from_csv",
    "profile_to_csv",
]


def _gauss01(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return (x + 1.0) / 2.0, w / 2.0


def error_norms(
    disc: Discretization,
    basis: TemporalBasis,
    partition: TimePartition,
    traj: list,
    case,
    spatial_order: int | None = None,
    temporal_points: int | None = None,
) -> tuple[float, float]:
    """Space-time L2(L2) errors (e_phi, e_div) of a slab trajectory.

    e_phi measures the natural-distance mismatch Phi_delta(Dv) -
    Phi_delta(Dv_h); e_div the divergence of the discrete velocity.  Both
    use over-resolved quadrature: one order beyond the assembly rule in
    space, k+2 Gauss points per slab in time.
    """
    params: ModelParams = case.params
    q = spatial_order or disc.quad.q + 1
    squad = tensor_gauss(q)
    grads = q2_grads(squad.points) * disc.velocity.grad_scale()  # (9, nq, 2)
    wq = squad.weights * (disc.mesh.hx * disc.mesh.hy)
    cell_size = np.array([disc.mesh.hx, disc.mesh.hy])
    pts = disc.mesh.cell_origins[:, None, :] + squad.points[None, :, :] * cell_size
    xs, ys = pts[..., 0], pts[..., 1]

    ntp = temporal_points or (basis.k + 2)
    tg, tw = _gauss01(ntp)
    blend = np.array([[lagrange_eval(basis, mu, tp) for mu in range(basis.k + 1)] for tp in tg])

    mv = disc.n_velocity
    e_phi_sq = 0.0
    e_div_sq = 0.0
    for (t0, t1), U in zip(partition.intervals(), traj):
        tau = t1 - t0
        for ig in range(ntp):
            tcur = t0 + tau * tg[ig]
            vcoeff = blend[ig] @ U[:, :mv]
            local = vcoeff.reshape(-1, 2)[disc.cell_nodes]
            gh = np.einsum("aqk,cad->cqdk", grads, local)
            ah = np.stack(
                [gh[..., 0, 0], gh[..., 1, 1], 0.5 * (gh[..., 0, 1] + gh[..., 1, 0])], axis=-1
            )
            aex = case.sym_grad(xs, ys, tcur)
            ph = phi_scale_field(params, ah[..., 0] ** 2 + ah[..., 1] ** 2 + 2 * ah[..., 2] ** 2)
            pe = phi_scale_field(params, aex[..., 0] ** 2 + aex[..., 1] ** 2 + 2 * aex[..., 2] ** 2)
            diff = ph[..., None] * ah - pe[..., None] * aex
            nrm = diff[..., 0] ** 2 + diff[..., 1] ** 2 + 2.0 * diff[..., 2] ** 2
            e_phi_sq += tau * tw[ig] * float(np.einsum("q,cq->", wq, nrm))
            divh = gh[..., 0, 0] + gh[..., 1, 1]
            e_div_sq += tau * tw[ig] * float(np.einsum("q,cq->", wq, divh**2))
    return math.sqrt(e_phi_sq), math.sqrt(e_div_sq)


def eoc(errors) -> list:
    """Experimental orders log2(e_i / e_{i+1}) under mesh halving.

    A vanishing error makes the rate undefined; such entries are None.
    """
    errors = list(errors)
    rates = []
    for a, b in zip(errors[:-1], errors[1:]):
        if a <= 0.0 or b <= 0.0:
            rates.append(None)
        else:
            rates.append(math.log2(a / b))
    return rates


def work(slab_stats, n_dof: int) -> float:
    """Aggregate work W = (total preconditioned Krylov iterations) * N_dof."""
    total = sum(s.n_l_total for s in slab_stats)
    return float(total * n_dof)


def apparent_reynolds(params: ModelParams, U: float, L: float) -> float:
    """Re = U L / eta_app(U/L) at the characteristic shear rate U/L."""
    if U <= 0.0 or L <= 0.0:
        raise ValueError("characteristic scales must be positive")
    shear = U / L
    eta_app = params.nu_inf + params.nu * (params.delta**2 + shear**2) ** ((params.p - 2.0) / 2.0)
    return U * L / eta_app


@dataclass
class RunRecord:
    """One benchmark instance/solver outcome for the performance profile."""

    p: float
    delta: float
    nu: float
    nu_inf: float
    cells: int
    steps: int
    solver: str
    success: bool
    work: float
    mean_nnl: float
    max_nnl: int
    mean_nl: float
    max_nl: int
    e_phi: float
    e_div: float
    wall_s: float

    def instance_key(self):
        return (self.p, self.delta, self.nu, self.nu_inf, self.cells, self.steps)


_CSV_HEADER = [f.name for f in fields(RunRecord)]


def _fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return f"{x:.17e}"
    return str(x)


def records_to_csv(path, records):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_HEADER)
        for rec in records:
            writer.writerow([_fmt(getattr(rec, name)) for name in _CSV_HEADER])


def records_from_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.append(
                RunRecord(
                    p=float(row["p"]),
                    delta=float(row["delta"]),
                    nu=float(row["nu"]),
                    nu_inf=float(row["nu_inf"]),
                    cells=int(row["cells"]),
                    steps=int(row["steps"]),
                    solver=row["solver"],
                    success=bool(int(row["success"])),
                    work=float(row["work"]),
                    mean_nnl=float(row["mean_nnl"]),
                    max_nnl=int(row["max_nnl"]),
                    mean_nl=float(row["mean_nl"]),
                    max_nl=int(row["max_nl"]),
                    e_phi=float(row["e_phi"]),
                    e_div=float(row["e_div"]),
                    wall_s=float(row["wall_s"]),
                )
            )
    return out


@dataclass
class ProfileTable:
    """Sampled Dolan-More profiles pi_s(tau) per solver.

    `success` holds pi_s(inf), the per-solver success fraction.
    """

    tau: np.ndarray
    pi: dict
    success: dict


def dolan_more(records, tau_grid=None) -> ProfileTable:
    """Performance profile over instances x solvers with work as cost.

    r_{i,s} = W_{i,s} / min_s' W_{i,s'} with r = inf for failed runs;
    pi_s(tau) is the fraction of instances with r <= tau.  Instances on
    which every solver failed are dropped from the denominators.
    """
    records = list(records)
    if not records:
        raise ValueError("empty record set")
    solvers = sorted({r.solver for r in records})
    by_instance = {}
    for rec in records:
        by_instance.setdefault(rec.instance_key(), {})[rec.solver] = rec
    ratios = {s: [] for s in solvers}
    kept = 0
    for runs in by_instance.values():
        best = min((r.work for r in runs.values() if r.success), default=None)
        if best is None:
            continue
        kept += 1
        for s in solvers:
            rec = runs.get(s)
            if rec is None or not rec.success:
                ratios[s].append(np.inf)
            else:
                ratios[s].append(rec.work / best)
    if kept == 0:
        raise ValueError("no instance with a successful solver")
    if tau_grid is None:
        finite = [r for rs in ratios.values() for r in rs if np.isfinite(r)]
        hi = max(finite) if finite else 1.0
        tau_grid = np.geomspace(1.0, max(hi * 1.05, 2.0), 64)
    tau_grid = np.asarray(tau_grid, dtype=float)
    pi = {}
    success = {}
    for s in solvers:
        rr = np.asarray(ratios[s])
        pi[s] = np.array([np.mean(rr <= t) for t in tau_grid])
        success[s] = float(np.mean(np.isfinite(rr)))
    return ProfileTable(tau=tau_grid, pi=pi, success=success)


def profile_to_csv(path, table: ProfileTable):
    solvers = sorted(table.pi)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau"] + solvers)
        for i, t in enumerate(table.tau):
            writer.writerow([_fmt(float(t))] + [_fmt(float(table.pi[s][i])) for s in solvers])
