"""Flexible right-preconditioned GMRES in a weighted inner product.

The Arnoldi process is orthonormal in the inner product <x, y>_M = x' M y,
so the recurrence residual estimate equals the M-norm of the true residual;
restarts and the final acceptance recompute the true residual explicitly.
Flexibility (per-iteration preconditioner vectors are stored) permits a
changing preconditioner such as a rebuilt multigrid cycle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["KrylovConfig", "FgmresResult", "fgmres"]


@dataclass
class KrylovConfig:
    """Restart length and total iteration budget."""

    restart: int = 60
    max_iters: int = 300

    def __post_init__(self):
        if self.restart <= 0 or self.max_iters <= 0:
            raise ValueError("restart and max_iters must be positive")


@dataclass
class FgmresResult:
    x: np.ndarray
    iterations: int
    converged: bool
    residual_norm: float
    target: float


class _Identity:
    @staticmethod
    def apply(x):
        return x


def fgmres(
    op,
    rhs: np.ndarray,
    tol: float,
    config: KrylovConfig | None = None,
    precond=None,
    mass=None,
    x0: np.ndarray | None = None,
) -> FgmresResult:
    """Solve op(x) = rhs to a relative tolerance in the M-weighted norm.

    op and precond are callables on flat vectors; mass provides `apply`
    returning M x (identity when None).  The returned iteration count is the
    total number of preconditioned operator applications, the quantity
    entering the work measure.
    """
    config = config or KrylovConfig()
    mass = mass or _Identity
    n = rhs.size
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)

    def m_norm(v):
        return float(np.sqrt(np.dot(v, mass.apply(v))))

    b_norm = m_norm(rhs)
    if b_norm == 0.0:
        return FgmresResult(np.zeros(n), 0, True, 0.0, 0.0)
    target = tol * b_norm

    r = rhs - op(x) if x0 is not None else rhs.copy()
    res_norm = m_norm(r)
    total_iters = 0

    while total_iters < config.max_iters:
        if res_norm <= target:
            return FgmresResult(x, total_iters, True, res_norm, target)
        m = min(config.restart, config.max_iters - total_iters)
        V = [r / res_norm]
        MV = [mass.apply(V[0]) / res_norm] if mass is not _Identity else [V[0]]
        Z = []
        H = np.zeros((m + 1, m))
        # Givens rotation data for the incremental least squares solve.
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = res_norm
        j_used = 0
        for j in range(m):
            z = V[j] if precond is None else precond(V[j])
            Z.append(z)
            w = op(z)
            mw = mass.apply(w) if mass is not _Identity else w
            # Modified Gram-Schmidt with one re-orthogonalization pass; the
            # M-weight of the working vector is updated by linearity.
            for _pass in range(2):
                for i in range(j + 1):
                    hij = float(np.dot(w, MV[i]))
                    H[i, j] += hij
                    w = w - hij * V[i]
                    mw = w if mass is _Identity else mw - hij * MV[i]
            hh = float(np.sqrt(max(np.dot(w, mw), 0.0)))
            H[j + 1, j] = hh
            total_iters += 1
            j_used = j + 1
            breakdown = hh <= 1e-14 * max(1.0, abs(H[: j + 1, j]).max())
            if not breakdown:
                V.append(w / hh)
                MV.append(V[-1] if mass is _Identity else mw / hh)
            # Apply previous rotations to the new column, then form a new one.
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            denom = np.hypot(H[j, j], H[j + 1, j])
            if denom == 0.0:
                cs[j], sn[j] = 1.0, 0.0
            else:
                cs[j], sn[j] = H[j, j] / denom, H[j + 1, j] / denom
            H[j, j] = cs[j] * H[j, j] + sn[j] * H[j + 1, j]
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            if abs(g[j + 1]) <= target or breakdown:
                break
        # Solve the triangular system for the inner coordinates; lstsq guards
        # against a singular head after a happy breakdown.
        k = j_used
        y = np.linalg.lstsq(H[:k, :k], g[:k], rcond=None)[0] if k else np.zeros(0)
        for i in range(k):
            x = x + y[i] * Z[i]
        r = rhs - op(x)
        res_norm = m_norm(r)

    return FgmresResult(x, total_iters, res_norm <= target, res_norm, target)
