"""Manufactured solution on the unit square and its closed-form forcing.

The prescribed velocity

    v(x, y, t) = sin(t) * ( sin(pi x)^2 sin(pi y) cos(pi y),
                           -sin(pi x) cos(pi x) sin(pi y)^2 )

is pointwise divergence-free and vanishes on the boundary and at t = 0; the
pressure is sin(t) sin(pi x) cos(pi x) sin(pi y) cos(pi y).  The body force
is assembled from the strong form

    f = dv/dt + div(v x v) - div S(Dv) + grad(pi)

using hand-differentiated first and second spatial derivatives and the
chain rule through the effective viscosity; no automatic differentiation is
involved.  Velocity gradients vanish in the domain corners and at the
center, which makes the viscous term genuinely nonsmooth for small delta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..constitutive import ModelParams
from ..forms import ProblemData

__all__ = ["ManufacturedCase"]

_PI = np.pi


def _a(x):
    return np.sin(_PI * x) ** 2


def _da(x):
    return _PI * np.sin(2.0 * _PI * x)


def _dda(x):
    return 2.0 * _PI**2 * np.cos(2.0 * _PI * x)


def _b(x):
    return 0.5 * np.sin(2.0 * _PI * x)


def _db(x):
    return _PI * np.cos(2.0 * _PI * x)


def _ddb(x):
    return -2.0 * _PI**2 * np.sin(2.0 * _PI * x)


@dataclass(frozen=True)
class ManufacturedCase:
    """Analytic fields and forcing for one constitutive parameter tuple."""

    params: ModelParams

    # -- analytic fields -------------------------------------------------
    def velocity(self, x, y, t):
        s = np.sin(t)
        out = np.empty(np.broadcast(x, y).shape + (2,))
        out[..., 0] = s * _a(x) * _b(y)
        out[..., 1] = -s * _b(x) * _a(y)
        return out

    def velocity_dt(self, x, y, t):
        c = np.cos(t)
        out = np.empty(np.broadcast(x, y).shape + (2,))
        out[..., 0] = c * _a(x) * _b(y)
        out[..., 1] = -c * _b(x) * _a(y)
        return out

    def velocity_grad(self, x, y, t):
        """grad[..., d, k] = d v_d / d x_k."""
        s = np.sin(t)
        g = np.empty(np.broadcast(x, y).shape + (2, 2))
        g[..., 0, 0] = s * _da(x) * _b(y)
        g[..., 0, 1] = s * _a(x) * _db(y)
        g[..., 1, 0] = -s * _db(x) * _a(y)
        g[..., 1, 1] = -s * _b(x) * _da(y)
        return g

    def velocity_hess(self, x, y, t):
        """hess[..., d, k, l] = d^2 v_d / (d x_k d x_l)."""
        s = np.sin(t)
        h = np.empty(np.broadcast(x, y).shape + (2, 2, 2))
        h[..., 0, 0, 0] = s * _dda(x) * _b(y)
        h[..., 0, 0, 1] = s * _da(x) * _db(y)
        h[..., 0, 1, 0] = h[..., 0, 0, 1]
        h[..., 0, 1, 1] = s * _a(x) * _ddb(y)
        h[..., 1, 0, 0] = -s * _ddb(x) * _a(y)
        h[..., 1, 0, 1] = -s * _db(x) * _da(y)
        h[..., 1, 1, 0] = h[..., 1, 0, 1]
        h[..., 1, 1, 1] = -s * _b(x) * _dda(y)
        return h

    def pressure(self, x, y, t):
        return np.sin(t) * _b(x) * _b(y)

    def pressure_grad(self, x, y, t):
        s = np.sin(t)
        g = np.empty(np.broadcast(x, y).shape + (2,))
        g[..., 0] = s * _db(x) * _b(y)
        g[..., 1] = s * _b(x) * _db(y)
        return g

    def sym_grad(self, x, y, t):
        """Symmetric gradient as (..., 3) components (a11, a22, a12)."""
        g = self.velocity_grad(x, y, t)
        return np.stack(
            [g[..., 0, 0], g[..., 1, 1], 0.5 * (g[..., 0, 1] + g[..., 1, 0])], axis=-1
        )

    # -- forcing -----------------------------------------------------------
    def forcing(self, x, y, t):
        """f = dv/dt + (v . grad) v - div S(Dv) + grad(pi)."""
        prm = self.params
        v = self.velocity(x, y, t)
        g = self.velocity_grad(x, y, t)
        h = self.velocity_hess(x, y, t)

        conv = np.einsum("...k,...dk->...d", v, g)

        # Symmetric gradient components and their spatial derivatives.
        a11 = g[..., 0, 0]
        a22 = g[..., 1, 1]
        a12 = 0.5 * (g[..., 0, 1] + g[..., 1, 0])
        da11 = h[..., 0, 0, :]
        da22 = h[..., 1, 1, :]
        da12 = 0.5 * (h[..., 0, 1, :] + h[..., 1, 0, :])
        a_sq = a11**2 + a22**2 + 2.0 * a12**2
        # d|A|^2/dx_k = 2 A : dA/dx_k
        dasq = 2.0 * (a11[..., None] * da11 + a22[..., None] * da22 + 2.0 * a12[..., None] * da12)

        dsq = prm.delta**2 + a_sq
        eta = prm.nu_inf + prm.nu * dsq ** ((prm.p - 2.0) / 2.0)
        deta = prm.nu * ((prm.p - 2.0) / 2.0) * dsq[..., None] ** ((prm.p - 4.0) / 2.0) * dasq

        div_s = np.empty_like(v)
        div_s[..., 0] = (
            deta[..., 0] * a11
            + deta[..., 1] * a12
            + eta * (da11[..., 0] + da12[..., 1])
        )
        div_s[..., 1] = (
            deta[..., 0] * a12
            + deta[..., 1] * a22
            + eta * (da12[..., 0] + da22[..., 1])
        )

        return self.velocity_dt(x, y, t) + conv - div_s + self.pressure_grad(x, y, t)

    # -- problem wiring ----------------------------------------------------
    def dirichlet(self, x, y, t):
        return np.zeros(np.broadcast(x, y).shape + (2,))

    def initial_velocity(self, x, y):
        return self.velocity(x, y, 0.0)

    def problem_data(self) -> ProblemData:
        return ProblemData(f=self.forcing, g_d=self.dirichlet, v0=self.initial_velocity)
