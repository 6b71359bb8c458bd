"""Right-sided Gauss-Radau nodes, Lagrange bases, and temporal matrices.

The reference interval is (0, 1] with the jump point at the left endpoint 0.
The (k+1)-point right-sided Gauss-Radau rule keeps the node at 1 and is
exact for polynomials of degree up to 2k.  The temporal matrices

    M_t[i,j] = int xi_j xi_i,   K_t[i,j] = int xi_j' xi_i + xi_j(0) xi_i(0),
    m_t[i]   = xi_i(0),

encode the mass, the broken time derivative with the left-sided jump, and
left-endpoint evaluation in the nodal Lagrange basis.  On a step of length
tau the pullback scales M_t by tau and leaves K_t and m_t unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial
from scipy.integrate import quad
from scipy.special import roots_jacobi

__all__ = [
    "TemporalBasis",
    "TemporalMatrices",
    "TimePartition",
    "gauss_radau",
    "lagrange_eval",
    "lagrange_deriv",
    "temporal_matrices",
    "uniform_partition",
    "quadrature_defect_order",
]

MAX_DEGREE = 6
DEFECT_FLOOR = 1e-14


@dataclass(frozen=True)
class TemporalBasis:
    """Nodal basis data for degree-k polynomials on (0, 1]."""

    k: int
    nodes: np.ndarray
    weights: np.ndarray

    def lagrange_polys(self) -> list[Polynomial]:
        """Lagrange cardinal polynomials l_mu with l_mu(nodes[nu]) = delta."""
        polys = []
        for mu in range(self.k + 1):
            others = np.delete(self.nodes, mu)
            poly = Polynomial.fromroots(others) if others.size else Polynomial([1.0])
            polys.append(poly / poly(self.nodes[mu]))
        return polys


@dataclass(frozen=True)
class TemporalMatrices:
    """Reference-interval temporal matrices (M_t, K_t, m_t)."""

    M_t: np.ndarray
    K_t: np.ndarray
    m_t: np.ndarray


def gauss_radau(k: int) -> TemporalBasis:
    """Right-sided (k+1)-point Gauss-Radau rule on (0, 1].

    Interior nodes are the roots of the Jacobi polynomial P_k^(1,0) mapped
    to (0, 1); the right endpoint is always a node.  Weights are the exact
    integrals of the Lagrange cardinal polynomials.
    """
    if not 0 <= k <= MAX_DEGREE:
        raise ValueError(f"temporal degree k must lie in [0, {MAX_DEGREE}], got {k}")
    if k == 0:
        return TemporalBasis(0, np.array([1.0]), np.array([1.0]))
    interior, _ = roots_jacobi(k, 1.0, 0.0)
    nodes = np.concatenate([(interior + 1.0) / 2.0, [1.0]])
    basis = TemporalBasis(k, nodes, np.empty(k + 1))
    weights = np.array([poly.integ()(1.0) - poly.integ()(0.0) for poly in basis.lagrange_polys()])
    return TemporalBasis(k, nodes, weights)


def lagrange_eval(basis: TemporalBasis, mu: int, that) -> np.ndarray | float:
    """Evaluate the Lagrange basis function l_mu at points in [0, 1]."""
    nodes = basis.nodes
    that = np.asarray(that, dtype=float)
    result = np.ones_like(that)
    for nu in range(basis.k + 1):
        if nu != mu:
            result = result * (that - nodes[nu]) / (nodes[mu] - nodes[nu])
    return result if result.ndim else float(result)


def lagrange_deriv(basis: TemporalBasis, mu: int, that) -> np.ndarray | float:
    """Evaluate l_mu' at points in [0, 1]."""
    poly = basis.lagrange_polys()[mu].deriv()
    out = poly(np.asarray(that, dtype=float))
    return out if np.ndim(out) else float(out)


def temporal_matrices(basis: TemporalBasis) -> TemporalMatrices:
    """Exact temporal matrices via over-resolved Gauss-Legendre quadrature.

    The integrands are polynomials of degree <= 2k; a (2k+2)-point Gauss rule
    integrates them exactly, so M_t reproduces the diagonal of Gauss-Radau
    weights to rounding.
    """
    k = basis.k
    gx, gw = np.polynomial.legendre.leggauss(2 * k + 2)
    gx = (gx + 1.0) / 2.0
    gw = gw / 2.0
    vals = np.array([lagrange_eval(basis, mu, gx) for mu in range(k + 1)])
    ders = np.array([lagrange_deriv(basis, mu, gx) for mu in range(k + 1)])
    at_zero = np.array([lagrange_eval(basis, mu, 0.0) for mu in range(k + 1)])
    M_t = np.einsum("q,jq,iq->ij", gw, vals, vals)
    K_t = np.einsum("q,jq,iq->ij", gw, ders, vals) + np.outer(at_zero, at_zero)
    return TemporalMatrices(M_t=M_t, K_t=K_t, m_t=at_zero)


@dataclass(frozen=True)
class TimePartition:
    """Strictly increasing time points t_0 < ... < t_N."""

    t: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("partition needs at least two time points")
        if not np.all(np.diff(t) > 0.0):
            raise ValueError("time points must be strictly increasing")
        object.__setattr__(self, "t", t)

    @property
    def n_steps(self) -> int:
        return self.t.size - 1

    @property
    def taus(self) -> np.ndarray:
        return np.diff(self.t)

    @property
    def tau_max(self) -> float:
        return float(np.max(self.taus))

    def intervals(self):
        for n in range(self.n_steps):
            yield float(self.t[n]), float(self.t[n + 1])


def uniform_partition(T: float, N: int, t0: float = 0.0) -> TimePartition:
    return TimePartition(np.linspace(t0, T, N + 1))


def quadrature_defect_order(k: int, f, tau_list) -> float:
    """Observed order of the Gauss-Radau quadrature defect under tau-refinement.

    The defect on a step of length tau is |int_0^tau f - tau * Q(f(tau .))|.
    Returns the least-squares slope of log(defect) against log(tau); defects
    below the 1e-14 floor are dropped, and if none remain the rule is exact
    for f and inf is returned.
    """
    taus = np.asarray(list(tau_list), dtype=float)
    if taus.size < 3:
        raise ValueError("need at least three step sizes")
    basis = gauss_radau(k)
    defects = []
    for tau in taus:
        exact, _ = quad(f, 0.0, tau, epsabs=1e-15, epsrel=1e-13, limit=200)
        approx = tau * float(np.dot(basis.weights, [f(tau * tn) for tn in basis.nodes]))
        defects.append(abs(exact - approx))
    defects = np.asarray(defects)
    keep = defects > DEFECT_FLOOR
    if not np.any(keep):
        return float("inf")
    slope = np.polyfit(np.log(taus[keep]), np.log(defects[keep]), 1)[0]
    return float(slope)
