"""Shear-thinning stress law, its tangents, their spectra, and the natural
distance map.

The constitutive model is

    S(A) = eta(A) A,    eta(A) = nu_inf + nu (delta^2 + |A|^2)^((p-2)/2),

acting on symmetric 2x2 tensors A, with 1 < p <= 2 and regularization
delta >= 0.  Three linearizations of S share this module: an isotropic
freeze ("pic"), the exact Frechet derivative ("exn"), and a stress-clipped
rank-one modification ("modn").  All of them are rank-one perturbations of
eta(A) * Id, so their spectra are available in closed form.

Scalar entry points operate on :class:`SymTensor2`; the ``*_field`` kernels
accept numpy arrays of squared tensor norms and are used by the assembly
routines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConstitutiveDomainError",
    "ModelParams",
    "SymTensor2",
    "TangentVariant",
    "TangentEval",
    "picard",
    "exact_newton",
    "modified_newton",
    "effective_viscosity",
    "stress",
    "stress_derivative_apply",
    "tangent_apply",
    "tangent_spectrum",
    "natural_distance_map",
    "eta_field",
    "mu_field",
    "rank_one_coeff_exact",
    "tangent_coeffs_field",
    "clip_factor_field",
    "phi_scale_field",
]

PIC = "pic"
EXN = "exn"
MODN = "modn"

_SQRT2 = math.sqrt(2.0)


class ConstitutiveDomainError(ValueError):
    """Operation evaluated outside its admissible parameter regime."""


@dataclass(frozen=True)
class ModelParams:
    """Constitutive tuple (p, delta, nu, nu_inf).

    p is the power-law exponent (1 < p <= 2), delta the shear regularization,
    nu the consistency coefficient and nu_inf the Newtonian floor.
    """

    p: float
    delta: float
    nu: float
    nu_inf: float = 0.0

    def __post_init__(self):
        if not 1.0 < self.p <= 2.0:
            raise ConstitutiveDomainError(f"exponent p must lie in (1, 2], got {self.p}")
        if self.delta < 0.0:
            raise ConstitutiveDomainError(f"delta must be >= 0, got {self.delta}")
        if self.nu <= 0.0:
            raise ConstitutiveDomainError(f"nu must be > 0, got {self.nu}")
        if self.nu_inf < 0.0:
            raise ConstitutiveDomainError(f"nu_inf must be >= 0, got {self.nu_inf}")


@dataclass(frozen=True)
class SymTensor2:
    """Symmetric 2x2 tensor with components (a11, a22, a12)."""

    a11: float
    a22: float
    a12: float

    def norm_sq(self) -> float:
        """Squared Frobenius norm a11^2 + a22^2 + 2 a12^2."""
        return self.a11 * self.a11 + self.a22 * self.a22 + 2.0 * self.a12 * self.a12

    def norm(self) -> float:
        return math.sqrt(self.norm_sq())

    def dot(self, other: "SymTensor2") -> float:
        """Frobenius inner product A : B."""
        return (
            self.a11 * other.a11
            + self.a22 * other.a22
            + 2.0 * self.a12 * other.a12
        )

    def scaled(self, c: float) -> "SymTensor2":
        return SymTensor2(c * self.a11, c * self.a22, c * self.a12)

    def __add__(self, other: "SymTensor2") -> "SymTensor2":
        return SymTensor2(self.a11 + other.a11, self.a22 + other.a22, self.a12 + other.a12)

    def __sub__(self, other: "SymTensor2") -> "SymTensor2":
        return SymTensor2(self.a11 - other.a11, self.a22 - other.a22, self.a12 - other.a12)

    def as_vec3(self) -> np.ndarray:
        """Coordinates in the weighted basis {e11, e22, sqrt(2) e12}.

        In this basis the Frobenius inner product of tensors is the Euclidean
        dot product of the coordinate vectors.
        """
        return np.array([self.a11, self.a22, _SQRT2 * self.a12])

    @classmethod
    def from_vec3(cls, vec) -> "SymTensor2":
        return cls(float(vec[0]), float(vec[1]), float(vec[2]) / _SQRT2)

    @classmethod
    def zero(cls) -> "SymTensor2":
        return cls(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class TangentVariant:
    """Selector for the constitutive linearization.

    kind is one of "pic", "exn", "modn".  sigma_max is the stress-clip bound
    and is consulted only for kind "modn"; it may be infinite.
    """

    kind: str
    sigma_max: float = math.inf

    def __post_init__(self):
        if self.kind not in (PIC, EXN, MODN):
            raise ValueError(f"unknown tangent kind {self.kind!r}")
        if self.kind == MODN and self.sigma_max < 0.0:
            raise ValueError("sigma_max must be >= 0")


def picard() -> TangentVariant:
    return TangentVariant(PIC)


def exact_newton() -> TangentVariant:
    return TangentVariant(EXN)


def modified_newton(sigma_max: float) -> TangentVariant:
    return TangentVariant(MODN, sigma_max)


@dataclass(frozen=True)
class TangentEval:
    """Spectral data of a tangent at one state.

    lambda_perp acts on {B : A:B = 0}, lambda_par in the direction of A.
    ratio = lambda_perp / lambda_par >= 1 for 1 < p < 2; s is the clip
    factor in [0, 1] (0 for "pic", 1 for "exn").
    """

    eta: float
    mu: float
    lambda_perp: float
    lambda_par: float
    ratio: float
    s: float


def _check_derivative_domain(params: ModelParams):
    if params.delta <= 0.0:
        raise ConstitutiveDomainError("derivative operations require delta > 0")


def effective_viscosity(params: ModelParams, A: SymTensor2) -> float:
    """eta(A) = nu_inf + nu (delta^2 + |A|^2)^((p-2)/2); strictly positive."""
    nsq = A.norm_sq()
    if params.delta == 0.0 and nsq == 0.0 and params.p < 2.0:
        raise ConstitutiveDomainError(
            "effective viscosity is singular at zero shear for delta = 0, p < 2"
        )
    return params.nu_inf + params.nu * (params.delta**2 + nsq) ** ((params.p - 2.0) / 2.0)


def stress(params: ModelParams, A: SymTensor2) -> SymTensor2:
    """S(A) = eta(A) A, with the zero-limit convention at A = 0, delta = 0."""
    nsq = A.norm_sq()
    if nsq == 0.0:
        # |A|^(p-2) A -> 0 as A -> 0 for p > 1, also in the delta = 0 limit.
        return SymTensor2.zero()
    return A.scaled(effective_viscosity(params, A))


def stress_derivative_apply(params: ModelParams, A: SymTensor2, H: SymTensor2) -> SymTensor2:
    """Frechet derivative DS(A)[H]; linear and self-adjoint in H.

    DS(A)[H] = eta(A) H + nu (p-2) (delta^2+|A|^2)^((p-4)/2) (A:H) A.
    Requires delta > 0.
    """
    _check_derivative_domain(params)
    nsq = A.norm_sq()
    eta = params.nu_inf + params.nu * (params.delta**2 + nsq) ** ((params.p - 2.0) / 2.0)
    beta = params.nu * (params.p - 2.0) * (params.delta**2 + nsq) ** ((params.p - 4.0) / 2.0)
    coeff = beta * A.dot(H)
    return SymTensor2(
        eta * H.a11 + coeff * A.a11,
        eta * H.a22 + coeff * A.a22,
        eta * H.a12 + coeff * A.a12,
    )


def _clip_factor(variant: TangentVariant, sigma_norm: float) -> float:
    """Clip factor s = min(1, sigma_max/|sigma|), with s = 0 at sigma = 0."""
    if variant.kind == PIC:
        return 0.0
    if variant.kind == EXN:
        return 1.0
    if sigma_norm == 0.0:
        return 0.0
    return min(1.0, variant.sigma_max / sigma_norm)


def tangent_apply(
    variant: TangentVariant, params: ModelParams, A: SymTensor2, B: SymTensor2
) -> SymTensor2:
    """Apply the selected constitutive tangent at state A to direction B.

    "pic" freezes the viscosity: eta(A) B.  "exn" is the exact derivative
    DS(A)[B].  "modn" scales the rank-one correction by the clip factor
    s = min(1, sigma_max/|mu A|), which interpolates between the two.
    """
    _check_derivative_domain(params)
    nsq = A.norm_sq()
    dsq = params.delta**2 + nsq
    mu = params.nu * dsq ** ((params.p - 2.0) / 2.0)
    eta = params.nu_inf + mu
    s = _clip_factor(variant, mu * math.sqrt(nsq))
    coeff = s * (params.p - 2.0) * (mu / dsq) * A.dot(B)
    return SymTensor2(
        eta * B.a11 + coeff * A.a11,
        eta * B.a22 + coeff * A.a22,
        eta * B.a12 + coeff * A.a12,
    )


def tangent_spectrum(
    variant: TangentVariant, params: ModelParams, A: SymTensor2
) -> TangentEval:
    """Closed-form eigenvalues of the tangent at state A.

    lambda_perp = eta(A) with multiplicity 2, lambda_par = eta + s (p-2) mu
    |A|^2 / (delta^2+|A|^2) in the direction of A.  Both are positive for
    1 < p <= 2.
    """
    _check_derivative_domain(params)
    nsq = A.norm_sq()
    dsq = params.delta**2 + nsq
    mu = params.nu * dsq ** ((params.p - 2.0) / 2.0)
    eta = params.nu_inf + mu
    s = _clip_factor(variant, mu * math.sqrt(nsq))
    lam_par = eta + s * (params.p - 2.0) * mu * nsq / dsq
    return TangentEval(
        eta=eta,
        mu=mu,
        lambda_perp=eta,
        lambda_par=lam_par,
        ratio=eta / lam_par,
        s=s,
    )


def natural_distance_map(params: ModelParams, A: SymTensor2) -> SymTensor2:
    """Phi_delta(A) = (delta^2 + |A|^2)^((p-2)/4) A, with Phi(0) = 0."""
    nsq = A.norm_sq()
    if nsq == 0.0:
        return SymTensor2.zero()
    return A.scaled((params.delta**2 + nsq) ** ((params.p - 2.0) / 4.0))


# ---------------------------------------------------------------------------
# Array kernels.  All take the squared Frobenius norm |A|^2 elementwise and
# broadcast; they back the quadrature-point loops in the assembly code.
# ---------------------------------------------------------------------------


def eta_field(params: ModelParams, a_sq: np.ndarray) -> np.ndarray:
    """Effective viscosity at squared shear-rate norms a_sq."""
    return params.nu_inf + params.nu * (params.delta**2 + a_sq) ** ((params.p - 2.0) / 2.0)


def mu_field(params: ModelParams, a_sq: np.ndarray) -> np.ndarray:
    """Power-law viscosity part mu = nu (delta^2 + a_sq)^((p-2)/2)."""
    return params.nu * (params.delta**2 + a_sq) ** ((params.p - 2.0) / 2.0)


def rank_one_coeff_exact(params: ModelParams, a_sq: np.ndarray) -> np.ndarray:
    """Coefficient beta with DS(A)[H] = eta H + beta (A:H) A (exact tangent)."""
    return params.nu * (params.p - 2.0) * (params.delta**2 + a_sq) ** ((params.p - 4.0) / 2.0)


def clip_factor_field(variant: TangentVariant, params: ModelParams, a_sq: np.ndarray) -> np.ndarray:
    """Clip factor s at squared norms a_sq, vectorized; 0 exactly at A = 0."""
    if variant.kind == PIC:
        return np.zeros_like(a_sq)
    if variant.kind == EXN:
        return np.ones_like(a_sq)
    sigma = mu_field(params, a_sq) * np.sqrt(a_sq)
    with np.errstate(divide="ignore"):
        s = np.minimum(1.0, variant.sigma_max / np.where(sigma > 0.0, sigma, np.inf))
    return s


def tangent_coeffs_field(
    variant: TangentVariant, params: ModelParams, a_sq: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise coefficients (eta, gamma) with T(B) = eta B + gamma (A:B) A."""
    if params.delta <= 0.0:
        raise ConstitutiveDomainError("derivative operations require delta > 0")
    dsq = params.delta**2 + a_sq
    mu = params.nu * dsq ** ((params.p - 2.0) / 2.0)
    eta = params.nu_inf + mu
    if variant.kind == PIC:
        return eta, np.zeros_like(eta)
    gamma = (params.p - 2.0) * mu / dsq
    if variant.kind == MODN:
        gamma = clip_factor_field(variant, params, a_sq) * gamma
    return eta, gamma


def phi_scale_field(params: ModelParams, a_sq: np.ndarray) -> np.ndarray:
    """Scalar factor of the natural distance map, (delta^2 + a_sq)^((p-2)/4).

    At delta = 0 the zero-limit convention Phi(0) = 0 is enforced by mapping
    vanishing norms to a zero factor.
    """
    dsq = params.delta**2 + a_sq
    if params.delta == 0.0:
        with np.errstate(divide="ignore"):
            fac = np.where(dsq > 0.0, dsq, 1.0) ** ((params.p - 2.0) / 4.0)
        return np.where(dsq > 0.0, fac, 0.0)
    return dsq ** ((params.p - 2.0) / 4.0)
