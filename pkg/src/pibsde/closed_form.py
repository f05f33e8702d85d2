"""Riccati machinery for the exponential-affine value function factor.

Every instance is normalized to

    A'(t) + q2 A^2 - 2 q1 A + q0 = 0,   A(T) = 0,
    H'(t) = -h_coef * A(t),             H(T) = 0,

and the value-function factor is ``G(t, y) = exp(A y^2 + H)`` for the
linear-Gaussian kinds and ``exp(A y + H)`` for the CIR kind.

Kinds
-----
``linear-full``
    Investor observes the OU factor.
``linear-partial``
    Investor observes only prices; the Kalman-filtered model is the
    full-information model with correlation 1 and factor diffusion ``abar``.
``cir-full``
    Investor observes the CIR factor.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .filtering import abar
from .model import CirModel, LinearOuModel


class UnstableRegimeError(ValueError):
    """Complex or repeated Riccati roots; use :func:`nirvana_blowup_time` or RK4."""


class Kind(str, enum.Enum):
    LINEAR_FULL = "linear-full"
    LINEAR_PARTIAL = "linear-partial"
    CIR_FULL = "cir-full"


@dataclass(frozen=True)
class RiccatiSpec:
    q2: float
    q1: float
    q0: float
    h_coef: float = 0.0

    def __post_init__(self):
        if not all(np.isfinite([self.q2, self.q1, self.q0, self.h_coef])):
            raise ValueError("Riccati coefficients must be finite")

    def rhs_tau(self, A):
        """``dA/dtau`` in time-to-maturity ``tau = T - t``."""
        return self.q2 * A * A - 2.0 * self.q1 * A + self.q0

    @property
    def discriminant(self) -> float:
        return self.q1 ** 2 - self.q2 * self.q0


class RiccatiRoots(NamedTuple):
    A_plus: float
    A_minus: float
    discriminant: float
    is_complex: bool
    degenerate: bool


def _check_gamma(gamma):
    if not gamma > 0 or gamma == 1:
        raise ValueError("gamma must be positive and != 1")


def _linear_coeffs(kappa, a, rho, sigma, gamma, h_coef) -> RiccatiSpec:
    k = (1.0 - gamma) / gamma
    return RiccatiSpec(q2=2.0 * a * a * (1.0 + k * rho * rho),
                       q1=kappa - k * rho * a / sigma,
                       q0=k / (2.0 * sigma ** 2),
                       h_coef=h_coef)


def riccati_spec(kind, model, gamma) -> RiccatiSpec:
    """Coefficients of the Riccati equation for ``kind``."""
    kind = Kind(kind)
    _check_gamma(gamma)
    if kind is Kind.CIR_FULL:
        if not isinstance(model, CirModel):
            raise TypeError("cir-full needs a CirModel")
        if model.rho != 0:
            raise ValueError("the CIR closed form assumes rho = 0")
        return RiccatiSpec(q2=0.5 * model.a ** 2, q1=0.5 * model.kappa,
                           q0=model.c ** 2 * (1.0 - gamma) / (2.0 * gamma * model.sigma ** 2),
                           h_coef=model.kappa * model.ybar)
    if not isinstance(model, LinearOuModel):
        raise TypeError(f"{kind.value} needs a LinearOuModel")
    if model.mu != model.r:
        raise ValueError("the linear closed form assumes mu = r")
    if kind is Kind.LINEAR_FULL:
        return _linear_coeffs(model.kappa, model.a, model.rho, model.sigma, gamma, model.a ** 2)
    ab = abar(model)
    return _linear_coeffs(model.kappa, ab, 1.0, model.sigma, gamma, ab ** 2)


def spec_roots(spec: RiccatiSpec) -> RiccatiRoots:
    """Roots of ``q2 A^2 - 2 q1 A + q0``; ``A_plus`` is ``inf`` when ``q2 = 0``."""
    disc = spec.discriminant
    if spec.q2 == 0.0:
        if spec.q1 == 0.0:
            raise ValueError("degenerate Riccati equation: q2 = q1 = 0")
        return RiccatiRoots(np.inf, spec.q0 / (2.0 * spec.q1), disc, False, True)
    if disc < 0:
        re = spec.q1 / spec.q2
        return RiccatiRoots(re, re, disc, True, False)
    sq = np.sqrt(disc)
    # pick the non-cancelling form for each root
    big = spec.q1 + np.copysign(sq, spec.q1) if spec.q1 != 0 else sq
    r1 = big / spec.q2
    r2 = spec.q0 / big if big != 0 else 0.0
    return RiccatiRoots(max(r1, r2), min(r1, r2), disc, False, False)


def linear_riccati_roots(model: LinearOuModel, gamma) -> tuple[float, float, float]:
    """``(A_plus, A_minus, discriminant)`` for the full-information linear model."""
    r = spec_roots(riccati_spec(Kind.LINEAR_FULL, model, gamma))
    return r.A_plus, r.A_minus, r.discriminant


@dataclass(frozen=True)
class ClosedFormAH:
    """Explicit ``A(t)``, ``H(t)`` for a stable (distinct real roots) instance."""

    kind: Kind
    spec: RiccatiSpec
    T: float
    A_plus: float
    A_minus: float
    D: float
    stable: bool = True

    def _tau(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < -1e-12) or np.any(t > self.T + 1e-12):
            raise ValueError("t outside [0, T]")
        return np.clip(self.T - t, 0.0, None)

    def A(self, t):
        tau = self._tau(t)
        E = np.exp(-self.D * tau)
        am = self.A_minus
        if np.isinf(self.A_plus):
            return am * (-np.expm1(-self.D * tau))
        ap = self.A_plus
        return am * ap * (-np.expm1(-self.D * tau)) / (ap - am * E)

    def H(self, t):
        tau = self._tau(t)
        am = self.A_minus
        one_minus_E = -np.expm1(-self.D * tau)
        if np.isinf(self.A_plus):
            integral = am * (tau - one_minus_E / self.D)
        else:
            ap = self.A_plus
            integral = am * tau - np.log1p(am * one_minus_E / (ap - am)) / self.spec.q2
        return self.spec.h_coef * integral

    def g(self, t, y):
        return g_eval(self, t, y)


def make_AH(kind, model, gamma, T: float) -> ClosedFormAH:
    """Closed-form solution; raises :class:`UnstableRegimeError` unless roots are real and distinct."""
    if not T > 0:
        raise ValueError("T must be positive")
    spec = riccati_spec(kind, model, gamma)
    roots = spec_roots(spec)
    if roots.is_complex:
        raise UnstableRegimeError(
            "complex Riccati roots: A(t) blows up in finite time; see nirvana_blowup_time")
    if roots.discriminant == 0 and not roots.degenerate:
        raise UnstableRegimeError("repeated Riccati root: use integrate_riccati_rk4")
    D = 2.0 * np.sqrt(roots.discriminant) if not roots.degenerate else 2.0 * spec.q1
    return ClosedFormAH(Kind(kind), spec, float(T), roots.A_plus, roots.A_minus, float(D))


@dataclass(frozen=True)
class RiccatiPath:
    t: np.ndarray
    A: np.ndarray
    H: np.ndarray
    blowup_time: float | None


def integrate_riccati_rk4(spec: RiccatiSpec, T: float, n_steps: int,
                          blowup_level: float = 1e8) -> RiccatiPath:
    """Classical RK4 backward from ``A(T) = H(T) = 0``.

    If ``|A|`` exceeds ``blowup_level`` (or turns non-finite) the remaining
    samples are NaN and ``blowup_time`` holds the grid time at which it
    happened.
    """
    if n_steps < 10:
        raise ValueError("n_steps must be at least 10")
    h = T / n_steps
    A = np.full(n_steps + 1, np.nan)
    H = np.full(n_steps + 1, np.nan)
    A[0] = H[0] = 0.0
    a, hh = 0.0, 0.0
    f = spec.rhs_tau
    blow = None
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            k1 = f(a)
            k2 = f(a + 0.5 * h * k1)
            k3 = f(a + 0.5 * h * k2)
            k4 = f(a + h * k3)
            stages = (k1, k2, k3, k4)
            a_new = a + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(stages)) or not np.isfinite(a_new) or abs(a_new) > blowup_level:
                blow = T - (k + 1) * h
                break
            # H rides along as the second component of the RK4 system
            hh += spec.h_coef * h / 6.0 * (a + 2 * (a + 0.5 * h * k1) + 2 * (a + 0.5 * h * k2) + (a + h * k3))
            a = a_new
            A[k + 1] = a
            H[k + 1] = hh
    tau = h * np.arange(n_steps + 1)
    return RiccatiPath(T - tau[::-1], A[::-1].copy(), H[::-1].copy(), blow)


def stability_full(model: LinearOuModel, gamma) -> bool:
    """Real Riccati roots for the fully informed linear investor."""
    _check_gamma(gamma)
    k, a, rho, s = model.kappa, model.a, model.rho, model.sigma
    return bool(k * k - (1.0 - gamma) * a / (gamma * s) * (2.0 * k * rho + a / s) >= 0)


def stability_partial(model: LinearOuModel, gamma) -> bool:
    """Real Riccati roots for the price-only linear investor (diffusion ``abar``)."""
    _check_gamma(gamma)
    k, s = model.kappa, model.sigma
    ab = abar(model)
    return bool(k * k - (1.0 - gamma) * ab / (gamma * s) * (2.0 * k + ab / s) >= 0)


def nirvana_blowup_time(model, gamma, T: float, kind=Kind.LINEAR_FULL) -> float | None:
    """Time at which ``A`` explodes in the complex-root regime, or ``None``.

    Substituting ``A = -v'/(q2 v)`` (derivatives in time-to-maturity)
    linearizes the Riccati equation to ``v'' + 2 q1 v' + q0 q2 v = 0`` with
    ``v(0) = 1``, ``v'(0) = 0``, whose solution is
    ``e^{-q1 tau}(cos(Xi tau) + (q1/Xi) sin(Xi tau))``.  Its first zero is at
    ``Xi tau = atan2(Xi, -q1)``.
    """
    spec = riccati_spec(kind, model, gamma)
    disc = spec.discriminant
    if disc >= 0:
        raise UnstableRegimeError("roots are real: A(t) does not blow up")
    xi = np.sqrt(-disc)
    tau_star = np.arctan2(xi, -spec.q1) / xi
    if tau_star > T:
        return None
    return float(T - tau_star)


def g_eval(AH: ClosedFormAH, t, y):
    """Value-function factor ``G(t, y)``."""
    A = AH.A(t)
    H = AH.H(t)
    y = np.asarray(y, dtype=float)
    if AH.kind is Kind.CIR_FULL:
        return np.exp(A * y + H)
    return np.exp(A * y * y + H)
