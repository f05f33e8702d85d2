"""Model parameterizations, power utility and integrability checks.

Three market families are provided:

* ``GeneralModelSpec`` -- d assets driven by a q-dimensional hidden factor,
  with user-supplied drift/diffusion callables.
* ``LinearOuModel`` -- one asset whose drift is ``mu + Y`` with ``Y`` an
  Ornstein-Uhlenbeck factor.
* ``CirModel`` -- one asset whose drift is ``c*sqrt(Y)`` with ``Y`` a CIR
  factor.

The scalar models expose the same attributes as the general one
(``sigma_w``, ``sigma_y``, ``sigma``, ``Sigma``, ``h``, ``b``, ``a``) so the
BSDE and strategy code can treat them uniformly.  For scalar models ``h``,
``b`` and ``a`` broadcast over arrays of any shape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class InvalidModelError(ValueError):
    """Raised when model parameters violate their invariants."""


@dataclass(frozen=True)
class PowerUtility:
    """CRRA utility ``U(x) = x**(1-gamma)/(1-gamma)``."""

    gamma: float

    def __post_init__(self):
        if not (self.gamma > 0) or self.gamma == 1:
            raise InvalidModelError(f"gamma must be positive and != 1, got {self.gamma}")

    def __call__(self, x):
        g = self.gamma
        return np.power(x, 1.0 - g) / (1.0 - g)

    def marginal(self, x):
        return np.power(x, -self.gamma)

    def conjugate(self, p):
        """Legendre transform ``U*(p) = sup_x (U(x) - x p)``."""
        g = self.gamma
        return g / (1.0 - g) * np.power(p, -(1.0 - g) / g)


def _as_matrix(m) -> np.ndarray:
    return np.atleast_2d(np.asarray(m, dtype=float))


def sqrtm_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric square root of a symmetric positive-definite matrix."""
    w, v = np.linalg.eigh(m)
    if np.any(w <= 0):
        raise InvalidModelError(f"matrix is not positive definite (eigenvalues {w})")
    return (v * np.sqrt(w)) @ v.T


@dataclass(frozen=True)
class GeneralModelSpec:
    """Hidden-factor market with ``d`` assets and ``q`` factors.

    ``h`` maps a q-vector to a d-vector, ``b`` a q-vector to a q-vector and
    ``a`` a q-vector to a q x q matrix.
    """

    sigma_w: np.ndarray
    sigma_y: np.ndarray
    h: Callable[[np.ndarray], np.ndarray]
    b: Callable[[np.ndarray], np.ndarray]
    a: Callable[[np.ndarray], np.ndarray]
    r: float = 0.0
    eps: float | None = None
    dim_d: int = field(init=False)
    dim_q: int = field(init=False)

    def __post_init__(self):
        sw = _as_matrix(self.sigma_w)
        sy = _as_matrix(self.sigma_y)
        if sw.shape[0] != sw.shape[1]:
            raise InvalidModelError("sigma_w must be square (d x d)")
        if sy.shape[0] != sw.shape[0]:
            raise InvalidModelError("sigma_y must be d x q")
        if self.r < 0:
            raise InvalidModelError("interest rate must be nonnegative")
        object.__setattr__(self, "sigma_w", sw)
        object.__setattr__(self, "sigma_y", sy)
        object.__setattr__(self, "dim_d", sw.shape[0])
        object.__setattr__(self, "dim_q", sy.shape[1])
        w = np.linalg.eigvalsh(self.Sigma)
        if np.any(w <= 0):
            raise InvalidModelError("sigma_w sigma_w^T + sigma_y sigma_y^T is not positive definite")
        if self.eps is not None and (w.min() < self.eps or w.max() > 1.0 / self.eps):
            raise InvalidModelError(f"eigenvalues {w} of Sigma outside [eps, 1/eps] for eps={self.eps}")

    @property
    def Sigma(self) -> np.ndarray:
        return self.sigma_w @ self.sigma_w.T + self.sigma_y @ self.sigma_y.T

    @property
    def sigma(self) -> np.ndarray:
        return total_sigma(self)


class _ScalarModel:
    """Shared plumbing for the one-asset, one-factor examples."""

    sigma: float
    rho: float
    r: float
    dim_d = 1
    dim_q = 1

    @property
    def sigma_w(self) -> np.ndarray:
        return np.array([[self.sigma * np.sqrt(1.0 - self.rho ** 2)]])

    @property
    def sigma_y(self) -> np.ndarray:
        return np.array([[self.sigma * self.rho]])

    @property
    def Sigma(self) -> np.ndarray:
        return np.array([[self.sigma ** 2]])

    @property
    def eps(self) -> float:
        return default_eps(self.sigma)


@dataclass(frozen=True)
class LinearOuModel(_ScalarModel):
    """``dS/S = (mu + Y) dt + sigma dW~``, ``dY = -kappa Y dt + a dB``.

    ``W~`` has correlation ``rho`` with ``B``.
    """

    mu: float = 0.0
    kappa: float = 8.0
    a: float = 0.3
    rho: float = -0.8
    sigma: float = 0.15
    r: float = 0.0

    def __post_init__(self):
        if not self.kappa > 0:
            raise InvalidModelError("kappa must be positive")
        if not self.a > 0:
            raise InvalidModelError("a must be positive")
        if not self.sigma > 0:
            raise InvalidModelError("sigma must be positive")
        if not abs(self.rho) < 1:
            raise InvalidModelError("rho must lie in (-1, 1)")
        if self.r < 0:
            raise InvalidModelError("interest rate must be nonnegative")

    def h(self, y):
        return self.mu + np.asarray(y, dtype=float)

    def b(self, y):
        return -self.kappa * np.asarray(y, dtype=float)

    def a_of(self, y):
        return np.full_like(np.asarray(y, dtype=float), self.a)

    @property
    def stationary_std(self) -> float:
        return self.a / np.sqrt(2.0 * self.kappa)


@dataclass(frozen=True)
class CirModel(_ScalarModel):
    """``dS/S = c sqrt(Y) dt + sigma dW~``, ``dY = kappa (ybar - Y) dt + a sqrt(Y) dB``.

    The CIR factor has no uniform ellipticity (its diffusion vanishes at 0);
    only the Feller condition is enforced.
    """

    c: float = 0.25
    kappa: float = 8.0
    ybar: float = 0.05
    a: float = 0.4
    sigma: float = 0.15
    rho: float = 0.0
    r: float = 0.0

    def __post_init__(self):
        if not self.kappa > 0:
            raise InvalidModelError("kappa must be positive")
        if not self.ybar > 0:
            raise InvalidModelError("ybar must be positive")
        if not self.sigma > 0:
            raise InvalidModelError("sigma must be positive")
        if not abs(self.rho) < 1:
            raise InvalidModelError("rho must lie in (-1, 1)")
        if not check_feller(self):
            raise InvalidModelError(
                f"Feller condition violated: a^2={self.a ** 2} > 2 kappa ybar={2 * self.kappa * self.ybar}")
        if self.r < 0:
            raise InvalidModelError("interest rate must be nonnegative")

    def h(self, y):
        return self.c * np.sqrt(np.maximum(np.asarray(y, dtype=float), 0.0))

    def b(self, y):
        return self.kappa * (self.ybar - np.asarray(y, dtype=float))

    def a_of(self, y):
        return self.a * np.sqrt(np.maximum(np.asarray(y, dtype=float), 0.0))

    @property
    def stationary_shape(self) -> float:
        return 2.0 * self.kappa * self.ybar / self.a ** 2

    @property
    def stationary_rate(self) -> float:
        return 2.0 * self.kappa / self.a ** 2


def is_scalar(model) -> bool:
    return isinstance(model, _ScalarModel)


def factor_diffusion(model, y):
    """Diffusion of the hidden factor at ``y`` (scalar models broadcast)."""
    if is_scalar(model):
        return model.a_of(y)
    return _as_matrix(model.a(np.asarray(y, dtype=float)))


def default_eps(sigma: float) -> float:
    """Tightest bounding constant with ``eps <= sigma^2 <= 1/eps``."""
    s2 = sigma ** 2
    return min(s2, 1.0 / s2)


def total_sigma(spec) -> np.ndarray:
    """Symmetric PD square root of ``sigma_w sigma_w^T + sigma_y sigma_y^T``."""
    sw = _as_matrix(spec.sigma_w)
    sy = _as_matrix(spec.sigma_y)
    return sqrtm_psd(sw @ sw.T + sy @ sy.T)


@dataclass(frozen=True)
class ConditionReport:
    """Outcome of one sufficient-condition check ``lhs < rhs``."""

    name: str
    lhs: float
    rhs: float

    @property
    def ok(self) -> bool:
        return bool(self.lhs < self.rhs)

    # aliases matching the two checks
    @property
    def novikov_ok(self) -> bool:
        return self.ok

    @property
    def mgf_ok(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        verdict = "ok" if self.ok else "FAIL"
        return f"{self.name}: lhs={self.lhs:.6g} rhs={self.rhs:.6g} -> {verdict}"


def check_feller(model: CirModel) -> bool:
    return bool(model.a ** 2 <= 2.0 * model.kappa * model.ybar)


def check_novikov_cir(model: CirModel, T: float) -> ConditionReport:
    """Jensen-type sufficient condition ``c^2 T / (2 sigma^2) < 2 kappa / a^2``."""
    if not T > 0:
        raise ValueError("T must be positive")
    lhs = model.c ** 2 * T / (2.0 * model.sigma ** 2)
    rhs = 2.0 * model.kappa / model.a ** 2
    return ConditionReport("novikov", float(lhs), float(rhs))


def check_mgf_cir(model: CirModel, gamma: float, T: float, eps: float | None = None) -> ConditionReport:
    """Sufficient condition ``2T|g-1||g-2| / (eps g^2) < 2 kappa / a^2`` for finite xi."""
    if not gamma > 0 or gamma == 1:
        raise ValueError("gamma must be positive and != 1")
    if eps is None:
        eps = model.eps
    if not eps > 0:
        raise ValueError("eps must be positive")
    lhs = 2.0 * T * abs(gamma - 1.0) * abs(gamma - 2.0) / (eps * gamma ** 2)
    rhs = 2.0 * model.kappa / model.a ** 2
    return ConditionReport("mgf", float(lhs), float(rhs))
