"""Forward simulation of factor, prices, wealth and innovations.

Arrays carry a leading path axis: ``Y`` and ``logS`` have shape
``(n_paths, n_steps + 1, dim)``, increments ``(n_paths, n_steps, dim)``.

Randomness is keyed by ``RngSpec(seed, path_index, stream_role)``; every
path owns its own streams so results do not depend on how paths are batched.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .model import CirModel, GeneralModelSpec, LinearOuModel, is_scalar, total_sigma


class NumericOverflowError(ArithmeticError):
    pass


class InvalidStrategyError(ValueError):
    pass


class StreamRole(enum.IntEnum):
    FACTOR_NOISE = 0
    ASSET_NOISE = 1
    INNER_BRANCH = 2
    PRIOR = 3
    RETRY = 4


@dataclass(frozen=True)
class RngSpec:
    seed: int
    path_index: int = 0
    stream_role: StreamRole = StreamRole.FACTOR_NOISE
    branch: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed) & 0xFFFFFFFFFFFFFFFF,
                                    spawn_key=(int(self.path_index), int(self.stream_role), int(self.branch)))
        return np.random.default_rng(ss)

    def with_role(self, role: StreamRole) -> "RngSpec":
        return RngSpec(self.seed, self.path_index, role, self.branch)


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > self.t0:
            raise ValueError("T must exceed t0")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    @classmethod
    def per_unit(cls, t0: float, T: float, steps_per_unit: int = 1000) -> "TimeGrid":
        return cls(t0, T, max(1, int(round((T - t0) * steps_per_unit))))

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)


@dataclass(frozen=True)
class PathBundle:
    grid: TimeGrid
    dW: np.ndarray
    dB: np.ndarray
    Y: np.ndarray
    logS: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.Y.shape[0]

    @property
    def dlogS(self) -> np.ndarray:
        return np.diff(self.logS, axis=1)


def _normals(spec: RngSpec, n_paths: int, shape: tuple[int, ...]) -> np.ndarray:
    """Standard normals of shape ``(n_paths, *shape)``, one stream per path."""
    out = np.empty((n_paths,) + shape)
    for p in range(n_paths):
        rs = RngSpec(spec.seed, spec.path_index + p, spec.stream_role, spec.branch)
        out[p] = rs.generator().standard_normal(shape)
    return out


def _initial_factor(model, y0, n_paths: int) -> np.ndarray:
    q = model.dim_q
    y0 = np.asarray(y0, dtype=float)
    if y0.ndim == 0:
        y0 = np.full((n_paths, q), float(y0))
    elif y0.ndim == 1 and y0.shape[0] == n_paths and q == 1:
        y0 = y0[:, None]
    else:
        y0 = np.broadcast_to(y0, (n_paths, q)).copy()
    return y0


def _ou_noise(kappa: float, dt: float, z: np.ndarray):
    """Joint draw of (dB, int e^{-kappa(dt-s)} dB_s) from two standard normals."""
    e = np.exp(-kappa * dt)
    var_i = (1.0 - e * e) / (2.0 * kappa)
    cov = (1.0 - e) / kappa
    dB = np.sqrt(dt) * z[..., 0]
    cond_var = max(var_i - cov * cov / dt, 0.0)
    I = cov / dt * dB + np.sqrt(cond_var) * z[..., 1]
    return dB, I


def _check_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise NumericOverflowError(f"non-finite values in simulated {what}")


def simulate_factor(model, grid: TimeGrid, rng: RngSpec, y0=None, n_paths: int = 1):
    """Simulate the hidden factor; returns ``(Y, dB)``.

    OU factors use the exact Gaussian transition, CIR factors a
    full-truncation Euler step floored at zero, general models plain
    Euler-Maruyama.
    """
    n, dt = grid.n_steps, grid.dt
    if y0 is None:
        y0 = model.ybar if isinstance(model, CirModel) else 0.0
    Y = np.empty((n_paths, n + 1, model.dim_q))
    Y[:, 0] = _initial_factor(model, y0, n_paths)
    fspec = rng.with_role(StreamRole.FACTOR_NOISE)

    if isinstance(model, LinearOuModel):
        z = _normals(fspec, n_paths, (n, 2))
        dB, I = _ou_noise(model.kappa, dt, z)
        e = np.exp(-model.kappa * dt)
        y = Y[:, 0, 0]
        for k in range(n):
            y = y * e + model.a * I[:, k]
            Y[:, k + 1, 0] = y
        dB = dB[..., None]
    elif isinstance(model, CirModel):
        dB = np.sqrt(dt) * _normals(fspec, n_paths, (n, 1))
        y = Y[:, 0, 0]
        for k in range(n):
            yp = np.maximum(y, 0.0)
            y = y + model.kappa * (model.ybar - yp) * dt + model.a * np.sqrt(yp) * dB[:, k, 0]
            y = np.maximum(y, 0.0)
            Y[:, k + 1, 0] = y
    else:
        q = model.dim_q
        dB = np.sqrt(dt) * _normals(fspec, n_paths, (n, q))
        for p in range(n_paths):
            y = Y[p, 0]
            for k in range(n):
                y = y + np.asarray(model.b(y)) * dt + np.asarray(model.a(y)) @ dB[p, k]
                Y[p, k + 1] = y
    _check_finite(Y, "factor")
    return Y, dB


def coarsen_increments(dX: np.ndarray, factor: int = 2) -> np.ndarray:
    """Sum consecutive groups of ``factor`` increments along the time axis (axis 1)."""
    n = dX.shape[1]
    if n % factor:
        raise ValueError("number of steps must be divisible by factor")
    return dX.reshape(dX.shape[0], n // factor, factor, *dX.shape[2:]).sum(axis=2)


def euler_factor(model, grid: TimeGrid, dB: np.ndarray, y0=None) -> np.ndarray:
    """Euler (full-truncation for CIR) factor path driven by given increments.

    Used to couple paths at different step sizes; ``dB`` has shape
    ``(n_paths, n_steps)`` for scalar models.
    """
    if not is_scalar(model):
        raise TypeError("euler_factor supports scalar models only")
    if y0 is None:
        y0 = model.ybar if isinstance(model, CirModel) else 0.0
    n_paths, n = dB.shape
    if n != grid.n_steps:
        raise ValueError("increments do not match the grid")
    cir = isinstance(model, CirModel)
    Y = np.empty((n_paths, n + 1))
    Y[:, 0] = y0
    y = Y[:, 0]
    for k in range(n):
        yp = np.maximum(y, 0.0) if cir else y
        y = y + model.b(yp) * grid.dt + model.a_of(yp) * dB[:, k]
        if cir:
            y = np.maximum(y, 0.0)
        Y[:, k + 1] = y
    _check_finite(Y, "factor")
    return Y


def simulate_market(model, grid: TimeGrid, rng: RngSpec, y0=None, s0: float = 1.0,
                    n_paths: int = 1) -> PathBundle:
    """Simulate factor and log-prices with the log-Euler price step.

    ``dlogS_k = (h(Y_k) - diag(Sigma)/2) dt + sigma_w dW_k + sigma_y dB_k``
    where ``dB_k`` is the increment that drives the factor.
    """
    Y, dB = simulate_factor(model, grid, rng, y0=y0, n_paths=n_paths)
    n, dt, d = grid.n_steps, grid.dt, model.dim_d
    dW = np.sqrt(dt) * _normals(rng.with_role(StreamRole.ASSET_NOISE), n_paths, (n, d))
    sw, sy = model.sigma_w, model.sigma_y
    half_var = 0.5 * np.diag(model.Sigma)
    if is_scalar(model):
        drift = model.h(Y[:, :-1, :]) - half_var
    else:
        drift = np.stack([np.stack([np.asarray(model.h(Y[p, k])) for k in range(n)])
                          for p in range(n_paths)]) - half_var
    dlogS = drift * dt + dW @ sw.T + dB @ sy.T
    logS = np.empty((n_paths, n + 1, d))
    logS[:, 0] = np.log(s0)
    logS[:, 1:] = np.log(s0) + np.cumsum(dlogS, axis=1)
    _check_finite(logS, "log-price")
    return PathBundle(grid, dW, dB, Y, logS)


def evolve_wealth(path: PathBundle, pi, model, x0: float = 1.0) -> np.ndarray:
    """Wealth under proportions ``pi`` (shape ``(n_paths, n_steps, d)``), log-Euler.

    ``dlogX = (r + pi.(h(Y) - r) - |sigma^T pi|^2 / 2) dt + pi.(sigma_w dW + sigma_y dB)``
    """
    if not x0 > 0:
        raise ValueError("x0 must be positive")
    pi = np.asarray(pi, dtype=float)
    n, dt, d = path.grid.n_steps, path.grid.dt, model.dim_d
    pi = np.broadcast_to(pi, (path.n_paths, n, d)) if pi.ndim != 3 else pi
    if not np.all(np.isfinite(pi)):
        raise InvalidStrategyError("strategy contains non-finite values")
    r = model.r
    if is_scalar(model):
        excess = model.h(path.Y[:, :-1, :]) - r
    else:
        excess = np.stack([np.stack([np.asarray(model.h(path.Y[p, k])) for k in range(n)])
                           for p in range(path.n_paths)]) - r
    sig = total_sigma(model)
    noise = path.dW @ model.sigma_w.T + path.dB @ model.sigma_y.T
    st_pi = pi @ sig
    dlogX = (r + np.sum(pi * excess, axis=-1) - 0.5 * np.sum(st_pi ** 2, axis=-1)) * dt \
        + np.sum(pi * noise, axis=-1)
    logX = np.empty((path.n_paths, n + 1))
    logX[:, 0] = np.log(x0)
    logX[:, 1:] = np.log(x0) + np.cumsum(dlogX, axis=1)
    X = np.exp(logX)
    _check_finite(X, "wealth")
    return X


def simple_returns(dlogS: np.ndarray, Sigma_diag, dt: float) -> np.ndarray:
    """Discrete stand-in for ``dS/S``: ``dlogS + diag(Sigma)/2 dt``."""
    return dlogS + 0.5 * np.asarray(Sigma_diag) * dt


def innovations(path: PathBundle, hhat, model) -> np.ndarray:
    """Cumulative innovations ``zeta`` with ``dzeta = sigma^{-1}(dS/S - hhat dt)``.

    ``hhat`` has shape ``(n_paths, n_steps, d)`` (values at the left grid
    point of each step).  Returns shape ``(n_paths, n_steps + 1, d)``.
    """
    sig = total_sigma(model)
    try:
        sig_inv = np.linalg.inv(sig)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular sigma") from exc
    dt = path.grid.dt
    ret = simple_returns(path.dlogS, np.diag(model.Sigma), dt)
    dnu = ret - np.asarray(hhat, dtype=float) * dt
    dzeta = dnu @ sig_inv.T
    zeta = np.zeros((path.n_paths, path.grid.n_steps + 1, model.dim_d))
    zeta[:, 1:] = np.cumsum(dzeta, axis=1)
    return zeta
