"""Conditional law of the hidden factor given prices.

Two filters are implemented:

* a Kalman filter for :class:`~pibsde.model.LinearOuModel`, in the
  innovations form ``dYhat = -kappa Yhat dt + (Var + sigma a rho)/sigma^2 dnu``;
* a grid (finite-state Markov chain) Bayes filter usable with any scalar
  model, including correlated factor/price noise.

Both operate on log-price increments, using the same return convention as
:func:`pibsde.sim.simple_returns`, and both accept a leading batch axis so
many independent observation paths can be filtered at once.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy import stats

from .model import CirModel, LinearOuModel
from .sim import PathBundle


class FilterCollapseError(RuntimeError):
    """All posterior weight vanished on the grid."""


# --------------------------------------------------------------------------
# Kalman filter (linear model)
# --------------------------------------------------------------------------

def steady_state_variance(model: LinearOuModel) -> float:
    """Stationary conditional variance of the Kalman filter."""
    k, a, rho, s = model.kappa, model.a, model.rho, model.sigma
    p = k * s ** 2 + a * rho * s
    q = a * s * np.sqrt(1.0 - rho ** 2)
    # -p + sqrt(p^2 + q^2) written to avoid cancellation when p >> q
    if p > 0:
        return float(q * q / (p + np.hypot(p, q)))
    return float(-p + np.hypot(p, q))


def variance_rhs(model: LinearOuModel, var):
    """Right-hand side of the conditional-variance Riccati ODE."""
    k, a, rho, s = model.kappa, model.a, model.rho, model.sigma
    return (-2.0 * k * (var - a ** 2 * (1.0 - rho ** 2) / (2.0 * k))
            - 2.0 * a * rho / s * var - (var / s) ** 2)


def abar(model: LinearOuModel) -> float:
    """Diffusion of the steady-state filter, ``(Sigma_bar + sigma a rho)/sigma``."""
    return (steady_state_variance(model) + model.sigma * model.a * model.rho) / model.sigma


def kalman_gain(model: LinearOuModel, var):
    return (var + model.sigma * model.a * model.rho) / model.sigma ** 2


def _rk4_var(model, var, dt):
    f = lambda v: variance_rhs(model, v)
    k1 = f(var)
    k2 = f(var + 0.5 * dt * k1)
    k3 = f(var + 0.5 * dt * k2)
    k4 = f(var + dt * k3)
    return var + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


@dataclass(frozen=True)
class KalmanState:
    """Gaussian filter state ``N(yhat, var)`` at one time; arrays allowed."""

    yhat: np.ndarray | float
    var: np.ndarray | float
    steady: bool = True

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.asarray(self.yhat) + np.sqrt(self.var) * rng.standard_normal(n)


@dataclass(frozen=True)
class KalmanTrack:
    yhat: np.ndarray
    var: np.ndarray
    steady: bool

    def state_at(self, k: int, path: int = 0) -> KalmanState:
        return KalmanState(float(self.yhat[path, k]), float(self.var[path, k]), self.steady)


def kalman_step(model: LinearOuModel, yhat, var, dlogS, dt: float, steady: bool):
    """One filter step driven by the log-price increment over ``[t, t+dt]``."""
    ret = dlogS + 0.5 * model.sigma ** 2 * dt
    dnu = ret - (model.mu + yhat) * dt
    new_yhat = yhat - model.kappa * yhat * dt + kalman_gain(model, var) * dnu
    new_var = var if steady else _rk4_var(model, var, dt)
    return new_yhat, new_var


def kalman_run(model: LinearOuModel, path: PathBundle, use_steady: bool = True,
               yhat0: float = 0.0, var0: float | None = None) -> KalmanTrack:
    """Run the Kalman filter along every path of ``path``."""
    if not isinstance(model, LinearOuModel):
        raise TypeError("the Kalman filter requires a LinearOuModel")
    if path.logS.shape[-1] != 1:
        raise ValueError("dimension mismatch: Kalman filter expects one asset")
    sbar = steady_state_variance(model)
    if var0 is None:
        var0 = sbar
    if var0 < 0:
        raise ValueError("var0 must be nonnegative")
    if use_steady:
        var0 = sbar
    dlogS = path.dlogS[..., 0]
    n_paths, n = dlogS.shape
    dt = path.grid.dt
    yhat = np.empty((n_paths, n + 1))
    var = np.empty((n_paths, n + 1))
    yhat[:, 0] = yhat0
    var[:, 0] = var0
    y, v = yhat[:, 0], var[:, 0]
    for k in range(n):
        y, v = kalman_step(model, y, v, dlogS[:, k], dt, use_steady)
        yhat[:, k + 1] = y
        var[:, k + 1] = v
    return KalmanTrack(yhat, var, use_steady)


# --------------------------------------------------------------------------
# Grid Bayes filter
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BandedKernel:
    """Sparse row-stochastic kernel: row j puts mass ``w[..., j, m]`` on node ``idx[..., j, m]``."""

    idx: np.ndarray
    w: np.ndarray
    matrix: np.ndarray | None = None  # optional dense copy for fixed kernels

    def apply(self, probs: np.ndarray) -> np.ndarray:
        """``probs @ K`` for a (possibly batched) probability vector."""
        probs = np.asarray(probs, dtype=float)
        if self.matrix is not None:
            return probs @ self.matrix
        n = probs.shape[-1]
        contrib = probs[..., None] * self.w
        batch = contrib.shape[:-2]
        idx = np.broadcast_to(self.idx, contrib.shape)
        nb = int(np.prod(batch, dtype=int))
        off = (np.arange(nb) * n).reshape(batch + (1, 1))
        out = np.bincount((idx + off).ravel(), weights=contrib.ravel(), minlength=nb * n)
        return out.reshape(batch + (n,))

    def dense(self) -> np.ndarray:
        """Unbatched kernel as an ``n x n`` matrix (for inspection and tests)."""
        n = self.idx.shape[-2]
        out = np.zeros((n, n))
        rows = np.broadcast_to(np.arange(n)[:, None], self.idx.shape)
        np.add.at(out, (rows, self.idx), self.w)
        return out


def banded_kernel(nodes: np.ndarray, mean, std, n_std: float = 6.0) -> BandedKernel:
    """Gaussian kernels ``N(mean_j, std_j^2)`` sampled at the nodes, truncated at ``n_std``.

    Gaussians narrower than half a cell are replaced by a two-node split
    that preserves the mean (this covers ``std = 0``).  Mass that falls
    outside the grid is lumped on the boundary nodes.  Leading batch axes of
    ``mean``/``std`` are kept.
    """
    n = nodes.size
    h = nodes[1] - nodes[0]
    mean = np.asarray(mean, dtype=float)
    std = np.broadcast_to(np.asarray(std, dtype=float), mean.shape)
    pos = (mean - nodes[0]) / h
    centre = np.rint(pos).astype(int)
    half = int(np.ceil(n_std * float(np.max(std, initial=0.0)) / h)) + 1
    half = min(half, n)
    virt = centre[..., None] + np.arange(-half, half + 1)
    narrow = std < 0.5 * h
    safe = np.where(narrow, 1.0, std)
    z = (virt - pos[..., None]) * h / safe[..., None]
    w = np.exp(-0.5 * z * z)
    if np.any(narrow):
        i0 = np.floor(pos)[..., None]
        frac = (pos[..., None] - i0)
        split = np.where(virt == i0, 1.0 - frac, 0.0) + np.where(virt == i0 + 1, frac, 0.0)
        w = np.where(narrow[..., None], split, w)
    w /= w.sum(axis=-1, keepdims=True)
    return BandedKernel(np.clip(virt, 0, n - 1), w)


def _dense_law(nodes: np.ndarray, mean: float, std: float) -> np.ndarray:
    k = banded_kernel(nodes, np.array([mean]), np.array([std]))
    out = np.zeros(nodes.size)
    np.add.at(out, k.idx[0], k.w[0])
    return out


@dataclass(frozen=True)
class GridFilter:
    """Discrete approximation of the filter on a uniform node grid.

    ``probs`` may carry leading batch axes (one row per observation path).
    ``transition`` is the one-step Euler kernel of the factor ignoring any
    price/factor correlation; with correlation the update builds an
    observation-dependent kernel instead.
    """

    nodes: np.ndarray
    probs: np.ndarray
    transition: BandedKernel
    dt: float

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        p = np.asarray(self.probs)
        if p.ndim != 1:
            raise ValueError("sampling needs a single (unbatched) filter")
        return self.nodes[rng.choice(self.nodes.size, size=n, p=p / p.sum())]

    def batched(self, n: int) -> "GridFilter":
        return replace(self, probs=np.broadcast_to(self.probs, (n, self.nodes.size)).copy())


def default_bounds(model) -> tuple[float, float]:
    if isinstance(model, CirModel):
        return 0.0, model.ybar + 8.0 * model.a * np.sqrt(model.ybar / (2.0 * model.kappa))
    if isinstance(model, LinearOuModel):
        s = model.stationary_std
        return -6.0 * s, 6.0 * s
    raise TypeError("no default grid bounds for this model")


def stationary_probs(model, nodes: np.ndarray) -> np.ndarray:
    if isinstance(model, CirModel):
        dens = stats.gamma.pdf(nodes, a=model.stationary_shape, scale=1.0 / model.stationary_rate)
    elif isinstance(model, LinearOuModel):
        dens = stats.norm.pdf(nodes, scale=model.stationary_std)
    else:
        raise TypeError("no stationary law for this model")
    return dens / dens.sum()


def point_probs(nodes: np.ndarray, y0: float) -> np.ndarray:
    return _dense_law(nodes, y0, 0.0)


def gaussian_probs(nodes: np.ndarray, mean: float, var: float) -> np.ndarray:
    return _dense_law(nodes, mean, np.sqrt(var))


def grid_build(model, n: int = 400, y_lo: float | None = None, y_hi: float | None = None,
               dt: float = 1e-3, prior="stationary", y0: float | None = None) -> GridFilter:
    """Node grid, Euler transition kernel and prior.

    ``prior`` is ``"stationary"``, ``"point"`` (mass at ``y0``), a
    ``(mean, var)`` tuple for a discretized Gaussian, or an explicit
    probability vector.
    """
    if n < 3:
        raise ValueError("need at least 3 nodes")
    lo, hi = default_bounds(model) if (y_lo is None or y_hi is None) else (y_lo, y_hi)
    if not lo < hi:
        raise ValueError("y_lo must be below y_hi")
    if not dt > 0:
        raise ValueError("dt must be positive")
    nodes = np.linspace(lo, hi, n)
    transition = banded_kernel(nodes, nodes + model.b(nodes) * dt, model.a_of(nodes) * np.sqrt(dt))
    transition = replace(transition, matrix=transition.dense())
    if isinstance(prior, str):
        if prior == "stationary":
            probs = stationary_probs(model, nodes)
        elif prior == "point":
            if y0 is None:
                raise ValueError("point prior needs y0")
            probs = point_probs(nodes, y0)
        else:
            raise ValueError(f"unknown prior {prior!r}")
    elif isinstance(prior, tuple):
        probs = gaussian_probs(nodes, *prior)
    else:
        probs = np.asarray(prior, dtype=float)
        if probs.shape != nodes.shape or np.any(probs < 0) or not probs.sum() > 0:
            raise ValueError("explicit prior must be a nonnegative vector over the nodes")
        probs = probs / probs.sum()
    return GridFilter(nodes, probs, transition, dt)


def grid_update(model, filt: GridFilter, probs: np.ndarray, dlogS):
    """Bayes correction for the increment over ``[t, t+dt]``, then prediction.

    The likelihood uses the factor at the start of the step, matching the
    Euler price step.  With ``rho != 0`` the prediction kernel is the
    factor law conditional on the observed price noise.

    Returns ``(new_probs, collapsed)`` where ``collapsed`` flags rows whose
    posterior weight vanished (those rows are returned unchanged).
    """
    nodes, dt = filt.nodes, filt.dt
    s2dt = model.sigma ** 2 * dt
    obs_mean = (model.h(nodes) - 0.5 * model.sigma ** 2) * dt
    dlogS = np.asarray(dlogS, dtype=float)
    resid = dlogS[..., None] - obs_mean
    with np.errstate(divide="ignore"):
        logw = np.log(probs) - 0.5 * resid * resid / s2dt
    top = logw.max(axis=-1, keepdims=True)
    collapsed = ~np.isfinite(top[..., 0])
    w = np.exp(logw - np.where(np.isfinite(top), top, 0.0))
    tot = w.sum(axis=-1, keepdims=True)
    collapsed |= ~(tot[..., 0] > 0)
    post = np.where(collapsed[..., None], probs, w / np.where(tot > 0, tot, 1.0))
    if model.rho == 0.0:
        new = filt.transition.apply(post)
    else:
        a_nodes = model.a_of(nodes)
        mean = nodes + model.b(nodes) * dt + a_nodes * model.rho / model.sigma * resid
        std = a_nodes * np.sqrt((1.0 - model.rho ** 2) * dt)
        new = banded_kernel(nodes, mean, np.broadcast_to(std, mean.shape)).apply(post)
    new /= new.sum(axis=-1, keepdims=True)
    return new, collapsed


def grid_step(filt: GridFilter, dlogS, dt: float, model) -> GridFilter:
    """Advance the filter by one observation; raises on collapse."""
    if not np.isclose(dt, filt.dt):
        raise ValueError("dt differs from the grid transition step")
    new, collapsed = grid_update(model, filt, filt.probs, dlogS)
    if np.any(collapsed):
        raise FilterCollapseError("posterior weight underflowed on every node")
    return replace(filt, probs=new)


def filter_mean(filt: GridFilter, g: Callable[[np.ndarray], np.ndarray]):
    """``sum_j p_j g(y_j)``; batched filters give one value per row."""
    return np.asarray(filt.probs) @ np.asarray(g(filt.nodes), dtype=float)


def grid_run(model, filt: GridFilter, dlogS: np.ndarray) -> np.ndarray:
    """Filter a batch of observation paths ``dlogS`` (shape ``(..., n_steps)``).

    Returns the probability track, shape ``(..., n_steps + 1, n_nodes)``.
    """
    dlogS = np.asarray(dlogS, dtype=float)
    batch = dlogS.shape[:-1]
    n = dlogS.shape[-1]
    probs = np.broadcast_to(filt.probs, batch + (filt.nodes.size,)).copy()
    track = np.empty(batch + (n + 1, filt.nodes.size))
    track[..., 0, :] = probs
    for k in range(n):
        probs, collapsed = grid_update(model, filt, probs, dlogS[..., k])
        if np.any(collapsed):
            raise FilterCollapseError(f"filter collapsed at step {k}")
        track[..., k + 1, :] = probs
    return track
