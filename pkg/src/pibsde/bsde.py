"""BSDE states: nested Monte Carlo for the dual factor ``xi``, closed forms
for the linear model, the drift ``beta`` and the full-information driver.

Notation: ``lam = sigma^{-1}(hhat - r)`` is the filtered market price of
risk and ``k = (1 - gamma)/gamma``.  The dual factor is

    xi(t) = E[(Z(T)/Z(t))^{-k} | prices up to t],
    Z = exp(-1/2 int |lam|^2 - int lam dzeta),

and ``G = xi^gamma`` is the primal factor.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .closed_form import ClosedFormAH, Kind, UnstableRegimeError, make_AH, stability_partial
from .filtering import (FilterCollapseError, GridFilter, KalmanState, _rk4_var, abar,
                        grid_update, kalman_gain, steady_state_variance)
from .model import CirModel, LinearOuModel, check_mgf_cir, check_novikov_cir, factor_diffusion
from .sim import RngSpec, StreamRole, TimeGrid, _normals, simulate_market


class ConditionCheckError(RuntimeError):
    """A sufficient integrability condition failed and was not overridden."""


class BetaConsistencyError(ArithmeticError):
    pass


@dataclass(frozen=True)
class XiEstimate:
    t: float
    mean: float
    stderr: float
    n_inner: int
    method: str = "innovations"
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class BsdeRecord:
    t: float
    xi: float
    alpha_over_xi: float | None
    chi: float
    psi: float


# --------------------------------------------------------------------------
# nested Monte Carlo
# --------------------------------------------------------------------------

XI_METHODS = ("innovations", "girsanov", "naive")


def _derived_seed(rng: RngSpec, role: StreamRole) -> int:
    ss = np.random.SeedSequence(int(rng.seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=(int(rng.path_index), int(role), int(rng.branch)))
    return int(ss.generate_state(1, np.uint64)[0])


def _hhat(model, state):
    if isinstance(state, KalmanState):
        return model.mu + np.asarray(state.yhat, dtype=float)
    return np.asarray(state.probs) @ model.h(state.nodes)


def _check_conditions(model, gamma, T, t, enforce) -> tuple[str, ...]:
    if not isinstance(model, CirModel):
        return ()
    notes = []
    for rep in (check_novikov_cir(model, T - t), check_mgf_cir(model, gamma, T - t)):
        if not rep.ok:
            if enforce:
                raise ConditionCheckError(str(rep))
            notes.append(str(rep))
            warnings.warn(f"sufficient condition not met, continuing: {rep}", RuntimeWarning, stacklevel=3)
    return tuple(notes)


def _kalman_branches(model: LinearOuModel, state: KalmanState, gamma, grid, seed, n, method):
    """Log-weights for ``n`` branches started from a Gaussian filter state."""
    k = (1.0 - gamma) / gamma
    c = (1.0 - gamma) / (2.0 * gamma ** 2)
    s, r, dt = model.sigma, model.r, grid.dt
    yhat = np.full(n, float(state.yhat))
    var = float(state.var)
    lam = (model.mu + yhat - r) / s
    expo = np.zeros(n)
    tilt = np.zeros(n)
    if method == "innovations":
        z = _normals(RngSpec(seed, 0, StreamRole.ASSET_NOISE), n, (grid.n_steps,))
        for j in range(grid.n_steps):
            gain = kalman_gain(model, var) * s
            dzeta = k * lam * dt + np.sqrt(dt) * z[:, j]
            yhat = yhat - model.kappa * yhat * dt + gain * dzeta
            if not state.steady:
                var = _rk4_var(model, var, dt)
            lam_new = (model.mu + yhat - r) / s
            expo += 0.5 * (lam * lam + lam_new * lam_new) * dt
            lam = lam_new
        return c * expo, np.zeros(n, dtype=bool)
    y0 = np.array([RngSpec(seed, l, StreamRole.PRIOR).generator().standard_normal()
                   for l in range(n)]) * np.sqrt(var) + float(state.yhat)
    path = simulate_market(model, grid, RngSpec(seed, 0), y0=y0, n_paths=n)
    dlogS = path.dlogS[..., 0]
    for j in range(grid.n_steps):
        ret = dlogS[:, j] + 0.5 * s * s * dt
        dnu = ret - (model.mu + yhat) * dt
        tilt += k * lam * dnu / s - 0.5 * k * k * lam * lam * dt
        yhat = yhat - model.kappa * yhat * dt + kalman_gain(model, var) * dnu
        if not state.steady:
            var = _rk4_var(model, var, dt)
        lam_new = (model.mu + yhat - r) / s
        expo += 0.5 * (lam * lam + lam_new * lam_new) * dt
        lam = lam_new
    logw = c * expo + (tilt if method == "girsanov" else 0.0)
    return logw, np.zeros(n, dtype=bool)


def _grid_branches(model, state: GridFilter, gamma, grid, seed, n, method):
    """Log-weights for ``n`` branches started from a grid filter state."""
    if not np.isclose(grid.dt, state.dt):
        raise ValueError("nested-MC time step must equal the grid filter step")
    k = (1.0 - gamma) / gamma
    c = (1.0 - gamma) / (2.0 * gamma ** 2)
    s, r, dt = model.sigma, model.r, grid.dt
    h_nodes = model.h(state.nodes)
    probs = np.broadcast_to(state.probs, (n, state.nodes.size)).copy()
    hh = probs @ h_nodes
    lam = (hh - r) / s
    expo = np.zeros(n)
    tilt = np.zeros(n)
    collapsed = np.zeros(n, dtype=bool)
    if method == "innovations":
        z = _normals(RngSpec(seed, 0, StreamRole.ASSET_NOISE), n, (grid.n_steps,))
        dlogS = None
    else:
        p = np.asarray(state.probs, dtype=float)
        cdf = np.cumsum(p / p.sum())
        u = np.array([RngSpec(seed, l, StreamRole.PRIOR).generator().random() for l in range(n)])
        y0 = state.nodes[np.minimum(np.searchsorted(cdf, u, side="right"), state.nodes.size - 1)]
        path = simulate_market(model, grid, RngSpec(seed, 0), y0=y0, n_paths=n)
        dlogS = path.dlogS[..., 0]
    for j in range(grid.n_steps):
        if dlogS is None:
            obs = (hh + k * (hh - r) - 0.5 * s * s) * dt + s * np.sqrt(dt) * z[:, j]
        else:
            obs = dlogS[:, j]
            dzeta = (obs + 0.5 * s * s * dt - hh * dt) / s
            tilt += k * lam * dzeta - 0.5 * k * k * lam * lam * dt
        probs, bad = grid_update(model, state, probs, obs)
        collapsed |= bad
        hh = probs @ h_nodes
        lam_new = (hh - r) / s
        expo += 0.5 * (lam * lam + lam_new * lam_new) * dt
        lam = lam_new
    logw = c * expo + (tilt if method == "girsanov" else 0.0)
    return logw, collapsed


def estimate_xi_nested(model, filter_state, gamma, T: float, n_inner: int, grid: TimeGrid | None,
                       rng: RngSpec, t: float | None = None, method: str = "innovations",
                       enforce_conditions: bool = True) -> XiEstimate:
    """Monte Carlo estimate of ``xi(t)`` from the filter state at ``t``.

    Parameters
    ----------
    filter_state : KalmanState or GridFilter
        Conditional law of the factor at time ``t``.
    grid : TimeGrid
        Inner time grid from ``t`` to ``T``; ``None`` only when ``t == T``.
    rng : RngSpec
        ``path_index`` and ``branch`` identify the outer path and checkpoint;
        every inner branch gets its own stream, so branches are never shared
        between checkpoints.
    method : {"innovations", "girsanov", "naive"}
        ``innovations`` simulates observations directly under the measure
        that makes ``exp((1-gamma)/(2 gamma^2) int |lam|^2)`` unbiased
        (lowest variance).  ``girsanov`` draws ``Y(t)`` from the filter,
        simulates the market forward, re-filters, and weights by the
        likelihood ratio.  ``naive`` is the girsanov simulation without the
        weight; it is biased and kept as a diagnostic.
    enforce_conditions : bool
        For the CIR model, raise when a sufficient integrability condition
        fails; if False, warn and record the failure in ``warnings``.
    """
    if method not in XI_METHODS:
        raise ValueError(f"method must be one of {XI_METHODS}")
    if n_inner < 2:
        raise ValueError("n_inner must be at least 2")
    if not gamma > 0 or gamma == 1:
        raise ValueError("gamma must be positive and != 1")
    t0 = grid.t0 if (t is None and grid is not None) else (T if t is None else t)
    if t0 >= T:
        return XiEstimate(float(T), 1.0, 0.0, n_inner, method)
    if grid is None or not np.isclose(grid.T, T) or not np.isclose(grid.t0, t0):
        raise ValueError("grid must span [t, T]")
    notes = _check_conditions(model, gamma, T, t0, enforce_conditions)
    if isinstance(filter_state, KalmanState):
        if not isinstance(model, LinearOuModel):
            raise TypeError("a Kalman state requires the linear model")
        run = _kalman_branches
    elif isinstance(filter_state, GridFilter):
        if np.asarray(filter_state.probs).ndim != 1:
            raise ValueError("filter_state must be a single (unbatched) filter")
        run = _grid_branches
    else:
        raise TypeError("filter_state must be a KalmanState or GridFilter")
    seed = _derived_seed(rng, StreamRole.INNER_BRANCH)
    logw, collapsed = run(model, filter_state, gamma, grid, seed, n_inner, method)
    if np.any(collapsed):
        # resample the collapsed branches once from a fresh stream
        retry_seed = _derived_seed(rng, StreamRole.RETRY)
        idx = np.flatnonzero(collapsed)
        lw2, col2 = run(model, filter_state, gamma, grid, retry_seed, n_inner, method)
        if np.any(col2[idx]):
            raise FilterCollapseError("inner-branch filter collapsed twice")
        logw = logw.copy()
        logw[idx] = lw2[idx]
    w = np.exp(logw)
    if not np.all(np.isfinite(w)):
        raise FloatingPointError("non-finite inner-branch weight")
    mean = float(np.mean(w))
    stderr = float(np.std(w, ddof=1) / np.sqrt(n_inner))
    return XiEstimate(float(t0), mean, stderr, n_inner, method, notes)


# --------------------------------------------------------------------------
# linear closed forms
# --------------------------------------------------------------------------

def _partial_AH(model, gamma, T) -> ClosedFormAH:
    if not stability_partial(model, gamma):
        raise UnstableRegimeError("partial-information Riccati roots are complex")
    return make_AH(Kind.LINEAR_PARTIAL, model, gamma, T)


def xi_closed_form_linear(model: LinearOuModel, gamma, T: float, t, yhat):
    """``exp((A_p(t) yhat^2 + H_p(t))/gamma)`` for the steady-state filter."""
    AH = _partial_AH(model, gamma, T)
    return np.exp((AH.A(t) * np.asarray(yhat) ** 2 + AH.H(t)) / gamma)


def alpha_over_xi_linear(model: LinearOuModel, gamma, t, yhat, *, T: float):
    """Innovation loading of ``log xi``: ``2 A_p(t) yhat abar / gamma``."""
    AH = _partial_AH(model, gamma, T)
    return 2.0 * AH.A(t) * np.asarray(yhat) * abar(model) / gamma


# --------------------------------------------------------------------------
# drivers
# --------------------------------------------------------------------------

def _lam(hhat, r, sigma):
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    return np.linalg.solve(sigma, np.atleast_1d(np.asarray(hhat, dtype=float) - r))


def beta_forms(hhat, r, sigma, gamma, alpha, xi) -> tuple[float, float]:
    lam = _lam(hhat, r, sigma)
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    k = (1.0 - gamma) / gamma
    f1 = k * lam @ alpha + (1.0 - gamma) / (2.0 * gamma ** 2) * (lam @ lam) * xi
    u = lam / gamma + alpha / xi
    f2 = 0.5 * (1.0 - gamma) * (u @ u) * xi - (1.0 - gamma) * (alpha @ alpha) / (2.0 * abs(xi))
    return float(f1), float(f2)


def beta_eval(hhat, r, sigma, gamma, alpha, xi) -> float:
    """Drift of the dual-factor BSDE; both algebraic forms are cross-checked."""
    if not xi > 0:
        raise ValueError("xi must be positive")
    f1, f2 = beta_forms(hhat, r, sigma, gamma, alpha, xi)
    if abs(f1 - f2) > 1e-10 * (1.0 + abs(f1)):
        raise BetaConsistencyError(f"beta forms disagree: {f1} vs {f2}")
    return f1


def _market_terms(y, model):
    h = np.atleast_1d(np.asarray(model.h(y), dtype=float))
    Sigma = np.atleast_2d(model.Sigma)
    sy = np.atleast_2d(model.sigma_y)
    return h - model.r, Sigma, sy


def f_eval(y, pi, g, eta, model, gamma) -> float:
    """Objective maximized by the fully informed investor."""
    ex, Sigma, sy = _market_terms(y, model)
    pi = np.atleast_1d(np.asarray(pi, dtype=float))
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    return float((-0.5 * gamma * pi @ Sigma @ pi + pi @ ex) * g + pi @ (sy @ eta))


def pi_star_full(y, g, eta, model, gamma) -> np.ndarray:
    if not g > 0:
        raise ValueError("g must be positive")
    ex, Sigma, sy = _market_terms(y, model)
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    return np.linalg.solve(Sigma, ex / gamma + sy @ eta / (gamma * g))


def F_eval(y, g, eta, model, gamma) -> float:
    """Maximum of :func:`f_eval` over the portfolio."""
    if not g > 0:
        raise ValueError("g must be positive")
    ex, Sigma, sy = _market_terms(y, model)
    u = ex + sy @ np.atleast_1d(np.asarray(eta, dtype=float)) / g
    return float(g / (2.0 * gamma) * u @ np.linalg.solve(Sigma, u))


def _driver_scalar(model, y, chi, psi, gamma):
    """Vectorized ``F`` for one-asset one-factor models."""
    u = (model.h(y) - model.r) + model.sigma * model.rho * psi / chi
    return chi / (2.0 * gamma) * u * u / model.sigma ** 2


# --------------------------------------------------------------------------
# full-information BSDE along factor paths
# --------------------------------------------------------------------------

def chi_psi(AH: ClosedFormAH, model, t, Y):
    """``chi = G(t, Y)`` and ``psi = a(Y) dG/dy`` (broadcasting)."""
    if AH.kind is Kind.LINEAR_PARTIAL:
        raise ValueError("chi/psi need a full-information kind")
    Y = np.asarray(Y, dtype=float)
    A = AH.A(t)
    chi = np.exp(A * Y * Y + AH.H(t)) if AH.kind is Kind.LINEAR_FULL else np.exp(A * Y + AH.H(t))
    dG = (2.0 * A * Y if AH.kind is Kind.LINEAR_FULL else A) * chi
    return chi, factor_diffusion(model, Y) * dG


def chi_psi_path(AH: ClosedFormAH, model, Y_path, times) -> list[BsdeRecord]:
    """Records ``(chi, psi)`` along one factor path."""
    times = np.asarray(times, dtype=float)
    Y = np.asarray(Y_path, dtype=float).reshape(times.shape)
    chi, psi = chi_psi(AH, model, times, Y)
    return [BsdeRecord(float(t), float("nan"), None, float(c), float(p))
            for t, c, p in zip(times, chi, psi)]


def bsde_residual(AH: ClosedFormAH, model, gamma, times, Y, dB) -> np.ndarray:
    """Per-path residual of the discretized full-information BSDE.

    ``chi(T) - chi(0) + sum (1-gamma) F dt - sum psi dB`` with left-point
    sums; ``Y`` has shape ``(n_paths, n+1)`` and ``dB`` ``(n_paths, n)``.
    """
    times = np.asarray(times, dtype=float)
    chi, psi = chi_psi(AH, model, times, Y)
    dt = np.diff(times)
    F = _driver_scalar(model, Y[:, :-1], chi[:, :-1], psi[:, :-1], gamma)
    return (chi[:, -1] - chi[:, 0] + np.sum((1.0 - gamma) * F * dt, axis=1)
            - np.sum(psi[:, :-1] * dB, axis=1))


def kalman_state_steady(model: LinearOuModel, yhat: float) -> KalmanState:
    return KalmanState(float(yhat), steady_state_variance(model), True)

