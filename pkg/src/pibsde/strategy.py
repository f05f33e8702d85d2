"""Optimal portfolios, primal/dual value functions and the information premium."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .bsde import beta_eval, chi_psi
from .closed_form import ClosedFormAH, g_eval
from .filtering import GridFilter, KalmanState
from .model import PowerUtility, total_sigma
from .sim import NumericOverflowError, RngSpec, StreamRole, TimeGrid, evolve_wealth, simulate_market


@dataclass(frozen=True)
class StrategyRecord:
    t: float
    pi: np.ndarray
    myopic: np.ndarray
    hedge: np.ndarray


@dataclass(frozen=True)
class PremiumEstimate:
    t: float
    x: float
    g_partial: float
    e_g_full: float
    stderr: float
    premium: float


def _sigma_matrices(model):
    Sigma = np.atleast_2d(model.Sigma)
    return Sigma, total_sigma(model)


def pi_partial(hhat, r, model, gamma, alpha_over_xi, t: float = 0.0) -> StrategyRecord:
    """Myopic Merton term on the filtered drift plus the hedge ``sigma^{-T} alpha/xi``."""
    Sigma, sig = _sigma_matrices(model)
    ex = np.atleast_1d(np.asarray(hhat, dtype=float) - r)
    myopic = np.linalg.solve(Sigma, ex) / gamma
    hedge = np.linalg.solve(sig.T, np.atleast_1d(np.asarray(alpha_over_xi, dtype=float)))
    return StrategyRecord(t, myopic + hedge, myopic, hedge)


def pi_full(y, chi, psi, model, gamma, t: float = 0.0) -> StrategyRecord:
    if not chi > 0:
        raise ValueError("chi must be positive")
    Sigma, _ = _sigma_matrices(model)
    ex = np.atleast_1d(np.asarray(model.h(y), dtype=float) - model.r)
    myopic = np.linalg.solve(Sigma, ex) / gamma
    sy_psi = np.atleast_2d(model.sigma_y) @ np.atleast_1d(np.asarray(psi, dtype=float))
    hedge = np.linalg.solve(Sigma, sy_psi) / (gamma * chi)
    return StrategyRecord(t, myopic + hedge, myopic, hedge)


def value_partial(t, x, G_t, gamma, r, T):
    """``U(x e^{r(T-t)}) G_t``."""
    if np.any(np.asarray(x) <= 0) or np.any(np.asarray(G_t) <= 0):
        raise ValueError("x and G_t must be positive")
    return PowerUtility(gamma)(x * np.exp(r * (T - t))) * G_t


def value_dual(t, p, xi_t, gamma, r, T):
    """``U*(p e^{-r(T-t)}) xi_t``."""
    if np.any(np.asarray(p) <= 0) or np.any(np.asarray(xi_t) <= 0):
        raise ValueError("p and xi_t must be positive")
    return PowerUtility(gamma).conjugate(p * np.exp(-r * (T - t))) * xi_t


def conjugacy_check(t, x, xi_t, gamma, r, T, n_grid: int = 2001) -> float:
    """Relative gap between ``inf_p (V*(p) + x p)`` and the primal value.

    The infimum is located on a log grid over ``[1e-6, 1e6] U'(x)`` and
    refined by golden-section search in ``log p``.
    """
    marg = PowerUtility(gamma).marginal(x)
    u = np.linspace(np.log(1e-6 * marg), np.log(1e6 * marg), n_grid)
    obj = lambda v: float(value_dual(t, np.exp(v), xi_t, gamma, r, T) + x * np.exp(v))
    vals = np.array([obj(v) for v in u])
    i = int(np.clip(np.argmin(vals), 1, n_grid - 2))
    res = optimize.minimize_scalar(obj, bracket=(u[i - 1], u[i], u[i + 1]), method="golden",
                                   tol=1e-10)
    best = min(res.fun, vals.min())
    primal = float(value_partial(t, x, xi_t ** gamma, gamma, r, T))
    return abs(best - primal) / (1.0 + abs(primal))


def _sample_filter(state, gen: np.random.Generator, n: int) -> np.ndarray:
    if isinstance(state, (KalmanState, GridFilter)):
        return state.sample(gen, n)
    if np.isscalar(state):
        return np.full(n, float(state))
    raise TypeError("filter_state must be a KalmanState, GridFilter or a point")


def premium_estimate(t, x, filter_state, G_partial_t, AH_full: ClosedFormAH, model, gamma, n: int,
                     rng: RngSpec) -> PremiumEstimate:
    """Expected utility loss from observing prices only, at wealth ``x``.

    ``E[G_full(t, Y(t))]`` is averaged over ``n`` draws of ``Y(t)`` from the
    filter; the premium is ``U(x e^{r(T-t)}) (E[G_full] - G_partial)``.
    """
    if not G_partial_t > 0:
        raise ValueError("G_partial_t must be positive")
    gen = rng.with_role(StreamRole.PRIOR).generator()
    y = _sample_filter(filter_state, gen, n)
    gf = g_eval(AH_full, t, y)
    e_g = float(np.mean(gf))
    se = float(np.std(gf, ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    u = float(PowerUtility(gamma)(x * np.exp(model.r * (AH_full.T - t))))
    return PremiumEstimate(float(t), float(x), float(G_partial_t), e_g, se, u * (e_g - G_partial_t))


@dataclass(frozen=True)
class MartingaleReport:
    times: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    z: np.ndarray  # (mean_k - mean_0) / stderr of the paired difference

    @property
    def max_drift(self) -> float:
        return float(np.max(np.abs(self.z[1:])))


def martingale_residual(model, gamma, AH: ClosedFormAH, n_paths: int, grid: TimeGrid, rng: RngSpec,
                        strategy_scale: float = 1.0, n_checkpoints: int = 10, x0: float = 1.0,
                        y0=None) -> MartingaleReport:
    """Track ``V(t, X(t), Y(t))`` under the full-information optimum (scaled).

    With ``strategy_scale = 1`` the mean should stay flat; any other scale
    gives a supermartingale.  ``max_drift`` is the largest normalized
    deviation from the initial mean over the checkpoints.
    """
    path = simulate_market(model, grid, rng, y0=y0, n_paths=n_paths)
    times = grid.times
    Y = path.Y[..., 0]
    chi, psi = chi_psi(AH, model, times, Y)
    sig2 = model.sigma ** 2
    # scalar form of pi_full, vectorized over paths and steps
    pi = ((model.h(Y) - model.r) / gamma + model.sigma * model.rho * psi / (gamma * chi)) / sig2
    pi = strategy_scale * pi[:, :-1, None]
    try:
        X = evolve_wealth(path, pi, model, x0=x0)
    except NumericOverflowError as exc:
        raise NumericOverflowError(f"wealth overflow with seed {rng.seed}") from exc
    idx = np.unique(np.round(np.linspace(0, grid.n_steps, n_checkpoints + 1)).astype(int))
    util = PowerUtility(gamma)
    V = util(X[:, idx] * np.exp(model.r * (grid.T - times[idx]))) * chi[:, idx]
    mean = V.mean(axis=0)
    stderr = V.std(axis=0, ddof=1) / np.sqrt(n_paths)
    diff = V - V[:, :1]
    dse = diff.std(axis=0, ddof=1) / np.sqrt(n_paths)
    dmean = diff.mean(axis=0)
    # a deterministic nonzero shift is an infinite normalized drift
    with np.errstate(invalid="ignore", divide="ignore"):
        z = np.where(dse > 0, dmean / np.where(dse > 0, dse, 1.0),
                     np.where(dmean == 0, 0.0, np.sign(dmean) * np.inf))
    return MartingaleReport(times[idx], mean, stderr, z)


def drift_bracket(pi, hhat, r, model, gamma, alpha_over_xi, xi) -> float:
    """Quadratic form in ``pi`` whose maximum (zero) certifies optimality."""
    sig = total_sigma(model)
    lam = np.linalg.solve(sig, np.atleast_1d(np.asarray(hhat, dtype=float) - r))
    aox = np.atleast_1d(np.asarray(alpha_over_xi, dtype=float))
    beta = beta_eval(hhat, r, sig, gamma, aox * xi, xi)
    s_pi = sig.T @ np.atleast_1d(np.asarray(pi, dtype=float))
    return float(-s_pi @ s_pi + 2.0 * (lam / gamma + aox) @ s_pi
                 - 2.0 * beta / ((1.0 - gamma) * xi) - aox @ aox)


def drift_zero_check(hhat, r, model, gamma, alpha_over_xi, xi) -> float:
    """``|bracket|`` at the partial-information optimum."""
    rec = pi_partial(hhat, r, model, gamma, alpha_over_xi)
    return abs(drift_bracket(rec.pi, hhat, r, model, gamma, alpha_over_xi, xi))
