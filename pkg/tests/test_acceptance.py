"""End-to-end acceptance checks; each prints one PASS/FAIL line in the summary."""
from __future__ import annotations

import time

import numpy as np
import pytest

from pibsde.bsde import bsde_residual, beta_forms, estimate_xi_nested, f_eval, F_eval, kalman_state_steady, \
    pi_star_full, xi_closed_form_linear
from pibsde.closed_form import Kind, g_eval, integrate_riccati_rk4, make_AH, nirvana_blowup_time, \
    riccati_spec, stability_partial
from pibsde.experiments import parse_config, run_fig1, run_fig2
from pibsde.filtering import abar, grid_build, grid_run, kalman_run, steady_state_variance, variance_rhs
from pibsde.model import CirModel, LinearOuModel, check_novikov_cir
from pibsde.sim import RngSpec, TimeGrid, coarsen_increments, euler_factor, simulate_factor, simulate_market
from pibsde.strategy import drift_zero_check, martingale_residual, premium_estimate
from pibsde.filtering import KalmanState

GAMMA = 1.2


def record(log, n, name, ok, detail):
    log.append(f"{'PASS' if ok else 'FAIL'} {n}: {name} -- {detail}")
    assert ok, detail


def random_linear(rng, gamma_low=1.01, gamma_high=10.0):
    return dict(kappa=rng.uniform(0.05, 20), a=rng.uniform(0.01, 2), rho=rng.uniform(-0.99, 0.99),
                sigma=rng.uniform(0.02, 2), gamma=rng.uniform(gamma_low, gamma_high))


# 1 ------------------------------------------------------------------------

@pytest.mark.parametrize("kind,model", [
    (Kind.LINEAR_FULL, LinearOuModel()),
    (Kind.LINEAR_PARTIAL, LinearOuModel()),
    (Kind.CIR_FULL, CirModel(sigma=0.15)),
    (Kind.CIR_FULL, CirModel(sigma=0.026)),
])
def test_01_riccati_closed_form_vs_rk4(acceptance_log, kind, model):
    t0 = time.perf_counter()
    AH = make_AH(kind, model, GAMMA, 1.0)
    num = integrate_riccati_rk4(AH.spec, 1.0, 10 ** 4)
    err = max(np.abs(num.A - AH.A(num.t)).max(), np.abs(num.H - AH.H(num.t)).max())
    dt = time.perf_counter() - t0
    record(acceptance_log, 1, f"Riccati closed form vs RK4 [{kind.value}, sigma={model.sigma}]",
           err < 1e-6 and dt < 1.0, f"sup diff {err:.2e} (< 1e-6), {dt:.2f}s (< 1s)")


# 2 ------------------------------------------------------------------------

def test_02_steady_state_filter(acceptance_log):
    m = LinearOuModel()
    res = abs(variance_rhs(m, steady_state_variance(m)))
    rng = np.random.default_rng(2)
    worst = np.inf
    for _ in range(10 ** 4):
        p = random_linear(rng)
        mm = LinearOuModel(kappa=p["kappa"], a=p["a"], rho=p["rho"], sigma=p["sigma"])
        worst = min(worst, abar(mm) + mm.kappa * mm.sigma)
    ok = res < 1e-12 and worst >= 0
    record(acceptance_log, 2, "steady-state variance residual and abar >= -kappa sigma", ok,
           f"ODE residual {res:.1e} (< 1e-12); min(abar + kappa sigma) over 1e4 draws = {worst:.3e} (>= 0)")


# 3 ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def filter_errors():
    m = LinearOuModel()
    grid = TimeGrid(0.0, 1.0, 1000)
    sbar = steady_state_variance(m)
    t0 = time.perf_counter()
    path = simulate_market(m, grid, RngSpec(30), y0=0.0, n_paths=10)
    kal = kalman_run(m, path, use_steady=False, var0=sbar).yhat
    errs = {}
    for n in (200, 400):
        f = grid_build(m, n=n, dt=grid.dt, prior=(0.0, sbar))
        mean = grid_run(m, f, path.dlogS[..., 0]) @ f.nodes
        errs[n] = np.abs(mean - kal).max() / m.stationary_std
    return errs, time.perf_counter() - t0


def test_03_grid_vs_kalman_accuracy(acceptance_log, filter_errors):
    errs, dt = filter_errors
    record(acceptance_log, 3, "grid filter mean vs Kalman mean (n=400, 10 seeds)",
           errs[400] < 0.02 and dt < 60, f"sup diff {errs[400]:.2e} std (< 2e-2), {dt:.1f}s (< 60s)")


def test_03_grid_refinement_ratio(acceptance_log, filter_errors):
    errs, _ = filter_errors
    ratio = errs[200] / errs[400]
    record(acceptance_log, 3, "grid filter refinement (err n=200 / err n=400 >= 1.5)", ratio >= 1.5,
           f"ratio {ratio:.4f}; errors {errs[200]:.3e} vs {errs[400]:.3e} std are both the Kalman "
           f"reference's own time-discretization floor")


# 4 ------------------------------------------------------------------------

@pytest.mark.parametrize("method", ["innovations", "girsanov"])
def test_04_nested_xi_vs_closed_form(acceptance_log, method):
    m = LinearOuModel()
    t0 = time.perf_counter()
    est = estimate_xi_nested(m, kalman_state_steady(m, 0.0), GAMMA, 1.0, 2000, TimeGrid(0.0, 1.0, 1000),
                             RngSpec(4), method=method)
    dt = time.perf_counter() - t0
    exact = float(xi_closed_form_linear(m, GAMMA, 1.0, 0.0, 0.0))
    z = (est.mean - exact) / est.stderr
    record(acceptance_log, 4, f"nested MC xi(0) vs closed form [{method}]", abs(z) <= 3 and dt < 300,
           f"MC {est.mean:.6f} +- {est.stderr:.1e}, closed {exact:.6f}, z={z:.2f} (|z| <= 3), {dt:.1f}s")


# 5 ------------------------------------------------------------------------

def test_05_xi_band(acceptance_log):
    lin, cir = LinearOuModel(), CirModel()
    t = np.linspace(0, 1, 101)
    yh = np.linspace(-0.5, 0.5, 41)
    closed = xi_closed_form_linear(lin, GAMMA, 1.0, t[:, None], yh[None, :])
    ok = bool(np.all((closed > 0) & (closed <= 1)))
    terminal = [float(xi_closed_form_linear(lin, GAMMA, 1.0, 1.0, 0.3))]
    worst = -np.inf
    for state, model in ((kalman_state_steady(lin, 0.2), lin),
                         (grid_build(cir, prior="point", y0=cir.ybar), cir)):
        for k, t0 in enumerate((0.0, 0.5, 0.9)):
            n = int(round((1 - t0) * 1000))
            e = estimate_xi_nested(model, state, GAMMA, 1.0, 200, TimeGrid(t0, 1.0, n), RngSpec(5, k))
            ok &= e.mean > 0
            worst = max(worst, (e.mean - 1) / max(e.stderr, 1e-300))
        terminal.append(estimate_xi_nested(model, state, GAMMA, 1.0, 10, None, RngSpec(5), t=1.0).mean)
    ok &= worst <= 3 and all(v == 1.0 for v in terminal)
    record(acceptance_log, 5, "xi in (0, 1 + 3 stderr] for gamma > 1, xi(T) = 1", ok,
           f"closed forms in (0,1]; max (xi-1)/stderr over MC = {worst:.1f}; terminal values {terminal}")


# 6 ------------------------------------------------------------------------

def test_06_driver_identities(acceptance_log):
    from scipy import optimize
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    beta_err = F_min = max_gap = max_grad = 0.0
    F_min = np.inf
    for _ in range(1000):
        p = random_linear(rng, 0.2, 5.0)
        if abs(p["gamma"] - 1) < 1e-3:
            continue
        m = LinearOuModel(kappa=p["kappa"], a=p["a"], rho=p["rho"], sigma=rng.uniform(0.1, 1.0))
        g = p["gamma"]
        hh, al, xi = rng.normal(0, 0.5), rng.normal(0, 0.5), rng.uniform(0.1, 2.0)
        f1, f2 = beta_forms(hh, 0.0, m.sigma, g, al, xi)
        beta_err = max(beta_err, abs(f1 - f2) / (1 + abs(f1)))
        y, gg, eta = rng.normal(0, 0.3), rng.uniform(0.1, 2.0), rng.normal(0, 0.3)
        F = F_eval(y, gg, eta, m, g)
        F_min = min(F_min, F)
        res = optimize.minimize_scalar(lambda x: -f_eval(y, x, gg, eta, m, g), bracket=(-1.0, 1.0), tol=1e-12)
        max_gap = max(max_gap, abs(F + res.fun))
        ps = pi_star_full(y, gg, eta, m, g)[0]
        h = 1e-4
        grad = (f_eval(y, ps + h, gg, eta, m, g) - f_eval(y, ps - h, gg, eta, m, g)) / (2 * h)
        max_grad = max(max_grad, abs(grad))
    dt = time.perf_counter() - t0
    ok = beta_err < 1e-12 and F_min >= 0 and max_gap < 1e-8 and max_grad < 1e-10 and dt < 10
    record(acceptance_log, 6, "beta identity, F >= 0, F = max f, first-order condition", ok,
           f"beta {beta_err:.1e}, min F {F_min:.2e}, |F - max f| {max_gap:.1e}, grad {max_grad:.1e}, {dt:.1f}s")


# 7 ------------------------------------------------------------------------

def test_07_drift_zero(acceptance_log):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(10 ** 4):
        g = rng.uniform(0.2, 5.0)
        if abs(g - 1) < 1e-3:
            continue
        m = LinearOuModel(sigma=rng.uniform(0.05, 2.0), rho=rng.uniform(-0.9, 0.9))
        worst = max(worst, drift_zero_check(rng.normal(0, 0.5), 0.0, m, g, rng.normal(0, 1.0),
                                            rng.uniform(0.05, 3.0)))
    record(acceptance_log, 7, "verification bracket vanishes at the optimum", worst < 1e-10,
           f"max |bracket| over 1e4 inputs = {worst:.1e} (< 1e-10)")


# 8 ------------------------------------------------------------------------

def test_08_martingale(acceptance_log):
    m = CirModel()
    AH = make_AH(Kind.CIR_FULL, m, GAMMA, 1.0)
    grid = TimeGrid(0.0, 1.0, 1000)
    t0 = time.perf_counter()
    opt = martingale_residual(m, GAMMA, AH, 5000, grid, RngSpec(8))
    half = martingale_residual(m, GAMMA, AH, 5000, grid, RngSpec(8), strategy_scale=0.5)
    dt = time.perf_counter() - t0
    ok = opt.max_drift <= 3 and half.z[-1] < -3 and dt < 120
    record(acceptance_log, 8, "value process flat under optimum, decays under half strategy", ok,
           f"max |z| optimum {opt.max_drift:.2f} (<= 3); half-strategy final z {half.z[-1]:.1f} (< -3); {dt:.1f}s")


# 9 ------------------------------------------------------------------------

def test_09_bsde_residual_halves(acceptance_log):
    m = CirModel()
    AH = make_AH(Kind.CIR_FULL, m, GAMMA, 1.0)
    fine, coarse = TimeGrid(0.0, 1.0, 2000), TimeGrid(0.0, 1.0, 1000)
    _, dB = simulate_factor(m, fine, RngSpec(9), n_paths=100)
    dB = dB[..., 0]
    dBc = coarsen_increments(dB)
    rf = bsde_residual(AH, m, GAMMA, fine.times, euler_factor(m, fine, dB), dB)
    rc = bsde_residual(AH, m, GAMMA, coarse.times, euler_factor(m, coarse, dBc), dBc)
    ratio = np.sqrt(np.mean(rc ** 2) / np.mean(rf ** 2))
    record(acceptance_log, 9, "full-information BSDE residual halves with dt", abs(ratio - 2) < 0.3,
           f"RMS dt=1e-3 / dt=5e-4 = {ratio:.3f} (2 +- 0.3)")


# 10 -----------------------------------------------------------------------

def test_10_information_premium(acceptance_log, tmp_path):
    m = LinearOuModel()
    sbar = steady_state_variance(m)
    AHf = make_AH(Kind.LINEAR_FULL, m, GAMMA, 1.0)
    G0 = float(xi_closed_form_linear(m, GAMMA, 1.0, 0.0, 0.0)) ** GAMMA
    pe = premium_estimate(0.0, 1.0, KalmanState(0.0, sbar), G0, AHf, m, GAMMA, 10 ** 5, RngSpec(10))
    # Gaussian expectation of exp(A y^2 + H)
    exact = float(np.exp(AHf.H(0.0)) / np.sqrt(1 - 2 * AHf.A(0.0) * sbar))
    z_oracle = (pe.e_g_full - exact) / pe.stderr
    violations = 0
    for seed in range(10):
        cfg = parse_config(f"model = linear\nseed = {seed}\n")
        run_fig1(cfg, tmp_path / str(seed))
        rows = np.genfromtxt(tmp_path / str(seed) / "fig1.csv", delimiter=",", names=True)
        violations += bool(np.any(rows["G_partial"][:-1] < rows["G_full"][:-1]))
    ok = pe.e_g_full <= G0 + 3 * pe.stderr and abs(z_oracle) <= 3 and violations >= 5
    record(acceptance_log, 10, "information premium nonnegative at t=0, pathwise violations occur", ok,
           f"E[G_full]={pe.e_g_full:.6f}+-{pe.stderr:.1e} vs G={G0:.6f}; Gaussian oracle z={z_oracle:.2f}; "
           f"premium={pe.premium:.4g}; seeds with G<G_full somewhere: {violations}/10")


# 11 -----------------------------------------------------------------------

def test_11_nirvana(acceptance_log):
    rng = np.random.default_rng(11)
    all_stable = True
    for _ in range(10 ** 4):
        p = random_linear(rng)
        mm = LinearOuModel(kappa=p["kappa"], a=p["a"], rho=p["rho"], sigma=p["sigma"])
        all_stable &= stability_partial(mm, p["gamma"])
    m = LinearOuModel(kappa=0.9, a=0.8, rho=0.4, sigma=1.0)
    assert 2 * m.kappa * m.rho + m.a / m.sigma > 0
    T, n = 10.0, 10 ** 4
    t_an = nirvana_blowup_time(m, 0.05, T)
    t_rk = integrate_riccati_rk4(riccati_spec(Kind.LINEAR_FULL, m, 0.05), T, n).blowup_time
    steps = abs(t_an - t_rk) / (T / n)
    ok = bool(all_stable) and t_rk is not None and steps <= 2
    record(acceptance_log, 11, "partial stability for gamma > 1; analytic vs RK4 blow-up time", ok,
           f"all 1e4 draws stable: {bool(all_stable)}; blow-up {t_an:.5f} vs RK4 {t_rk} ({steps:.2f} steps <= 2)")


# 12 -----------------------------------------------------------------------

def test_12_novikov(acceptance_log):
    t0 = time.perf_counter()
    reps = {s: check_novikov_cir(CirModel(sigma=s), 1.0) for s in (0.15, 0.026, 0.001)}
    again = {s: check_novikov_cir(CirModel(sigma=s), 1.0) for s in reps}
    dt = time.perf_counter() - t0
    ok = reps[0.15].ok and reps[0.026].ok and not reps[0.001].ok and reps == again and dt < 0.1
    record(acceptance_log, 12, "Novikov report", ok,
           "; ".join(f"sigma={s}: lhs={r.lhs:.6g} {'ok' if r.ok else 'fails'}" for s, r in reps.items()))


# 13 -----------------------------------------------------------------------

def test_13_reproducibility(acceptance_log, tmp_path):
    cfg1 = parse_config("model = linear\nseed = 13\n")
    a = run_fig1(cfg1, tmp_path / "a")["fig1"].read_bytes()
    b = run_fig1(cfg1, tmp_path / "b")["fig1"].read_bytes()
    text = "model = cir\nseed = 13\nn_checkpoints = 10\nn_inner = 8\n"
    outs = []
    for tag, workers in (("c", 1), ("d", 1), ("e", 2)):
        files = run_fig2(parse_config(text + f"workers = {workers}\n"), tmp_path / tag)
        outs.append(tuple(files[k].read_bytes() for k in sorted(files) if k.startswith("sigma")))
    ok = a == b and outs[0] == outs[1] == outs[2]
    record(acceptance_log, 13, "byte-identical CSV across runs and worker counts", ok,
           f"fig1 runs equal: {a == b}; fig2 runs equal: {outs[0] == outs[1]}; "
           f"workers 1 vs 2 equal: {outs[0] == outs[2]}")
