from __future__ import annotations

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from pibsde.closed_form import (Kind, RiccatiSpec, UnstableRegimeError, g_eval, integrate_riccati_rk4,
                                linear_riccati_roots, make_AH, nirvana_blowup_time, riccati_spec, spec_roots,
                                stability_full, stability_partial)
from pibsde.model import CirModel, LinearOuModel
from pibsde.sim import RngSpec, TimeGrid, euler_factor, simulate_factor

GAMMA = 1.2

linear_params = st.fixed_dictionaries(dict(
    kappa=st.floats(0.05, 20), a=st.floats(0.01, 2), rho=st.floats(-0.99, 0.99), sigma=st.floats(0.02, 2)))


def test_linear_roots_reference(linear):
    ap, am, disc = linear_riccati_roots(linear, GAMMA)
    assert am == pytest.approx(-0.23887, rel=1e-4)
    assert ap == pytest.approx(96.43, rel=1e-4)
    assert disc > 0


def test_roots_independent_quadratic_formula(linear):
    spec = riccati_spec(Kind.LINEAR_FULL, linear, GAMMA)
    ref = np.sort(np.roots([spec.q2, -2 * spec.q1, spec.q0]).real)
    r = spec_roots(spec)
    np.testing.assert_allclose([r.A_minus, r.A_plus], ref, rtol=1e-10)


def test_zero_constant_term_roots():
    r = spec_roots(RiccatiSpec(q2=0.5, q1=2.0, q0=0.0, h_coef=1.0))
    assert r.A_minus == 0.0
    assert r.A_plus == pytest.approx(2 * 2.0 / 0.5)


def test_degenerate_quadratic_falls_back_to_linear_root():
    r = spec_roots(RiccatiSpec(q2=0.0, q1=2.0, q0=-1.0, h_coef=1.0))
    assert r.degenerate and r.A_minus == pytest.approx(-0.25) and np.isinf(r.A_plus)


def test_cir_reference_values():
    AH = make_AH(Kind.CIR_FULL, CirModel(sigma=0.15), GAMMA, 1.0)
    assert AH.A_minus == pytest.approx(-2.89268e-2, rel=1e-5)
    assert AH.D == pytest.approx(8.00463, rel=1e-5)


@given(linear_params, st.floats(1.01, 10.0))
@settings(max_examples=200, deadline=None)
def test_roots_solve_quadratic(p, gamma):
    spec = riccati_spec(Kind.LINEAR_FULL, LinearOuModel(**p), gamma)
    r = spec_roots(spec)
    assume(not r.is_complex)
    for root in (r.A_plus, r.A_minus):
        scale = spec.q2 * root * root + 2 * abs(spec.q1 * root) + abs(spec.q0)
        assert abs(spec.q2 * root * root - 2 * spec.q1 * root + spec.q0) <= 1e-10 * scale
    assert r.A_plus > 0 > r.A_minus


@given(linear_params, st.floats(1.01, 10.0))
@settings(max_examples=100, deadline=None)
def test_terminal_values_and_sign(p, gamma):
    AH = make_AH(Kind.LINEAR_FULL, LinearOuModel(**p), gamma, 1.0)
    assert AH.A(1.0) == 0.0 and AH.H(1.0) == 0.0
    t = np.linspace(0.0, 0.99, 20)
    assert np.all(AH.A(t) < 0) and np.all(AH.A(t) >= AH.A_minus * (1 + 1e-12))


@pytest.mark.parametrize("kind,model", [(Kind.LINEAR_FULL, LinearOuModel()),
                                        (Kind.LINEAR_PARTIAL, LinearOuModel()),
                                        (Kind.CIR_FULL, CirModel())])
def test_closed_form_solves_ode(kind, model):
    AH = make_AH(kind, model, GAMMA, 1.0)
    s = AH.spec
    t = np.linspace(0.05, 0.95, 19)
    h = 1e-5
    dA = (AH.A(t + h) - AH.A(t - h)) / (2 * h)
    dH = (AH.H(t + h) - AH.H(t - h)) / (2 * h)
    A = AH.A(t)
    np.testing.assert_allclose(dA + s.q2 * A * A - 2 * s.q1 * A + s.q0, 0.0, atol=1e-7)
    np.testing.assert_allclose(dH, -s.h_coef * A, atol=1e-7)


def test_reference_values_at_zero(linear):
    full = make_AH(Kind.LINEAR_FULL, linear, GAMMA, 1.0)
    part = make_AH(Kind.LINEAR_PARTIAL, linear, GAMMA, 1.0)
    assert full.A(0.0) == pytest.approx(-0.238870, rel=1e-5)
    assert full.H(0.0) == pytest.approx(-0.0201135, rel=1e-5)
    assert part.A(0.0) == pytest.approx(-0.238584, rel=1e-5)
    assert part.H(0.0) == pytest.approx(-0.0111277, rel=1e-5)


def test_rk4_detects_blowup():
    spec = RiccatiSpec(q2=1.0, q1=0.0, q0=1.0, h_coef=1.0)
    # in time to maturity A' = A^2 + 1, so A = tan(tau) blows up at tau = pi/2
    path = integrate_riccati_rk4(spec, 3.0, 30000)
    assert path.blowup_time == pytest.approx(3.0 - np.pi / 2, abs=1e-3)
    assert np.isnan(path.A[0])


def test_rk4_matches_tangent_before_blowup():
    spec = RiccatiSpec(q2=1.0, q1=0.0, q0=1.0, h_coef=1.0)
    path = integrate_riccati_rk4(spec, 1.0, 10000)
    tau = 1.0 - path.t
    np.testing.assert_allclose(path.A, np.tan(tau), atol=1e-9)
    np.testing.assert_allclose(path.H, -np.log(np.cos(tau)), atol=1e-9)


def test_blowup_time_matches_rk4():
    m = LinearOuModel(kappa=0.1, a=1.0, rho=0.0, sigma=0.2)
    gamma = 0.5
    assert not stability_full(m, gamma)
    t_star = nirvana_blowup_time(m, gamma, 5.0)
    path = integrate_riccati_rk4(riccati_spec(Kind.LINEAR_FULL, m, gamma), 5.0, 50000, blowup_level=1e10)
    assert t_star is not None
    assert path.blowup_time == pytest.approx(t_star, abs=1e-3)


def test_blowup_none_for_short_horizon():
    m = LinearOuModel(kappa=0.1, a=1.0, rho=0.0, sigma=0.2)
    assert nirvana_blowup_time(m, 0.5, 1e-3) is None


def test_blowup_rejects_stable(linear):
    with pytest.raises(UnstableRegimeError):
        nirvana_blowup_time(linear, GAMMA, 1.0)


def test_make_AH_rejects_complex():
    with pytest.raises(UnstableRegimeError):
        make_AH(Kind.LINEAR_FULL, LinearOuModel(kappa=0.1, a=1.0, rho=0.0, sigma=0.2), 0.5, 1.0)


@given(linear_params, st.floats(1.01, 10.0))
@settings(max_examples=200, deadline=None)
def test_risk_averse_always_stable(p, gamma):
    m = LinearOuModel(**p)
    assert stability_full(m, gamma) and stability_partial(m, gamma)


@given(linear_params, st.floats(0.05, 0.99))
@settings(max_examples=300, deadline=None)
def test_stability_flags_agree_with_discriminant(p, gamma):
    m = LinearOuModel(**p)
    for kind, flag in ((Kind.LINEAR_FULL, stability_full), (Kind.LINEAR_PARTIAL, stability_partial)):
        spec = riccati_spec(kind, m, gamma)
        if abs(spec.discriminant) > 1e-9 * spec.q1 ** 2:
            assert flag(m, gamma) == (spec.discriminant > 0)


@given(linear_params, st.floats(0.05, 0.99))
@settings(max_examples=300, deadline=None)
def test_partial_and_full_stability_coincide(p, gamma):
    # abar^2 + 2 kappa sigma abar = a^2 + 2 kappa sigma a rho, so both conditions are the same inequality
    m = LinearOuModel(**p)
    full = riccati_spec(Kind.LINEAR_FULL, m, gamma)
    part = riccati_spec(Kind.LINEAR_PARTIAL, m, gamma)
    assert part.q2 * part.q0 == pytest.approx(full.q2 * full.q0 + part.q1 ** 2 - full.q1 ** 2, rel=1e-8, abs=1e-10)
    assert part.discriminant == pytest.approx(full.discriminant, rel=1e-7, abs=1e-9 * full.q1 ** 2)


def test_riccati_spec_guards(linear):
    with pytest.raises(ValueError):
        riccati_spec(Kind.LINEAR_FULL, linear, 1.0)
    with pytest.raises(TypeError):
        riccati_spec(Kind.CIR_FULL, linear, GAMMA)
    with pytest.raises(ValueError):
        riccati_spec(Kind.LINEAR_FULL, LinearOuModel(mu=0.1), GAMMA)


def test_cir_g_matches_feynman_kac():
    # G = exp(A y + H) solves G_t + kappa(ybar - y) G_y + a^2 y G_yy / 2 + q0 y G = 0,
    # so G(0, y) = E[exp(q0 int_0^T Y ds) | Y_0 = y]
    m = CirModel(sigma=0.15)
    AH = make_AH(Kind.CIR_FULL, m, GAMMA, 1.0)
    s = AH.spec
    grid = TimeGrid(0.0, 1.0, 2000)
    _, dB = simulate_factor(m, grid, RngSpec(11), n_paths=20000)
    Y = euler_factor(m, grid, dB[..., 0], y0=m.ybar)
    integral = grid.dt * (0.5 * Y[:, 0] + Y[:, 1:-1].sum(axis=1) + 0.5 * Y[:, -1])
    mc = np.exp(s.q0 * integral)
    est, se = mc.mean(), mc.std(ddof=1) / np.sqrt(mc.size)
    assert abs(est - float(g_eval(AH, 0.0, m.ybar))) < 4 * se + 1e-4
