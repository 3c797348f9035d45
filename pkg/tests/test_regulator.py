import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from safereg.errors import ConfigurationError, DomainError, MissingConstantError
from safereg.regulator import (BarrierSpec, CBFChain, ControlBank, bank_over, cbf_chain, first_transform,
                               forward_backstep, h_eD_bounds, inverse_backstep, kernels, make_rescue, make_theta,
                               nominal_control, output_control, predict_state, rescue_sigma, rho_hat_gain,
                               robust_control, select_gains)
from safereg.regulator.control import gain_requirements
from safereg.simloop import build_vehicle_scenario

from systems import random_spectrum, strict_feedback_with_spectrum

VEHICLE_RUNS = [("E1", 1), ("E1", 2), ("E2", 1), ("E2", 2)]


def vehicle_theta(vehicle, case):
    cfg = build_vehicle_scenario(vehicle, case)
    s, e = cfg.system(), cfg.exosystem()
    th = make_theta(s.A, e.S_d, s.G @ e.P_d, e.S_r, e.P_r, s.b, s.D)
    X = np.array(cfg.X0, dtype=float)
    V = np.r_[cfg.V_d0, cfg.V_r0].astype(float)
    return cfg, th, X, V


def vehicle_chain(cfg, th, X, V, gains=(3.0, 1.0)):
    spec = BarrierSpec(cfg.barrier, 2)
    probe = ControlBank([th], CBFChain(spec, [0.0, 0.0]), cfg.N_cells)
    lo, hi, _ = h_eD_bounds(probe, X[None], V[None])
    rescue, _ = make_rescue((lo, hi), cfg.eps, cfg.t_bar, th.D)
    return CBFChain(spec, list(gains), rescue)


# -- chain-form transformation -------------------------------------------

def test_first_transform_second_order():
    A = np.array([[0.0, 1.0], [0.3, -1.2]])
    tc = first_transform(A, 0.5, np.zeros((2, 1)), [[0.0]], [1.0])
    assert np.array_equal(tc.T_z, np.eye(2))
    assert np.allclose(tc.K, A[1] / 0.5)
    assert np.allclose(tc.T_v[:, 0], [-1.0, 0.0])


def test_first_transform_scalar():
    tc = first_transform([[-0.7]], 2.0, [[0.4]], [[0.0]], [1.0])
    assert np.allclose(tc.K, [-0.35])
    assert np.allclose(tc.G0, [0.2])
    with pytest.raises(DomainError):
        first_transform([[0.0, 2.0], [0.0, 0.0]], 1.0, np.zeros((2, 1)), [[0.0]], [1.0])


@given(st.integers(0, 10_000))
def test_chain_dynamics_identity(seed):
    # Zdot computed from the plant equals A_z Z + e_n b (u + K X + G0 V)
    rng = np.random.default_rng(seed)
    n, nv = 3, 2
    A = strict_feedback_with_spectrum(random_spectrum(n, rng), rng)
    b = rng.uniform(0.2, 2.0)
    Gbar = rng.standard_normal((n, nv))
    S = np.array([[0.0, rng.uniform(0.3, 1.5)], [-rng.uniform(0.3, 1.5), 0.0]])
    Pr = rng.standard_normal(nv)
    tc = first_transform(A, b, Gbar, S, Pr)
    X, V, u = rng.standard_normal(n), rng.standard_normal(nv), rng.standard_normal()
    B = np.zeros(n)
    B[-1] = b
    Zdot = tc.T_z @ (A @ X + Gbar @ V + B * u) + tc.T_v @ (S @ V)
    Z = tc.T_z @ X + tc.T_v @ V
    ref = tc.A_z @ Z
    ref[-1] += b * (u + tc.K @ X + tc.G0 @ V)
    assert np.allclose(Zdot, ref, atol=1e-9 * max(1.0, np.abs(Zdot).max()))
    assert Z[0] == pytest.approx(X[0] - Pr @ V)


# -- predictor ---------------------------------------------------------------

def test_predict_state_zero_horizon_and_integrator():
    profile = np.full(101, 0.7)
    X0 = predict_state([2.0], [0.0], profile, [[0.0]], 1.0, [[0.0]], [[0.0]], 1.5, 0.0)
    assert np.allclose(X0, [2.0])
    # constant delivered input c into a pure integrator: X + b c tau
    Xt = predict_state([2.0], [0.0], profile, [[0.0]], 3.0, [[0.0]], [[0.0]], 1.5, 1.2)
    assert Xt == pytest.approx([2.0 + 3.0 * 0.7 * 1.2], abs=1e-12)
    with pytest.raises(DomainError):
        predict_state([2.0], [0.0], profile, [[0.0]], 1.0, [[0.0]], [[0.0]], 1.5, 1.6)


def test_predict_state_matches_bank_and_closed_form():
    cfg, th, X, V = vehicle_theta("E1", 1)
    x = np.linspace(0, 1, cfg.N_cells + 1)
    profile = np.sin(3 * x)
    bank = ControlBank([th], CBFChain(BarrierSpec("e", 2), [3.0, 1.0]), cfg.N_cells)
    Xp, _ = bank.predict(X, V, profile)
    ref = predict_state(X, V, profile, th.A, th.b, th.Gbar, th.S, th.D, th.D)
    assert np.allclose(Xp[0, :, 0], ref, atol=1e-10)


# -- barrier chain and rescue --------------------------------------------------

def test_rescue_inactive_when_start_is_safe():
    assert np.all(rescue_sigma(np.linspace(0, 5, 11), 0.3, 5.0, 1.5, 3.0, order=2) == 0.0)
    resc, verdict = make_rescue((0.3, 1.0), 5.0, 1.5, 3.0)
    assert verdict == "safe" and not resc.active


def test_rescue_example_values():
    resc, verdict = make_rescue(-2.0, 5.0, 1.5, 3.0)
    assert verdict == "unsafe"
    assert resc.coef == 7.0 and resc.c == 4.5
    assert rescue_sigma(3.0, -2.0, 5.0, 1.5, 3.0)[0] == pytest.approx(7.0)
    assert np.all(resc.derivs([4.5, 5.0, 10.0], 3) == 0.0)
    _, verdict = make_rescue((-1.0, 1.0), 5.0, 1.5, 3.0)
    assert verdict == "ambiguous"


@given(st.floats(0.0, 4.3))
def test_rescue_derivatives_match_finite_differences(t):
    resc, _ = make_rescue(-2.0, 5.0, 1.5, 3.0)
    d = 1e-5
    g = resc.derivs(np.array([t - d, t, t + d]), 3)
    for m in range(3):
        fd = (g[m, 2] - g[m, 0]) / (2 * d)
        assert fd == pytest.approx(g[m + 1, 1], abs=1e-5 * max(1.0, abs(g[m + 1, 1])))


def test_chain_for_plain_error_barrier():
    chain = CBFChain(BarrierSpec("e", 2), [3.0, 1.0])
    Z = np.array([0.4, -1.3])
    H, f = cbf_chain(Z, 0.0, chain, 0.2)
    assert np.allclose(H, [0.4, -1.3 + 3.0 * 0.4])
    assert f * 0.2 == pytest.approx((3.0 + 1.0) * -1.3 + 3.0 * 1.0 * 0.4)
    neg = CBFChain(BarrierSpec("-e", 2), [3.0, 1.0])
    _, fneg = cbf_chain(Z, 0.0, neg, 0.2)
    assert fneg == pytest.approx(-f)


def test_chain_for_time_varying_barrier():
    k1 = 2.5
    chain = CBFChain(BarrierSpec("e + sin(t)", 2), [k1, 1.0])
    z1, z2, t = 0.3, -0.8, 0.9
    H = chain.values([z1, z2], t)
    assert H[0] == pytest.approx(z1 + np.sin(t))
    assert H[1] == pytest.approx(z2 + np.cos(t) + k1 * (z1 + np.sin(t)))


def test_barrier_rejects_bad_expressions():
    with pytest.raises(ConfigurationError):
        BarrierSpec("e + y", 2)
    with pytest.raises(ConfigurationError):
        CBFChain(BarrierSpec("e", 2), [1.0])
    with pytest.raises(ConfigurationError):
        CBFChain(BarrierSpec("e", 2), [-1.0, 1.0])


def test_gain_lower_bound_second_order_by_hand():
    # h = e - t: h_1 = z_1 - t and L h_1 = z_2 - 1, so k̂_1 = -(z_2 - 1)/(z_1 - t)
    chain = CBFChain(BarrierSpec("e - t", 2), [0.0, 0.0])
    z1, z2, t = 2.0, -3.0, 0.5
    khat = chain.gain_lower_bounds(np.array([[z1], [z2]]), np.array([t]))
    assert khat[0, 0] == pytest.approx(-(z2 - 1.0) / (z1 - t))


@pytest.mark.parametrize("vehicle,case", VEHICLE_RUNS)
def test_vehicle_gains_accepted_by_exact_rule(vehicle, case):
    cfg, th, X, V = vehicle_theta(vehicle, case)
    chain = vehicle_chain(cfg, th, X, V)
    bank = ControlBank([th], chain, cfg.N_cells)
    req = gain_requirements(bank, X[None], V[None])
    assert np.all(np.array([3.0, 1.0]) >= req)
    assert np.array_equal(select_gains(bank, X[None], V[None], fixed=[3.0, 1.0]), [3.0, 1.0])


def test_select_gains_rejects_too_small_fixed_gain():
    cfg, th, X, V = vehicle_theta("E1", 2)
    chain = vehicle_chain(cfg, th, X, V, gains=(0.0, 0.0))
    bank = ControlBank([th], chain, cfg.N_cells)
    with pytest.raises(ConfigurationError):
        select_gains(bank, X[None], V[None], fixed=[1.0, 1.0])
    auto = select_gains(bank, X[None], V[None], margin=0.1)
    assert auto[0] >= gain_requirements(bank, X[None], V[None])[0] + 0.1 - 1e-12


# -- kernels and backstepping ---------------------------------------------------

def test_kernel_boundary_values():
    cfg, th, _, _ = vehicle_theta("E1", 1)
    ks = kernels(th.A, th.b, th.Gbar, th.S, th.Pbar_r, th.D)
    assert np.allclose(ks.gamma(0.0), -ks.coeffs.K)
    for x in (0.0, 0.3, 1.0):
        assert ks.q(x, x) == pytest.approx(-th.D * ks.coeffs.K[-1] * th.b)
    assert np.allclose(ks.gamma_bar(0.0), -ks.coeffs.G0)


def test_input_free_kernel_for_pure_integrator():
    # A = 0: K = 0, so q = gamma = 0 and gamma_bar(x) = (1/b)(sigma_n + P_r S^n) e^{DSx}
    S = np.array([[0.0, 1.0], [-0.5, 0.0]])
    Pr = np.array([1.0, 0.3])
    b, D = 0.8, 1.7
    ks = kernels([[0.0]], b, np.zeros((1, 2)), S, Pr, D)
    tc = ks.coeffs
    assert np.allclose(tc.K, 0.0) and ks.q(0.7, 0.2) == 0.0
    from safereg.matkit import mat_exp
    for x in (0.0, 0.4, 1.0):
        ref = (tc.sigma[1] + Pr @ S) @ mat_exp(S, D * x) / b
        assert np.allclose(ks.gamma_bar(x), ref, atol=1e-12)


def test_forward_map_without_state_coupling():
    S = np.array([[0.0]])
    ks = kernels([[0.0]], 1.0, [[0.0]], S, [1.0], 1.0)
    u = np.linspace(-1, 1, 51)
    w = forward_backstep(u, [0.5], [2.0], 0.0, ks)
    # only the reference term survives: w = u - gamma_bar V = u + G0 V
    assert np.allclose(w, u + ks.coeffs.G0 @ [2.0])


@pytest.mark.parametrize("vehicle,case", [("E1", 1), ("E2", 2)])
def test_backstepping_round_trip(vehicle, case):
    cfg, th, X, V = vehicle_theta(vehicle, case)
    chain = vehicle_chain(cfg, th, X, V)
    ks = kernels(th.A, th.b, th.Gbar, th.S, th.Pbar_r, th.D, chain)
    x = np.linspace(0, 1, 101)
    u = np.sin(2 * x) + 0.3 * x ** 2
    w = forward_backstep(u, X, V, 0.7, ks)
    back = inverse_backstep(w, X, V, 0.7, ks, method="discrete")
    assert np.max(np.abs(back - u)) <= 1e-6
    closed = inverse_backstep(w, X, V, 0.7, ks, method="closed", profile_for_psi=u)
    assert np.max(np.abs(closed - u)) <= 1e-3 * max(1.0, np.abs(u).max())
    with pytest.raises(ValueError):
        inverse_backstep(w, X, V, 0.7, ks, method="other")


def test_control_equals_kernel_form_at_outlet():
    # the control is the kernel expression at x = 1, so w(1) = u(1) - U
    cfg, th, X, V = vehicle_theta("E2", 1)
    chain = vehicle_chain(cfg, th, X, V)
    ks = kernels(th.A, th.b, th.Gbar, th.S, th.Pbar_r, th.D, chain)
    x = np.linspace(0, 1, cfg.N_cells + 1)
    profile = 0.5 * np.cos(x)
    U = nominal_control(X, V, profile, th, chain, 0.4, implicit=False)
    w = forward_backstep(profile, X, V, 0.4, ks)
    assert abs(w[-1] - (profile[-1] - U)) <= 1e-8 * max(1.0, abs(U))
    # solved with u(1) = U itself, the transformed field vanishes at the outlet
    Ui = nominal_control(X, V, profile, th, chain, 0.4)
    w = forward_backstep(np.r_[profile[:-1], Ui], X, V, 0.4, ks)
    assert abs(w[-1]) <= 1e-9 * max(1.0, abs(Ui))


# -- control laws -------------------------------------------------------------

def two_candidate_bank():
    cfg, th, X, V = vehicle_theta("E1", 1)
    other = make_theta(th.A, [[0.0, 1.0], [-1.0, 0.0]], th.Gbar[:, :2], [[0.0, 1, 0, 0], [0, 0, 1, 0],
                                                                            [0, 0, 0, 1], [0, 0, -1, 0]],
                       th.Pbar_r[2:], th.b, 2.5)
    chain = CBFChain(BarrierSpec("e", 2), [3.0, 1.0])
    return ControlBank([th, other], chain, cfg.N_cells), X, V, cfg


def test_robust_control_singleton_is_nominal():
    cfg, th, X, V = vehicle_theta("E1", 1)
    chain = CBFChain(BarrierSpec("e", 2), [3.0, 1.0])
    profile = np.zeros(cfg.N_cells + 1)
    bank = ControlBank([th], chain, cfg.N_cells)
    Ua, p = robust_control(bank, X, V, profile, 0.0, 1.0)
    assert p == 0 and Ua == pytest.approx(nominal_control(X, V, profile, th, chain, 0.0))


def test_robust_control_dominates_and_follows_sign():
    bank, X, V, cfg = two_candidate_bank()
    profile = np.zeros(cfg.N_cells + 1)
    U = bank.controls(X, V, profile, 0.0)[:, 0]
    assert U[0] != U[1]
    up, _ = robust_control(bank, X, V, profile, 0.0, 1.0)
    down, _ = robust_control(bank, X, V, profile, 0.0, -1.0)
    assert up == pytest.approx(U.max()) and down == pytest.approx(U.min())
    ball, _ = robust_control(bank, X, V, profile, 0.0, 1.0, radius=0.5, dims_x=(0,))
    assert ball >= up


def test_output_control_and_rho_gain():
    cfg, th, X, V = vehicle_theta("E1", 1)
    bank = ControlBank([th], CBFChain(BarrierSpec("e", 2), [3.0, 1.0]), cfg.N_cells)
    profile = np.zeros(cfg.N_cells + 1)
    base = float(bank.controls(X, V, profile, 0.0)[0, 0])
    assert output_control(bank, X, V, profile, 0.0, 1.0, 0.0) == base
    assert output_control(bank, X, V, profile, 0.0, -1.0, 2.0) == pytest.approx(base - 2.0)
    with pytest.raises(MissingConstantError):
        rho_hat_gain(th, None)
    assert rho_hat_gain(th, 1e6) == 2e6


# -- initial barrier value and uncertainty boxes ---------------------------------

@pytest.mark.parametrize("vehicle,case,verdict", [("E1", 1, "safe"), ("E1", 2, "unsafe"),
                                                  ("E2", 1, "safe"), ("E2", 2, "unsafe")])
def test_h_eD_bounds_for_known_parameters(vehicle, case, verdict):
    cfg, th, X, V = vehicle_theta(vehicle, case)
    bank = ControlBank([th], CBFChain(BarrierSpec(cfg.barrier, 2), [0.0, 0.0]), cfg.N_cells)
    lo, hi, v = h_eD_bounds(bank, X[None], V[None])
    assert lo == hi and v == verdict


def test_h_eD_bounds_over_grid_contain_truth():
    cfg, th, X, V = vehicle_theta("E1", 1)
    chain = CBFChain(BarrierSpec(cfg.barrier, 2), [0.0, 0.0])
    exact, _, _ = h_eD_bounds(ControlBank([th], chain, cfg.N_cells), X[None], V[None])
    e = cfg.exosystem()
    grid = bank_over(cfg.boxes(), e.S_r, e.P_r, chain, cfg.N_cells)
    lo, hi, _ = h_eD_bounds(grid, X[None], V[None])
    assert lo <= exact <= hi


def test_boxes_violations_and_projection():
    cfg = build_vehicle_scenario("E1", 1)
    boxes = cfg.boxes()
    s, e = cfg.system(), cfg.exosystem()
    GPd = s.G @ e.P_d
    assert boxes.violations(s.A, e.S_d, GPd, s.b, s.D) == []
    tgt, i, j, lo, hi = boxes.entries[0]
    assert tgt == "A"
    bad = s.A.copy()
    bad[i, j] = hi + 1.0
    assert any("outside" in m for m in boxes.violations(bad, e.S_d, GPd, s.b, s.D))
    assert any("D =" in m for m in boxes.violations(s.A, e.S_d, GPd, s.b, 10.0))
    noisy = s.A + 1e-9
    A_p, _, _ = boxes.project_known(noisy, e.S_d, GPd)
    known = np.ones_like(s.A, dtype=bool)
    for tg, ii, jj, _, _ in boxes.entries:
        if tg == "A":
            known[ii, jj] = False
    assert np.array_equal(A_p[known], boxes.A0[known])
    assert np.array_equal(A_p[~known], noisy[~known])
