import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hasel3ps import (
    ActuatorParams,
    DomainError,
    SharedConstants,
    TABLE1_PARAMS,
    delta1,
    dynamic_capacitance,
    grad_hamiltonian,
    hamiltonian,
    rest_state,
    shell_area,
    zipped_length,
)
from hasel3ps.core import ActuatorState, SystemState, capacitance_from_zipped, geometry, inertia

from conftest import random_state
from oracles import fd_gradient_ld, hamiltonian_ld

mp.mp.dps = 40


# extended-precision reference formulas, written independently of the package


def mp_delta1(th, lp, c):
    th, lp = mp.mpf(th), mp.mpf(lp)
    return (mp.pi + th) / 2 - mp.asin(mp.mpf(c.L_v) / lp * mp.sin((mp.pi - th) / 2))


def mp_area(th, lp, c):
    return mp.mpf(lp) * mp.mpf(c.L_v) * mp.sin(mp_delta1(th, lp, c)) / 4


def mp_le(th, lp, c):
    le = mp.mpf(c.L_e) - (mp.mpf(c.A_T) - mp_area(th, lp, c)) / mp.mpf(c.X_h)
    return min(max(le, mp.mpf(0)), mp.mpf(c.L_e))


def mp_C2(th, lp, c):
    le = mp_le(th, lp, c)
    t, Xh, Le = mp.mpf(c.t), mp.mpf(c.X_h), mp.mpf(c.L_e)
    return mp.mpf(c.eps_0) * mp.mpf(c.eps_r) * mp.mpf(c.w) * (le / (2 * t) + (Le - le) / (2 * t + Xh))


def mp_H(state, params, c):
    total = mp.mpf(0)
    inert = mp.mpf(c.L_v) * mp.mpf(c.m) / 24
    for a, p in zip(state.actuators, params):
        th, lp = mp.mpf(a.theta), mp.mpf(a.l_p)
        total += mp.mpf(p.K_b) * th**2 / 2
        total += mp.mpf(c.g_grav) * mp.mpf(c.L_v) * mp.mpf(c.m) * mp.sin(th) / 2
        total += mp.mpf(p.K) * (lp - mp.mpf(c.L_p)) ** 2 / 4
        total += mp.mpf(a.p) ** 2 / (2 * inert)
        total += mp.mpf(a.Q1) ** 2 / (2 * mp.mpf(p.C1))
        total += mp.mpf(a.Q2) ** 2 / (2 * mp_C2(th, lp, c))
    return total


# --------------------------------------------------------------------------
# delta1 / shell_area


def test_delta1_flat_pouch(consts):
    assert delta1(0.0, consts.L_v, consts) == pytest.approx(0.0, abs=1e-7)


def test_delta1_double_length(consts):
    assert delta1(0.0, 2 * consts.L_v, consts) == pytest.approx(math.pi / 3, rel=1e-14)


def test_delta1_extended_precision(consts):
    ref = mp_delta1(0.1, 0.014, consts)
    assert delta1(0.1, 0.014, consts) == pytest.approx(float(ref), rel=1e-14)


def test_delta1_vectorised(consts):
    th = np.array([0.0, 0.1, 0.2])
    out = delta1(th, 0.014, consts)
    assert out.shape == (3,)
    assert out[1] == pytest.approx(delta1(0.1, 0.014, consts))


def test_delta1_domain_error_and_slack(consts):
    with pytest.raises(DomainError):
        delta1(0.0, 0.9 * consts.L_v, consts)
    # within the 1e-12 slack the arcsin argument is clamped
    assert delta1(0.0, consts.L_v * (1 - 5e-13), consts) == pytest.approx(0.0, abs=1e-5)


def test_shell_area_examples(consts):
    assert shell_area(0.0, consts.L_v, consts) == pytest.approx(0.0, abs=1e-15)
    expect = math.sqrt(3) / 4 * consts.L_v**2
    assert shell_area(0.0, 2 * consts.L_v, consts) == pytest.approx(expect, rel=1e-14)


def test_shell_area_random_extended_precision(consts):
    rng = np.random.default_rng(0)
    for _ in range(200):
        th = rng.uniform(-0.5, 1.0)
        lp = rng.uniform(consts.L_v * 1.001, 2 * consts.L_v)
        assert shell_area(th, lp, consts) == pytest.approx(float(mp_area(th, lp, consts)), rel=1e-12)


# --------------------------------------------------------------------------
# zipped length / capacitance


def test_zipped_length_limits():
    base = SharedConstants()
    th, lp = 0.1, 0.014
    a = shell_area(th, lp, base)
    full = base.replace(A_T=a)
    empty = base.replace(A_T=a + base.X_h * base.L_e)
    assert zipped_length(th, lp, full) == pytest.approx(base.L_e, rel=1e-12)
    assert zipped_length(th, lp, empty) == pytest.approx(0.0, abs=1e-15)


def test_zipped_length_extended_precision(consts):
    ref = mp_le(0.2, 0.014, consts)
    assert 0 < float(ref) < consts.L_e
    assert zipped_length(0.2, 0.014, consts) == pytest.approx(float(ref), rel=1e-12)


def test_zipped_length_clamped_and_flagged(consts):
    g = geometry(0.0, consts.L_v * 1.0001, consts)  # nearly flat pouch: no shell area
    assert g.l_e == 0.0 and g.saturated
    assert g.dl_e_dtheta == 0.0 and g.dC2_dlp == 0.0


def test_rest_is_half_zipped(consts):
    assert zipped_length(0.0, consts.L_p, consts) == pytest.approx(consts.L_e / 2, rel=1e-12)


def test_capacitance_limits(consts):
    pref = consts.eps_0 * consts.eps_r * consts.w
    assert capacitance_from_zipped(consts.L_e, consts) == pytest.approx(pref * consts.L_e / (2 * consts.t))
    assert capacitance_from_zipped(0.0, consts) == pytest.approx(pref * consts.L_e / (2 * consts.t + consts.X_h))
    half = pref * (consts.L_e / (4 * consts.t) + consts.L_e / (2 * (2 * consts.t + consts.X_h)))
    assert capacitance_from_zipped(consts.L_e / 2, consts) == pytest.approx(half, rel=1e-14)
    assert dynamic_capacitance(0.0, consts.L_p, consts) == pytest.approx(half, rel=1e-12)


def test_capacitance_extended_precision(consts):
    rng = np.random.default_rng(1)
    for _ in range(100):
        th = rng.uniform(-0.1, 0.3)
        lp = consts.L_p * (1 + rng.uniform(-0.05, 0.05))
        assert dynamic_capacitance(th, lp, consts) == pytest.approx(float(mp_C2(th, lp, consts)), rel=1e-12)


@given(st.floats(0, 0.02), st.floats(0, 0.02))
def test_capacitance_monotone_in_zipped_length(a, b):
    c = SharedConstants()
    lo, hi = min(a, b), max(a, b)
    assert capacitance_from_zipped(lo, c) <= capacitance_from_zipped(hi, c)


# --------------------------------------------------------------------------
# Hamiltonian


def test_hamiltonian_rest_zero_without_gravity(consts_g0, params):
    assert hamiltonian(rest_state(consts_g0), params, consts_g0) == 0.0


def test_hamiltonian_rest_with_gravity_is_zero_too(consts, params):
    # sin(0) = 0, so the gravity term also vanishes at rest
    assert hamiltonian(rest_state(consts), params, consts) == 0.0


def test_hamiltonian_single_charge(consts, params):
    a = ActuatorState(0.0, consts.L_p, 0.0, 1e-8, 0.0)
    r = ActuatorState(0.0, consts.L_p, 0.0, 0.0, 0.0)
    H = hamiltonian(SystemState((a, r, r)), params, consts)
    assert H == pytest.approx(0.5 * 1e-16 / 2.15e-10, rel=1e-12)
    assert H == pytest.approx(2.326e-7, rel=1e-3)


def test_hamiltonian_extended_precision(consts, params):
    rng = np.random.default_rng(2)
    for _ in range(100):
        s = random_state(rng, consts)
        assert hamiltonian(s, params, consts) == pytest.approx(float(mp_H(s, params, consts)), rel=1e-11)


def test_hamiltonian_accepts_stacked_vector(consts, params):
    s = random_state(np.random.default_rng(3), consts)
    assert hamiltonian(s.to_vector(), params, consts) == hamiltonian(s, params, consts)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0.0, math.pi / 2), min_size=3, max_size=3),
       st.lists(st.floats(-1.0, 1.0), min_size=9, max_size=9))
def test_hamiltonian_nonnegative_on_upper_quadrant(thetas, z):
    c = SharedConstants()
    acts = []
    for th, (a, b, d) in zip(thetas, np.reshape(z, (3, 3))):
        lp = max(c.L_p, c.L_v * math.cos(th / 2) * (1 + 1e-6))
        acts.append(ActuatorState(th, lp * (1 + 0.01 * abs(a)), 1e-6 * b, 1e-8 * d, 1e-8 * a))
    assert hamiltonian(SystemState(tuple(acts)), TABLE1_PARAMS, c) >= 0.0


# --------------------------------------------------------------------------
# gradient


def test_gradient_rest_zero_without_gravity(consts_g0, params):
    np.testing.assert_array_equal(grad_hamiltonian(rest_state(consts_g0), params, consts_g0), 0.0)


def test_gradient_rest_with_gravity(consts, params):
    g = grad_hamiltonian(rest_state(consts), params, consts)
    np.testing.assert_allclose(g[:3], 0.5 * consts.g_grav * consts.L_v * consts.m, rtol=1e-14)
    np.testing.assert_array_equal(g[3:], 0.0)


def test_gradient_momentum_identity_scaling(consts_g0, params):
    x = rest_state(consts_g0).to_vector()
    x[6] = inertia(consts_g0)
    g = grad_hamiltonian(x, params, consts_g0)
    expect = np.zeros(15)
    expect[6] = 1.0
    np.testing.assert_allclose(g, expect, atol=1e-15)


def unclamped_states(rng, consts, n):
    out = []
    while len(out) < n:
        s = random_state(rng, consts)
        if not any(geometry(a.theta, a.l_p, consts).saturated for a in s.actuators):
            out.append(s.to_vector())
    return np.array(out)


def test_gradient_matches_finite_differences(consts, params):
    X = unclamped_states(np.random.default_rng(4), consts, 300)
    an = np.array([grad_hamiltonian(x, params, consts) for x in X])
    fd = fd_gradient_ld(X, params, consts)
    assert np.max(np.abs(an - fd) / np.abs(fd)) < 1e-5


def test_long_double_energy_agrees_with_package(consts, params):
    X = unclamped_states(np.random.default_rng(6), consts, 50)
    ref = hamiltonian_ld(X.reshape(-1, 5, 3).transpose(0, 2, 1), params, consts)
    got = [hamiltonian(x, params, consts) for x in X]
    np.testing.assert_allclose(got, ref.astype(float), rtol=1e-12)


def test_infeasible_state_raises(consts, params):
    x = rest_state(consts).to_vector()
    x[3] = 0.5 * consts.L_v
    with pytest.raises(DomainError):
        hamiltonian(x, params, consts)
    with pytest.raises(DomainError):
        grad_hamiltonian(x, params, consts)


# --------------------------------------------------------------------------
# domain types


def test_params_validation():
    with pytest.raises(ValueError):
        TABLE1_PARAMS[0].replace(K=-1.0)
    with pytest.raises(ValueError):
        TABLE1_PARAMS[0].replace(b=float("nan"))
    # gamma2 may take any sign
    assert TABLE1_PARAMS[0].replace(gamma2=-3.0).gamma2 == -3.0


def test_params_array_round_trip():
    p = TABLE1_PARAMS[1]
    assert ActuatorParams.from_array(p.as_array()) == p


def test_state_vector_layout(consts):
    s = random_state(np.random.default_rng(5), consts)
    x = s.to_vector()
    np.testing.assert_array_equal(x[:3], s.theta)
    assert SystemState.from_vector(x) == s


def test_constants_validation():
    with pytest.raises(ValueError):
        SharedConstants(L_p=-1.0)
    with pytest.raises(ValueError):
        SharedConstants(A_T=0.0)
    with pytest.raises(ValueError):
        SharedConstants(L_p=0.01, L_v=0.012)
