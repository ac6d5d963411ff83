import math

import numpy as np
import pytest

from hasel3ps import (
    DomainError,
    SineInput,
    SolverConfig,
    StiffnessFailure,
    TABLE1_PARAMS,
    dynamic_capacitance,
    integrate,
    integrate_actuator,
    rest_state,
)
from hasel3ps.dynamics import _jac5, _rhs5_geom
from hasel3ps.integrator import hermite_interpolate, rodas3, state_scales

from oracles import electrical_lti, lti_step_response


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(abs_tol=0.0)
    with pytest.raises(ValueError):
        SolverConfig(rel_tol=-1.0)
    with pytest.raises(ValueError):
        SolverConfig(abs_tol=(1e-3, 1e-3))
    assert SolverConfig.tight().rel_tol == 1e-8


# --------------------------------------------------------------------------
# the scheme itself


def _linear(lam):
    return (lambda t, y: lam * y), (lambda t, y: np.array([[lam]]))


def test_rodas3_third_order_on_fixed_mesh():
    # y' = -y + cos t with y(0) = 0 has y = (sin t + cos t - e^-t) / 2
    fun = lambda t, y: -y + math.cos(t)  # noqa: E731
    jac = lambda t, y: np.array([[-1.0]])  # noqa: E731
    dfdt = lambda t, y: np.array([-math.sin(t)])  # noqa: E731
    exact = 0.5 * (math.sin(2.0) + math.cos(2.0) - math.exp(-2.0))
    errs = []
    for n in (20, 40, 80, 160):
        sol = rodas3(fun, jac, (0.0, 2.0), np.zeros(1), 1.0, 1.0, dfdt=dfdt,
                     mesh=np.linspace(0.0, 2.0, n + 1))
        errs.append(abs(sol.y[-1, 0] - exact))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders > 2.8)


def test_rodas3_l_stable():
    fun, jac = _linear(-1e12)
    sol = rodas3(fun, jac, (0.0, 1.0), np.ones(1), 1.0, 1.0, mesh=np.array([0.0, 1.0]))
    assert abs(sol.y[-1, 0]) < 1e-9


def test_rodas3_adaptive_accuracy():
    fun, jac = _linear(-3.0)
    sol = rodas3(fun, jac, (0.0, 1.0), np.ones(1), 1e-8, 1e-10)
    assert sol.y[-1, 0] == pytest.approx(math.exp(-3.0), rel=1e-7)
    assert sol.t[-1] == 1.0


def test_rodas3_rejects_nonfinite_stage():
    # the right-hand side is undefined for y > 1.5; steps that overshoot are retried
    def fun(t, y):
        return np.where(y > 1.5, np.nan, np.ones_like(y))

    sol = rodas3(fun, lambda t, y: np.zeros((1, 1)), (0.0, 0.4), np.ones(1), 1e-6, 1e-6,
                 first_step=0.3)
    assert sol.y[-1, 0] == pytest.approx(1.4)


def test_step_budget_raises_stiffness_failure():
    fun, jac = _linear(-1.0)
    with pytest.raises(StiffnessFailure) as exc:
        rodas3(fun, jac, (0.0, 1.0), np.ones(1), 1e-12, 1e-14, max_steps=3)
    assert exc.value.time > 0


def test_hermite_reproduces_mesh_points():
    rng = np.random.default_rng(0)
    tm = np.cumsum(rng.uniform(0.1, 1.0, 20))
    ym = rng.normal(size=(20, 4))
    fm = rng.normal(size=(20, 4))
    np.testing.assert_array_equal(hermite_interpolate(tm, ym, fm, tm), ym)


def test_hermite_exact_for_cubics():
    tm = np.array([0.0, 0.7, 1.5])
    p = lambda t: 2 * t**3 - t + 1  # noqa: E731
    dp = lambda t: 6 * t**2 - 1  # noqa: E731
    tq = np.linspace(0, 1.5, 17)
    out = hermite_interpolate(tm, p(tm)[:, None], dp(tm)[:, None], tq)
    np.testing.assert_allclose(out[:, 0], p(tq), rtol=1e-13)


# --------------------------------------------------------------------------
# actuator model


def test_rest_equilibrium_constant(consts_g0):
    x0 = rest_state(consts_g0)
    tr = integrate(x0, None, (0.0, 2.0), SolverConfig.tight(), params=TABLE1_PARAMS, consts=consts_g0,
                   sample_times=np.linspace(0, 2, 21))
    assert np.max(np.abs(tr.states - x0.to_vector())) < 1e-10


def test_gravity_sag_settles(consts):
    tr = integrate(rest_state(consts), None, (0.0, 5.0), SolverConfig.tight(), consts=consts)
    expect = -0.5 * consts.g_grav * consts.L_v * consts.m * np.array([1 / p.K_b for p in TABLE1_PARAMS])
    np.testing.assert_allclose(tr.states[-1, :3], expect, rtol=1e-3)


def test_frozen_electrical_block_matches_matrix_exponential(consts):
    p = TABLE1_PARAMS[0]
    prm, c = p.as_array(), consts.packed()
    C2 = dynamic_capacitance(0.0, consts.L_p, consts)
    A, b = electrical_lti(p, consts, C2)
    U0 = 100.0

    def fun(t, q):
        return _rhs5_geom(np.array([0.0, consts.L_p, 0.0, q[0], q[1]]), prm, c, U0)[3:]

    def jac(t, q):
        return _jac5(np.array([0.0, consts.L_p, 0.0, q[0], q[1]]), prm, c, U0)[3:, 3:]

    T = np.linspace(0.0, 2e-6, 41)
    ref = lti_step_response(A, b, U0, np.zeros(2), T)
    sol = rodas3(fun, jac, (0.0, T[-1]), np.zeros(2), 1e-8, 1e-8 * U0 * np.array([p.C1, C2]))
    got = hermite_interpolate(sol.t, sol.y, sol.f, T)
    assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) < 1e-6


def test_mesh_replay_reproduces_adaptive_run(consts):
    u = SineInput(100.0).channel(0)
    x0 = np.array([0.0, consts.L_p, 0.0, 0.0, 0.0])
    cfg = SolverConfig()
    a = integrate_actuator(x0, u, (0.0, 0.5), TABLE1_PARAMS[0], consts, cfg)
    b = integrate_actuator(x0, u, (0.0, 0.5), TABLE1_PARAMS[0], consts, cfg, mesh=a.mesh)
    np.testing.assert_array_equal(a.mesh, b.mesh)
    # step sizes are re-derived as differences of mesh times, so only rounding remains
    rel = np.abs(a.states - b.states).max(axis=0) / np.abs(a.states).max(axis=0)
    assert rel.max() < 1e-10


def test_stop_output_lands_on_sample_times(consts):
    ts = np.linspace(0.0, 0.2, 41)
    tr = integrate_actuator(np.array([0.0, consts.L_p, 0.0, 0.0, 0.0]), SineInput(100.0).channel(0),
                            (0.0, 0.2), TABLE1_PARAMS[0], consts, SolverConfig(), sample_times=ts)
    assert np.isin(ts, tr.mesh).all()


def test_single_actuator_matches_system(consts):
    u = SineInput(100.0)
    ts = np.linspace(0, 0.5, 51)
    cfg = SolverConfig.tight(1e-8)
    tr = integrate(rest_state(consts), u, (0.0, 0.5), cfg, sample_times=ts, consts=consts)
    for i in range(3):
        a = integrate_actuator(rest_state(consts).actuators[i], u.channel(i), (0.0, 0.5),
                               TABLE1_PARAMS[i], consts, cfg, sample_times=ts)
        scale = np.abs(tr.states[:, i::3]).max(axis=0)
        np.testing.assert_allclose(a.states, tr.states[:, i::3], atol=1e-6 * scale.max(), rtol=0)
        np.testing.assert_allclose(a.states[:, 0], tr.states[:, i], atol=1e-7 * scale[0])


def test_self_convergence(consts):
    u = SineInput(100.0)
    finals = {}
    for tol in (1e-6, 5e-7):
        tr = integrate(rest_state(consts), u, (0.0, 1.0), SolverConfig.tight(tol), consts=consts)
        finals[tol] = tr.states[-1]
    scales = np.concatenate([state_scales(p, consts) for p in TABLE1_PARAMS]).reshape(3, 5).T.ravel()
    weight = 1e-6 * (scales + np.abs(finals[1e-6]))
    assert np.max(np.abs(finals[1e-6] - finals[5e-7]) / weight) < 1.0


def test_tighter_reintegration_bounds_deviation(consts):
    u = SineInput(100.0)
    ts = np.linspace(0, 1.0, 201)
    coarse = integrate(rest_state(consts), u, (0, 1.0), SolverConfig.tight(1e-5), ts, consts=consts)
    fine = integrate(rest_state(consts), u, (0, 1.0), SolverConfig.tight(1e-6), ts, consts=consts)
    scales = np.concatenate([state_scales(p, consts) for p in TABLE1_PARAMS]).reshape(3, 5).T.ravel()
    dev = np.abs(coarse.states - fine.states) / (scales + np.abs(fine.states))
    assert dev.max() < 10 * 1e-5


def test_clamp_inactive_with_reference_drive(consts):
    tr = integrate(rest_state(consts), SineInput(100.0), (0.0, 4.0), SolverConfig(),
                   sample_times=np.linspace(0, 4, 4001), consts=consts)
    assert not tr.saturated.any()


def test_infeasible_initial_state_raises(consts):
    x0 = rest_state(consts).to_vector()
    x0[3] = 0.5 * consts.L_v
    with pytest.raises(DomainError):
        integrate(x0, None, (0.0, 1.0), consts=consts)


def test_sample_times_must_increase(consts):
    with pytest.raises(ValueError):
        integrate(rest_state(consts), None, (0.0, 1.0), sample_times=np.array([0.5, 0.2]), consts=consts)
