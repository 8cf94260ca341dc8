from types import SimpleNamespace

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

import reference as ref
from delay_stab.errors import BufferUnderrun, CausalityViolation, ZeroGain
from delay_stab.runtime import (
    EXTENDED,
    HistoryBuffer,
    artstein_quadrature_check,
    hold_weights,
    init_controller,
    step_controller,
)
from delay_stab.simulation import Scenario, run_closed_loop
from delay_stab.synthesis import GainSet, Variant

# --- history buffer ------------------------------------------------------------


def test_buffer_prehistory_and_interpolation():
    buf = HistoryBuffer(1.0, default=2.0)
    assert buf.value(-5.0) == 2.0
    buf.push(0.0, 2.0)
    buf.push(0.1, 3.0)
    assert buf.value(0.05) == pytest.approx(2.5)
    assert buf.value(0.1) == 3.0
    with pytest.raises(CausalityViolation):
        buf.value(0.2)
    with pytest.raises(ValueError):
        buf.push(0.1, 0.0)


def test_buffer_forgets_old_samples():
    buf = HistoryBuffer(0.5, default=0.0)
    for k in range(20000):
        buf.push(k * 1e-3, float(k))
    assert buf.value(19.999 - 0.5) == pytest.approx(19499.0)
    with pytest.raises(BufferUnderrun):
        buf.value(1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.0, 1.0))
def test_buffer_is_exact_for_linear_signals(a, b, frac):
    buf = HistoryBuffer(2.0, default=b, start=0.0)
    for k in range(11):
        buf.push(0.1 * k, a * 0.1 * k + b)
    assert buf.value(frac) == pytest.approx(a * frac + b, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-20, 20), st.floats(1e-4, 0.1))
def test_hold_weights_match_quadrature(mu, dt):
    g0, g1 = hold_weights(mu, dt)
    s = np.linspace(0, dt, 2001)
    w = np.exp(mu * (dt - s))
    assert g0 == pytest.approx(np.trapezoid(w, s), rel=1e-6)
    assert g1 == pytest.approx(np.trapezoid(w * s / dt, s), rel=1e-6)


# --- controller start ------------------------------------------------------------

def _toy_design(mu, beta, k, l, horizon=2.0, n=None, trace=None, variant="dirichlet"):
    """Design-shaped object for an abstract modal system (q_c = 0, lambda = -mu)."""
    mu = np.asarray(mu, dtype=float)
    n = mu.size if n is None else n
    trace = np.ones(mu.size) if trace is None else np.asarray(trace, dtype=float)
    basis = SimpleNamespace(lam=-mu, measurement_trace=lambda _: trace)
    model = SimpleNamespace(basis=basis, q_c=0.0,
                            coeffs=SimpleNamespace(beta_n=np.asarray(beta, float), b_n=np.zeros(mu.size)))
    params = SimpleNamespace(n=n, horizon=horizon, variant=Variant(variant))
    return SimpleNamespace(model=model, params=params, n0=len(k),
                           gains=GainSet(np.asarray(k, float), np.asarray(l, float)))


def test_init_from_rest():
    state = init_controller(_toy_design([0.4, -5.0], [1.0, 1.0], [-1.0], [2.0]), 0.0, 1e-3)
    assert np.all(state.phi == 0) and np.all(state.zhat == 0) and state.u == 0.0


def test_init_integrator_predictor_state():
    state = init_controller(_toy_design([0.0, -5.0], [1.0, 1.0], [1.0], [1.0]), 1.0, 1e-3)
    assert float(state.phi[0]) == pytest.approx(2.0)
    assert state.zhat[0] == pytest.approx(-1.0)
    assert state.u == pytest.approx(1.0, abs=1e-12)


def test_init_reference_round_trip(design_dirichlet):
    u0 = float(ref.z0(1.0))
    state = init_controller(design_dirichlet, u0, 1e-3)
    assert u0 == 1.25
    assert abs(state.u - u0) <= 1e-10
    assert state.phi.dtype == EXTENDED


def test_init_rejects_zero_gain_and_short_horizon():
    with pytest.raises(ZeroGain):
        init_controller(_toy_design([0.4, -5.0], [1.0, 1.0], [0.0], [2.0]), 1.0, 1e-3)
    with pytest.raises(CausalityViolation):
        init_controller(_toy_design([0.4, -5.0], [1.0, 1.0], [-1.0], [2.0], horizon=1e-4), 1.0, 1e-3)


def test_joint_controller_starts_at_rest(design_joint):
    state = init_controller(design_joint, 0.0, 1e-3)
    assert state.horizon == 2.0 and state.u == 0.0
    with pytest.raises(ValueError):
        init_controller(design_joint, 1.0, 1e-3)


# --- stepping ------------------------------------------------------------------------

def test_equilibrium_stays_at_rest(design_dirichlet):
    state = init_controller(design_dirichlet, 0.0, 1e-3)
    for _ in range(10):
        assert step_controller(state, 0.0) == 0.0


def test_uncorrected_modes_decay_exponentially():
    design = _toy_design([0.4, -5.0, -12.0], [1.0, 1.0, 1.0], [-1.0], [0.0])
    dt = 1e-3
    state = init_controller(design, 0.0, dt, zhat_upper=[1.0, -2.0])
    for _ in range(100):
        step_controller(state, 0.0)
    np.testing.assert_allclose(state.zhat[1:], [np.exp(-0.5), -2.0 * np.exp(-1.2)], rtol=1e-9)


def test_predictor_without_correction_is_delay_free(design_dirichlet):
    """With L = 0 the predicted state obeys the delay-free closed loop exactly."""
    dt, horizon, T = 1e-3, ref.H, 10.0
    gains = GainSet(design_dirichlet.gains.k, np.zeros(1))
    state = init_controller(design_dirichlet, 1.25, dt, gains=gains)
    a0, b0 = state.a0[0], state.b0[0]
    acl = a0 + b0 * state.k[0]
    za0 = float(state.predicted()[0])
    steps = int(round(T / dt))
    pred, obs = np.empty(steps + 1), np.empty(steps + 1)
    pred[0], obs[0] = za0, state.zhat[0]
    for k in range(1, steps + 1):
        step_controller(state, 0.0)
        pred[k] = float(state.predicted()[0])
        obs[k] = state.zhat[0]
    t = dt * np.arange(steps + 1)
    exact = np.exp(acl * t) * za0
    err = np.abs(pred - exact) / abs(za0)
    assert np.max(err[1:] / t[1:]) <= 1e-5
    # the predictor is the observer state one horizon ahead
    lag = int(round(horizon / dt))
    assert np.max(np.abs(pred[:-lag] - obs[lag:])) <= 1e-6 * abs(za0)


def test_predictor_reduced_plant_loop(design_dirichlet):
    """Same check against the N0-mode plant integrated alongside the controller."""
    dt, T = 1e-3, 8.0
    gains = GainSet(design_dirichlet.gains.k, np.zeros(1))
    state = init_controller(design_dirichlet, 1.25, dt, gains=gains)
    a0, b0, k = state.a0, state.b0, state.k
    za0 = state.predicted().astype(float)
    m = np.diag(a0) + np.outer(b0, k)
    for step in range(1, int(round(T / dt)) + 1):
        step_controller(state, 0.0)
        if step % 1000 == 0:
            t = step * dt
            exact = scipy.linalg.expm(m * t) @ za0
            assert np.max(np.abs(state.predicted().astype(float) - exact)) <= 1e-5 * t * np.abs(za0).max()


def test_artstein_quadrature_constant_input():
    design = _toy_design([0.0, -5.0], [1.0, 1.0], [1.0], [0.0])
    state = init_controller(design, 0.0, 1e-2)
    state.u_hist = HistoryBuffer(3.0, default=0.7, start=10.0)
    state.t = 10.0
    state.phi = np.array([0.7 * 2.0], dtype=EXTENDED)
    assert artstein_quadrature_check(state) <= 1e-10


def test_artstein_quadrature_linear_input():
    design = _toy_design([0.0, -5.0], [1.0, 1.0], [1.0], [0.0])
    state = init_controller(design, 0.0, 1e-2)
    state.u_hist = HistoryBuffer(3.0, default=0.0, start=0.0)
    for j in range(1, 501):
        state.u_hist.push(0.01 * j, 0.01 * j)
    state.t = 5.0
    state.phi = np.array([(5.0**2 - 3.0**2) / 2], dtype=EXTENDED)
    assert artstein_quadrature_check(state) <= 1e-10


def test_artstein_discrepancy_in_closed_loop(trace_dirichlet):
    times = np.array([t for t, _ in trace_dirichlet.artstein])
    gaps = np.array([g for _, g in trace_dirichlet.artstein])
    assert times[0] == pytest.approx(ref.H) and times[-1] == pytest.approx(15.0)
    assert gaps[np.argmin(np.abs(times - 3 * ref.H))] <= 1e-4
    assert np.max(gaps) <= 1e-4


def test_controller_is_causal(design_dirichlet):
    state = init_controller(design_dirichlet, 1.25, 1e-3)
    state.query_log = []
    asked = []

    def measurement(s):
        asked.append((state.t, s))
        return 0.0

    for _ in range(50):
        step_controller(state, measurement)
    assert all(s <= t + 1e-3 + 1e-15 for t, s in asked)
    assert all(q <= t for t, q in state.query_log)


def test_closed_loop_is_deterministic(design_dirichlet):
    runs = [run_closed_loop(Scenario(design_dirichlet, ref.z0, ref.y0, T=2.5)) for _ in range(2)]
    assert np.array_equal(runs[0].u, runs[1].u)
    assert np.array_equal(runs[0].zhat, runs[1].zhat)
