import csv
import math

import numpy as np
import pytest

import reference as ref
from conftest import make_plant
from delay_stab.errors import IncompatibleInitialData, MissingCertificate, MissingModalData, NonPositiveSamples
from delay_stab.simulation import (
    FDPlant,
    ModalPlant,
    ModalPlantState,
    Scenario,
    fit_decay_rate,
    h1_norm,
    l2_norm,
    lyapunov_trace,
    monotonicity_report,
    run_closed_loop,
    run_open_loop,
    step_modal,
    trace_header,
    write_trace_csv,
)

# --- modal plant ---------------------------------------------------------------


def test_modal_step_without_input_is_exact_decay():
    mu = np.array([0.4, -3.0, -40.0])
    state = ModalPlantState(np.array([1.0, 2.0, -1.0]))
    out = step_modal(state, 0.0, 0.01, mu, np.ones(3))
    np.testing.assert_array_equal(out.z, np.exp(mu * 0.01) * state.z)


def test_modal_step_integrator():
    state = ModalPlantState(np.array([1.0]))
    assert step_modal(state, 2.0, 0.5, [0.0], [3.0]).z[0] == pytest.approx(1.0 + 3.0)
    assert step_modal(state, 2.0, 0.5, [0.0], [3.0], u_next=4.0).z[0] == pytest.approx(1.0 + 4.5)


def test_modal_plant_growth_over_ten_seconds(ref_model):
    plant = ModalPlant(ref_model, 10, 1e-3)
    state = ModalPlantState(np.eye(10)[0])
    for _ in range(10_000):
        plant.step(state, 0.0, 0.0)
    mu1 = -ref_model.basis.lam[0] + ref_model.q_c
    assert mu1 == pytest.approx(-ref.LAMBDA[0] + ref.Q_C, abs=1e-7)
    assert state.z[0] == pytest.approx(math.exp(10 * mu1), rel=1e-10)
    assert np.all(state.z[1:] == 0)


# --- finite-difference plant ---------------------------------------------------------

def test_fd_rest_is_an_equilibrium(ref_model):
    plant = FDPlant(ref_model.plant, 201, 1e-2)
    state = plant.initial(np.zeros(201))
    for _ in range(50):
        plant.step(state, 0.0, 0.0)
    assert np.all(state.z == 0)


def test_fd_first_mode_evolves_at_its_eigenvalue(ref_model):
    basis = ref_model.basis
    phi1 = basis.phi[0]
    mu1 = -basis.lam[0] + ref_model.q_c
    t, l2, _ = run_open_loop(ref_model, lambda x: np.interp(x, basis.grid, phi1), 2.0,
                             plant_kind="fd", record_stride=100)
    np.testing.assert_allclose(l2 / l2[0], np.exp(mu1 * t), rtol=1e-3)


def test_fd_steady_state_matches_boundary_value_problem():
    """Stable plant z_t = z_xx - 5 z driven to z(1) = 1 settles on the cosh/sinh solution."""
    spec = make_plant(q=(5.0,))
    dt = 1e-2
    plant = FDPlant(spec, 401, dt)
    state = plant.initial(np.zeros(401))
    # a compatible, smooth approach to the boundary value (a jump would ring under Crank-Nicolson)
    u = lambda t: 1.0 - math.exp(-5.0 * t)
    for k in range(800):
        plant.step(state, u(k * dt), u((k + 1) * dt))
    k = math.sqrt(5.0)
    c1, s1 = math.cos(ref.THETA1), math.sin(ref.THETA1)
    a = 1.0 / (math.cosh(k) + c1 / (s1 * k) * math.sinh(k))
    b = c1 * a / (s1 * k)
    x = plant.grid
    np.testing.assert_allclose(state.z, a * np.cosh(k * x) + b * np.sinh(k * x), atol=1e-4)


def test_fd_startup_damps_rough_initial_data(ref_model):
    """A step in the initial profile rings under plain Crank-Nicolson but not after the damped start."""
    x = np.linspace(0, 1, 401)
    rough = np.where(x > 0.5, 1.0, 0.0) * np.sin(np.pi * x)
    ringing = {}
    for startup in (0, 4):
        plant = FDPlant(ref_model.plant, 401, 1e-2, startup_steps=startup)
        state = plant.initial(rough)
        for _ in range(20):
            plant.step(state, 0.0, 0.0)
        ringing[startup] = np.max(np.abs(np.diff(state.z, 2)))
    assert ringing[4] < 1e-3 * ringing[0]


# --- norms and fits ----------------------------------------------------------------

def test_h1_norm_examples():
    x = np.linspace(0, 1, 2001)
    assert h1_norm(np.ones_like(x), x) == pytest.approx(1.0)
    assert h1_norm(np.sin(np.pi * x), x) == pytest.approx(math.sqrt(0.5 + np.pi**2 / 2), abs=1e-4)
    assert h1_norm(np.zeros_like(x), x) == 0.0
    assert l2_norm(np.sin(np.pi * x), x) == pytest.approx(math.sqrt(0.5), abs=1e-6)
    with pytest.raises(ValueError):
        h1_norm([1.0, 2.0], [0.0, 1.0])


def test_fit_decay_rate():
    t = np.linspace(0, 10, 1001)
    rate, resid = fit_decay_rate(t, 3 * np.exp(-t))
    assert rate == pytest.approx(1.0, abs=1e-6) and resid < 1e-10
    rate, _ = fit_decay_rate(t, np.exp(-0.5 * t) * (2 + np.cos(t)))
    assert rate == pytest.approx(0.5, abs=0.05)
    rate, _ = fit_decay_rate(t, np.exp(-2 * t), t_start=5.0)
    assert rate == pytest.approx(2.0)
    with pytest.raises(NonPositiveSamples):
        fit_decay_rate(t, np.cos(t))


# --- closed loop -------------------------------------------------------------------

def test_zero_data_gives_zero_trace(design_dirichlet, cert_dirichlet):
    zero = Scenario(design_dirichlet, lambda x: 0.0 * np.asarray(x, float), lambda s: 0.0, T=4.0,
                    certificate=cert_dirichlet)
    trace = run_closed_loop(zero)
    assert np.all(trace.u == 0) and np.all(trace.h1_norm == 0) and np.all(trace.zhat == 0)
    lag = int(round(ref.H / trace.record_dt))
    assert np.all(trace.V[lag:] == 0)
    assert monotonicity_report(trace, ref.DELTA, ref.H)["max_drift"] == 0.0


def test_incompatible_data_lists_every_violation(design_dirichlet):
    bad = Scenario(design_dirichlet, lambda x: 1.0 + 0.0 * np.asarray(x, float),
                   lambda s: 7.0 + 1e6 * s, T=1.0)
    with pytest.raises(IncompatibleInitialData) as info:
        run_closed_loop(bad)
    v = info.value.violations
    assert len(v) == 3
    assert any("left boundary" in s for s in v)
    assert any("y0(0)" in s for s in v)
    assert any("difference quotient" in s for s in v)


def test_joint_needs_zero_boundary_value(design_joint):
    with pytest.raises(IncompatibleInitialData) as info:
        run_closed_loop(Scenario(design_joint, ref.z0, ref.y0_joint, T=1.0))
    assert any("right boundary" in s for s in info.value.violations)


def test_observer_order_needs_enough_plant_modes(design_dirichlet):
    with pytest.raises(ValueError):
        run_closed_loop(Scenario(design_dirichlet, ref.z0, ref.y0, T=1.0, m_modes=8))


def test_measurement_is_the_delayed_plant_trace(trace_dirichlet, design_dirichlet):
    model = design_dirichlet.model
    m = trace_dirichlet.z_modes.shape[1]
    w = trace_dirichlet.z_modes + np.outer(trace_dirichlet.u_plant, model.coeffs.b_n[:m])
    lag = int(round(ref.H / trace_dirichlet.record_dt))
    # at t = h the port still reads y0(0); plant data take over after that
    np.testing.assert_allclose(trace_dirichlet.y[lag + 1:], w[1:-lag] @ model.basis.phi0[:m], atol=1e-12)
    np.testing.assert_allclose(trace_dirichlet.y[:lag + 1], ref.y0(trace_dirichlet.t[:lag + 1] - ref.H), atol=1e-12)


def test_profile_meets_the_actuated_boundary(profile_pair):
    for trace in profile_pair.values():
        np.testing.assert_allclose(trace.profiles[:, -1], trace.u_plant, atol=1e-10)


def test_lyapunov_trace_requirements(profile_pair, trace_joint, design_dirichlet, cert_dirichlet,
                                    design_joint, cert_joint):
    with pytest.raises(MissingCertificate):
        lyapunov_trace(profile_pair["modal"], None, design_dirichlet)
    with pytest.raises(MissingModalData):
        lyapunov_trace(profile_pair["fd"], cert_dirichlet, design_dirichlet)
    with pytest.raises(MissingModalData):
        lyapunov_trace(trace_joint, cert_joint, design_joint)
    assert trace_joint.V is None


def test_trace_csv_schema(tmp_path, design_dirichlet):
    assert trace_header(2) == ["t", "u", "y", "h1_norm", "l2_norm", "V", "V0", "V1",
                               "zhat_1", "zhat_2", "e_1", "e_2"]
    trace = run_closed_loop(Scenario(design_dirichlet, ref.z0, ref.y0, T=0.5, record_stride=10))
    path = tmp_path / "trace.csv"
    write_trace_csv(trace, path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == trace_header(3)
    assert len(rows) == 1 + trace.t.size
    assert float(rows[-1][0]) == pytest.approx(0.5)
