"""Closed-loop simulation: modal and finite-difference plants, norms and
Lyapunov diagnostics.

The modal plant advances ``z_n`` exactly for a piecewise-linear input.  The
finite-difference plant is Crank-Nicolson on a vertex-centred grid with the
Robin rows built into the half cells at the ends.  Both share one loop that
steps the controller first (its measurement only needs plant data ``h``
seconds old) and then the plant over the same interval.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import factorized

from .errors import (
    IncompatibleInitialData,
    LinearSolveFailure,
    MissingCertificate,
    MissingModalData,
    NonPositiveSamples,
)
from .runtime import (
    HistoryBuffer,
    artstein_quadrature_check,
    hold_weights,
    init_controller,
    step_controller,
)
from .spectral import project
from .synthesis import Variant

MODAL = "modal"
FINITE_DIFFERENCE = "fd"


@dataclass
class ModalPlantState:
    z: np.ndarray
    t: float = 0.0


class ModalPlant:
    """Decoupled modes ``z_n' = mu_n z_n + beta_n u`` over ``m_modes`` modes."""

    def __init__(self, model, m_modes, dt):
        basis = model.basis
        self.model = model
        self.m = int(m_modes)
        self.mu = -basis.lam[: self.m] + model.q_c
        self.beta = model.coeffs.beta_n[: self.m]
        self.b = model.coeffs.b_n[: self.m]
        self.phi = basis.phi[: self.m]
        self.grid = basis.grid
        self.phi0 = basis.phi0[: self.m]
        self.dphi0 = basis.dphi0[: self.m]
        self.den = model.plant.shape_denominator
        self.dt = dt
        self.decay = np.exp(self.mu * dt)
        self.g0, self.g1 = hold_weights(self.mu, dt)

    def initial(self, z0_values):
        return ModalPlantState(project(self.model.basis, z0_values)[: self.m].copy())

    def step(self, state, u0, u1):
        state.z = self.decay * state.z + self.beta * (u0 * self.g0 + (u1 - u0) * self.g1)
        state.t += self.dt
        return state

    def w(self, state, u):
        return state.z + self.b * u

    def profile(self, state, u):
        return self.w(state, u) @ self.phi + self.grid ** 2 * (u / self.den)

    def output(self, state, u, measurement):
        trace = self.phi0 if measurement == "dirichlet" else self.dphi0
        return float(self.w(state, u) @ trace)


def step_modal(state, u, dt, mu, beta, u_next=None):
    """Exact step of ``z_n' = mu_n z_n + beta_n u``; ``u`` held, or linear to ``u_next``."""
    g0, g1 = hold_weights(mu, dt)
    u1 = u if u_next is None else u_next
    z = np.exp(np.asarray(mu) * dt) * state.z + np.asarray(beta) * (u * g0 + (u1 - u) * g1)
    return ModalPlantState(z, state.t + dt)


# --- finite differences ---------------------------------------------------

@dataclass
class FDPlantState:
    z: np.ndarray  # full grid, boundary nodes included
    t: float = 0.0
    steps: int = 0


class FDPlant:
    """Crank-Nicolson for ``z_t = (p z_x)_x - q~ z`` with Robin ends.

    Half cells carry the boundary flux; a Dirichlet end (``sin(theta) = 0``)
    is eliminated and set from the boundary condition.

    The first ``startup_steps`` steps are each two implicit Euler half steps
    (Rannacher start-up).  Initial data that only meet the first-order
    compatibility conditions otherwise leave a grid-scale oscillation at the
    actuated end that Crank-Nicolson barely damps.
    """

    def __init__(self, plant, grid_size, dt, startup_steps=4):
        self.plant = plant
        n = int(grid_size)
        x = np.linspace(0.0, 1.0, n)
        dx = x[1] - x[0]
        self.grid, self.dx, self.dt = x, dx, dt
        pm = plant.p(0.5 * (x[1:] + x[:-1]))
        qt = plant.q_tilde(x)
        mass = np.full(n, dx)
        mass[0] = mass[-1] = 0.5 * dx
        main = np.zeros(n)
        main[:-1] -= pm / dx
        main[1:] -= pm / dx
        main -= mass * qt
        c1, s1, c2, s2 = plant.c1, plant.s1, plant.c2, plant.s2
        src = np.zeros(n)
        if s1 > 0:
            main[0] -= plant.p(0.0) * c1 / s1
        if s2 > 0:
            main[-1] -= plant.p(1.0) * c2 / s2
            src[-1] = plant.p(1.0) / s2
        stiff = sp.diags([pm / dx, main, pm / dx], [-1, 0, 1], format="lil")
        keep = np.ones(n, dtype=bool)
        self.left_dirichlet = s1 == 0
        self.right_dirichlet = s2 == 0
        if self.left_dirichlet:
            keep[0] = False
        if self.right_dirichlet:
            keep[-1] = False
            # known boundary value u / c2 feeds the neighbouring row
            src[-2] += pm[-1] / dx / c2
        self.keep = keep
        idx = np.flatnonzero(keep)
        s = stiff.tocsr()[idx][:, idx]
        minv = sp.diags(1.0 / mass[idx])
        a = (minv @ s).tocsc()
        self.src = src[idx] / mass[idx]
        eye = sp.identity(idx.size, format="csc")
        try:
            self._solve = factorized((eye - 0.5 * dt * a).tocsc())
        except RuntimeError as exc:  # singular factor
            raise LinearSolveFailure(str(exc), operation="FDPlant") from exc
        self._rhs = (eye + 0.5 * dt * a).tocsr()
        self.startup_steps = int(startup_steps)

    def initial(self, z0_values):
        z = np.array(z0_values, dtype=float)
        if self.left_dirichlet:
            z[0] = 0.0
        return FDPlantState(z)

    def step(self, state, u0, u1):
        inner = state.z[self.keep]
        half = 0.5 * self.dt * self.src
        if state.steps < self.startup_steps:
            # implicit Euler over dt/2 uses the same matrix I - dt/2 A
            new = self._solve(self._solve(inner + half * (0.5 * (u0 + u1))) + half * u1)
        else:
            new = self._solve(self._rhs @ inner + half * (u0 + u1))
        if not np.all(np.isfinite(new)):
            raise LinearSolveFailure("non-finite Crank-Nicolson solution", operation="step_fd")
        state.z[self.keep] = new
        if self.right_dirichlet:
            state.z[-1] = u1 / self.plant.c2
        state.t += self.dt
        state.steps += 1
        return state

    def profile(self, state, u):
        return state.z

    def output(self, state, u, measurement):
        z = state.z
        if measurement == "dirichlet":
            return float(z[0])
        if self.plant.s1 > 0:
            return float(self.plant.c1 / self.plant.s1 * z[0])
        return float((-3.0 * z[0] + 4.0 * z[1] - z[2]) / (2.0 * self.dx))


def step_fd(plant_fd, state, u, dt=None, u_next=None):
    if dt is not None and abs(dt - plant_fd.dt) > 1e-15:
        raise ValueError("the factorised step was built for a different dt")
    return plant_fd.step(state, u, u if u_next is None else u_next)


# --- norms and fits ----------------------------------------------------------

def h1_norm(z, grid):
    z = np.asarray(z, dtype=float)
    if z.size < 3:
        raise ValueError("need at least 3 grid points")
    dz = np.gradient(z, grid, edge_order=1)
    return float(math.sqrt(np.trapezoid(z * z + dz * dz, grid)))


def l2_norm(z, grid):
    z = np.asarray(z, dtype=float)
    return float(math.sqrt(np.trapezoid(z * z, grid)))


def fit_decay_rate(t, values, t_start=0.0, t_end=None):
    """Negated least-squares slope of ``log(values)`` on ``[t_start, t_end]``.

    Returns ``(rate, rms_residual)``.
    """
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    sel = t >= t_start
    if t_end is not None:
        sel &= t <= t_end
    t, v = t[sel], v[sel]
    if t.size < 20:
        raise ValueError("need at least 20 samples to fit a rate")
    if np.any(~(v > 0)):
        raise NonPositiveSamples(f"{int(np.sum(~(v > 0)))} samples are not positive",
                                 operation="fit_decay_rate")
    coef = np.polyfit(t, np.log(v), 1)
    resid = np.log(v) - np.polyval(coef, t)
    return float(-coef[0]), float(np.sqrt(np.mean(resid ** 2)))


# --- scenarios ----------------------------------------------------------------

@dataclass
class Scenario:
    design: object
    z0: Callable
    y0: Callable
    T: float
    dt: float = 1e-3
    plant_kind: str = MODAL
    certificate: Optional[object] = None
    n: Optional[int] = None
    m_modes: int = 60
    fd_grid: int = 2001
    record_stride: int = 1
    artstein_stride: int = 0
    lipschitz_bound: float = 1e4
    compat_tol: float = 1e-6
    keep_profiles: bool = False

    @property
    def observer_order(self):
        if self.n is not None:
            return self.n
        if self.certificate is not None and self.certificate.n is not None:
            return self.certificate.n
        return self.design.params.n


def _derivative(f, x, h=1e-6):
    return (f(x + h) - f(x - h)) / (2.0 * h)


def initial_input(scenario):
    plant = scenario.design.model.plant
    z0 = scenario.z0
    return plant.c2 * z0(1.0) + plant.s2 * _derivative(z0, 1.0)


def compatibility_violations(scenario):
    """Every violated compatibility condition of the initial data."""
    design = scenario.design
    plant = design.model.plant
    params = design.params
    z0, y0 = scenario.z0, scenario.y0
    tol = scenario.compat_tol
    out = []
    left = plant.c1 * z0(0.0) - plant.s1 * _derivative(z0, 0.0)
    if abs(left) > tol:
        out.append(f"left boundary condition residual {left:.3e} on z0")
    if params.variant is Variant.JOINT:
        right = initial_input(scenario)
        if abs(right) > tol:
            out.append(f"right boundary value {right:.3e} on z0 must vanish with zero input history")
    trace0 = z0(0.0) if params.variant.measurement == "dirichlet" else _derivative(z0, 0.0)
    if abs(y0(0.0) - trace0) > tol:
        out.append(f"y0(0) = {y0(0.0):.6g} differs from the measured trace {trace0:.6g} of z0")
    taus = np.linspace(-params.h_o, 0.0, max(2, int(round(params.h_o / scenario.dt)) + 1))
    vals = np.array([y0(s) for s in taus])
    if not np.all(np.isfinite(vals)):
        out.append("y0 is not finite on [-h_o, 0]")
    else:
        lip = float(np.max(np.abs(np.diff(vals)) / np.diff(taus)))
        if lip > scenario.lipschitz_bound:
            out.append(f"y0 difference quotient {lip:.3e} exceeds {scenario.lipschitz_bound:g}")
    return out


@dataclass
class SimulationTrace:
    t: np.ndarray
    u: np.ndarray
    y: np.ndarray
    h1_norm: np.ndarray
    l2_norm: np.ndarray
    zhat: np.ndarray
    e: np.ndarray
    phi: np.ndarray
    u_plant: np.ndarray
    h_o: float
    horizon: float
    dt: float
    variant: Variant
    n: int
    n0: int
    grid: np.ndarray
    z_modes: Optional[np.ndarray] = None
    profiles: Optional[np.ndarray] = None
    V: Optional[np.ndarray] = None
    V0: Optional[np.ndarray] = None
    V1: Optional[np.ndarray] = None
    artstein: list = field(default_factory=list)
    plant_kind: str = MODAL

    @property
    def record_dt(self):
        return float(self.t[1] - self.t[0]) if self.t.size > 1 else self.dt

    def max_error(self):
        """Largest ``|e_n|`` per record; NaN before the error is defined."""
        out = np.full(self.t.size, np.nan)
        known = ~np.all(np.isnan(self.e), axis=1)
        out[known] = np.max(np.abs(self.e[known]), axis=1)
        return out


def _plant_for(scenario):
    model = scenario.design.model
    if scenario.plant_kind == MODAL:
        return ModalPlant(model, scenario.m_modes, scenario.dt)
    if scenario.plant_kind == FINITE_DIFFERENCE:
        return FDPlant(model.plant, scenario.fd_grid, scenario.dt)
    raise ValueError(f"unknown plant kind {scenario.plant_kind!r}")


def run_closed_loop(scenario, plant=None):
    """Co-simulate plant and controller on the shared ``dt`` grid."""
    bad = compatibility_violations(scenario)
    if bad:
        raise IncompatibleInitialData(bad)
    design = scenario.design
    params = design.params
    variant = params.variant
    dt = scenario.dt
    n = scenario.observer_order
    if scenario.plant_kind == MODAL and scenario.m_modes < 4 * n:
        raise ValueError(f"m_modes={scenario.m_modes} must be at least 4 N = {4 * n}")
    plant = plant or _plant_for(scenario)
    u0 = 0.0 if variant is Variant.JOINT else initial_input(scenario)
    ctrl = init_controller(design, u0, dt, n=n)
    h_o, h_i = params.h_o, params.h_i
    steps = int(round(scenario.T / dt))
    stride = scenario.record_stride
    measurement = variant.measurement

    x = plant.grid
    state = plant.initial(scenario.z0(x))
    # plant output history for the delayed measurement port
    y_hist = HistoryBuffer(h_o + 4.0 * dt, default=0.0, start=-1.0)
    y0 = scenario.y0

    def u_plant_at(s):
        return ctrl.u_hist.value(s - h_i) if variant is Variant.JOINT else ctrl.u_hist.value(s)

    def meas(s):
        tau = s - h_o
        return y0(tau) if tau <= 0.0 else y_hist.value(tau)

    rec = max(1, steps // stride + 1)
    out = {k: np.full(rec, np.nan) for k in ("t", "u", "y", "h1", "l2", "up")}
    zhat_r = np.full((rec, n), np.nan)
    phi_r = np.full((rec, design.n0), np.nan)
    z_r = np.full((rec, plant.m), np.nan) if scenario.plant_kind == MODAL else None
    prof_r = np.full((rec, x.size), np.nan) if scenario.keep_profiles else None
    artstein = []

    up = u_plant_at(0.0)
    y_now = plant.output(state, up, measurement)
    y_hist.push(0.0, y_now)

    def record(i, k):
        prof = plant.profile(state, up)
        out["t"][i] = k * dt
        out["u"][i] = ctrl.u
        out["y"][i] = meas(k * dt)
        out["h1"][i] = h1_norm(prof, x)
        out["l2"][i] = l2_norm(prof, x)
        out["up"][i] = up
        zhat_r[i] = ctrl.zhat
        phi_r[i] = ctrl.phi
        if z_r is not None:
            z_r[i] = state.z
        if prof_r is not None:
            prof_r[i] = prof

    record(0, 0)
    for k in range(1, steps + 1):
        step_controller(ctrl, meas, dt)
        up_next = u_plant_at(k * dt)
        plant.step(state, up, up_next)
        up = up_next
        state.t = k * dt
        y_hist.push(k * dt, plant.output(state, up, measurement))
        if scenario.artstein_stride and k % scenario.artstein_stride == 0 and k * dt >= ctrl.horizon:
            artstein.append((k * dt, artstein_quadrature_check(ctrl)))
        if k % stride == 0:
            record(k // stride, k)

    t = out["t"]
    trace = SimulationTrace(
        t=t, u=out["u"], y=out["y"], h1_norm=out["h1"], l2_norm=out["l2"], zhat=zhat_r,
        e=np.full((rec, n), np.nan), phi=phi_r, u_plant=out["up"], h_o=h_o, horizon=ctrl.horizon,
        dt=dt, variant=variant, n=n, n0=design.n0, grid=x, z_modes=z_r, profiles=prof_r,
        artstein=artstein, plant_kind=scenario.plant_kind,
    )
    if z_r is not None:
        lag = _lag(h_o, trace.record_dt)
        if lag is not None and lag < rec:
            trace.e[lag:] = z_r[: rec - lag, :n] - zhat_r[lag:]
    elif scenario.plant_kind == FINITE_DIFFERENCE:
        lag = _lag(h_o, trace.record_dt)
        if lag is not None and lag < rec and prof_r is not None:
            coeffs = np.array([project(design.model.basis, _resample(p, x, design.model.basis.grid))[:n]
                               for p in prof_r[: rec - lag]])
            trace.e[lag:] = coeffs - zhat_r[lag:]
    if scenario.certificate is not None and z_r is not None and variant is not Variant.JOINT:
        lyapunov_trace(trace, scenario.certificate, design)
    return trace


def _resample(values, x, grid):
    if x.size == grid.size and np.allclose(x, grid):
        return values
    return np.interp(grid, x, values)


def _lag(h, record_dt):
    ratio = h / record_dt
    lag = int(round(ratio))
    if abs(ratio - lag) > 1e-9 * max(1.0, ratio):
        return None
    return lag


def run_open_loop(model, z0, T, dt=1e-3, plant_kind=MODAL, m_modes=60, fd_grid=2001, record_stride=1):
    """Plant with ``u = 0``; no compatibility check (the boundary may jump)."""
    if plant_kind == MODAL:
        plant = ModalPlant(model, m_modes, dt)
    else:
        plant = FDPlant(model.plant, fd_grid, dt)
    x = plant.grid
    state = plant.initial(z0(x))
    steps = int(round(T / dt))
    ts, l2, h1 = [], [], []
    for k in range(steps + 1):
        if k:
            plant.step(state, 0.0, 0.0)
        if k % record_stride == 0:
            prof = plant.profile(state, 0.0)
            ts.append(k * dt)
            l2.append(l2_norm(prof, x))
            h1.append(h1_norm(prof, x))
    return np.array(ts), np.array(l2), np.array(h1)


# --- Lyapunov functional ------------------------------------------------------

def _window_integral(values, mu, dt, window):
    """``int_{t-window}^t e^{mu (t-s)} v(s) ds`` along the record grid for the
    piecewise-linear interpolant of ``v`` (rows = times); NaN before ``window``."""
    values = np.asarray(values, dtype=float)
    single = values.ndim == 1
    v = values[:, None] if single else values
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    g0, g1 = hold_weights(mu, dt)
    decay = np.exp(mu * dt)
    run = np.zeros_like(v)
    for k in range(1, v.shape[0]):
        run[k] = decay * run[k - 1] + v[k - 1] * g0 + (v[k] - v[k - 1]) * g1
    lag = _lag(window, dt)
    out = np.full_like(v, np.nan)
    out[lag:] = run[lag:] - np.exp(mu * window) * run[: v.shape[0] - lag]
    return out[:, 0] if single else out


def lyapunov_trace(trace, certificate, design):
    """Fill ``V``, ``V0``, ``V1`` for ``t >= h`` and return the monotonicity report.

    ``V0 = X' P X + gamma sum_{n>N} lambda_n w_n^2`` and
    ``V1 = beta int_{t-h}^t e^{-2 delta (t-s)} zeta(s)^2 ds`` with ``zeta`` the
    measured trace of the modes beyond ``N``.
    """
    if certificate is None or certificate.p_matrix is None:
        raise MissingCertificate("a certificate with P is needed", operation="lyapunov_trace")
    if trace.z_modes is None:
        raise MissingModalData("the Lyapunov functional needs a modal plant run", operation="lyapunov_trace")
    if trace.variant is Variant.JOINT:
        raise MissingModalData("the Lyapunov functional covers single-delay variants", operation="lyapunov_trace")
    n, n0 = trace.n, trace.n0
    if certificate.n != n:
        raise MissingCertificate(f"certificate is for N={certificate.n}, run used N={n}",
                                 operation="lyapunov_trace")
    model = design.model
    basis = model.basis
    delta, h = design.params.delta, trace.h_o
    dt = trace.record_dt
    lag = _lag(h, dt)
    if lag is None:
        raise ValueError("the delay must be a multiple of the record step")
    m = trace.z_modes.shape[1]
    lam = basis.lam[:m]
    mu = -lam + model.q_c
    tr = basis.measurement_trace(trace.variant.measurement)[:m]
    w = trace.z_modes + np.outer(trace.u, model.coeffs.b_n[:m])
    scale = np.sqrt(lam[n0:n]) if trace.variant is Variant.DIRICHLET else lam[n0:n]

    za = np.exp(mu[:n0] * trace.horizon) * trace.zhat[:, :n0] + trace.phi
    b1t = model.coeffs.beta_n[n0:n] / lam[n0:n]
    ztil = trace.zhat[:, n0:n] / lam[n0:n]
    integral = _window_integral(np.outer(trace.u, b1t), mu[n0:n], dt, h)
    zta = np.exp(mu[n0:n] * h) * ztil + integral
    zeta = w[:, n:] @ tr[n:]
    k = trace.t.size
    x = np.full((k, 2 * n), np.nan)
    x[:, :n0] = za
    x[lag:, n0:2 * n0] = trace.e[lag:, :n0]
    x[:, 2 * n0:n0 + n] = zta
    x[lag:, n0 + n:] = trace.e[lag:, n0:n] * scale
    p = certificate.p_matrix
    v0 = np.einsum("ki,ij,kj->k", x, p, x) + certificate.gamma * (w[:, n:] ** 2 @ lam[n:])
    v1 = certificate.beta * _window_integral(zeta ** 2, -2.0 * delta, dt, h)
    trace.V0 = np.where(trace.t >= h - 1e-12, v0, np.nan)
    trace.V1 = v1
    trace.V = trace.V0 + trace.V1
    return monotonicity_report(trace, delta, h)


def _ratio(num, den):
    """``num / den`` with ``0 / 0 = 0`` (a functional resting at zero does not rise)."""
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    out[(den == 0) & (num > 0)] = np.inf
    return out


def monotonicity_report(trace, delta, h):
    """Largest relative rises of ``exp(2 delta (t-h)) V(t)`` for ``t >= h``."""
    sel = trace.t >= h - 1e-12
    g = np.exp(2.0 * delta * (trace.t[sel] - h)) * trace.V[sel]
    rise = np.maximum(np.diff(g), 0.0)
    step_rise = np.max(_ratio(rise, g[:-1])) if g.size > 1 else 0.0
    running = np.minimum.accumulate(g)
    drift = float(np.max(_ratio(g - running, running)))
    return {"max_step_rise": float(step_rise), "max_drift": drift, "g_start": float(g[0]),
            "g_end": float(g[-1])}


# --- CSV ------------------------------------------------------------------------

def trace_header(n):
    return (["t", "u", "y", "h1_norm", "l2_norm", "V", "V0", "V1"]
            + [f"zhat_{i}" for i in range(1, n + 1)] + [f"e_{i}" for i in range(1, n + 1)])


def write_trace_csv(trace, path):
    cols = [trace.t, trace.u, trace.y, trace.h1_norm, trace.l2_norm]
    nan = np.full(trace.t.size, np.nan)
    for v in (trace.V, trace.V0, trace.V1):
        cols.append(nan if v is None else v)
    table = np.column_stack(cols + [trace.zhat, trace.e])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(trace_header(trace.n))
        for row in table:
            wr.writerow([repr(float(v)) for v in row])


def write_profiles_csv(trace, path):
    if trace.profiles is None:
        raise ValueError("the run did not keep profiles")
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t"] + [repr(float(v)) for v in trace.grid])
        for t, row in zip(trace.t, trace.profiles):
            wr.writerow([repr(float(t))] + [repr(float(v)) for v in row])
