"""Time-domain execution of the observer-predictor controller.

The observer tracks the first ``n`` modes ``H`` seconds in the past from the
delayed boundary measurement.  The predictor integral
``phi(t) = int_{t-H}^t exp(A0 (t-s)) B0 u(s) ds`` is realised as an ODE, and
the input is ``u = K (exp(A0 H) Z + phi)``.  Everything advances with
fixed steps: RK4 for the observer, the exact exponential step for ``phi``.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .errors import BufferUnderrun, CausalityViolation, ZeroGain
from .synthesis import Variant, initial_observer_state, predictor_integral_weights


class HistoryBuffer:
    """Time-stamped samples with linear interpolation and a constant prehistory.

    Queries at or before ``start`` return ``default``.  Samples older than
    ``span`` behind the newest one are discarded (one extra is kept so the
    window edge can still be interpolated).
    """

    def __init__(self, span, default=0.0, start=0.0):
        if span <= 0:
            raise ValueError("span must be positive")
        self.span = float(span)
        self.default = float(default)
        self.start = float(start)
        self._t = []
        self._v = []
        self._drop = 0
        self._trimmed = False

    def __len__(self):
        return len(self._t) - self._drop

    @property
    def t_now(self):
        return self._t[-1] if len(self) else self.start

    def push(self, t, value):
        if len(self) and t <= self._t[-1]:
            raise ValueError(f"timestamps must increase strictly ({t} after {self._t[-1]})")
        self._t.append(float(t))
        self._v.append(float(value))
        horizon = t - self.span
        i = bisect.bisect_left(self._t, horizon, lo=self._drop) - 1
        if i > self._drop:
            self._drop = i
        if self._drop > 4096 and self._drop > len(self._t) // 2:
            del self._t[:self._drop]
            del self._v[:self._drop]
            self._drop = 0
            self._trimmed = True

    def value(self, tau):
        if tau <= self.start:
            return self.default
        if not len(self) or tau > self._t[-1] + 1e-12 * max(1.0, abs(tau)):
            raise CausalityViolation(f"query at {tau!r} is ahead of the newest sample {self.t_now!r}",
                                     operation="HistoryBuffer.value")
        j = bisect.bisect_left(self._t, tau, lo=self._drop)
        if j >= len(self._t):
            return self._v[-1]
        if self._t[j] == tau:
            return self._v[j]
        if j == self._drop:
            if self._drop > 0 or self._trimmed:
                raise BufferUnderrun(f"query at {tau!r} precedes the oldest retained sample "
                                     f"{self._t[self._drop]!r}", operation="HistoryBuffer.value")
            # between the prehistory and the first stored sample
            ta, va = self.start, self.default
        else:
            ta, va = self._t[j - 1], self._v[j - 1]
        tb, vb = self._t[j], self._v[j]
        return va + (tau - ta) / (tb - ta) * (vb - va)


def hold_weights(mu, dt):
    """``g0 = int_0^dt e^{mu (dt-s)} ds`` and ``g1 = int_0^dt e^{mu (dt-s)} s/dt ds``.

    Exact step weights for an input that is linear over the step.
    """
    mu = np.asarray(mu, dtype=float)
    x = mu * dt
    small = np.abs(x) < 1e-4
    safe = np.where(small, 1.0, mu)
    g0 = np.where(small, dt * (1.0 + x / 2.0 + x * x / 6.0), np.expm1(x) / safe)
    g1 = np.where(small, dt * (0.5 + x / 6.0 + x * x / 24.0), (g0 - dt) / (safe * dt))
    return g0, g1


# The predictor ODE carries the open-loop mode exp(A0 t); when A0 is unstable,
# rounding injected into phi grows with it while the closed loop decays, so
# phi is accumulated in extended precision where the platform has it.
EXTENDED = np.longdouble


def _predictor_weights(a0, dt, horizon):
    a = np.asarray(a0, dtype=EXTENDED)
    dt = EXTENDED(dt)
    decay = np.exp(a * dt)
    x = a * dt
    small = np.abs(x) < 1e-4
    safe = np.where(small, EXTENDED(1), a)
    g0 = np.where(small, dt * (1 + x / 2 + x * x / 6), np.expm1(x) / safe)
    g1 = np.where(small, dt * (EXTENDED(0.5) + x / 6 + x * x / 24), (g0 - dt) / (safe * dt))
    ratio = float(horizon) / float(dt)
    steps = int(round(ratio))
    if abs(ratio - steps) < 1e-9 * max(1.0, ratio):
        exp_h = decay ** steps
    else:
        exp_h = np.exp(a * EXTENDED(horizon))
    return decay, g0, g1, exp_h


Measurement = Union[float, Callable[[float], float]]


@dataclass
class ControllerState:
    """Observer modes, predictor state and input history of one controller."""

    n0: int
    n: int
    variant: Variant
    horizon: float
    dt: float
    mu: np.ndarray
    beta: np.ndarray
    b: np.ndarray
    trace: np.ndarray
    k: np.ndarray
    l: np.ndarray
    exp_a0h: np.ndarray
    zhat: np.ndarray
    phi: np.ndarray
    u_hist: HistoryBuffer
    t: float = 0.0
    u: float = 0.0
    steps: int = 0
    query_log: Optional[list] = field(default=None, repr=False)
    _weights: Optional[tuple] = field(default=None, repr=False)

    @property
    def a0(self):
        return self.mu[: self.n0]

    @property
    def b0(self):
        return self.beta[: self.n0]

    def predicted(self, zhat=None, phi=None):
        zhat = self.zhat if zhat is None else zhat
        phi = self.phi if phi is None else phi
        return self.exp_a0h * zhat[: self.n0] + phi


def init_controller(design, u0, dt, n=None, gains=None, zhat_upper=None):
    """Controller at ``t = 0`` consistent with ``u(0) = u0``.

    Single-delay variants hold ``u = u0`` in negative time; the joint variant
    uses zero prehistory, so its observer starts at rest and ``u0`` must be 0.
    """
    params = design.params
    n = params.n if n is None else n
    model = design.model
    basis = model.basis
    n0 = design.n0
    gains = design.gains if gains is None else gains
    k = np.atleast_1d(np.asarray(gains.k, dtype=float))
    l = np.atleast_1d(np.asarray(gains.l, dtype=float))
    if not dt > 0:
        raise ValueError("dt must be positive")
    horizon = params.horizon
    if horizon < dt:
        raise CausalityViolation("the delay horizon must span at least one step", operation="init_controller")
    mu = -basis.lam[:n] + model.q_c
    beta = model.coeffs.beta_n[:n].copy()
    a0 = mu[:n0]
    exp_a0h = np.exp(a0 * horizon)
    zhat = np.zeros(n)
    if params.variant is Variant.JOINT:
        if u0 != 0.0:
            raise ValueError("the joint-delay controller starts from zero input history")
        phi = np.zeros(n0)
        default = 0.0
    else:
        if not np.any(k != 0):
            raise ZeroGain("feedback gain K must be nonzero", operation="init_controller")
        zhat[:n0] = initial_observer_state(u0, k, a0, beta[:n0], horizon)
        phi = predictor_integral_weights(a0, horizon) * beta[:n0] * u0
        default = float(u0)
    if zhat_upper is not None:
        zhat[n0:] = zhat_upper
    phi = np.asarray(phi, dtype=EXTENDED)
    state = ControllerState(
        n0=n0, n=n, variant=params.variant, horizon=horizon, dt=float(dt), mu=mu, beta=beta,
        b=model.coeffs.b_n[:n].copy(), trace=basis.measurement_trace(params.variant.measurement)[:n].copy(),
        k=k, l=l, exp_a0h=exp_a0h, zhat=zhat, phi=phi,
        u_hist=HistoryBuffer(horizon + 4.0 * dt, default=default, start=0.0),
    )
    state.u = float(k @ state.predicted())
    state.u_hist.push(0.0, state.u)
    return state


def _observer_rate(state, s, zhat, y):
    ud = state.u_hist.value(s - state.horizon)
    innov = (zhat + state.b * ud) @ state.trace - y
    dz = state.mu * zhat + state.beta * ud
    dz[: state.n0] -= state.l * innov
    return dz


def step_controller(state, y_meas: Measurement, dt=None):
    """Advance one step; returns the new input ``u(t + dt)``.

    ``y_meas`` is either a callable returning the measurement at any stage
    time in ``[t, t + dt]`` or a scalar held over the step.  The observer
    takes a classical RK4 step.  ``phi`` takes the exact exponential step of
    its ODE for an input linear over the step; together with
    ``u(t + dt) = K Z_A(t + dt)`` that is a scalar linear equation.  An RK4
    step for ``phi`` would seed its uncontrolled mode ``exp(A0 t)``, which
    grows whenever ``A0`` is unstable.
    """
    dt = state.dt if dt is None else dt
    if dt != state.dt:
        state.dt = dt
        state._weights = None
    t = state.t
    meas = y_meas if callable(y_meas) else (lambda s, v=float(y_meas): v)
    if state.query_log is not None:
        state.query_log.append((t, t + dt - state.horizon))
    z = state.zhat
    y1, y2, y4 = meas(t), meas(t + 0.5 * dt), meas(t + dt)
    k1 = _observer_rate(state, t, z, y1)
    k2 = _observer_rate(state, t + 0.5 * dt, z + 0.5 * dt * k1, y2)
    k3 = _observer_rate(state, t + 0.5 * dt, z + 0.5 * dt * k2, y2)
    k4 = _observer_rate(state, t + dt, z + dt * k3, y4)
    state.zhat = z + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    if state._weights is None:
        state._weights = _predictor_weights(state.a0, dt, state.horizon)
    decay, g0, g1, exp_h = state._weights
    ud0 = state.u_hist.value(t - state.horizon)
    ud1 = state.u_hist.value(t + dt - state.horizon)
    b0 = state.b0.astype(EXTENDED)
    rest = (decay * state.phi + b0 * (g0 - g1) * state.u
            - exp_h * b0 * (g0 * ud0 + g1 * (ud1 - ud0)))
    c = b0 * g1
    kc = state.k @ c
    u_new = float(state.k @ (exp_h * state.zhat[: state.n0] + rest) / (1 - kc))
    state.phi = rest + c * u_new
    state.steps += 1
    state.t = state.steps * dt if state.steps * dt - t > 0.5 * dt else t + dt
    state.u = u_new
    state.u_hist.push(state.t, state.u)
    return state.u


def artstein_quadrature(state, t=None, nodes=None):
    """Trapezoid value of ``int_{t-H}^t exp(A0 (t-s)) B0 u(s) ds`` and of the
    same integral with ``|u|`` (the scale used for relative errors)."""
    t = state.t if t is None else t
    h = state.horizon
    if nodes is None:
        count = max(2, int(round(h / state.dt)) + 1)
        nodes = np.linspace(t - h, t, count)
    u = np.array([state.u_hist.value(s) for s in nodes])
    weights = np.exp(np.outer(t - nodes, state.a0)) * state.b0
    integrand = weights * u[:, None]
    return np.trapezoid(integrand, nodes, axis=0), np.trapezoid(np.abs(integrand), nodes, axis=0)


def artstein_quadrature_check(state):
    """Relative gap between the predictor ODE state and direct quadrature."""
    quad, scale = artstein_quadrature(state)
    denom = float(np.linalg.norm(scale))
    gap = float(np.linalg.norm(state.phi - quad))
    if denom == 0.0:
        return gap
    return gap / denom
