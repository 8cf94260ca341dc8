"""Controller synthesis: modal split, gains and the truncated closed loop.

The observer tracks the first ``n`` modes of the plant delayed by the output
delay; the first ``n0`` of them carry the innovation and, after the predictor
(Artstein) transformation, the state feedback.  Three variants are handled:
delayed Dirichlet measurement, delayed Neumann measurement, and a Dirichlet
measurement combined with an input delay.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    InsufficientModes,
    PoleSpecError,
    UncontrollableMode,
    UnobservableMode,
    ZeroGain,
)


class Variant(str, enum.Enum):
    DIRICHLET = "dirichlet"
    NEUMANN = "neumann"
    JOINT = "joint"

    @property
    def measurement(self):
        return "neumann" if self is Variant.NEUMANN else "dirichlet"


@dataclass(frozen=True)
class DesignParameters:
    delta: float
    n: int
    variant: Variant
    h_o: float
    h_i: float = 0.0
    n0: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        bad = []
        if not self.delta > 0:
            bad.append("delta must be positive")
        if not self.h_o > 0:
            bad.append("h_o must be positive")
        if self.h_i < 0:
            bad.append("h_i must be nonnegative")
        if self.variant is not Variant.JOINT and self.h_i != 0:
            bad.append("h_i is only used by the joint variant")
        if self.n0 is not None and self.n < self.n0 + 1:
            bad.append("n must be at least n0 + 1")
        if bad:
            raise ValueError("; ".join(bad))

    @property
    def horizon(self):
        """Prediction horizon: the output delay, or input plus output delay."""
        if self.variant is Variant.JOINT:
            return self.h_i + self.h_o
        return self.h_o


@dataclass(frozen=True)
class GainSet:
    k: np.ndarray  # (n0,) feedback row
    l: np.ndarray  # (n0,) observer column


def select_n0(lam, q_c, delta):
    """Smallest ``n0 >= 1`` with ``lam[n0] > q_c + delta`` (0-based ``lam``)."""
    lam = np.asarray(lam, dtype=float)
    ok = np.flatnonzero(lam[1:] > q_c + delta)
    if ok.size == 0:
        raise InsufficientModes(f"no computed eigenvalue exceeds q_c + delta = {q_c + delta:g}",
                                operation="select_n0")
    return int(ok[0]) + 1


def spectral_abscissa(m):
    return float(np.max(np.linalg.eigvals(np.atleast_2d(m)).real))


def _ackermann(a, b, poles):
    # gain g with eig(a - b g) = poles
    n = a.shape[0]
    ctrb = np.column_stack([np.linalg.matrix_power(a, j) @ b for j in range(n)])
    coeffs = np.real_if_close(np.poly(poles))
    if np.iscomplexobj(coeffs):
        raise PoleSpecError("pole set must be closed under complex conjugation")
    phi_a = sum(c * np.linalg.matrix_power(a, n - j) for j, c in enumerate(coeffs))
    e_last = np.zeros(n)
    e_last[-1] = 1.0
    return e_last @ np.linalg.solve(ctrb, phi_a)


def _match_poles(actual, wanted, tol):
    actual = list(np.asarray(actual, dtype=complex))
    for p in np.asarray(wanted, dtype=complex):
        j = int(np.argmin([abs(a - p) for a in actual]))
        if abs(actual[j] - p) > tol * max(1.0, abs(p)):
            return False
        actual.pop(j)
    return True


def check_modal_rank(b0, c0, tol=1e-10):
    b0 = np.atleast_1d(np.asarray(b0, dtype=float))
    c0 = np.atleast_1d(np.asarray(c0, dtype=float))
    bad = np.flatnonzero(np.abs(b0) <= tol * max(1.0, np.max(np.abs(b0))))
    if bad.size:
        raise UncontrollableMode(f"input coefficient vanishes for mode(s) {(bad + 1).tolist()}")
    bad = np.flatnonzero(np.abs(c0) <= tol * max(1.0, np.max(np.abs(c0))))
    if bad.size:
        raise UnobservableMode(f"measurement trace vanishes for mode(s) {(bad + 1).tolist()}")


def default_poles(n0, delta):
    ctrl = [-delta - 1.0 - j for j in range(n0)]
    obs = [-delta - 2.0 - j for j in range(n0)]
    return ctrl, obs


def place_gains(a0, b0, c0, ctrl_poles, obs_poles, delta, tol=1e-8):
    """Single-input/single-output Ackermann placement of K and L.

    ``a0`` is the (diagonal) matrix of unstable and slow modes, ``b0`` the
    input column and ``c0`` the measurement row.  The feedback convention is
    ``u = K x`` so ``eig(a0 + b0 K) = ctrl_poles`` and
    ``eig(a0 - L c0) = obs_poles``.
    """
    a0 = np.atleast_2d(np.asarray(a0, dtype=float))
    b0 = np.atleast_1d(np.asarray(b0, dtype=float))
    c0 = np.atleast_1d(np.asarray(c0, dtype=float))
    n0 = a0.shape[0]
    ctrl_poles = np.atleast_1d(np.asarray(ctrl_poles, dtype=complex))
    obs_poles = np.atleast_1d(np.asarray(obs_poles, dtype=complex))
    if ctrl_poles.size != n0 or obs_poles.size != n0 or b0.size != n0 or c0.size != n0:
        raise PoleSpecError(f"need {n0} controller and observer poles matching the {n0} slow modes")
    for p in np.concatenate([ctrl_poles, obs_poles]):
        if p.real >= -delta:
            raise PoleSpecError(f"requested pole {p} does not have real part below -delta = {-delta:g}")
    check_modal_rank(b0, c0)

    k = -_ackermann(a0, b0, ctrl_poles)
    l = _ackermann(a0.T, c0, obs_poles)
    if not _match_poles(np.linalg.eigvals(a0 + np.outer(b0, k)), ctrl_poles, tol):
        raise PoleSpecError("controller placement failed the eigenvalue post-check")
    if not _match_poles(np.linalg.eigvals(a0 - np.outer(l, c0)), obs_poles, tol):
        raise PoleSpecError("observer placement failed the eigenvalue post-check")
    return GainSet(k=np.asarray(k, dtype=float), l=np.asarray(l, dtype=float))


def validate_gains(a0, b0, c0, gains, delta):
    """Reject externally supplied gains whose closed loops are not below -delta."""
    a0 = np.atleast_2d(a0)
    k, l = gains.k, gains.l
    if k.size != a0.shape[0] or l.size != a0.shape[0]:
        raise DimensionMismatch(f"gains must have length n0={a0.shape[0]}", operation="validate_gains")
    if not np.any(k != 0):
        raise ZeroGain("feedback gain K must be nonzero", operation="validate_gains")
    bad = []
    ctrl = spectral_abscissa(a0 + np.outer(b0, k))
    obs = spectral_abscissa(a0 - np.outer(l, c0))
    if ctrl >= -delta:
        bad.append(f"A0 + B0 K has spectral abscissa {ctrl:.6g} >= -delta")
    if obs >= -delta:
        bad.append(f"A0 - L C0 has spectral abscissa {obs:.6g} >= -delta")
    if bad:
        raise PoleSpecError("; ".join(bad), operation="validate_gains")
    return gains


@dataclass(frozen=True)
class ReducedMatrices:
    """Blocks of the truncated model ``X' = F X + lcal * zeta``.

    ``X = col(Z_A, E, Z~_A, E~)`` of size ``2n``; ``e`` is the row giving
    ``du/dt = e @ col(X, zeta)``.
    """

    n0: int
    n: int
    variant: Variant
    a0: np.ndarray
    a1: np.ndarray
    b0: np.ndarray
    b1t: np.ndarray
    c0: np.ndarray
    c1t: np.ndarray
    k: np.ndarray
    l: np.ndarray
    exp_a0h: np.ndarray
    f: np.ndarray
    lcal: np.ndarray
    ktilde: np.ndarray
    e: np.ndarray
    delay_horizon: float


def assemble_reduced(model, gains, params, n=None):
    """Build the truncated closed-loop matrices for observer order ``n``."""
    n = params.n if n is None else n
    n0 = gains.k.size
    basis = model.basis
    if gains.l.size != n0:
        raise DimensionMismatch("K and L must have the same length")
    if n < n0 + 1:
        raise DimensionMismatch(f"observer order {n} must be at least n0 + 1 = {n0 + 1}")
    if n > basis.m_modes:
        raise DimensionMismatch(f"observer order {n} exceeds the {basis.m_modes} computed modes")

    lam = basis.lam[:n]
    mu = -lam + model.q_c
    beta = model.coeffs.beta_n[:n]
    trace = basis.measurement_trace(params.variant.measurement)[:n]
    h = params.horizon

    a0 = np.diag(mu[:n0])
    a1 = np.diag(mu[n0:])
    b0 = beta[:n0].copy()
    b1t = beta[n0:] / lam[n0:]
    c0 = trace[:n0].copy()
    if params.variant is Variant.NEUMANN:
        c1t = trace[n0:] / lam[n0:]
    else:
        c1t = trace[n0:] / np.sqrt(lam[n0:])
    k, l = gains.k, gains.l
    exp_a0h = np.diag(np.exp(mu[:n0] * h))

    m = n - n0
    z = np.zeros
    el = exp_a0h @ l
    f = np.block([
        [a0 + np.outer(b0, k), np.outer(el, c0), z((n0, m)), np.outer(el, c1t)],
        [z((n0, n0)), a0 - np.outer(l, c0), z((n0, m)), -np.outer(l, c1t)],
        [np.outer(b1t, k), z((m, n0)), a1, z((m, m))],
        [z((m, n0)), z((m, n0)), z((m, m)), a1],
    ])
    lcal = np.concatenate([el, -l, z(2 * m)])
    ktilde = np.concatenate([k, z(2 * n - n0)])
    e = k @ np.hstack([f[:n0, :], el[:, None]])
    return ReducedMatrices(
        n0=n0, n=n, variant=params.variant, a0=a0, a1=a1, b0=b0, b1t=b1t, c0=c0, c1t=c1t,
        k=k.copy(), l=l.copy(), exp_a0h=exp_a0h, f=f, lcal=lcal, ktilde=ktilde, e=e,
        delay_horizon=h,
    )


def predictor_integral_weights(a0_diag, horizon):
    """``int_{-h}^0 exp(-a s) ds = (exp(a h) - 1) / a`` per diagonal entry (``h`` at a = 0)."""
    a = np.asarray(a0_diag, dtype=float)
    out = np.full_like(a, float(horizon))
    nz = a != 0
    out[nz] = np.expm1(a[nz] * horizon) / a[nz]
    return out


def initial_observer_state(u0, k, a0_diag, b0, horizon):
    """Minimal-norm ``Z(0)`` such that the predicted feedback reproduces ``u0``.

    Solves ``K exp(A0 h) Z = (1 - K W B0) u0`` where ``W`` holds the
    closed-form predictor integral weights.
    """
    k = np.atleast_1d(np.asarray(k, dtype=float))
    if not np.any(k != 0):
        raise ZeroGain("feedback gain K must be nonzero")
    a = np.atleast_1d(np.asarray(a0_diag, dtype=float))
    g = k * np.exp(a * horizon)
    rhs = (1.0 - k @ (predictor_integral_weights(a, horizon) * np.asarray(b0, dtype=float))) * u0
    return g * (rhs / (g @ g))


@dataclass(frozen=True)
class Design:
    """Plant model, design parameters and gains: everything certification needs."""

    model: object  # spectral.PlantModel
    params: DesignParameters
    gains: GainSet
    n0: int

    @property
    def mu(self):
        return -self.model.basis.lam + self.model.q_c

    def slow_blocks(self):
        n0 = self.n0
        basis = self.model.basis
        a0 = np.diag(self.mu[:n0])
        b0 = self.model.coeffs.beta_n[:n0]
        c0 = basis.measurement_trace(self.params.variant.measurement)[:n0]
        return a0, b0, c0

    def reduced(self, n=None):
        return assemble_reduced(self.model, self.gains, self.params, n)


def design_controller(model, params, gains=None, ctrl_poles=None, obs_poles=None):
    """Pick ``n0``, then place (or validate supplied) gains."""
    basis = model.basis
    n0 = params.n0 if params.n0 is not None else select_n0(basis.lam, model.q_c, params.delta)
    if n0 < 1:
        raise ValueError("n0 must be at least 1")
    if basis.lam[n0] <= model.q_c + params.delta:
        raise PoleSpecError(f"n0={n0} leaves mode {n0 + 1} with decay slower than delta",
                            operation="design_controller")
    if params.n < n0 + 1:
        raise DimensionMismatch(f"observer order {params.n} must be at least n0 + 1 = {n0 + 1}",
                                operation="design_controller")
    a0 = np.diag(-basis.lam[:n0] + model.q_c)
    b0 = model.coeffs.beta_n[:n0]
    c0 = basis.measurement_trace(params.variant.measurement)[:n0]
    if gains is None:
        dc, do = default_poles(n0, params.delta)
        gains = place_gains(a0, b0, c0, dc if ctrl_poles is None else ctrl_poles,
                            do if obs_poles is None else obs_poles, params.delta)
    else:
        gains = GainSet(np.atleast_1d(np.asarray(gains.k, dtype=float)),
                        np.atleast_1d(np.asarray(gains.l, dtype=float)))
        validate_gains(a0, b0, c0, gains, params.delta)
    return Design(model=model, params=params, gains=gains, n0=n0)
