"""Sturm-Liouville spectral data for the reaction-diffusion plant.

The plant is ``z_t = (p z_x)_x - q_tilde z`` on (0, 1) with Robin conditions
``cos(theta1) z(0) - sin(theta1) z_x(0) = 0`` and
``cos(theta2) z(1) + sin(theta2) z_x(1) = u``.  After the shift
``q = q_tilde + q_c > 0`` the operator ``A f = -(p f')' + q f`` is
self-adjoint and positive; everything the controller design consumes is
read off its eigenpairs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.polynomial import Polynomial
from scipy.integrate import simpson
from scipy.linalg import eigh_tridiagonal
from scipy.special import zeta

from .errors import (
    DualFormulaMismatch,
    GridMismatch,
    InsufficientModes,
    InvalidPlant,
    NonIncreasingSpectrum,
)

_SIN_TOL = 1e-12


class Coefficient:
    """A scalar function on [0, 1] given by polynomial coefficients or samples.

    Polynomial coefficients are in ascending powers (``[c0, c1, ...]`` means
    ``c0 + c1 x + ...``) and carry an exact derivative.  Tabulated samples are
    linearly interpolated; their derivative comes from centred differences on
    the table.
    """

    def __init__(self, poly=None, table=None):
        if (poly is None) == (table is None):
            raise ValueError("give exactly one of poly or table")
        self.poly = None
        self.table = None
        if poly is not None:
            coeffs = np.atleast_1d(np.asarray(poly, dtype=float))
            self.poly = tuple(float(c) for c in coeffs)
            self._p = Polynomial(coeffs)
            self._dp = self._p.deriv()
        else:
            xs, vals = (np.asarray(a, dtype=float) for a in table)
            if xs.ndim != 1 or xs.shape != vals.shape or xs.size < 3:
                raise ValueError("table needs matching 1-D x and value arrays (>= 3 samples)")
            if np.any(np.diff(xs) <= 0):
                raise ValueError("table x samples must be strictly increasing")
            if xs[0] > 0.0 or xs[-1] < 1.0:
                raise ValueError("table must cover [0, 1]")
            self.table = (xs, vals)
            self._dvals = np.gradient(vals, xs, edge_order=2)

    @classmethod
    def constant(cls, value):
        return cls(poly=[value])

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.poly is not None:
            return self._p(x)
        xs, vals = self.table
        return np.interp(x, xs, vals)

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        if self.poly is not None:
            return self._dp(x) * np.ones_like(x)
        return np.interp(x, self.table[0], self._dvals)

    def __repr__(self):
        if self.poly is not None:
            return f"Coefficient(poly={list(self.poly)})"
        return f"Coefficient(table=<{self.table[0].size} samples>)"


@dataclass(frozen=True)
class PlantSpec:
    p: Coefficient
    q_tilde: Coefficient
    theta1: float
    theta2: float

    @property
    def c1(self):
        return float(np.cos(self.theta1))

    @property
    def s1(self):
        return float(np.sin(self.theta1))

    @property
    def c2(self):
        return float(np.cos(self.theta2))

    @property
    def s2(self):
        return float(np.sin(self.theta2))

    @property
    def shape_denominator(self):
        return self.c2 + 2.0 * self.s2

    def violations(self, measurement=None, grid=None):
        """List every violated invariant (empty when the plant is admissible).

        ``measurement`` is ``"dirichlet"`` or ``"neumann"`` and adds the
        matching restriction on ``theta1``.
        """
        out = []
        x = np.linspace(0.0, 1.0, 2001) if grid is None else grid
        if np.any(self.p(x) <= 0.0):
            out.append("p must be positive on [0, 1]")
        for name, th in (("theta1", self.theta1), ("theta2", self.theta2)):
            if not (0.0 <= th <= np.pi / 2 + 1e-15):
                out.append(f"{name}={th!r} outside [0, pi/2]")
        if measurement == "dirichlet" and not (0.0 < self.theta1 <= np.pi / 2 + 1e-15):
            out.append(f"theta1={self.theta1!r} outside (0, pi/2] required by a Dirichlet measurement")
        if measurement == "neumann" and not (0.0 <= self.theta1 < np.pi / 2):
            out.append(f"theta1={self.theta1!r} outside [0, pi/2) required by a Neumann measurement")
        return out

    def validate(self, measurement=None, grid=None):
        bad = self.violations(measurement, grid)
        if bad:
            raise InvalidPlant("; ".join(bad), operation="PlantSpec.validate")
        return self


@dataclass(frozen=True)
class ShiftSplit:
    """``q = q_tilde + q_c`` with ``q > 0``."""

    q_tilde: Coefficient
    q_c: float

    def q(self, x):
        return self.q_tilde(x) + self.q_c


def split_reaction(q_tilde, margin=1.0, grid=None):
    if margin <= 0:
        raise ValueError("margin must be positive")
    x = np.linspace(0.0, 1.0, 2001) if grid is None else np.asarray(grid, dtype=float)
    q_c = max(0.0, -float(np.min(q_tilde(x)))) + float(margin)
    return ShiftSplit(q_tilde, q_c)


@dataclass(frozen=True)
class EigenMode:
    n: int
    lam: float
    phi: np.ndarray
    phi0: float
    dphi0: float
    phi1: float
    dphi1: float


@dataclass(frozen=True)
class SpectralBasis:
    """First ``m_modes`` eigenpairs of the shifted operator on a uniform grid.

    Row ``k`` of ``phi`` holds mode ``n = k + 1``; the trace arrays follow the
    same indexing.  Instances are never mutated after construction.
    """

    grid: np.ndarray
    lam: np.ndarray
    phi: np.ndarray
    phi0: np.ndarray
    dphi0: np.ndarray
    phi1: np.ndarray
    dphi1: np.ndarray
    lam_coarse: np.ndarray
    lam_fine: np.ndarray
    p_min: float
    p_max: float
    q_max: float

    @property
    def m_modes(self):
        return self.lam.size

    def mode(self, n):
        k = n - 1
        return EigenMode(n, float(self.lam[k]), self.phi[k], float(self.phi0[k]),
                         float(self.dphi0[k]), float(self.phi1[k]), float(self.dphi1[k]))

    @property
    def modes(self):
        return [self.mode(n) for n in range(1, self.m_modes + 1)]

    def measurement_trace(self, measurement):
        """Boundary trace row used by the observer: phi_n(0) or phi_n'(0)."""
        if measurement == "dirichlet":
            return self.phi0
        if measurement == "neumann":
            return self.dphi0
        raise ValueError(f"unknown measurement {measurement!r}")

    def eigenvalue_bounds(self):
        n = np.arange(1, self.m_modes + 1)
        lower = np.pi**2 * (n - 1) ** 2 * self.p_min
        upper = np.pi**2 * n**2 * self.p_max + self.q_max
        return lower, upper


def _assemble(plant, split, n_points):
    # Vertex-centred finite volumes: half cells at the ends, Robin flux in the
    # boundary rows.  Symmetric stiffness, diagonal (trapezoid) mass.
    x = np.linspace(0.0, 1.0, n_points)
    h = x[1] - x[0]
    pm = plant.p(0.5 * (x[:-1] + x[1:]))
    diag = np.zeros(n_points)
    diag[:-1] += pm / h
    diag[1:] += pm / h
    off = -pm / h
    mass = np.full(n_points, h)
    mass[0] = mass[-1] = 0.5 * h
    keep = np.ones(n_points, dtype=bool)
    if plant.s1 > _SIN_TOL:
        diag[0] += float(plant.p(0.0)) * plant.c1 / plant.s1
    else:
        keep[0] = False
    if plant.s2 > _SIN_TOL:
        diag[-1] += float(plant.p(1.0)) * plant.c2 / plant.s2
    else:
        keep[-1] = False
    return x, h, diag, off, mass, keep


def _eig_on_grid(plant, split, n_points, m_modes):
    x, h, diag, off, mass, keep = _assemble(plant, split, n_points)
    diag = diag + mass * split.q(x)
    idx = np.flatnonzero(keep)
    sm = np.sqrt(mass[idx])
    d = diag[idx] / mass[idx]
    e = off[idx[:-1]] / (sm[:-1] * sm[1:])
    lam, vec = eigh_tridiagonal(d, e, select="i", select_range=(0, m_modes - 1))
    phi = np.zeros((m_modes, n_points))
    phi[:, idx] = (vec / sm[:, None]).T
    return x, h, lam, phi


def _one_sided(phi, h, end):
    # three-point second-order stencils
    if end == 0:
        return (-3.0 * phi[:, 0] + 4.0 * phi[:, 1] - phi[:, 2]) / (2.0 * h)
    return (3.0 * phi[:, -1] - 4.0 * phi[:, -2] + phi[:, -3]) / (2.0 * h)


def _fix_signs(phi):
    # first sample exceeding 1e-6 of the peak is made positive
    peak = np.max(np.abs(phi), axis=1, keepdims=True)
    first = np.argmax(np.abs(phi) > 1e-6 * peak, axis=1)
    return np.sign(phi[np.arange(phi.shape[0]), first])


def solve_eigen(plant, split, m_modes=400, grid_size=2001):
    """Eigenpairs of ``-(p f')' + q f`` with the plant's Robin conditions.

    The problem is discretized on ``grid_size`` points and on the nested grid
    of ``2 * grid_size - 1`` points; eigenvalues, eigenvectors (on the coarse
    nodes) and boundary traces are Richardson-extrapolated from the two
    second-order solutions.
    """
    if grid_size < 5 or m_modes < 1 or m_modes >= grid_size / 4:
        raise ValueError(f"need 1 <= m_modes < grid_size/4 (got m_modes={m_modes}, grid_size={grid_size})")
    x, h, lam_c, phi_c = _eig_on_grid(plant, split, grid_size, m_modes)
    pv = plant.p(x)
    if np.any(pv <= 0.0):
        raise InvalidPlant("p must be positive on the grid", operation="solve_eigen")
    _, hf, lam_f, phi_f_full = _eig_on_grid(plant, split, 2 * grid_size - 1, m_modes)

    phi_c = phi_c * _fix_signs(phi_c)[:, None]
    align = np.sign(np.sum(phi_f_full[:, ::2] * phi_c, axis=1))
    align[align == 0] = 1.0
    phi_f_full = phi_f_full * align[:, None]

    lam = (4.0 * lam_f - lam_c) / 3.0
    if np.any(np.diff(lam) <= 0.0):
        raise NonIncreasingSpectrum("eigenvalues are not strictly increasing; refine the grid")

    phi = (4.0 * phi_f_full[:, ::2] - phi_c) / 3.0
    scale = 1.0 / np.sqrt(simpson(phi**2, x=x, axis=1))
    phi = phi * scale[:, None]

    def richardson(coarse, fine):
        return (4.0 * fine - coarse) / 3.0 * scale

    phi0 = phi[:, 0].copy()
    phi1 = phi[:, -1].copy()
    if plant.s1 > _SIN_TOL:
        dphi0 = plant.c1 / plant.s1 * phi0
    else:
        phi0[:] = 0.0
        dphi0 = richardson(_one_sided(phi_c, h, 0), _one_sided(phi_f_full, hf, 0))
    if plant.s2 > _SIN_TOL:
        dphi1 = -plant.c2 / plant.s2 * phi1
    else:
        phi1[:] = 0.0
        dphi1 = richardson(_one_sided(phi_c, h, 1), _one_sided(phi_f_full, hf, 1))

    q = split.q(x)
    return SpectralBasis(
        grid=x, lam=lam, phi=phi, phi0=phi0, dphi0=dphi0, phi1=phi1, dphi1=dphi1,
        lam_coarse=lam_c, lam_fine=lam_f,
        p_min=float(pv.min()), p_max=float(pv.max()), q_max=float(np.max(q)),
    )


def shape_functions(plant, split, x):
    """Lifting profiles ``a`` and ``b`` sampled on ``x``."""
    x = np.asarray(x, dtype=float)
    den = plant.shape_denominator
    a = (2.0 * plant.p(x) + 2.0 * x * plant.p.derivative(x) - x**2 * plant.q_tilde(x)) / den
    b = -(x**2) / den
    return a, b


def project(basis, f):
    """Coefficients ``<f, phi_n>`` by composite Simpson quadrature."""
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != basis.grid.size:
        raise GridMismatch(f"samples of length {f.shape[-1]} do not match grid of {basis.grid.size}")
    return simpson(basis.phi * f, x=basis.grid, axis=-1)


def project_coefficients(basis, a, b):
    return project(basis, a), project(basis, b)


@dataclass(frozen=True)
class SpectralCoefficients:
    a: np.ndarray
    b: np.ndarray
    a_n: np.ndarray
    b_n: np.ndarray
    beta_n: np.ndarray
    beta_projection: np.ndarray
    beta_discrepancy: np.ndarray
    norm_a_sq: float
    norm_b_sq: float


def boundary_input_coefficients(basis, split, a_n, b_n, plant, tol=1e-6, check_modes=20):
    """Input coefficients from the boundary traces, cross-checked by projection.

    Returns ``(beta_trace, beta_projection, discrepancy)`` where the
    discrepancy is ``|proj - trace| / (1 + |trace|)`` per mode.  Only the
    first ``check_modes`` modes are held to ``tol``; higher modes are
    under-resolved by any fixed grid and are reported, not enforced.
    """
    beta_trace = float(plant.p(1.0)) * (-plant.c2 * basis.dphi1 + plant.s2 * basis.phi1)
    beta_proj = a_n + (-basis.lam + split.q_c) * b_n
    disc = np.abs(beta_proj - beta_trace) / (1.0 + np.abs(beta_trace))
    worst = float(np.max(disc[:check_modes]))
    if worst > tol:
        n = int(np.argmax(disc[:check_modes])) + 1
        raise DualFormulaMismatch(f"input coefficient formulas disagree by {worst:.3e} at n={n} (tol {tol:g})")
    return beta_trace, beta_proj, disc


def spectral_coefficients(basis, split, plant, tol=1e-6, check_modes=20):
    a, b = shape_functions(plant, split, basis.grid)
    a_n, b_n = project_coefficients(basis, a, b)
    beta, beta_proj, disc = boundary_input_coefficients(basis, split, a_n, b_n, plant, tol, check_modes)
    return SpectralCoefficients(
        a=a, b=b, a_n=a_n, b_n=b_n, beta_n=beta, beta_projection=beta_proj, beta_discrepancy=disc,
        norm_a_sq=float(simpson(a**2, x=basis.grid)), norm_b_sq=float(simpson(b**2, x=basis.grid)),
    )


@dataclass(frozen=True)
class TailQuantities:
    n: int
    tail_a: float
    tail_b: float
    m_phi: float
    m_phi_eps: Optional[float]
    eps: Optional[float]
    m_phi_remainder: float
    m_phi_eps_remainder: Optional[float]


def _remainder_window(m_modes):
    return max(10, m_modes // 10)


def tail_quantities(basis, coeffs, n, eps=None, max_remainder_ratio=0.1):
    """Tail norms and boundary-trace sums beyond the truncation order ``n``.

    ``tail_a``/``tail_b`` use the Parseval difference.  The trace sums run to
    the last computed mode and add an analytic remainder built from
    ``lambda_k >= pi^2 (k-1)^2 p_min``; the sum is rejected when that
    remainder exceeds ``max_remainder_ratio`` of the computed part.
    """
    m = basis.m_modes
    if not 1 <= n < m:
        raise InsufficientModes(f"truncation order {n} needs 1 <= N < {m} computed modes")
    tail_a = max(0.0, coeffs.norm_a_sq - float(np.sum(coeffs.a_n[:n] ** 2)))
    tail_b = max(0.0, coeffs.norm_b_sq - float(np.sum(coeffs.b_n[:n] ** 2)))

    lam = basis.lam
    win = slice(max(n, m - _remainder_window(m)), m)
    # sum_{k > m} 1/(pi^2 (k-1)^2 p_min) = zeta(2, m) / (pi^2 p_min)
    trunc = float(np.sum(basis.phi0[n:] ** 2 / lam[n:]))
    rem = float(np.max(basis.phi0[win] ** 2)) * zeta(2.0, m) / (np.pi**2 * basis.p_min)
    if rem > max_remainder_ratio * trunc:
        raise InsufficientModes(
            f"Dirichlet trace sum remainder {rem:.3e} exceeds {max_remainder_ratio:g} of truncated sum {trunc:.3e}")
    m_phi = trunc + rem

    m_phi_eps = rem_eps = None
    if eps is not None:
        if not 0.0 < eps <= 0.5:
            raise ValueError("eps must lie in (0, 1/2]")
        trunc_e = float(np.sum(basis.dphi0[n:] ** 2 / lam[n:] ** (1.5 + eps)))
        growth = float(np.max(basis.dphi0[win] ** 2 / lam[win]))
        rem_eps = growth * zeta(1.0 + 2.0 * eps, m) / (np.pi**2 * basis.p_min) ** (0.5 + eps)
        if rem_eps > max_remainder_ratio * trunc_e:
            raise InsufficientModes(
                f"Neumann trace sum remainder {rem_eps:.3e} exceeds {max_remainder_ratio:g} "
                f"of truncated sum {trunc_e:.3e} (eps={eps:g})")
        m_phi_eps = trunc_e + rem_eps
    return TailQuantities(n, tail_a, tail_b, m_phi, m_phi_eps, eps, rem, rem_eps)


def energy_identity(basis, split, plant, coords):
    """Compare ``sum lam_n c_n^2`` with the quadratic form of ``f = sum c_n phi_n``.

    The quadratic form is ``int p f'^2 + q f^2`` plus the Robin boundary
    contributions ``p(0) cot(theta1) f(0)^2 + p(1) cot(theta2) f(1)^2``
    (which vanish for pure Dirichlet or Neumann ends).
    """
    c = np.asarray(coords, dtype=float)
    k = c.size
    x = basis.grid
    f = c @ basis.phi[:k]
    df = np.gradient(f, x, edge_order=2)
    form = simpson(plant.p(x) * df**2 + split.q(x) * f**2, x=x)
    if plant.s1 > _SIN_TOL:
        form += float(plant.p(0.0)) * plant.c1 / plant.s1 * f[0] ** 2
    if plant.s2 > _SIN_TOL:
        form += float(plant.p(1.0)) * plant.c2 / plant.s2 * f[-1] ** 2
    return float(np.sum(basis.lam[:k] * c**2)), float(form)


@dataclass(frozen=True)
class PlantModel:
    """Plant description together with its spectral data."""

    plant: PlantSpec
    split: ShiftSplit
    basis: SpectralBasis
    coeffs: SpectralCoefficients = field(repr=False)

    @property
    def q_c(self):
        return self.split.q_c


def build_plant_model(plant, margin=1.0, m_modes=400, grid_size=2001, beta_tol=1e-6, check_modes=20):
    plant.validate(grid=np.linspace(0.0, 1.0, grid_size))
    split = split_reaction(plant.q_tilde, margin, np.linspace(0.0, 1.0, grid_size))
    basis = solve_eigen(plant, split, m_modes, grid_size)
    coeffs = spectral_coefficients(basis, split, plant, beta_tol, min(check_modes, m_modes))
    return PlantModel(plant, split, basis, coeffs)
