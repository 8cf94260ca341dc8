"""Stability certificates for the truncated closed loop.

For a given observer order ``n`` the closed loop is exponentially stable at
rate ``delta`` in H1 norm when there are ``P > 0``, ``alpha > 1`` and
``beta, gamma > 0`` (plus ``eps`` for a Neumann measurement, ``Q1, Q2`` with
an input delay) making the matrix ``theta1`` negative semidefinite and the
scalar conditions hold.  ``P`` is pinned to the solution of
``F' P + P F + 2 delta P = -I`` (up to a scalar multiple); the remaining
scalars are searched on a deterministic grid.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import schur

from .errors import BudgetExceeded, IllConditioned, InsufficientModes, NotHurwitz
from .spectral import tail_quantities
from .synthesis import Variant, spectral_abscissa

CERTIFIED = "Certified"
INFEASIBLE = "Infeasible"


def _quasi_triangular_blocks(t):
    n = t.shape[0]
    blocks, i = [], 0
    while i < n:
        if i + 1 < n and t[i + 1, i] != 0.0:
            blocks.append(slice(i, i + 2))
            i += 2
        else:
            blocks.append(slice(i, i + 1))
            i += 1
    return blocks


def _solve_schur_lyapunov(t, c):
    # T Y + Y T' = C, T quasi upper triangular; sweep block columns right to left
    n = t.shape[0]
    y = np.zeros_like(c)
    blocks = _quasi_triangular_blocks(t)
    eye = np.eye(n)
    for jb in reversed(range(len(blocks))):
        J = blocks[jb]
        rhs = c[:, J].copy()
        for K in blocks[jb + 1:]:
            rhs -= y[:, K] @ t[J, K].T
        tjj = t[J, J]
        s = tjj.shape[0]
        if s == 1:
            y[:, J] = np.linalg.solve(t + tjj[0, 0] * eye, rhs)
        else:
            # column-major vec: (I_s kron T + T_JJ kron I_n) vec(Y_J) = vec(rhs)
            op = np.kron(np.eye(s), t) + np.kron(tjj, eye)
            y[:, J] = np.linalg.solve(op, rhs.reshape(-1, order="F")).reshape((n, s), order="F")
    return y


def solve_lyapunov(f, delta, cond_limit=1e12):
    """Symmetric ``P > 0`` with ``F' P + P F + 2 delta P = -I``.

    Bartels-Stewart: real Schur form of ``(F + delta I)'`` followed by block
    back-substitution.
    """
    f = np.asarray(f, dtype=float)
    n = f.shape[0]
    g = f + delta * np.eye(n)
    absc = spectral_abscissa(g)
    if absc >= 0.0:
        raise NotHurwitz(f"F + delta I has spectral abscissa {absc:.6g} >= 0")
    t, u = schur(g.T, output="real")
    y = _solve_schur_lyapunov(t, -np.eye(n))
    p = u @ y @ u.T
    p = 0.5 * (p + p.T)
    cond = 2.0 * np.linalg.norm(g, 2) * np.linalg.norm(p, 2)
    if not np.isfinite(cond) or cond > cond_limit:
        raise IllConditioned(f"Lyapunov operator condition estimate {cond:.3e} exceeds {cond_limit:.0e}")
    return p


def lyapunov_residual(f, delta, p):
    """``||F' P + P F + 2 delta P + I||_F / ||P||_F``."""
    n = f.shape[0]
    r = f.T @ p + p @ f + 2.0 * delta * p + np.eye(n)
    return float(np.linalg.norm(r) / np.linalg.norm(p))


@dataclass
class CertificateProblem:
    reduced: object  # synthesis.ReducedMatrices
    delta: float
    tail_a: float
    tail_b: float
    m_phi: float
    lambda_next: float
    q_c: float
    variant: Variant
    h_o: float
    h_i: float = 0.0
    m_phi_eps: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def n(self):
        return self.reduced.n

    @property
    def size(self):
        return 2 * self.reduced.n


def build_problem(design, n, eps_values=(0.125, 0.25, 0.5), max_remainder_ratio=0.1):
    """Assemble the certification data for observer order ``n``.

    Neumann tail sums that cannot be bounded with the computed modes are
    dropped from ``m_phi_eps`` and reported in ``notes``.
    """
    params = design.params
    model = design.model
    reduced = design.reduced(n)
    tails = tail_quantities(model.basis, model.coeffs, n, None, max_remainder_ratio)
    problem = CertificateProblem(
        reduced=reduced, delta=params.delta, tail_a=tails.tail_a, tail_b=tails.tail_b,
        m_phi=tails.m_phi, lambda_next=float(model.basis.lam[n]), q_c=model.q_c,
        variant=params.variant, h_o=params.h_o, h_i=params.h_i,
    )
    if params.variant is Variant.NEUMANN:
        for eps in eps_values:
            try:
                t = tail_quantities(model.basis, model.coeffs, n, eps, max_remainder_ratio)
            except InsufficientModes as exc:
                problem.notes.append(f"N={n}: eps={eps:g} skipped ({exc})")
                continue
            problem.m_phi_eps[float(eps)] = t.m_phi_eps
    return problem


def _theta1_parts(problem, p, alpha):
    """Split theta1 as ``T0 + gamma * Tg - beta * c * e e'`` (default Q1, Q2)."""
    r = problem.reduced
    d = problem.size
    f = r.f
    t0 = np.zeros((d + 1, d + 1))
    t0[:d, :d] = f.T @ p + p @ f + 2.0 * problem.delta * p
    pl = p @ r.lcal
    t0[:d, d] = pl
    t0[d, :d] = pl
    tg = np.zeros((d + 1, d + 1))
    tg[:d, :d] = problem.tail_a * np.outer(r.ktilde, r.ktilde)
    tg += problem.tail_b * np.outer(r.e, r.e)
    tg *= alpha
    if problem.variant is Variant.JOINT:
        tg *= math.exp(2.0 * problem.delta * problem.h_i)
    corner = math.exp(-2.0 * problem.delta * problem.h_o)
    return t0, tg, corner


def default_q(problem, alpha, gamma):
    """Input-delay multipliers that make ``R1`` and ``R2`` vanish identically."""
    k = problem.reduced.k
    w = math.exp(2.0 * problem.delta * problem.h_i) * alpha * gamma
    return w * problem.tail_a * np.outer(k, k), w * problem.tail_b


def evaluate_theta1(problem, p, alpha, beta, gamma, q1=None, q2=None):
    """The matrix ``theta1`` and its largest eigenvalue."""
    r = problem.reduced
    d = problem.size
    p = np.asarray(p, dtype=float)
    if p.shape != (d, d):
        raise ValueError(f"P must be {d}x{d}")
    f = r.f
    th = np.zeros((d + 1, d + 1))
    th[:d, :d] = f.T @ p + p @ f + 2.0 * problem.delta * p
    pl = p @ r.lcal
    th[:d, d] = pl
    th[d, :d] = pl
    th[d, d] = -beta * math.exp(-2.0 * problem.delta * problem.h_o)
    if problem.variant is Variant.JOINT:
        if q1 is None or q2 is None:
            q1, q2 = default_q(problem, alpha, gamma)
        n0 = r.n0
        th[:n0, :n0] += np.asarray(q1, dtype=float).reshape(n0, n0)
        th += float(q2) * np.outer(r.e, r.e)
    else:
        th[:d, :d] += alpha * gamma * problem.tail_a * np.outer(r.ktilde, r.ktilde)
        th += alpha * gamma * problem.tail_b * np.outer(r.e, r.e)
    th = 0.5 * (th + th.T)
    return th, float(np.linalg.eigvalsh(th)[-1])


def evaluate_theta2_theta3(problem, alpha, beta, gamma, eps=None):
    lam = problem.lambda_next
    bracket = -(1.0 - 1.0 / alpha) * lam + problem.q_c + problem.delta
    if problem.variant is Variant.NEUMANN:
        if eps is None or not 0.0 < eps <= 0.5:
            raise ValueError("a Neumann measurement needs eps in (0, 1/2]")
        m = problem.m_phi_eps[float(eps)]
        theta2 = 2.0 * gamma * bracket + beta * m * lam ** (0.5 + eps)
        theta3 = 2.0 * gamma * (1.0 - 1.0 / alpha) - beta * m / lam ** (0.5 - eps)
        return theta2, theta3
    return 2.0 * gamma * bracket + beta * problem.m_phi, None


def evaluate_r1_r2(problem, alpha, gamma, q1, q2):
    """Input-delay conditions: ``R1`` (matrix) with its top eigenvalue, and ``R2``.

    ``Q2`` is the scalar weight of ``E' E`` (``E`` already contains ``K``), so
    ``R2`` is scalar.
    """
    k = problem.reduced.k
    w = math.exp(-2.0 * problem.delta * problem.h_i)
    r1 = -w * np.asarray(q1, dtype=float) + alpha * gamma * problem.tail_a * np.outer(k, k)
    r2 = -w * float(q2) + alpha * gamma * problem.tail_b
    return r1, float(np.linalg.eigvalsh(0.5 * (r1 + r1.T))[-1]), r2


def psd_tolerance(theta1):
    return 1e-9 * (1.0 + float(np.max(np.abs(np.linalg.eigvalsh(theta1)))))


@dataclass
class SearchConfig:
    alphas: Sequence[float] = (1.5, 2.0, 4.0, 8.0)
    eps_values: Sequence[float] = (0.125, 0.25, 0.5)
    points_per_decade: int = 13
    decades: tuple = (-4.0, 4.0)
    p_scales: Sequence[float] = (1.0, 0.1, 10.0, 0.01, 100.0, 1e-3, 1e3)
    n_max: int = 40
    n_min: Optional[int] = None
    max_remainder_ratio: float = 0.1

    def grid(self):
        lo, hi = self.decades
        count = int(round((hi - lo) * self.points_per_decade)) + 1
        return np.logspace(lo, hi, count)


def recipe(variant, n):
    """Scalings used in the feasibility argument: (beta, gamma)."""
    if variant is Variant.NEUMANN:
        return n ** 0.125, n ** (-0.1875)
    return math.sqrt(n), 1.0 / n


@dataclass
class CertificateReport:
    status: str
    variant: str
    delta: float
    n: Optional[int]
    alpha: Optional[float] = None
    beta: Optional[float] = None
    gamma: Optional[float] = None
    eps: Optional[float] = None
    p_scale: Optional[float] = None
    p_matrix: Optional[np.ndarray] = None
    q1: Optional[np.ndarray] = None
    q2: Optional[float] = None
    theta1_max_eig: Optional[float] = None
    theta2: Optional[float] = None
    theta3: Optional[float] = None
    r1_max_eig: Optional[float] = None
    r2: Optional[float] = None
    lyap_residual: Optional[float] = None
    violation: Optional[float] = None
    orders_tried: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def certified(self):
        return self.status == CERTIFIED

    def to_dict(self):
        out = asdict(self)
        for key in ("p_matrix", "q1"):
            if out[key] is not None:
                out[key] = np.asarray(out[key]).tolist()
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        for key in ("p_matrix", "q1"):
            if data.get(key) is not None:
                data[key] = np.asarray(data[key], dtype=float)
        return cls(**data)

    def summary(self):
        lines = [f"status: {self.status}", f"variant: {self.variant}", f"delta: {self.delta:g}"]
        if self.n is not None:
            lines.append(f"observer order N: {self.n}")
        for name in ("alpha", "beta", "gamma", "eps", "p_scale", "q2", "theta1_max_eig",
                     "theta2", "theta3", "r1_max_eig", "r2", "lyap_residual", "violation"):
            val = getattr(self, name)
            if val is not None:
                lines.append(f"{name}: {val:.10g}")
        if self.orders_tried:
            lines.append("orders tried: " + ", ".join(map(str, self.orders_tried)))
        lines += [f"note: {s}" for s in self.notes]
        return "\n".join(lines)


def evaluate_point(problem, p, alpha, beta, gamma, eps=None, q1=None, q2=None):
    """Every condition value at one candidate, plus the status it implies."""
    if problem.variant is Variant.JOINT and (q1 is None or q2 is None):
        q1, q2 = default_q(problem, alpha, gamma)
    th1, th1_max = evaluate_theta1(problem, p, alpha, beta, gamma, q1, q2)
    th2, th3 = evaluate_theta2_theta3(problem, alpha, beta, gamma, eps)
    vals = {"theta1_max_eig": th1_max, "theta2": th2, "theta3": th3,
            "r1_max_eig": None, "r2": None, "q1": None, "q2": None}
    ok = th1_max <= psd_tolerance(th1) and th2 <= 0.0
    ok = ok and alpha > 1.0 and beta > 0.0 and gamma > 0.0
    ok = ok and float(np.linalg.eigvalsh(p)[0]) > 0.0
    viol = [th1_max, th2]
    if problem.variant is Variant.NEUMANN:
        ok = ok and th3 >= 0.0 and 0.0 < eps <= 0.5
        viol.append(-th3)
    if problem.variant is Variant.JOINT:
        _, r1_max, r2 = evaluate_r1_r2(problem, alpha, gamma, q1, q2)
        tol = 1e-12 * (1.0 + abs(alpha * gamma * max(problem.tail_a, problem.tail_b)))
        ok = ok and r1_max <= tol and r2 <= tol
        ok = ok and float(np.linalg.eigvalsh(np.atleast_2d(q1))[0]) >= -tol and q2 >= 0.0
        vals.update(r1_max_eig=r1_max, r2=r2, q1=np.atleast_2d(q1), q2=float(q2))
        viol += [r1_max, r2]
    vals["violation"] = float(max(viol))
    vals["status"] = CERTIFIED if ok else INFEASIBLE
    return vals


def revalidate(report, problem):
    """Recompute every condition from the scalars and P stored in ``report``."""
    return evaluate_point(problem, report.p_matrix, report.alpha, report.beta, report.gamma,
                          report.eps, report.q1, report.q2)


def _search_order(problem, p_lyap, config, best):
    """Scan (alpha, eps, scale, gamma, beta) in grid order; first certified point or None.

    Feasibility of ``theta1 <= 0`` only improves with beta while the scalar
    conditions only degrade, so for each gamma the first feasible beta of the
    ascending grid is located by bisection.
    """
    n = problem.n
    grid = config.grid()
    beta_rec, gamma_rec = recipe(problem.variant, n)
    betas, gammas = beta_rec * grid, gamma_rec * grid
    eps_list = [None]
    if problem.variant is Variant.NEUMANN:
        eps_list = [float(e) for e in config.eps_values if float(e) in problem.m_phi_eps]
    last = problem.size
    for alpha in config.alphas:
        t0_unit, tg, corner = _theta1_parts(problem, p_lyap, alpha)
        for eps in eps_list:
            for scale in config.p_scales:
                t0 = scale * t0_unit
                # theta1 stack for every gamma at a given beta index
                def theta1_max(gi, bi):
                    th = t0[None] + gammas[gi, None, None] * tg[None]
                    th[:, last, last] -= betas[bi] * corner
                    ev = np.linalg.eigvalsh(th)
                    tol = 1e-9 * (1.0 + np.max(np.abs(ev), axis=1))
                    return ev[:, -1], ev[:, -1] <= tol

                gi = np.arange(gammas.size)
                lo = np.zeros(gi.size, dtype=int)
                hi = np.full(gi.size, betas.size)  # hi == size: no feasible beta
                top_val, top_ok = theta1_max(gi, np.full(gi.size, betas.size - 1))
                hi[top_ok] = betas.size - 1
                active = top_ok.copy()
                while np.any(active & (lo < hi)):
                    sel = np.flatnonzero(active & (lo < hi))
                    mid = (lo[sel] + hi[sel]) // 2
                    _, ok = theta1_max(sel, mid)
                    hi[sel[ok]] = mid[ok]
                    lo[sel[~ok]] = mid[~ok] + 1
                for g in range(gammas.size):
                    if not top_ok[g]:
                        cand = (float(top_val[g]), alpha, betas[-1], gammas[g], eps, scale)
                        best = _track(best, problem, p_lyap, cand)
                        continue
                    b = betas[hi[g]]
                    vals = evaluate_point(problem, scale * p_lyap, alpha, b, gammas[g], eps)
                    best = _track(best, problem, p_lyap, (vals["violation"], alpha, b, gammas[g], eps, scale))
                    if vals["status"] == CERTIFIED:
                        return (alpha, b, gammas[g], eps, scale, vals), best
    return None, best


def _track(best, problem, p_lyap, cand):
    if best is None or cand[0] < best[0][0]:
        return (cand, problem, p_lyap)
    return best


def certify(design, config=None, strict=False, progress=None):
    """Escalate the observer order until the conditions are met.

    Returns the first certified report in deterministic grid order, or an
    infeasible report carrying the least-violating point seen.  With
    ``strict=True`` an exhausted budget raises ``BudgetExceeded`` instead.
    """
    config = config or SearchConfig()
    params = design.params
    n_start = max(design.n0 + 1, config.n_min or 0)
    report = CertificateReport(status=INFEASIBLE, variant=params.variant.value, delta=params.delta, n=None)
    best = None
    for n in range(n_start, config.n_max + 1):
        report.orders_tried.append(n)
        try:
            problem = build_problem(design, n, config.eps_values, config.max_remainder_ratio)
        except InsufficientModes as exc:
            report.notes.append(f"N={n}: {exc}")
            break
        report.notes.extend(problem.notes)
        try:
            p_lyap = solve_lyapunov(problem.reduced.f, params.delta)
        except (NotHurwitz, IllConditioned) as exc:
            report.notes.append(f"N={n}: {exc}")
            continue
        if problem.variant is Variant.NEUMANN and not problem.m_phi_eps:
            report.notes.append(f"N={n}: no admissible eps")
            continue
        hit, best = _search_order(problem, p_lyap, config, best)
        if progress is not None:
            progress(n, hit is not None)
        if hit is None:
            continue
        alpha, beta, gamma, eps, scale, vals = hit
        report.status = CERTIFIED
        report.n = n
        report.alpha, report.beta, report.gamma, report.eps = alpha, float(beta), float(gamma), eps
        report.p_scale = scale
        report.p_matrix = scale * p_lyap
        report.lyap_residual = lyapunov_residual(problem.reduced.f, params.delta, p_lyap)
        _copy_values(report, vals)
        return report

    if params.variant is Variant.JOINT:
        report.notes.append("only the default Q1, Q2 (R1 = R2 = 0) were searched")
    if best is not None:
        (viol, alpha, beta, gamma, eps, scale), problem, p_lyap = best
        vals = evaluate_point(problem, scale * p_lyap, alpha, beta, gamma, eps)
        report.n = problem.n
        report.alpha, report.beta, report.gamma, report.eps = alpha, float(beta), float(gamma), eps
        report.p_scale = scale
        report.p_matrix = scale * p_lyap
        report.lyap_residual = lyapunov_residual(problem.reduced.f, params.delta, p_lyap)
        _copy_values(report, vals)
        report.notes.append("least-violating point recorded")
    if strict:
        raise BudgetExceeded(f"no certificate up to N={config.n_max}", report=report)
    return report


def _copy_values(report, vals):
    for key in ("theta1_max_eig", "theta2", "theta3", "r1_max_eig", "r2", "q1", "q2", "violation"):
        setattr(report, key, vals[key])


def certificate_problem_for(design, report, config=None):
    config = config or SearchConfig()
    return build_problem(design, report.n, config.eps_values, config.max_remainder_ratio)


def p_boundedness_study(design, n_range):
    """Spectral norms of the Lyapunov solutions across observer orders."""
    rows = []
    for n in n_range:
        p = solve_lyapunov(design.reduced(n).f, design.params.delta)
        rows.append((n, float(np.linalg.norm(p, 2))))
    return rows


def recipe_margins(design, n_range, alpha=2.0):
    """``-max eig(theta1)`` at the textbook scaling (beta, gamma) per order."""
    out = []
    for n in n_range:
        problem = build_problem(design, n)
        p = solve_lyapunov(problem.reduced.f, design.params.delta)
        beta, gamma = recipe(problem.variant, n)
        _, top = evaluate_theta1(problem, p, alpha, beta, gamma)
        out.append((n, -top))
    return out
