"""Export certification problems in SDPA sparse format, and read them back.

The constraint is ``sum_i x_i F_i - F_0 >= 0`` (blockwise PSD).  Variables,
in order: the upper triangle of ``P`` (row major), ``beta``, ``gamma`` and,
with an input delay, the upper triangle of ``Q1`` and the scalar ``q2``.

Blocks:
  1. ``-theta1``
  2. ``diag(P - mu I, beta - mu, gamma - mu, -theta2 [, Q1, q2])``
  3. Neumann: ``theta3`` (1x1 diagonal).  Joint: ``-R1``.
  4. Joint: ``-R2`` (1x1 diagonal).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .synthesis import Variant


@dataclass
class SdpaProblem:
    block_sizes: list  # signed: negative for diagonal blocks
    c: np.ndarray
    mats: list  # mats[i][b] dense block b of F_i, i = 0..m
    names: list = field(default_factory=list)
    comments: list = field(default_factory=list)

    @property
    def m(self):
        return len(self.mats) - 1

    def constraint_blocks(self, x):
        """``sum_i x_i F_i - F_0`` per block."""
        out = [-b.copy() for b in self.mats[0]]
        for xi, blocks in zip(x, self.mats[1:]):
            for k, blk in enumerate(blocks):
                out[k] += xi * blk
        return out


def _sym_basis(n, i, j):
    e = np.zeros((n, n))
    e[i, j] = 1.0
    e[j, i] = 1.0
    return e


def _upper_pairs(n):
    return [(i, j) for i in range(n) for j in range(i, n)]


def lmi_coefficients(problem, alpha, eps=None, mu=1e-6):
    """Coefficient matrices of every block, as an :class:`SdpaProblem`."""
    r = problem.reduced
    d = problem.size
    n0 = r.n0
    joint = problem.variant is Variant.JOINT
    neumann = problem.variant is Variant.NEUMANN
    if neumann and eps is None:
        raise ValueError("a Neumann measurement needs eps")
    lam = problem.lambda_next
    bracket = -(1.0 - 1.0 / alpha) * lam + problem.q_c + problem.delta
    if neumann:
        m_eps = problem.m_phi_eps[float(eps)]
        th2_beta = m_eps * lam ** (0.5 + eps)
        th3_beta = -m_eps / lam ** (0.5 - eps)
        th3_gamma = 2.0 * (1.0 - 1.0 / alpha)
    else:
        th2_beta = problem.m_phi
    th2_gamma = 2.0 * bracket

    s2 = d + 3 + (n0 + 1 if joint else 0)
    sizes = [d + 1, s2]
    if neumann:
        sizes.append(-1)
    if joint:
        sizes += [n0, -1]
    i_beta, i_gamma, i_th2 = d, d + 1, d + 2

    def empty():
        return [np.zeros((abs(s), abs(s))) for s in sizes]

    mats, names = [], []
    f0 = empty()
    f0[1][:d, :d] = mu * np.eye(d)
    f0[1][i_beta, i_beta] = mu
    f0[1][i_gamma, i_gamma] = mu
    mats.append(f0)

    ee = np.outer(r.e, r.e)
    wi = math.exp(2.0 * problem.delta * problem.h_i)
    for i, j in _upper_pairs(d):
        b = empty()
        e = _sym_basis(d, i, j)
        th = np.zeros((d + 1, d + 1))
        th[:d, :d] = r.f.T @ e + e @ r.f + 2.0 * problem.delta * e
        el = e @ r.lcal
        th[:d, d] = el
        th[d, :d] = el
        b[0] = -th
        b[1][:d, :d] = e
        mats.append(b)
        names.append(f"P[{i + 1},{j + 1}]")

    b = empty()
    b[0][d, d] = math.exp(-2.0 * problem.delta * problem.h_o)
    b[1][i_beta, i_beta] = 1.0
    b[1][i_th2, i_th2] = -th2_beta
    if neumann:
        b[2][0, 0] = th3_beta
    mats.append(b)
    names.append("beta")

    b = empty()
    if not joint:
        tg = np.zeros((d + 1, d + 1))
        tg[:d, :d] = problem.tail_a * np.outer(r.ktilde, r.ktilde)
        tg += problem.tail_b * ee
        b[0] = -alpha * tg
    b[1][i_gamma, i_gamma] = 1.0
    b[1][i_th2, i_th2] = -th2_gamma
    if neumann:
        b[2][0, 0] = th3_gamma
    if joint:
        b[2] = -alpha * problem.tail_a * np.outer(r.k, r.k)
        b[3][0, 0] = -alpha * problem.tail_b
    mats.append(b)
    names.append("gamma")

    if joint:
        off = d + 3
        for i, j in _upper_pairs(n0):
            b = empty()
            e = _sym_basis(n0, i, j)
            b[0][:n0, :n0] = -e
            b[1][off:off + n0, off:off + n0] = e
            b[2] = e / wi
            mats.append(b)
            names.append(f"Q1[{i + 1},{j + 1}]")
        b = empty()
        b[0] = -ee
        b[1][off + n0, off + n0] = 1.0
        b[3][0, 0] = 1.0 / wi
        mats.append(b)
        names.append("q2")

    for blocks in mats:
        for k, s in enumerate(sizes):
            if s < 0:
                blocks[k] = np.diag(np.diag(blocks[k]))
    m = len(mats) - 1
    return SdpaProblem(block_sizes=sizes, c=np.zeros(m), mats=mats, names=names)


def write_sdpa(sdp, fh, header="delay-stab export"):
    """Write ``sdp`` in SDPA sparse format to an open text stream."""
    fh.write(f"* {header}\n")
    for c in sdp.comments:
        fh.write(f"* {c}\n")
    for k, name in enumerate(sdp.names, start=1):
        fh.write(f"* x{k} = {name}\n")
    fh.write(f"{sdp.m}\n{len(sdp.block_sizes)}\n")
    fh.write(" ".join(str(s) for s in sdp.block_sizes) + "\n")
    fh.write(" ".join(repr(float(v)) for v in sdp.c) + "\n")
    for i, blocks in enumerate(sdp.mats):
        for k, blk in enumerate(blocks):
            rows, cols = np.nonzero(np.triu(blk))
            for a, b in zip(rows, cols):
                fh.write(f"{i} {k + 1} {a + 1} {b + 1} {float(blk[a, b])!r}\n")


def export_sdpa(problem, alpha, path, eps=None, mu=1e-6):
    sdp = lmi_coefficients(problem, alpha, eps, mu)
    sdp.comments = [
        f"variant={problem.variant.value} N={problem.n} delta={problem.delta!r} alpha={alpha!r}"
        + (f" eps={eps!r}" if eps is not None else ""),
        "constraint: sum_i x_i F_i - F_0 >= 0",
    ]
    with open(path, "w") as fh:
        write_sdpa(sdp, fh)
    return sdp


def read_sdpa(path):
    """Parse an SDPA sparse file (comment lines start with ``*`` or ``"``)."""
    comments, names, body = [], [], []
    with open(path) as fh:
        for line in fh:
            s = line.strip()
            if not s:
                continue
            if s[0] in '*"':
                text = s[1:].strip()
                if text.startswith("x") and " = " in text:
                    names.append(text.split(" = ", 1)[1])
                else:
                    comments.append(text)
                continue
            body.append(s.replace(",", " ").replace("{", " ").replace("}", " ").replace("(", " ").replace(")", " "))
    m = int(body[0].split()[0])
    nb = int(body[1].split()[0])
    sizes = [int(t) for t in body[2].split()[:nb]]
    c = np.array([float(t) for t in body[3].split()[:m]])
    mats = [[np.zeros((abs(s), abs(s))) for s in sizes] for _ in range(m + 1)]
    for s in body[4:]:
        i, k, a, b, v = s.split()[:5]
        i, k, a, b, v = int(i), int(k) - 1, int(a) - 1, int(b) - 1, float(v)
        mats[i][k][a, b] = v
        mats[i][k][b, a] = v
    if comments and comments[0] == "delay-stab export":
        comments = comments[1:]
    return SdpaProblem(block_sizes=sizes, c=c, mats=mats, names=names, comments=comments)


def unpack(problem, x):
    """Split a variable vector into ``(P, beta, gamma, Q1, q2)``."""
    d = problem.size
    x = np.asarray(x, dtype=float)
    p = np.zeros((d, d))
    pos = 0
    for i, j in _upper_pairs(d):
        p[i, j] = p[j, i] = x[pos]
        pos += 1
    beta, gamma = x[pos], x[pos + 1]
    pos += 2
    q1 = q2 = None
    if problem.variant is Variant.JOINT:
        n0 = problem.reduced.n0
        q1 = np.zeros((n0, n0))
        for i, j in _upper_pairs(n0):
            q1[i, j] = q1[j, i] = x[pos]
            pos += 1
        q2 = x[pos]
    return p, float(beta), float(gamma), q1, q2
