"""Dense strictly-convex QP solver (dual active-set, Goldfarb-Idnani).

Solves   min 1/2 x' H x + f' x
         s.t. A_eq x = b_eq,  A_ineq x <= b_ineq

starting from the unconstrained minimizer and adding violated constraints
one at a time, so no feasible starting point is required. Equality
constraints are added first and never dropped (their duals are unsigned).
The contract is the KKT residuals: stationarity <= 1e-7, primal
feasibility <= 1e-8, complementary slackness <= 1e-7 on reported optima.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError


class QpError(RuntimeError):
    pass


@dataclass
class QpSolution:
    x: np.ndarray
    status: str                    # "optimal" | "infeasible" | "iteration_limit"
    duals_ineq: np.ndarray
    duals_eq: np.ndarray
    iterations: int
    active_set: list = field(default_factory=list)


def _factor(H: np.ndarray, reg: float):
    H = (H + H.T) / 2.0
    try:
        return cho_factor(H, lower=True), H
    except LinAlgError:
        Hr = H + reg * np.eye(H.shape[0])
        return cho_factor(Hr, lower=True), Hr


def qp_solve(H, f, A_ineq=None, b_ineq=None, A_eq=None, b_eq=None,
             tol: float = 1e-9, max_iter: Optional[int] = None,
             reg: float = 1e-9) -> QpSolution:
    H = np.asarray(H, dtype=float)
    f = np.asarray(f, dtype=float)
    n = f.shape[0]
    A_in = np.zeros((0, n)) if A_ineq is None else np.asarray(A_ineq, dtype=float)
    b_in = np.zeros(0) if b_ineq is None else np.asarray(b_ineq, dtype=float)
    A_e = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, dtype=float)
    b_e = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float)
    m_in, m_eq = A_in.shape[0], A_e.shape[0]
    if max_iter is None:
        max_iter = 50 * (n + m_in + m_eq + 10)

    L, _ = _factor(H, reg)
    x = -cho_solve(L, f)

    # Active set bookkeeping. Indices 0..m_eq-1 are equalities (normals may be
    # sign-flipped on entry; the flip is recorded to restore dual signs).
    act_idx: list[int] = []
    # Column buffers for the active normals N and cached W = H^{-1} N
    # (valid while L is fixed); m_act tracks the live column count.
    N_buf = np.empty((n, n + m_eq))
    W_buf = np.empty((n, n + m_eq))
    m_act = 0
    act_u: list[float] = []
    eq_flip = np.ones(m_eq)

    scale = 1.0 + max(np.max(np.abs(b_in), initial=0.0), np.max(np.abs(b_e), initial=0.0))
    iters = 0

    def pick_violated():
        # Equalities not yet active take priority.
        for j in range(m_eq):
            if j not in act_idx:
                return j
        if m_in == 0:
            return None
        s = A_in @ x - b_in
        mask = np.ones(m_in, dtype=bool)
        for j in act_idx:
            if j >= m_eq:
                mask[j - m_eq] = False
        s = np.where(mask, s, -np.inf)
        p = int(np.argmax(s))
        if s[p] > tol * scale:
            return m_eq + p
        return None

    while iters < max_iter:
        pidx = pick_violated()
        if pidx is None:
            break
        # Normal in ">=" convention: constraint is n_p . x >= d_p.
        if pidx < m_eq:
            n_p, d_p = A_e[pidx].copy(), b_e[pidx]
            if n_p @ x > d_p:
                n_p, d_p = -n_p, -d_p
                eq_flip[pidx] = -1.0
            is_eq = True
        else:
            n_p, d_p = -A_in[pidx - m_eq], -b_in[pidx - m_eq]
            is_eq = False
        u_p = 0.0
        Hin = cho_solve(L, n_p)

        while True:
            iters += 1
            if iters > max_iter:
                return QpSolution(x, "iteration_limit", *_duals(m_in, m_eq, act_idx, act_u, eq_flip), iters)
            if m_act:
                N = N_buf[:, :m_act]
                W = W_buf[:, :m_act]
                M = N.T @ W
                try:
                    r = np.linalg.solve(M, N.T @ Hin)
                except np.linalg.LinAlgError:
                    r = np.linalg.lstsq(M, N.T @ Hin, rcond=None)[0]
                z = Hin - W @ r
            else:
                r = np.zeros(0)
                z = Hin

            # Dual blocking step (only droppable, i.e. inequality, constraints).
            t1, blk = np.inf, -1
            for j, (idx, uj, rj) in enumerate(zip(act_idx, act_u, r)):
                if idx >= m_eq and rj > tol:
                    tj = uj / rj
                    if tj < t1:
                        t1, blk = tj, j
            ztn = float(z @ n_p)
            slack = d_p - float(n_p @ x)
            t2 = slack / ztn if ztn > tol else np.inf

            if not np.isfinite(t1) and not np.isfinite(t2):
                status = "infeasible"
                return QpSolution(x, status, *_duals(m_in, m_eq, act_idx, act_u, eq_flip), iters)
            t = min(t1, t2)
            if np.isfinite(t2):
                x = x + t * z
            for j in range(len(act_u)):
                act_u[j] -= t * r[j]
            u_p += t

            if t2 <= t1:
                act_idx.append(pidx)
                N_buf[:, m_act] = n_p
                W_buf[:, m_act] = Hin
                m_act += 1
                act_u.append(u_p)
                break
            # Drop the blocking constraint and retry with the same target.
            N_buf[:, blk:m_act - 1] = N_buf[:, blk + 1:m_act]
            W_buf[:, blk:m_act - 1] = W_buf[:, blk + 1:m_act]
            m_act -= 1
            del act_idx[blk], act_u[blk]
    else:
        return QpSolution(x, "iteration_limit", *_duals(m_in, m_eq, act_idx, act_u, eq_flip), iters)

    duals_in, duals_eq = _duals(m_in, m_eq, act_idx, act_u, eq_flip)
    return QpSolution(x, "optimal", duals_in, duals_eq, iters, active_set=sorted(act_idx))


def _duals(m_in, m_eq, act_idx, act_u, eq_flip):
    duals_in = np.zeros(m_in)
    duals_eq = np.zeros(m_eq)
    for idx, u in zip(act_idx, act_u):
        if idx < m_eq:
            # Stationarity is written as H x + f + A_eq' duals_eq = 0.
            duals_eq[idx] = -eq_flip[idx] * u
        else:
            duals_in[idx - m_eq] = u
    return duals_in, duals_eq


def kkt_residuals(H, f, sol: QpSolution, A_ineq=None, b_ineq=None, A_eq=None, b_eq=None):
    """(stationarity, primal feasibility, complementary slackness) residuals."""
    H = np.asarray(H, dtype=float)
    f = np.asarray(f, dtype=float)
    x = sol.x
    g = H @ x + f
    feas = 0.0
    comp = 0.0
    if A_ineq is not None and len(b_ineq):
        A_in = np.asarray(A_ineq, dtype=float)
        s = A_in @ x - np.asarray(b_ineq, dtype=float)
        feas = max(feas, float(np.max(s, initial=0.0)))
        g = g + A_in.T @ sol.duals_ineq
        comp = float(np.max(np.abs(sol.duals_ineq * s), initial=0.0))
    if A_eq is not None and len(b_eq):
        A_e = np.asarray(A_eq, dtype=float)
        feas = max(feas, float(np.max(np.abs(A_e @ x - np.asarray(b_eq, dtype=float)), initial=0.0)))
        g = g + A_e.T @ sol.duals_eq
    return float(np.max(np.abs(g))), feas, comp
