"""Dense two-phase tableau simplex with Bland's pivoting rule.

Small and deterministic; used for the transportation problems and the
worst-case expectation LPs, which stay below ~1100 columns.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InfeasibleError(ValueError):
    """Raised when the feasible region of a linear program is empty."""


class UnboundedError(ValueError):
    """Raised when the objective is unbounded below."""


@dataclass
class LPResult:
    x: np.ndarray
    fun: float
    # dual values for A_eq rows then A_ub rows; zero for dropped redundant rows
    duals: np.ndarray
    basis: np.ndarray
    n_pivots: int


def _pivot(T: np.ndarray, row: int, col: int) -> None:
    T[row] /= T[row, col]
    colv = T[:, col].copy()
    colv[row] = 0.0
    T -= np.outer(colv, T[row])


def _run(T, basis, n_cols, tol, max_pivots):
    """Bland's rule on tableau T whose last row holds reduced costs."""
    m = T.shape[0] - 1
    pivots = 0
    while True:
        reduced = T[m, :n_cols]
        candidates = np.nonzero(reduced < -tol)[0]
        if candidates.size == 0:
            return pivots
        col = int(candidates[0])
        colv = T[:m, col]
        pos = np.nonzero(colv > tol)[0]
        if pos.size == 0:
            raise UnboundedError("objective unbounded")
        ratios = T[pos, -1] / colv[pos]
        best = ratios.min()
        ties = pos[ratios <= best + tol * max(1.0, abs(best))]
        row = int(ties[np.argmin(basis[ties])])
        _pivot(T, row, col)
        basis[row] = col
        pivots += 1
        if pivots > max_pivots:
            raise RuntimeError("simplex exceeded pivot limit")


def linprog(c, A_eq=None, b_eq=None, A_ub=None, b_ub=None, *, tol=1e-11,
            feas_tol=1e-9, max_pivots=100_000) -> LPResult:
    """Minimise ``c @ x`` subject to ``A_eq x = b_eq``, ``A_ub x <= b_ub``, ``x >= 0``."""
    c = np.asarray(c, dtype=float)
    n = c.size
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, float))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, float).ravel()
    A_ub = np.zeros((0, n)) if A_ub is None else np.atleast_2d(np.asarray(A_ub, float))
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, float).ravel()
    m_eq, m_ub = A_eq.shape[0], A_ub.shape[0]
    m = m_eq + m_ub

    # standard form [A_eq 0; A_ub I] [x; s] = b
    A = np.zeros((m, n + m_ub))
    A[:m_eq, :n] = A_eq
    A[m_eq:, :n] = A_ub
    A[m_eq:, n:] = np.eye(m_ub)
    b = np.concatenate([b_eq, b_ub])
    sign = np.where(b < 0, -1.0, 1.0)
    A *= sign[:, None]
    b = b * sign
    n_std = n + m_ub

    # slack columns with +1 after sign flip serve as the starting basis
    basis = np.full(m, -1, dtype=int)
    for k in range(m_ub):
        if sign[m_eq + k] > 0:
            basis[m_eq + k] = n + k
    need_art = np.nonzero(basis < 0)[0]
    n_art = need_art.size
    T = np.zeros((m + 1, n_std + n_art + 1))
    T[:m, :n_std] = A
    T[:m, -1] = b
    for k, r in enumerate(need_art):
        T[r, n_std + k] = 1.0
        basis[r] = n_std + k

    pivots = 0
    if n_art:
        # phase 1: minimise the sum of artificials
        T[m, n_std:n_std + n_art] = 1.0
        for r in need_art:
            T[m] -= T[r]
        pivots += _run(T, basis, n_std + n_art, tol, max_pivots)
        if -T[m, -1] > feas_tol:
            raise InfeasibleError("linear program is infeasible")
        # drive zero-level artificials out; drop rows that are redundant
        keep = np.ones(m, dtype=bool)
        for r in range(m):
            if basis[r] >= n_std:
                nz = np.nonzero(np.abs(T[r, :n_std]) > 1e-9)[0]
                if nz.size:
                    _pivot(T, r, int(nz[0]))
                    basis[r] = int(nz[0])
                    pivots += 1
                else:
                    keep[r] = False
        T = np.concatenate([T[:m][keep][:, :n_std], T[:m][keep][:, -1:]], axis=1)
        T = np.vstack([T, np.zeros((1, n_std + 1))])
        basis = basis[keep]
        rows_kept = np.nonzero(keep)[0]
    else:
        T = np.concatenate([T[:, :n_std], T[:, -1:]], axis=1)
        rows_kept = np.arange(m)
    mk = basis.size

    # phase 2
    cost = np.concatenate([c, np.zeros(m_ub)])
    T[mk, :n_std] = cost
    T[mk, -1] = 0.0
    for r in range(mk):
        T[mk] -= cost[basis[r]] * T[r]
    pivots += _run(T, basis, n_std, tol, max_pivots)

    # re-solve the final basis against the original data for accuracy
    B = A[rows_kept][:, basis]
    xb = np.linalg.solve(B, b[rows_kept])
    xb[np.abs(xb) < 1e-15] = 0.0
    xb = np.maximum(xb, 0.0)
    x = np.zeros(n_std)
    x[basis] = xb
    y_kept = np.linalg.solve(B.T, cost[basis])
    duals = np.zeros(m)
    duals[rows_kept] = y_kept * sign[rows_kept]
    return LPResult(x=x[:n], fun=float(c @ x[:n]), duals=duals, basis=basis.copy(),
                    n_pivots=pivots)
