"""Exact tabular robust Bellman operators over optimal transport balls.

Every (s, a) pair carries its own ball ``{p : OTC_d(p_hat, p) <= eps}``
around the nominal next-state distribution (rectangular uncertainty). The
inner worst case is available both as an LP over couplings (primal) and as
a one-dimensional convex problem over the multiplier of the budget (dual).
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .simplex import linprog

REWARD = "reward"
COST = "cost"
INF_DIR = "inf"
SUP_DIR = "sup"

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class RCMDPError(ValueError):
    pass


@dataclass
class DiscreteRCMDP:
    """Finite robust constrained MDP with per-(s, a) optimal transport balls.

    ``nominal[s, a]`` is the nominal next-state distribution, ``radius[s, a]``
    the ball radius and ``cost_matrix`` either one ``(S, S)`` matrix shared by
    all pairs or a full ``(S, A, S, S)`` array.
    """

    nominal: np.ndarray
    reward: np.ndarray
    cost: np.ndarray
    gamma: float
    rho0: np.ndarray
    radius: np.ndarray
    cost_matrix: np.ndarray
    budget: float = math.inf

    def __post_init__(self):
        self.nominal = np.asarray(self.nominal, float)
        S, A = self.nominal.shape[:2]
        if self.nominal.shape != (S, A, S):
            raise RCMDPError(f"nominal must have shape (S, A, S), got {self.nominal.shape}")
        if np.any(self.nominal < 0) or np.any(np.abs(self.nominal.sum(-1) - 1.0) > 1e-12):
            raise RCMDPError("nominal rows must be probability distributions")
        self.reward = np.asarray(self.reward, float).reshape(S, A)
        self.cost = np.asarray(self.cost, float).reshape(S, A)
        if np.any(self.cost < 0):
            raise RCMDPError("costs must be non-negative")
        if not 0.0 < self.gamma < 1.0:
            raise RCMDPError("gamma must lie in (0, 1)")
        self.rho0 = np.asarray(self.rho0, float).ravel()
        if self.rho0.size != S or np.any(self.rho0 < 0) or abs(self.rho0.sum() - 1) > 1e-12:
            raise RCMDPError("rho0 must be a distribution over states")
        self.radius = np.broadcast_to(np.asarray(self.radius, float), (S, A)).copy()
        if np.any(self.radius < 0):
            raise RCMDPError("radius must be non-negative")
        cm = np.asarray(self.cost_matrix, float)
        if cm.shape == (S, S):
            cm = np.broadcast_to(cm, (S, A, S, S))
        if cm.shape != (S, A, S, S):
            raise RCMDPError(f"cost_matrix must be (S, S) or (S, A, S, S), got {cm.shape}")
        if np.any(np.isnan(cm)) or np.any(cm < 0):
            raise RCMDPError("cost_matrix entries must be non-negative")
        if np.any(np.diagonal(cm, axis1=2, axis2=3) != 0):
            raise RCMDPError("cost_matrix diagonal must be zero")
        self.cost_matrix = cm

    @property
    def n_states(self) -> int:
        return self.nominal.shape[0]

    @property
    def n_actions(self) -> int:
        return self.nominal.shape[1]

    def with_radius(self, radius) -> "DiscreteRCMDP":
        return DiscreteRCMDP(self.nominal, self.reward, self.cost, self.gamma, self.rho0,
                             radius, self.cost_matrix, self.budget)

    def to_json(self) -> dict:
        cm = self.cost_matrix
        shared = bool(np.all(cm == cm[:1, :1]))
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "nominal": self.nominal.tolist(),
            "reward": self.reward.tolist(),
            "cost": self.cost.tolist(),
            "gamma": self.gamma,
            "rho0": self.rho0.tolist(),
            "radius": self.radius.tolist(),
            "cost_matrix": (cm[0, 0] if shared else cm).tolist(),
            "budget": None if math.isinf(self.budget) else self.budget,
        }

    @classmethod
    def from_json(cls, doc) -> "DiscreteRCMDP":
        if isinstance(doc, (str, Path)):
            doc = json.loads(Path(doc).read_text())
        missing = {"n_states", "n_actions", "nominal", "reward", "cost", "gamma", "rho0",
                   "radius", "cost_matrix"} - set(doc)
        if missing:
            raise RCMDPError(f"missing keys: {sorted(missing)}")
        mdp = cls(doc["nominal"], doc["reward"], doc["cost"], float(doc["gamma"]),
                  doc["rho0"], doc["radius"], doc["cost_matrix"],
                  math.inf if doc.get("budget") is None else float(doc["budget"]))
        if (mdp.n_states, mdp.n_actions) != (doc["n_states"], doc["n_actions"]):
            raise RCMDPError("n_states / n_actions disagree with the arrays")
        return mdp


@dataclass
class TabularPolicy:
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, float)
        if self.probs.ndim != 2 or np.any(self.probs < 0) or \
                np.any(np.abs(self.probs.sum(1) - 1) > 1e-12):
            raise RCMDPError("policy rows must be distributions over actions")

    @classmethod
    def deterministic(cls, actions, n_actions) -> "TabularPolicy":
        return cls(np.eye(n_actions)[np.asarray(actions)])

    def __call__(self, state, rng, deterministic=False):
        s = int(np.argmax(state)) if np.ndim(state) else int(state)
        if deterministic:
            return int(np.argmax(self.probs[s]))
        return int(rng.choice(self.probs.shape[1], p=self.probs[s]))


@dataclass
class QTable:
    values: np.ndarray
    kind: str = REWARD

    def __post_init__(self):
        self.values = np.asarray(self.values, float)
        if self.kind not in (REWARD, COST):
            raise RCMDPError(f"unknown Q kind {self.kind!r}")


def _direction_for(kind: str) -> str:
    return INF_DIR if kind == REWARD else SUP_DIR


def _check_inner(p_hat, values, cost_row, eps, direction):
    p_hat = np.asarray(p_hat, float).ravel()
    values = np.asarray(values, float).ravel()
    D = np.asarray(cost_row, float)
    if eps < 0:
        raise RCMDPError("eps must be non-negative")
    if direction not in (INF_DIR, SUP_DIR):
        raise RCMDPError(f"direction must be 'inf' or 'sup', got {direction!r}")
    if not np.all(np.isfinite(values)):
        raise RCMDPError("values must be finite")
    if D.shape != (p_hat.size, values.size):
        raise RCMDPError("cost_row must have shape (len(p_hat), len(values))")
    return p_hat, values, D


def worst_case_expectation_primal(p_hat, values, cost_row, eps, direction):
    """Worst-case ``E_p[V]`` over the OT ball, solved as an LP over couplings.

    Returns ``(value, worst_dist)`` where ``worst_dist`` is the second
    marginal of the optimal coupling.
    """
    p_hat, values, D = _check_inner(p_hat, values, cost_row, eps, direction)
    sgn = -1.0 if direction == SUP_DIR else 1.0
    rows = np.nonzero(p_hat > 0)[0]
    sub = D[rows]
    finite = np.isfinite(sub)
    idx = np.argwhere(finite)
    n = idx.shape[0]
    A_eq = np.zeros((rows.size, n))
    A_eq[idx[:, 0], np.arange(n)] = 1.0
    d = sub[finite]
    res = linprog(sgn * values[idx[:, 1]], A_eq=A_eq, b_eq=p_hat[rows],
                  A_ub=d[None, :], b_ub=[eps])
    worst = np.zeros(values.size)
    np.add.at(worst, idx[:, 1], res.x)
    return float(values[idx[:, 1]] @ res.x), worst


def _dual_objective(lam, p_hat, values, D, eps):
    # sup-direction Lagrangian; forbidden (+inf) moves drop out of the inner max
    with np.errstate(invalid="ignore"):
        inner = np.where(np.isfinite(D), values[None, :] - lam * np.where(np.isfinite(D), D, 0.0),
                         -np.inf)
    return float(p_hat @ inner.max(axis=1) + lam * eps)


def dual_objective(lam, p_hat, values, cost_row, eps, direction) -> float:
    """Objective of the one-dimensional dual at multiplier ``lam``."""
    p_hat, values, D = _check_inner(p_hat, values, cost_row, eps, direction)
    if direction == SUP_DIR:
        return _dual_objective(lam, p_hat, values, D, eps)
    return -_dual_objective(lam, p_hat, -values, D, eps)


def worst_case_expectation_dual(p_hat, values, cost_row, eps, direction,
                                return_multiplier=False):
    """Worst-case ``E_p[V]`` through the dual over the budget multiplier.

    The inner optimisation over next states is exact enumeration; the outer
    convex problem is solved by golden-section search on
    ``[0, range(V) / min positive cost]``.
    """
    p_hat, values, D = _check_inner(p_hat, values, cost_row, eps, direction)
    v = values if direction == SUP_DIR else -values
    mask = p_hat > 0
    p, Dm = p_hat[mask], D[mask]
    f = lambda lam: _dual_objective(lam, p, v, Dm, eps)  # noqa: E731
    positive = Dm[np.isfinite(Dm) & (Dm > 0)]
    spread = float(v.max() - v.min())
    lam_max = spread / positive.min() if positive.size and spread > 0 else 0.0
    best_lam, best = 0.0, f(0.0)
    if lam_max > 0:
        lo, hi = 0.0, lam_max
        x1 = hi - _GOLDEN * (hi - lo)
        x2 = lo + _GOLDEN * (hi - lo)
        f1, f2 = f(x1), f(x2)
        while hi - lo > 1e-10 * lam_max:
            if f1 <= f2:
                hi, x2, f2 = x2, x1, f1
                x1 = hi - _GOLDEN * (hi - lo)
                f1 = f(x1)
            else:
                lo, x1, f1 = x1, x2, f2
                x2 = lo + _GOLDEN * (hi - lo)
                f2 = f(x2)
        for lam, val in ((x1, f1), (x2, f2), (lam_max, f(lam_max))):
            if val < best:
                best_lam, best = lam, val
    value = best if direction == SUP_DIR else -best
    return (value, best_lam) if return_multiplier else value


def policy_values(policy: TabularPolicy, q) -> np.ndarray:
    """``V(s) = sum_a pi(a|s) Q(s, a)``."""
    return np.sum(policy.probs * np.asarray(q, float), axis=1)


def robust_bellman_apply(mdp: DiscreteRCMDP, policy: TabularPolicy, q: QTable,
                         method: str = "primal") -> QTable:
    """One application of the robust reward (inf) or cost (sup) operator."""
    direction = _direction_for(q.kind)
    base = mdp.reward if q.kind == REWARD else mdp.cost
    V = policy_values(policy, q.values)
    out = np.empty_like(base)
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            args = (mdp.nominal[s, a], V, mdp.cost_matrix[s, a], mdp.radius[s, a], direction)
            if method == "primal":
                val = worst_case_expectation_primal(*args)[0]
            elif method == "dual":
                val = worst_case_expectation_dual(*args)
            else:
                raise RCMDPError(f"unknown method {method!r}")
            out[s, a] = base[s, a] + mdp.gamma * val
    return QTable(out, q.kind)


def nominal_bellman_apply(mdp: DiscreteRCMDP, policy: TabularPolicy, q: QTable) -> QTable:
    base = mdp.reward if q.kind == REWARD else mdp.cost
    V = policy_values(policy, q.values)
    return QTable(base + mdp.gamma * mdp.nominal @ V, q.kind)


def default_max_iters(gamma: float, tol: float) -> int:
    return 10 * math.ceil(math.log(tol * (1.0 - gamma)) / math.log(gamma))


class ConvergenceError(RuntimeError):
    pass


def robust_policy_evaluation(mdp: DiscreteRCMDP, policy: TabularPolicy, kind: str,
                             tol: float = 1e-9, max_iters: int | None = None,
                             method: str = "primal") -> QTable:
    """Fixed point of the robust operator by iteration from ``Q = 0``."""
    if max_iters is None:
        max_iters = default_max_iters(mdp.gamma, tol)
    q = QTable(np.zeros((mdp.n_states, mdp.n_actions)), kind)
    for _ in range(max_iters):
        nxt = robust_bellman_apply(mdp, policy, q, method=method)
        if np.max(np.abs(nxt.values - q.values)) <= tol:
            return nxt
        q = nxt
    raise ConvergenceError(f"robust policy evaluation did not converge in {max_iters} iterations")


def nominal_policy_evaluation(mdp: DiscreteRCMDP, policy: TabularPolicy, kind: str) -> QTable:
    """Standard evaluation under the nominal kernel via a linear solve."""
    base = mdp.reward if kind == REWARD else mdp.cost
    S = mdp.n_states
    P_pi = np.einsum("sap,pb->sapb", mdp.nominal, policy.probs).reshape(S * mdp.n_actions, -1)
    q = np.linalg.solve(np.eye(P_pi.shape[0]) - mdp.gamma * P_pi, base.ravel())
    return QTable(q.reshape(base.shape), kind)


@dataclass
class PolicyEvaluation:
    actions: tuple
    J_reward: float
    J_cost: float
    feasible: bool


@dataclass
class BruteForceResult:
    best_policy: TabularPolicy | None
    J_r_worst: float
    J_c_worst: float
    feasible: bool
    table: list = field(default_factory=list)

    def feasible_set(self) -> set:
        return {row.actions for row in self.table if row.feasible}


def solve_rcmdp_bruteforce(mdp: DiscreteRCMDP, budget: float | None = None,
                           tol: float = 1e-9, method: str = "primal") -> BruteForceResult:
    """Enumerate deterministic policies; maximise worst-case return subject to
    worst-case cost ``<= budget`` (both measured from ``rho0``)."""
    if mdp.n_states > 4 or mdp.n_actions > 2:
        raise RCMDPError("brute force is limited to 4 states and 2 actions")
    budget = mdp.budget if budget is None else budget
    table = []
    best = None
    for actions in itertools.product(range(mdp.n_actions), repeat=mdp.n_states):
        pol = TabularPolicy.deterministic(actions, mdp.n_actions)
        qr = robust_policy_evaluation(mdp, pol, REWARD, tol=tol, method=method)
        qc = robust_policy_evaluation(mdp, pol, COST, tol=tol, method=method)
        jr = float(mdp.rho0 @ policy_values(pol, qr.values))
        jc = float(mdp.rho0 @ policy_values(pol, qc.values))
        row = PolicyEvaluation(actions, jr, jc, jc <= budget)
        table.append(row)
        # strict comparison keeps the lexicographically first optimum
        if row.feasible and (best is None or jr > best.J_reward):
            best = row
    if best is None:
        return BruteForceResult(None, math.nan, math.nan, False, table)
    return BruteForceResult(TabularPolicy.deterministic(best.actions, mdp.n_actions),
                            best.J_reward, best.J_cost, True, table)
