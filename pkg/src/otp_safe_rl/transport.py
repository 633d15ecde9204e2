"""Transport costs and exact optimal transport between discrete distributions."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .simplex import InfeasibleError, linprog

INF = math.inf

PERCENT_SQ = "percent_sq"
PNORM_POW = "pnorm_pow"
INDICATOR = "indicator"
_KINDS = (PERCENT_SQ, PNORM_POW, INDICATOR)


class TransportError(ValueError):
    pass


def _as_state(x, name="state") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.ndim != 1:
        raise TransportError(f"{name} must be a 1-D vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise TransportError(f"{name} has non-finite coordinates")
    return x


@dataclass(frozen=True)
class TransportCost:
    """A transport cost ``d(s_hat_prime, s_prime)``.

    ``percent_sq`` compares the two transitions out of ``base`` coordinate by
    coordinate, ``pnorm_pow`` is ``||x - y||_p ** p``, ``indicator`` is
    ``1[x != y]``.
    """

    kind: str
    p: float = 1.0
    base: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise TransportError(f"unknown cost kind {self.kind!r}")
        if self.kind == PNORM_POW and not self.p >= 1.0:
            raise TransportError("p must be >= 1")
        if self.kind == PERCENT_SQ:
            if self.base is None:
                raise TransportError("percent_sq cost needs a base state")
            object.__setattr__(self, "base", _as_state(self.base, "base state"))

    @classmethod
    def percent_sq(cls, base) -> "TransportCost":
        return cls(PERCENT_SQ, base=base)

    @classmethod
    def pnorm_pow(cls, p: float = 1.0) -> "TransportCost":
        return cls(PNORM_POW, p=float(p))

    @classmethod
    def indicator(cls) -> "TransportCost":
        return cls(INDICATOR)

    def __call__(self, s_hat_prime, s_prime) -> float:
        return eval_cost(self, s_hat_prime, s_prime)


def eval_cost(cost: TransportCost, s_hat_prime, s_prime) -> float:
    x = _as_state(s_hat_prime, "s_hat_prime")
    y = _as_state(s_prime, "s_prime")
    if x.shape != y.shape:
        raise TransportError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if cost.kind == INDICATOR:
        return 0.0 if np.array_equal(x, y) else 1.0
    if cost.kind == PNORM_POW:
        return float(np.sum(np.abs(x - y) ** cost.p))
    s = cost.base
    if s.shape != x.shape:
        raise TransportError(f"base state has dimension {s.shape[0]}, expected {x.shape[0]}")
    num = y - s
    den = x - s
    frozen = den == 0.0
    if np.any(frozen & (num != 0.0)):
        return INF
    # 0/0 = 1 on frozen coordinates, which then contribute nothing
    with np.errstate(over="ignore"):
        ratio = np.where(frozen, 1.0, num / np.where(frozen, 1.0, den))
        return float(np.mean((ratio - 1.0) ** 2))


def cost_matrix(cost: TransportCost, xs, ys) -> np.ndarray:
    xs = np.atleast_2d(np.asarray(xs, float))
    ys = np.atleast_2d(np.asarray(ys, float))
    return np.array([[eval_cost(cost, x, y) for y in ys] for x in xs])


@dataclass
class DiscreteDist:
    """Finitely supported distribution; ``support`` has one point per row."""

    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        sup = np.asarray(self.support, dtype=float)
        if sup.ndim == 1:
            sup = sup[:, None]
        probs = np.asarray(self.probs, dtype=float).ravel()
        if sup.shape[0] != probs.size:
            raise TransportError("support and probs have different lengths")
        if not np.all(np.isfinite(sup)):
            raise TransportError("support has non-finite coordinates")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise TransportError("probs must be non-negative and sum to 1")
        if len({tuple(r) for r in sup}) != sup.shape[0]:
            raise TransportError("support points must be distinct")
        self.support = sup
        self.probs = probs

    def __len__(self):
        return self.probs.size


@dataclass
class TransportPlan:
    value: float
    plan: np.ndarray
    u: np.ndarray
    v: np.ndarray


def solve_transport(a, b, C) -> TransportPlan:
    """Exact transportation LP between weight vectors ``a`` and ``b``.

    Entries of ``C`` equal to +inf are forbidden routes. Returns the optimal
    plan and dual potentials with ``u[i] + v[j] <= C[i, j]``.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    C = np.asarray(C, float)
    m, k = C.shape
    if a.size != m or b.size != k:
        raise TransportError("marginal sizes do not match the cost matrix")
    finite = np.isfinite(C)
    if np.any(np.isnan(C)):
        raise TransportError("cost matrix has NaN entries")
    if (not finite.any(axis=1)[a > 0].all()) or (not finite.any(axis=0)[b > 0].all()):
        raise TransportError("infeasible transport")
    idx = np.argwhere(finite)
    n = idx.shape[0]
    # last column-marginal row is implied by the others and dropped
    A = np.zeros((m + k - 1, n))
    A[idx[:, 0], np.arange(n)] = 1.0
    cols = idx[:, 1] < k - 1
    A[m + idx[cols, 1], np.arange(n)[cols]] = 1.0
    rhs = np.concatenate([a, b[:-1]])
    try:
        res = linprog(C[finite], A_eq=A, b_eq=rhs)
    except InfeasibleError:
        raise TransportError("infeasible transport") from None
    plan = np.zeros((m, k))
    plan[idx[:, 0], idx[:, 1]] = res.x
    u = res.duals[:m]
    v = np.append(res.duals[m:], 0.0)
    return TransportPlan(value=float(np.sum(C[finite] * res.x)), plan=plan, u=u, v=v)


def otc_discrete(p_hat: DiscreteDist, p: DiscreteDist, cost: TransportCost) -> float:
    """Optimal transport cost between two finitely supported distributions."""
    if p_hat.support.shape[1] != p.support.shape[1]:
        raise TransportError("supports live in different dimensions")
    C = cost_matrix(cost, p_hat.support, p.support)
    return solve_transport(p_hat.probs, p.probs, C).value
