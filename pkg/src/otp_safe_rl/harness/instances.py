"""Seeded random problem instances shared by the verification suites and tests."""
from __future__ import annotations

import numpy as np

from ..robust_bellman import DiscreteRCMDP
from ..transport import TransportCost, cost_matrix

COST_KINDS = ("tv", "l1", "l2sq", "percent_sq")


def random_cost_matrix(rng: np.random.Generator, n: int, kind: str) -> np.ndarray:
    """Pairwise transport costs between ``n`` states.

    ``tv`` is ``1 - I``; ``l1`` / ``l2sq`` embed the states as random points
    in the plane. ``percent_sq`` embeds them on a small integer grid and
    measures moves relative to a random base state, so coordinates the
    observed transition leaves fixed give +inf entries.
    """
    if kind == "tv":
        return 1.0 - np.eye(n)
    if kind in ("l1", "l2sq"):
        pts = rng.normal(size=(n, 2))
        cost = TransportCost.pnorm_pow(1 if kind == "l1" else 2)
        return cost_matrix(cost, pts, pts)
    if kind == "percent_sq":
        base = rng.integers(-2, 3, size=2).astype(float)
        cells = rng.choice(25, size=n, replace=False)
        pts = np.stack([cells // 5, cells % 5], axis=1).astype(float) - 2.0
        return cost_matrix(TransportCost.percent_sq(base), pts, pts)
    raise ValueError(f"unknown cost kind {kind!r}; choose from {COST_KINDS}")


def random_inner_problem(rng: np.random.Generator, kind: str, n: int | None = None):
    """``(p_hat, values, cost_row, eps)`` for one worst-case expectation."""
    n = int(rng.integers(2, 7)) if n is None else n
    D = random_cost_matrix(rng, n, kind)
    p_hat = rng.dirichlet(np.ones(n))
    # a few exact zeros exercise the unsupported-row path
    if n > 2 and rng.random() < 0.3:
        p_hat[rng.integers(n)] = 0.0
        p_hat /= p_hat.sum()
    values = rng.normal(size=n) * rng.uniform(0.5, 5.0)
    finite = D[np.isfinite(D)]
    eps = float(rng.uniform(0.0, 1.2) * np.median(finite[finite > 0])) if (finite > 0).any() else 0.1
    return p_hat, values, D, eps


def random_rcmdp(rng: np.random.Generator, n_states: int = 4, n_actions: int = 2,
                 kind: str = "tv", gamma: float | None = None, eps_max: float = 0.3,
                 budget: float = float("inf")) -> DiscreteRCMDP:
    """Random DiscreteRCMDP with a shared cost matrix of the given kind."""
    nominal = rng.dirichlet(np.ones(n_states) * 0.7, size=(n_states, n_actions))
    reward = rng.uniform(0, 1, (n_states, n_actions))
    cost = (rng.random((n_states, n_actions)) < 0.4).astype(float)
    gamma = float(rng.uniform(0.5, 0.95)) if gamma is None else gamma
    rho0 = rng.dirichlet(np.ones(n_states))
    radius = rng.uniform(0, eps_max, (n_states, n_actions))
    D = random_cost_matrix(rng, n_states, kind)
    return DiscreteRCMDP(nominal, reward, cost, gamma, rho0, radius, D, budget)
