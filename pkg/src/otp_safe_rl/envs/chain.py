from __future__ import annotations

import numpy as np

from ..robust_bellman import DiscreteRCMDP
from .base import EnvSpec

N_STATES = 4
N_ACTIONS = 2


def chain_kernel(slip: float) -> np.ndarray:
    """Nominal next-state distributions ``P[s, a, s']``.

    Action 0 steps right and slips in place; action 1 jumps two states and on
    a slip falls back to state 0. At the end of the chain action 0 slips back
    one state.
    """
    P = np.zeros((N_STATES, N_ACTIONS, N_STATES))
    for s in range(N_STATES):
        P[s, 0, min(s + 1, N_STATES - 1)] += 1.0 - slip
        P[s, 0, s if s < N_STATES - 1 else s - 1] += slip
        P[s, 1, min(s + 2, N_STATES - 1)] += 1.0 - slip
        P[s, 1, 0] += slip
    return P


def chain_reward_cost():
    reward = np.zeros((N_STATES, N_ACTIONS))
    reward[N_STATES - 1, :] = 1.0
    reward[N_STATES - 2, 1] = 0.5
    cost = np.zeros((N_STATES, N_ACTIONS))
    cost[:, 1] = 1.0
    return reward, cost


class ChainEnv(EnvSpec):
    """Four-state, two-action chain with a slip probability.

    Exposed as an episodic task over one-hot states (a real action ``a`` picks
    action 1 when ``a[0] > 0``) and, through :meth:`as_rcmdp`, as an exact
    tabular model for the robust Bellman oracles. Unlike the continuous task
    its transitions are stochastic.
    """

    name = "chain"
    param_name = "slip"
    state_dim = N_STATES
    action_dim = 1

    def __init__(self, config: dict):
        super().__init__(config)
        self.slip = float(self.config["slip"])
        self.gamma = float(self.config["gamma"])
        self.kernel = chain_kernel(self.slip)
        self.reward, self.cost = chain_reward_cost()
        self.action_low = -np.ones(1)
        self.action_high = np.ones(1)
        self._s = 0
        self._rng = np.random.default_rng(0)

    @staticmethod
    def one_hot(s: int) -> np.ndarray:
        x = np.zeros(N_STATES)
        x[s] = 1.0
        return x

    @staticmethod
    def action_index(action) -> int:
        if np.ndim(action) == 0 and isinstance(action, (int, np.integer)):
            return int(action)
        return int(np.asarray(action, float).ravel()[0] > 0.0)

    def reset(self, seed=None) -> np.ndarray:
        self._rng = np.random.default_rng(seed)
        self._s = 0
        return self.one_hot(self._s)

    def step(self, action):
        a = self.action_index(action)
        s = self._s
        r, c = float(self.reward[s, a]), float(self.cost[s, a])
        self._s = int(self._rng.choice(N_STATES, p=self.kernel[s, a]))
        return self.one_hot(self._s), r, c, False

    def as_rcmdp(self, eps: float = 0.0, budget: float | None = None) -> DiscreteRCMDP:
        """Tabular view with total-variation balls of radius ``eps``."""
        rho0 = np.zeros(N_STATES)
        rho0[0] = 1.0
        return DiscreteRCMDP(self.kernel, self.reward, self.cost, self.gamma, rho0,
                             np.full((N_STATES, N_ACTIONS), float(eps)),
                             1.0 - np.eye(N_STATES),
                             self.budget if budget is None else float(budget))
