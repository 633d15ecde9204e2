from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np


class EnvSpec:
    """Episodic constrained task with one named perturbation parameter.

    Subclasses set ``state_dim``, ``action_dim``, ``action_low``,
    ``action_high``, ``horizon``, ``budget``, ``param_name``, ``nominal``,
    ``test_range`` and implement :meth:`reset` / :meth:`step`.
    ``step`` returns ``(next_state, reward, cost, terminal)``; running out of
    horizon is not a terminal.
    """

    name = "env"
    param_name = "param"

    def __init__(self, config: dict):
        self.config = dict(config)

    @property
    def param(self) -> float:
        return float(self.config[self.param_name])

    @property
    def nominal(self) -> float:
        lo, hi = self.test_range
        return 0.5 * (lo + hi)

    @property
    def test_range(self):
        lo, hi = self.config[f"{self.param_name}_range"]
        return float(lo), float(hi)

    @property
    def budget(self) -> float:
        return float(self.config["budget"])

    @property
    def horizon(self) -> int:
        return int(self.config["horizon"])

    def with_param(self, value: float) -> "EnvSpec":
        cfg = copy.deepcopy(self.config)
        cfg[self.param_name] = float(value)
        return type(self)(cfg)

    def reset(self, seed=None) -> np.ndarray:
        raise NotImplementedError

    def step(self, action):
        raise NotImplementedError

    def random_action(self, rng) -> np.ndarray:
        return rng.uniform(self.action_low, self.action_high)


def make_test_suite(env: EnvSpec, n_points: int = 5) -> list:
    """Copies of ``env`` with the perturbation parameter evenly spread over
    its test range; for odd ``n_points`` the middle one is the nominal value."""
    if n_points < 2:
        raise ValueError("n_points must be at least 2")
    lo, hi = env.test_range
    values = np.linspace(lo, hi, n_points)
    if n_points % 2 == 1:
        values[n_points // 2] = env.nominal
    return [env.with_param(float(v)) for v in values]


@dataclass
class RolloutResult:
    total_reward: float
    total_cost: float
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    costs: list = field(default_factory=list)


def rollout(env: EnvSpec, policy, deterministic=True, seed=0, horizon=None,
            keep_trajectory=False) -> RolloutResult:
    """Run one episode and return undiscounted reward and cost totals.

    ``policy(state, rng, deterministic)`` returns the action to take.
    """
    rng = np.random.default_rng(seed)
    horizon = env.horizon if horizon is None else int(horizon)
    s = env.reset(seed=seed)
    out = RolloutResult(0.0, 0.0)
    for _ in range(horizon):
        a = policy(s, rng, deterministic)
        s2, r, c, terminal = env.step(a)
        out.total_reward += r
        out.total_cost += c
        if keep_trajectory:
            out.states.append(s)
            out.actions.append(a)
            out.rewards.append(r)
            out.costs.append(c)
        s = s2
        if terminal:
            break
    if keep_trajectory:
        out.states.append(s)
    return out
