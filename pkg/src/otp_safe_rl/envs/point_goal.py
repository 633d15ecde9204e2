from __future__ import annotations

import numpy as np

from .base import EnvSpec


class PointGoalEnv(EnvSpec):
    """Damped point mass steering to a goal past a hazard disk.

    State ``(x, y, vx, vy)``, action a force in ``[-1, 1]^2``. Per step
    ``v += dt * (a / mass - damping * v)`` then ``pos += dt * v`` with the
    position clipped to the box. Reward ``exp(-|pos - goal|)``; cost 1 while
    inside the hazard disk. The task parameter is the mass.
    """

    name = "point_goal"
    param_name = "mass"
    state_dim = 4
    action_dim = 2

    def __init__(self, config: dict):
        super().__init__(config)
        c = self.config
        self.dt = float(c["dt"])
        self.damping = float(c["damping"])
        self.mass = float(c["mass"])
        self.start = np.asarray(c["start"], float)
        self.start_noise = float(c["start_noise"])
        self.goal = np.asarray(c["goal"], float)
        self.hazard_center = np.asarray(c["hazard_center"], float)
        self.hazard_radius = float(c["hazard_radius"])
        self.box = float(c["box"])
        self.action_low = -np.ones(2)
        self.action_high = np.ones(2)
        self.state = None

    def reset(self, seed=None) -> np.ndarray:
        rng = np.random.default_rng(seed)
        pos = self.start + rng.uniform(-self.start_noise, self.start_noise, 2)
        self.state = np.concatenate([pos, np.zeros(2)])
        return self.state.copy()

    def dynamics(self, state, action) -> np.ndarray:
        a = np.clip(np.asarray(action, float), -1.0, 1.0)
        pos, vel = state[:2], state[2:]
        vel = vel + self.dt * (a / self.mass - self.damping * vel)
        pos = np.clip(pos + self.dt * vel, -self.box, self.box)
        return np.concatenate([pos, vel])

    def reward_cost(self, state):
        pos = state[:2]
        r = float(np.exp(-np.linalg.norm(pos - self.goal)))
        c = float(np.linalg.norm(pos - self.hazard_center) < self.hazard_radius)
        return r, c

    def step(self, action):
        self.state = self.dynamics(self.state, action)
        r, c = self.reward_cost(self.state)
        return self.state.copy(), r, c, False
