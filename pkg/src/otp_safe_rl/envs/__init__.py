"""Built-in constrained tasks and the evaluation helpers that sweep them."""
from __future__ import annotations

import json
from importlib import resources

from .base import EnvSpec, rollout, make_test_suite, RolloutResult
from .chain import ChainEnv
from .point_goal import PointGoalEnv

TASKS = {"point_goal": PointGoalEnv, "chain": ChainEnv}


def load_config(name: str) -> dict:
    text = resources.files(__package__).joinpath("configs", f"{name}.json").read_text()
    return json.loads(text)


def make_env(name: str, param: float | None = None, overrides: dict | None = None) -> EnvSpec:
    if name not in TASKS:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(TASKS)}")
    cfg = load_config(name)
    cfg.update(overrides or {})
    env = TASKS[name](cfg)
    return env if param is None else env.with_param(param)


__all__ = ["EnvSpec", "ChainEnv", "PointGoalEnv", "RolloutResult", "TASKS", "load_config",
           "make_env", "make_test_suite", "rollout"]
