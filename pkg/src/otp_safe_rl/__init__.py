"""Robust safe reinforcement learning with optimal transport perturbations.

Modules: ``transport`` (costs and exact optimal transport), ``robust_bellman``
(tabular robust operators and oracles), ``nn`` (numpy networks), ``otp``
(perturbation networks), ``safe_rl`` (training loop), ``envs`` (tasks) and
``harness`` (verification, experiments, CLI).
"""

__version__ = "0.1.0"
