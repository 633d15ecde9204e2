"""Optimal Transport Perturbation networks.

A perturbation net ``delta(s, a, s_hat')`` rescales each coordinate of an
observed transition, ``g(s, a, s_hat') = s + (s_hat' - s) * (1 + delta)``,
producing a virtual next state used only inside Bellman targets. Under the
percentage transport cost the per-sample transport cost of that move is
``mean(delta ** 2)``, so the average budget ``E||delta||^2 <= n eps^2`` is
enforced with a Lagrange multiplier updated by projected ascent. The
constraint is written relative to the budget, ``E||delta||^2 / (n eps^2) - 1``,
so the multiplier moves at a rate that does not depend on ``eps``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Adam, Mlp

REWARD = "reward"
COST = "cost"

SMOOTH = "smooth"
HARD = "hard"
NONE = "none"


class OTPUpdateError(FloatingPointError):
    pass


@dataclass
class VirtualTransition:
    s: np.ndarray
    a: np.ndarray
    s_hat_prime: np.ndarray
    s_tilde_prime: np.ndarray
    delta: np.ndarray
    cost: np.ndarray


def perturb(s, s_hat_prime, delta):
    """Multiplicative perturbation of the transition ``s -> s_hat_prime``.

    Written as ``s_hat' + (s_hat' - s) * delta`` so that ``delta == 0`` and
    frozen coordinates (``s_hat'_i == s_i``) reproduce ``s_hat'`` bit-for-bit.
    """
    s_hat_prime = np.asarray(s_hat_prime, float)
    return s_hat_prime + (s_hat_prime - np.asarray(s, float)) * delta


class PerturbationNet:
    """``delta(s, a, s_hat')`` with bounded output and its budget multiplier.

    The network sees ``(s, a, s_hat' - s)``. Outputs are limited to
    ``[-2 eps, 2 eps]`` either smoothly (``2 eps * tanh(raw / (2 eps))``,
    default), by a hard clip, or not at all (``clip="none"``, for tests).
    """

    def __init__(self, state_dim, action_dim, kind, eps_delta=0.02, hidden=(64, 64),
                 lr=1e-4, dual_lr=0.01, lam_init=0.1, clip=SMOOTH, rng=None):
        if kind not in (REWARD, COST):
            raise ValueError(f"kind must be 'reward' or 'cost', got {kind!r}")
        if eps_delta <= 0:
            raise ValueError("eps_delta must be positive")
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.kind = kind
        self.eps_delta = float(eps_delta)
        self.clip = clip
        self.dual_lr = float(dual_lr)
        self.lam = float(lam_init)
        self.net = Mlp([2 * state_dim + action_dim, *hidden, state_dim], zero_last=True, rng=rng)
        self.opt = Adam(self.net.params, lr=lr)
        self._cache = None

    @property
    def bound(self) -> float:
        return 2.0 * self.eps_delta

    @property
    def budget(self) -> float:
        """Right-hand side ``n eps^2`` of the batch-average constraint."""
        return self.state_dim * self.eps_delta ** 2

    def delta(self, s, a, s_hat_prime):
        s = np.atleast_2d(np.asarray(s, float))
        a = np.atleast_2d(np.asarray(a, float))
        sh = np.atleast_2d(np.asarray(s_hat_prime, float))
        raw = self.net.forward(np.concatenate([s, a, sh - s], axis=1))
        if self.clip == SMOOTH:
            t = np.tanh(raw / self.bound)
            out = self.bound * t
            self._cache = 1.0 - t * t
        elif self.clip == HARD:
            out = np.clip(raw, -self.bound, self.bound)
            self._cache = (np.abs(raw) < self.bound).astype(float)
        else:
            out = raw
            self._cache = np.ones_like(raw)
        return out

    def _backward(self, d_delta):
        return self.net.backward(d_delta * self._cache)[0]

    def apply(self, s, a, s_hat_prime) -> VirtualTransition:
        d = self.delta(s, a, s_hat_prime)
        s2 = np.atleast_2d(np.asarray(s, float))
        sh = np.atleast_2d(np.asarray(s_hat_prime, float))
        return VirtualTransition(s2, np.atleast_2d(a), sh, perturb(s2, sh, d), d,
                                 np.mean(d * d, axis=1))


def apply_perturbation(pnet: PerturbationNet, s, a, s_hat_prime) -> VirtualTransition:
    return pnet.apply(s, a, s_hat_prime)


def average_budget(pnet: PerturbationNet, s, a, s_hat_prime) -> float:
    """Batch average of ``||delta||^2 / n``, comparable to ``eps_delta ** 2``."""
    d = pnet.delta(s, a, s_hat_prime)
    return float(np.mean(d * d))


def otp_gradients(pnet: PerturbationNet, s, a, s_hat_prime, value_fn):
    """Gradients of the perturbation Lagrangian at the current multiplier.

    The loss is ``sign * E[V(g)] + lam * (E||delta||^2 / (n eps^2) - 1)`` with
    ``sign = +1`` for the reward net (it minimises value) and ``-1`` for the
    cost net. Returns ``(param_grads, info)``.
    """
    s = np.atleast_2d(np.asarray(s, float))
    sh = np.atleast_2d(np.asarray(s_hat_prime, float))
    if s.shape[0] == 0:
        raise ValueError("empty batch")
    d = pnet.delta(s, a, sh)
    x = perturb(s, sh, d)
    values, dv_dx = value_fn(x)
    B = s.shape[0]
    sq = np.sum(d * d, axis=1)
    violation = float(np.mean(sq)) / pnet.budget - 1.0
    sign = 1.0 if pnet.kind == REWARD else -1.0
    d_delta = (sign * dv_dx * (sh - s) + 2.0 * pnet.lam / pnet.budget * d) / B
    grads = pnet._backward(d_delta)
    loss = sign * float(np.mean(values)) + pnet.lam * violation
    return grads, {"loss": loss, "value": float(np.mean(values)),
                   "budget_usage": float(np.mean(sq)) / pnet.state_dim, "violation": violation}


def update_otp(pnet: PerturbationNet, s, a, s_hat_prime, value_fn, update_dual=True) -> dict:
    """One gradient step on the Lagrangian of the perturbation problem.

    ``value_fn(x)`` must return ``(V(x), dV/dx)`` for a batch of states. The
    reward net descends ``E[V(g)] + lam (E||delta||^2 / (n eps^2) - 1)``; the
    cost net ascends ``E[V(g)] - lam (...)``. The multiplier then takes a
    projected ascent step on the relative constraint violation.
    """
    grads, info = otp_gradients(pnet, s, a, s_hat_prime, value_fn)
    violation = info["violation"]
    if not all(np.all(np.isfinite(g)) for g in grads) or not np.isfinite(violation):
        raise OTPUpdateError(
            f"non-finite OTP gradient ({pnet.kind}); lam={pnet.lam}, violation={violation}")
    pnet.opt.step(grads)
    if update_dual:
        pnet.lam = max(0.0, pnet.lam + pnet.dual_lr * violation)
    return {"value": info["value"], "budget_usage": info["budget_usage"],
            "violation": violation, "lam": pnet.lam}
