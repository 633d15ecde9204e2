"""Off-policy safe RL with optional Optimal Transport Perturbations.

One environment step per iteration; each update samples a replay batch,
trains the reward/cost perturbation nets (robust mode), regresses both
critics on (virtual) one-step targets and takes one safe policy step,
either CRPO switching or a Lagrangian relaxation.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import otp
from .envs.base import rollout
from .nn import Adam, GaussianPolicy, Mlp, TargetCopy, ema_update, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

CRPO = "crpo"
LAGRANGE = "lagrange"
REWARD_BRANCH = "reward"
COST_BRANCH = "cost"

CURVE_COLUMNS = ["schema", "manifest", "step", "update", "branch", "constraint_estimate",
                 "critic_budget", "loss_r", "loss_c", "budget_usage_r", "budget_usage_c",
                 "lambda_r", "lambda_c", "lambda_pol"]
EPISODE_COLUMNS = ["schema", "manifest", "episode", "step", "kind", "total_reward", "total_cost"]
CURVES_SCHEMA = "curves-v1"
EPISODES_SCHEMA = "episodes-v1"


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.99
    tau: float = 5e-3
    batch_size: int = 256
    updates_per_step: int = 1
    lr_policy: float = 1e-4
    lr_critic: float = 1e-4
    lr_otp: float = 1e-4
    dual_lr_otp: float = 0.01
    otp_lambda_init: float = 0.1
    eps_delta: float = 0.02
    # episode-total safety budget B; None takes the task's value
    budget: float | None = None
    # threshold on E_D[E_pi Q_c]; None takes the task's ``critic_budget`` or,
    # failing that, spreads ``budget`` uniformly over the horizon
    critic_budget: float | None = None
    method: str = CRPO
    lagrange_dual_lr: float = 5e-6
    lagrange_init: float = 0.0
    robust: bool = True
    freeze_otp: bool = False
    total_steps: int = 100_000
    seed: int = 0
    warmup_steps: int = 1000
    buffer_capacity: int = 1_000_000
    policy_hidden: tuple = (256, 256, 256)
    critic_hidden: tuple = (256, 256, 256)
    otp_hidden: tuple = (64, 64)
    layer_norm: bool = True
    init_std: float = 0.3
    constraint_samples: int = 4
    action_penalty: float = 1.0
    log_every: int = 100
    eval_every: int = 10_000
    checkpoint_every: int = 50_000

    def __post_init__(self):
        self.policy_hidden = tuple(self.policy_hidden)
        self.critic_hidden = tuple(self.critic_hidden)
        self.otp_hidden = tuple(self.otp_hidden)

    def validate(self) -> "TrainConfig":
        rates = ("tau", "lr_policy", "lr_critic", "lr_otp", "dual_lr_otp", "eps_delta",
                 "lagrange_dual_lr")
        bad = [r for r in rates if not getattr(self, r) > 0]
        if bad:
            raise ValueError(f"rates must be positive: {bad}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.method not in (CRPO, LAGRANGE):
            raise ValueError(f"method must be 'crpo' or 'lagrange', got {self.method!r}")
        if self.batch_size < 1 or self.updates_per_step < 1 or self.total_steps < 0:
            raise ValueError("batch_size and updates_per_step must be >= 1, total_steps >= 0")
        if self.tau > 1.0:
            raise ValueError("tau must be <= 1")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("policy_hidden", "critic_hidden", "otp_hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def critic_scale_budget(budget: float, horizon: int, gamma: float) -> float:
    """Translate an episode cost budget into a bound on discounted cost values.

    Spreading ``budget`` uniformly over ``horizon`` steps gives a per-step
    rate ``budget / horizon`` whose discounted value is
    ``rate * (1 - gamma**horizon) / (1 - gamma)``.
    """
    return budget / horizon * (1.0 - gamma ** horizon) / (1.0 - gamma)


def resolve_critic_budget(env, cfg: TrainConfig) -> float:
    if cfg.critic_budget is not None:
        return float(cfg.critic_budget)
    if cfg.budget is None and "critic_budget" in env.config:
        return float(env.config["critic_budget"])
    budget = env.budget if cfg.budget is None else cfg.budget
    return critic_scale_budget(budget, env.horizon, cfg.gamma)


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling."""

    def __init__(self, state_dim, action_dim, capacity=1_000_000):
        self.capacity = int(capacity)
        self.s = np.zeros((self.capacity, state_dim))
        self.a = np.zeros((self.capacity, action_dim))
        self.r = np.zeros(self.capacity)
        self.c = np.zeros(self.capacity)
        self.s2 = np.zeros((self.capacity, state_dim))
        self.terminal = np.zeros(self.capacity)
        self.size = 0
        self.ptr = 0

    def __len__(self):
        return self.size

    def add(self, s, a, r, c, s2, terminal):
        i = self.ptr
        self.s[i], self.a[i], self.r[i], self.c[i] = s, a, r, c
        self.s2[i], self.terminal[i] = s2, float(terminal)
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size, rng) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size, rng) -> "Batch":
        return self.batch(self.sample_indices(batch_size, rng))

    def batch(self, idx) -> "Batch":
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.c[idx], self.s2[idx],
                     self.terminal[idx])


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    c: np.ndarray
    s2: np.ndarray
    terminal: np.ndarray

    def __len__(self):
        return self.s.shape[0]


class Critic:
    """Action-value network ``Q(s, a)`` over the concatenated input."""

    def __init__(self, state_dim, action_dim, hidden=(256, 256, 256), layer_norm=True, rng=None,
                 lr=1e-4):
        self.state_dim = state_dim
        self.net = Mlp([state_dim + action_dim, *hidden, 1], layer_norm=layer_norm, rng=rng)
        self.target = TargetCopy(self.net)
        self.opt = Adam(self.net.params, lr=lr)

    def q(self, s, a, target=False) -> np.ndarray:
        net = self.target.net if target else self.net
        return net.forward(np.concatenate([s, a], axis=1))[:, 0]

    def grad_inputs(self, upstream, target=False):
        """``(param_grads, dQ/ds, dQ/da)`` for the last forward of this net."""
        net = self.target.net if target else self.net
        grads, dx = net.backward(np.asarray(upstream, float)[:, None])
        return grads, dx[:, :self.state_dim], dx[:, self.state_dim:]


@dataclass
class CriticPair:
    reward: Critic
    cost: Critic

    def __getitem__(self, kind) -> Critic:
        return self.reward if kind == otp.REWARD else self.cost


class Agent:
    """All learnable state: policy, critics with targets, perturbation nets,
    optimisers and multipliers."""

    def __init__(self, state_dim, action_dim, action_low, action_high, cfg: TrainConfig,
                 rng: np.random.Generator):
        self.state_dim, self.action_dim = state_dim, action_dim
        self.action_low = np.asarray(action_low, float)
        self.action_high = np.asarray(action_high, float)
        self.policy = GaussianPolicy(state_dim, action_dim, cfg.policy_hidden, cfg.layer_norm,
                                     cfg.init_std, rng)
        self.policy_opt = Adam(self.policy.params, lr=cfg.lr_policy)
        self.critics = CriticPair(
            Critic(state_dim, action_dim, cfg.critic_hidden, cfg.layer_norm, rng, cfg.lr_critic),
            Critic(state_dim, action_dim, cfg.critic_hidden, cfg.layer_norm, rng, cfg.lr_critic))
        self.pnets = {
            kind: otp.PerturbationNet(state_dim, action_dim, kind, cfg.eps_delta, cfg.otp_hidden,
                                      cfg.lr_otp, cfg.dual_lr_otp, cfg.otp_lambda_init, rng=rng)
            for kind in (otp.REWARD, otp.COST)}
        self.lagrange = float(cfg.lagrange_init)

    def clip_action(self, a):
        return np.clip(a, self.action_low, self.action_high)

    def act(self, state, rng, deterministic=False):
        s = np.asarray(state, float)[None, :]
        if deterministic:
            mean, _, _ = self.policy.distribution(s)
            return self.clip_action(mean[0])
        noise = rng.standard_normal((1, self.action_dim))
        return self.clip_action(self.policy.sample(s, noise)[0][0])

    __call__ = act

    def arrays(self) -> dict:
        out = {}
        for i, p in enumerate(self.policy.params):
            out[f"policy/{i}"] = p
        for kind in (otp.REWARD, otp.COST):
            crit = self.critics[kind]
            for i, p in enumerate(crit.net.params):
                out[f"critic_{kind}/{i}"] = p
            for i, p in enumerate(crit.target.params):
                out[f"target_{kind}/{i}"] = p
            for i, p in enumerate(self.pnets[kind].net.params):
                out[f"otp_{kind}/{i}"] = p
        out["lambda/otp_reward"] = np.array([self.pnets[otp.REWARD].lam])
        out["lambda/otp_cost"] = np.array([self.pnets[otp.COST].lam])
        out["lambda/policy"] = np.array([self.lagrange])
        return out

    def load_arrays(self, arrays: dict):
        targets = {f"policy/{i}": p for i, p in enumerate(self.policy.params)}
        for kind in (otp.REWARD, otp.COST):
            crit = self.critics[kind]
            targets.update({f"critic_{kind}/{i}": p for i, p in enumerate(crit.net.params)})
            targets.update({f"target_{kind}/{i}": p for i, p in enumerate(crit.target.params)})
            targets.update({f"otp_{kind}/{i}": p
                            for i, p in enumerate(self.pnets[kind].net.params)})
        for name, p in targets.items():
            p[...] = arrays[name]
        self.pnets[otp.REWARD].lam = float(arrays["lambda/otp_reward"][0])
        self.pnets[otp.COST].lam = float(arrays["lambda/otp_cost"][0])
        self.lagrange = float(arrays["lambda/policy"][0])


def policy_value_fn(agent: Agent, critic: Critic, noise, target=True):
    """``x -> (V(x), dV/dx)`` with ``V(x) = Q(x, clip(mu(x) + sigma(x) noise))``.

    The gradient runs through both the critic input and the policy's
    dependence on ``x``.
    """
    def value_fn(x):
        a, _ = agent.policy.sample(x, noise)
        ac = agent.clip_action(a)
        q = critic.q(x, ac, target=target)
        ones = np.ones_like(q)
        _, dq_ds, dq_da = critic.grad_inputs(ones, target=target)
        inside = (a > agent.action_low) & (a < agent.action_high)
        _, ds_pol = agent.policy.backward(dq_da * inside)
        return q, dq_ds + ds_pol
    return value_fn


def bellman_target(kind, batch: Batch, agent: Agent, gamma: float, robust: bool, noise):
    """One-step targets ``r + gamma * Vbar(g(s, a, s_hat'))`` (or with cost).

    ``g`` is the trained perturbation in robust mode and the identity
    otherwise; terminal transitions do not bootstrap.
    """
    if robust:
        x = otp.perturb(batch.s, batch.s2, agent.pnets[kind].delta(batch.s, batch.a, batch.s2))
    else:
        x = batch.s2
    a2, _ = agent.policy.sample(x, noise)
    v = agent.critics[kind].q(x, agent.clip_action(a2), target=True)
    base = batch.r if kind == otp.REWARD else batch.c
    return base + gamma * (1.0 - batch.terminal) * v


def critic_loss_grads(crit: Critic, s, a, y):
    """``(mse, param_grads)`` of ``mean((Q(s, a) - y) ** 2)`` with ``y`` held fixed."""
    err = crit.q(s, a) - y
    grads, _, _ = crit.grad_inputs(2.0 * err / err.size)
    return float(np.mean(err ** 2)), grads


def critic_update(agent: Agent, batch: Batch, cfg: TrainConfig, rng) -> dict:
    """MSE regression of both critics on stop-gradient targets, then EMA."""
    noise = rng.standard_normal((len(batch), agent.action_dim))
    losses = {}
    for kind in (otp.REWARD, otp.COST):
        y = bellman_target(kind, batch, agent, cfg.gamma, cfg.robust, noise)
        crit = agent.critics[kind]
        loss, grads = critic_loss_grads(crit, batch.s, batch.a, y)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite {kind} critic loss")
        crit.opt.step(grads)
        losses[kind] = loss
    for kind in (otp.REWARD, otp.COST):
        crit = agent.critics[kind]
        ema_update(crit.target, crit.net, cfg.tau)
    return losses


def estimate_constraint(states, agent: Agent, rng, k: int = 4) -> float:
    """Monte Carlo estimate of ``E_s E_{a~pi} Q_c(s, a)`` with ``k`` draws per state."""
    states = np.atleast_2d(states)
    if states.shape[0] == 0:
        raise ValueError("empty batch")
    noise = rng.standard_normal((k, states.shape[0], agent.action_dim))
    rep = np.repeat(states[None], k, axis=0).reshape(-1, agent.state_dim)
    a, _ = agent.policy.sample(rep, noise.reshape(-1, agent.action_dim))
    return float(np.mean(agent.critics.cost.q(rep, agent.clip_action(a))))


def policy_objective_grads(agent: Agent, states, noise, weights: dict, penalty: float):
    """Gradient of ``-(sum_k w_k E[Q_k(s, a)]) + penalty * E|relu(|mu| - bound)|^2``."""
    a, _ = agent.policy.sample(states, noise)
    ac = agent.clip_action(a)
    inside = (a > agent.action_low) & (a < agent.action_high)
    B = states.shape[0]
    d_a = np.zeros_like(a)
    for kind, w in weights.items():
        if w == 0.0:
            continue
        crit = agent.critics[kind]
        crit.q(states, ac)
        _, _, dq_da = crit.grad_inputs(np.full(B, -w / B))
        d_a += dq_da * inside
    mean = agent.policy.distribution(states)[0]
    agent.policy.sample(states, noise)  # restore the cache for backward
    over = np.maximum(mean - agent.action_high, 0.0) - np.maximum(agent.action_low - mean, 0.0)
    d_mean = penalty * 2.0 * over / B
    grads, _ = agent.policy.backward(d_a, d_mean=d_mean)
    return grads


def policy_update_crpo(agent: Agent, batch: Batch, cfg: TrainConfig, rng,
                       critic_budget: float) -> tuple:
    """Reward ascent when the batch constraint estimate is within budget,
    cost descent otherwise. Returns ``(branch, estimate)``."""
    est = estimate_constraint(batch.s, agent, rng, cfg.constraint_samples)
    noise = rng.standard_normal((len(batch), agent.action_dim))
    if est <= critic_budget:
        branch, weights = REWARD_BRANCH, {otp.REWARD: 1.0}
    else:
        branch, weights = COST_BRANCH, {otp.COST: -1.0}
    grads = policy_objective_grads(agent, batch.s, noise, weights, cfg.action_penalty)
    _check_finite(grads, "policy")
    agent.policy_opt.step(grads)
    return branch, est


def policy_update_lagrange(agent: Agent, batch: Batch, cfg: TrainConfig, rng,
                           critic_budget: float) -> tuple:
    """Ascent on ``E[Q_r] - lam (E[Q_c] - B)``, then projected dual ascent on lam."""
    est = estimate_constraint(batch.s, agent, rng, cfg.constraint_samples)
    noise = rng.standard_normal((len(batch), agent.action_dim))
    weights = {otp.REWARD: 1.0, otp.COST: -agent.lagrange}
    grads = policy_objective_grads(agent, batch.s, noise, weights, cfg.action_penalty)
    _check_finite(grads, "policy")
    agent.policy_opt.step(grads)
    agent.lagrange = max(0.0, agent.lagrange + cfg.lagrange_dual_lr * (est - critic_budget))
    return "lagrange", est


def _check_finite(grads, what):
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingDiverged(f"non-finite {what} gradient")


def otp_step(agent: Agent, batch: Batch, rng) -> dict:
    noise = rng.standard_normal((len(batch), agent.action_dim))
    info = {}
    for kind in (otp.REWARD, otp.COST):
        vf = policy_value_fn(agent, agent.critics[kind], noise, target=True)
        info[kind] = otp.update_otp(agent.pnets[kind], batch.s, batch.a, batch.s2, vf)
    return info


@dataclass
class TrainResult:
    agent: Agent
    curves: list = field(default_factory=list)
    episodes: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    diverged: str | None = None

    def final_training_cost(self, last: int = 20) -> float:
        train = [e["total_cost"] for e in self.episodes if e["kind"] == "train"]
        return float(np.mean(train[-last:])) if train else math.nan


def _streams(seed: int) -> dict:
    names = ["init", "env", "explore", "sample", "update", "otp", "eval"]
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def build_agent(env, cfg: TrainConfig) -> Agent:
    rng = _streams(cfg.seed)["init"]
    return Agent(env.state_dim, env.action_dim, env.action_low, env.action_high, cfg, rng)


def agent_meta(env, cfg: TrainConfig, step: int, manifest: str = "") -> dict:
    return {"task": env.name, "state_dim": env.state_dim, "action_dim": env.action_dim,
            "action_low": list(map(float, env.action_low)),
            "action_high": list(map(float, env.action_high)), "step": step,
            "config": cfg.to_dict(), "manifest": manifest}


def load_agent(path) -> tuple:
    """Rebuild an :class:`Agent` from a checkpoint; returns ``(agent, meta)``."""
    arrays, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    agent = Agent(meta["state_dim"], meta["action_dim"], meta["action_low"],
                  meta["action_high"], cfg, np.random.default_rng(0))
    agent.load_arrays(arrays)
    return agent, meta


def train(env, cfg: TrainConfig, outdir=None, manifest: str = "") -> TrainResult:
    """Collect nominal-environment data and update with the configured rule.

    Writes ``curves.csv``, ``episodes.csv`` and ``checkpoints/step_*.ckpt``
    under ``outdir`` when given. A non-finite loss or gradient stops training
    and leaves the last good checkpoint in place.
    """
    cfg.validate()
    streams = _streams(cfg.seed)
    agent = Agent(env.state_dim, env.action_dim, env.action_low, env.action_high, cfg,
                  streams["init"])
    critic_budget = resolve_critic_budget(env, cfg)
    buffer = ReplayBuffer(env.state_dim, env.action_dim, min(cfg.buffer_capacity,
                                                             max(cfg.total_steps, 1)))
    result = TrainResult(agent)
    out = Path(outdir) if outdir is not None else None
    writers = {}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        writers["curves"] = _CsvSink(out / "curves.csv", CURVE_COLUMNS)
        writers["episodes"] = _CsvSink(out / "episodes.csv", EPISODE_COLUMNS)

    def checkpoint(step):
        if out is None:
            return
        path = out / "checkpoints" / f"step_{step:08d}.ckpt"
        save_checkpoint(path, agent.arrays(), agent_meta(env, cfg, step, manifest))
        result.checkpoints.append(path)

    def record_episode(kind, step, total_r, total_c):
        row = {"schema": EPISODES_SCHEMA, "manifest": manifest, "episode": len(result.episodes),
               "step": step, "kind": kind, "total_reward": total_r, "total_cost": total_c}
        result.episodes.append(row)
        if "episodes" in writers:
            writers["episodes"].write(row)

    # evaluation episodes run on their own copy so the training episode is untouched
    eval_env = env.with_param(env.param)
    checkpoint(0)
    episode_seed = int(streams["env"].integers(2 ** 31))
    s = env.reset(seed=episode_seed)
    ep_r = ep_c = 0.0
    t = 0
    n_updates = 0
    try:
        for step in range(1, cfg.total_steps + 1):
            if step <= cfg.warmup_steps:
                a = env.random_action(streams["explore"])
            else:
                a = agent.act(s, streams["explore"])
            s2, r, c, terminal = env.step(a)
            buffer.add(s, a, r, c, s2, terminal)
            ep_r += r
            ep_c += c
            t += 1
            s = s2
            if terminal or t >= env.horizon:
                record_episode("train", step, ep_r, ep_c)
                episode_seed = int(streams["env"].integers(2 ** 31))
                s = env.reset(seed=episode_seed)
                ep_r = ep_c = 0.0
                t = 0
            if step > cfg.warmup_steps and len(buffer) >= 1:
                for _ in range(cfg.updates_per_step):
                    n_updates += 1
                    info = _update(agent, buffer, cfg, streams, critic_budget)
                    if n_updates % cfg.log_every == 0:
                        row = {"schema": CURVES_SCHEMA, "manifest": manifest, "step": step,
                               "update": n_updates, "critic_budget": critic_budget, **info}
                        result.curves.append(row)
                        if "curves" in writers:
                            writers["curves"].write(row)
            if cfg.eval_every and step % cfg.eval_every == 0:
                res = rollout(eval_env, agent.act, deterministic=True,
                              seed=int(streams["eval"].integers(2 ** 31)))
                record_episode("eval", step, res.total_reward, res.total_cost)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                checkpoint(step)
    except (TrainingDiverged, otp.OTPUpdateError) as exc:
        log.error("training stopped at step %d: %s", step, exc)
        result.diverged = str(exc)
    else:
        if not result.checkpoints or cfg.total_steps % max(cfg.checkpoint_every, 1) != 0:
            if cfg.total_steps > 0:
                checkpoint(cfg.total_steps)
    finally:
        for w in writers.values():
            w.close()
    return result


def _update(agent: Agent, buffer: ReplayBuffer, cfg: TrainConfig, streams, critic_budget):
    batch = buffer.sample(cfg.batch_size, streams["sample"])
    info = {"budget_usage_r": 0.0, "budget_usage_c": 0.0}
    if cfg.robust and not cfg.freeze_otp:
        o = otp_step(agent, batch, streams["otp"])
        info["budget_usage_r"] = o[otp.REWARD]["budget_usage"]
        info["budget_usage_c"] = o[otp.COST]["budget_usage"]
    losses = critic_update(agent, batch, cfg, streams["update"])
    if cfg.method == CRPO:
        branch, est = policy_update_crpo(agent, batch, cfg, streams["update"], critic_budget)
    else:
        branch, est = policy_update_lagrange(agent, batch, cfg, streams["update"], critic_budget)
    info.update({"branch": branch, "constraint_estimate": est, "loss_r": losses[otp.REWARD],
                 "loss_c": losses[otp.COST], "lambda_r": agent.pnets[otp.REWARD].lam,
                 "lambda_c": agent.pnets[otp.COST].lam, "lambda_pol": agent.lagrange})
    return info


class _CsvSink:
    def __init__(self, path, columns):
        self.fh = open(path, "w", newline="", encoding="utf-8")
        self.writer = csv.DictWriter(self.fh, fieldnames=columns, lineterminator="\r\n")
        self.writer.writeheader()

    def write(self, row):
        self.writer.writerow({k: _fmt(v) for k, v in row.items()})

    def close(self):
        self.fh.close()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
