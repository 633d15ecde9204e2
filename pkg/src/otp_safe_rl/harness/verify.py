"""Numerical property suites behind ``verify``.

Each suite returns a list of :class:`Check` rows. A failing row carries the
instance that produced it so it can be replayed.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import otp
from ..nn import GaussianPolicy, Mlp, gradient_check
from ..robust_bellman import (
    COST, INF_DIR, REWARD, SUP_DIR, QTable, TabularPolicy, nominal_bellman_apply,
    robust_bellman_apply, robust_policy_evaluation, policy_values, solve_rcmdp_bruteforce,
    worst_case_expectation_dual, worst_case_expectation_primal,
)
from ..transport import TransportCost, eval_cost
from .instances import COST_KINDS, random_inner_problem, random_rcmdp

GRAD_TOL = 1e-4
KINK_TOL = 1e-3
EPS_GRID = (0.0, 0.02, 0.05, 0.1, 0.2, 0.5)
CHECK_COLUMNS = ["schema", "manifest", "suite", "check", "instance", "value", "tol", "passed"]
CHECK_SCHEMA = "verify-v1"


@dataclass
class Check:
    suite: str
    check: str
    instance: int
    value: float
    tol: float
    passed: bool
    replay: dict = field(default_factory=dict, repr=False)


def _arr(x):
    return np.asarray(x).tolist()


def duality_suite(seed=7, n_instances=100, tol=1e-5) -> list:
    """Primal LP versus dual line search on random inner problems of every cost kind."""
    rng = np.random.default_rng(seed)
    out = []
    for kind in COST_KINDS:
        for i in range(n_instances):
            p, v, D, eps = random_inner_problem(rng, kind)
            gap = 0.0
            for direction in (INF_DIR, SUP_DIR):
                primal = worst_case_expectation_primal(p, v, D, eps, direction)[0]
                dual = worst_case_expectation_dual(p, v, D, eps, direction)
                gap = max(gap, abs(primal - dual))
            replay = {"p_hat": _arr(p), "values": _arr(v), "cost_row": _arr(D), "eps": eps}
            out.append(Check("duality", kind, i, gap, tol, gap <= tol, replay))
    return out


def reduction_suite(seed=7, n_instances=50, tol=1e-12) -> list:
    """Zero radius collapses the robust operator onto the nominal one."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_instances):
        mdp = random_rcmdp(rng, kind=COST_KINDS[i % len(COST_KINDS)]).with_radius(0.0)
        pol = TabularPolicy(rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states))
        err = 0.0
        for kind in (REWARD, COST):
            q = QTable(rng.normal(size=(mdp.n_states, mdp.n_actions)) * 3, kind)
            ref = nominal_bellman_apply(mdp, pol, q).values
            for method in ("primal", "dual"):
                got = robust_bellman_apply(mdp, pol, q, method=method).values
                err = max(err, float(np.max(np.abs(got - ref))))
        out.append(Check("reduction", "eps0_equals_nominal", i, err, tol, err <= tol,
                         {"mdp": mdp.to_json(), "policy": _arr(pol.probs)}))
    return out


def contraction_suite(seed=7, n_instances=100, slack=1e-9) -> list:
    """``||TQ - TQ'||_inf <= gamma ||Q - Q'||_inf`` for both operator directions."""
    rng = np.random.default_rng(seed)
    out = []
    for kind in (REWARD, COST):
        for i in range(n_instances):
            mdp = random_rcmdp(rng, kind=COST_KINDS[i % len(COST_KINDS)])
            pol = TabularPolicy(rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states))
            q1 = QTable(rng.normal(size=(mdp.n_states, mdp.n_actions)) * 5, kind)
            q2 = QTable(rng.normal(size=(mdp.n_states, mdp.n_actions)) * 5, kind)
            lhs = float(np.max(np.abs(robust_bellman_apply(mdp, pol, q1).values
                                      - robust_bellman_apply(mdp, pol, q2).values)))
            rhs = mdp.gamma * float(np.max(np.abs(q1.values - q2.values)))
            excess = lhs - rhs
            out.append(Check("contraction", kind, i, excess, slack, excess <= slack,
                             {"mdp": mdp.to_json(), "policy": _arr(pol.probs),
                              "q1": _arr(q1.values), "q2": _arr(q2.values)}))
    return out


def monotonicity_suite(seed=7, n_instances=50, tol=1e-8) -> list:
    """Reward-direction values never rise and cost-direction values never fall in eps."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_instances):
        p, v, D, _ = random_inner_problem(rng, COST_KINDS[i % len(COST_KINDS)])
        lo = np.array([worst_case_expectation_primal(p, v, D, e, INF_DIR)[0] for e in EPS_GRID])
        hi = np.array([worst_case_expectation_primal(p, v, D, e, SUP_DIR)[0] for e in EPS_GRID])
        worst = float(max(np.max(np.diff(lo)), np.max(-np.diff(hi)), 0.0))
        out.append(Check("monotonicity", "eps_grid", i, worst, tol, worst <= tol,
                         {"p_hat": _arr(p), "values": _arr(v), "cost_row": _arr(D)}))
    return out


# gradient checks ----------------------------------------------------------

def _kinked(net: Mlp, margin=1e-4) -> bool:
    """True when some ELU pre-activation of the last forward sits near zero."""
    _, cache = net._cache
    return any(isinstance(a, tuple) and a[0] == "elu" and np.any(np.abs(a[1]) < margin)
               for a in cache[1::2])


def _case_mlp(rng, layer_norm):
    net = Mlp([5, 12, 12, 3], layer_norm=layer_norm, rng=rng)
    x = rng.normal(size=(7, 5))
    w = rng.normal(size=(7, 3))

    def loss():
        return float(np.sum(w * net.forward(x)))

    def grads():
        net.forward(x)
        return net.backward(w)[0]
    return loss, grads, net.params, [net]


def _case_mlp_input(rng):
    net = Mlp([4, 10, 10, 2], layer_norm=True, rng=rng)
    x = rng.normal(size=(6, 4))
    w = rng.normal(size=(6, 2))

    def loss():
        return float(np.sum(w * net.forward(x)))

    def grads():
        net.forward(x)
        return [net.backward(w)[1]]
    return loss, grads, [x], [net]


def _case_policy(rng, with_mean_penalty):
    pol = GaussianPolicy(3, 2, hidden=(10, 10), layer_norm=True, rng=rng)
    # move the variance head off its constant initialisation
    for p in pol.params:
        p += 0.1 * rng.normal(size=p.shape)
    s = rng.normal(size=(5, 3))
    noise = rng.normal(size=(5, 2))
    w = rng.normal(size=(5, 2))
    wm = rng.normal(size=(5, 2)) if with_mean_penalty else np.zeros((5, 2))

    def loss():
        a, _ = pol.sample(s, noise)
        mean = pol.distribution(s)[0]
        return float(np.sum(w * a) + np.sum(wm * mean))

    def grads():
        pol.sample(s, noise)
        return pol.backward(w, d_mean=wm)[0]
    return loss, grads, pol.params, [pol.backbone]


def _case_policy_state(rng):
    pol = GaussianPolicy(3, 2, hidden=(10, 10), layer_norm=True, rng=rng)
    for p in pol.params:
        p += 0.1 * rng.normal(size=p.shape)
    s = rng.normal(size=(5, 3))
    noise = rng.normal(size=(5, 2))
    w = rng.normal(size=(5, 2))

    def loss():
        return float(np.sum(w * pol.sample(s, noise)[0]))

    def grads():
        pol.sample(s, noise)
        return [pol.backward(w)[1]]
    return loss, grads, [s], [pol.backbone]


def _case_pnet(rng, clip):
    pn = otp.PerturbationNet(3, 2, otp.COST, eps_delta=0.05, hidden=(8, 8), clip=clip, rng=rng)
    for p in pn.net.params:
        p += 0.3 * rng.normal(size=p.shape)
    s, a, sh = rng.normal(size=(6, 3)), rng.normal(size=(6, 2)), rng.normal(size=(6, 3))
    w = rng.normal(size=(6, 3))

    def loss():
        return float(np.sum(w * pn.delta(s, a, sh)))

    def grads():
        pn.delta(s, a, sh)
        return pn._backward(w)
    return loss, grads, pn.net.params, [pn.net]


def _small_agent(rng, robust=True):
    from ..safe_rl import Agent, TrainConfig
    cfg = TrainConfig(policy_hidden=(8, 8), critic_hidden=(8, 8), otp_hidden=(8, 8),
                      robust=robust, eps_delta=0.05)
    agent = Agent(3, 2, -np.ones(2), np.ones(2), cfg, rng)
    for net in (agent.policy.backbone, agent.critics.reward.net, agent.critics.cost.net,
                agent.critics.reward.target.net, agent.critics.cost.target.net,
                agent.pnets[otp.REWARD].net, agent.pnets[otp.COST].net):
        for p in net.params:
            p += 0.2 * rng.normal(size=p.shape)
    return agent, cfg


def _case_value_fn(rng):
    from ..safe_rl import policy_value_fn
    agent, _ = _small_agent(rng)
    # small actions keep the clip inactive almost surely
    for p in agent.policy.params:
        p *= 0.3
    noise = 0.3 * rng.normal(size=(5, 2))
    x = rng.normal(size=(5, 3))
    vf = policy_value_fn(agent, agent.critics.cost, noise, target=True)

    def loss():
        return float(np.sum(vf(x)[0]))

    def grads():
        return [vf(x)[1]]
    return loss, grads, [x], [agent.critics.cost.target.net, agent.policy.backbone]


def _case_otp_lagrangian(rng, kind):
    from ..safe_rl import policy_value_fn
    agent, _ = _small_agent(rng)
    for p in agent.policy.params:
        p *= 0.3
    pn = agent.pnets[kind]
    pn.lam = float(rng.uniform(0.05, 2.0))
    s, a = rng.normal(size=(6, 3)), rng.uniform(-1, 1, (6, 2))
    sh = s + rng.normal(size=(6, 3))
    noise = 0.3 * rng.normal(size=(6, 2))
    vf = policy_value_fn(agent, agent.critics[kind], noise, target=True)

    def loss():
        return otp.otp_gradients(pn, s, a, sh, vf)[1]["loss"]

    def grads():
        return otp.otp_gradients(pn, s, a, sh, vf)[0]
    return loss, grads, pn.net.params, [pn.net, agent.critics[kind].target.net]


def _case_critic_loss(rng):
    from ..safe_rl import critic_loss_grads
    agent, _ = _small_agent(rng)
    crit = agent.critics.reward
    s, a, y = rng.normal(size=(8, 3)), rng.uniform(-1, 1, (8, 2)), rng.normal(size=8)

    def loss():
        return critic_loss_grads(crit, s, a, y)[0]

    def grads():
        return critic_loss_grads(crit, s, a, y)[1]
    return loss, grads, crit.net.params, [crit.net]


def _case_policy_objective(rng):
    from ..safe_rl import policy_objective_grads
    agent, _ = _small_agent(rng)
    for p in agent.policy.params:
        p *= 0.3
    s = rng.normal(size=(6, 3))
    noise = 0.3 * rng.normal(size=(6, 2))
    weights = {otp.REWARD: 1.0, otp.COST: -float(rng.uniform(0, 2))}
    penalty = 5.0
    # shift the means partly outside the action box so the penalty term is active
    bb = agent.policy.backbone
    bb.param(f"b{bb.n_layers - 1}")[:2] += 1.2

    def loss():
        a, _ = agent.policy.sample(s, noise)
        ac = np.clip(a, -1, 1)
        total = 0.0
        for kind, w in weights.items():
            total -= w * float(np.mean(agent.critics[kind].q(s, ac)))
        mean = agent.policy.distribution(s)[0]
        over = np.maximum(mean - 1, 0) - np.maximum(-1 - mean, 0)
        return total + penalty * float(np.sum(over ** 2)) / s.shape[0]

    def grads():
        return policy_objective_grads(agent, s, noise, weights, penalty)
    return loss, grads, agent.policy.params, [agent.policy.backbone]


ARCHITECTURES = {
    "mlp_elu": lambda rng: _case_mlp(rng, False),
    "mlp_layernorm": lambda rng: _case_mlp(rng, True),
    "mlp_input": _case_mlp_input,
    "policy_sample": lambda rng: _case_policy(rng, False),
    "policy_mean_grad": lambda rng: _case_policy(rng, True),
    "policy_state": _case_policy_state,
    "perturbation_smooth": lambda rng: _case_pnet(rng, otp.SMOOTH),
    "perturbation_hard": lambda rng: _case_pnet(rng, otp.HARD),
    "perturbation_none": lambda rng: _case_pnet(rng, otp.NONE),
    "value_through_policy": _case_value_fn,
    "otp_lagrangian_reward": lambda rng: _case_otp_lagrangian(rng, otp.REWARD),
    "otp_lagrangian_cost": lambda rng: _case_otp_lagrangian(rng, otp.COST),
    "critic_loss": _case_critic_loss,
    "policy_objective": _case_policy_objective,
}


def gradients_suite(seed=7, n_points=20, per_param=8, h=1e-5) -> list:
    """Central finite differences against analytic gradients for every network
    and training loss, ``n_points`` random parameter draws each."""
    out = []
    for name, build in ARCHITECTURES.items():
        for i in range(n_points):
            rng = np.random.default_rng([seed, i, len(name)])
            loss, grads, params, nets = build(rng)
            err = gradient_check(loss, grads, params, rng, per_param=per_param, h=h)
            loss()
            kink = any(_kinked(n) for n in nets if n._cache is not None)
            tol = KINK_TOL if kink else GRAD_TOL
            out.append(Check("gradients", name, i, err, tol, err <= tol,
                             {"seed": seed, "point": i, "kink": kink}))
    return out


# perturbation identities --------------------------------------------------

def otp_identities_suite(seed=7, n_samples=10_000, tol=1e-12) -> list:
    rng = np.random.default_rng(seed)
    out = []
    worst = 0.0
    worst_case = {}
    for i in range(n_samples):
        n = int(rng.integers(1, 6))
        s = rng.normal(size=n)
        sh = s + rng.choice([-1.0, 1.0], n) * rng.uniform(0.05, 2.0, n)
        delta = rng.uniform(-0.5, 0.5, n)
        g = otp.perturb(s, sh, delta)
        got = eval_cost(TransportCost.percent_sq(s), sh, g)
        err = abs(got - float(np.mean(delta ** 2)))
        if err > worst:
            worst, worst_case = err, {"s": _arr(s), "s_hat_prime": _arr(sh), "delta": _arr(delta)}
    out.append(Check("otp-identities", "percent_sq_cost_identity", 0, worst, tol, worst <= tol,
                     worst_case))

    # frozen coordinates stay exactly where they were
    s = rng.normal(size=(200, 4))
    sh = s.copy()
    sh[:, :2] += rng.normal(size=(200, 2))
    g = otp.perturb(s, sh, rng.uniform(-0.04, 0.04, (200, 4)))
    frozen_ok = bool(np.array_equal(g[:, 2:], s[:, 2:]))
    out.append(Check("otp-identities", "frozen_coordinates_fixed", 0, 0.0 if frozen_ok else 1.0,
                     0.0, frozen_ok))

    # freshly initialised perturbation nets leave Bellman targets untouched
    from ..safe_rl import Batch, bellman_target
    agent = _fresh_agent_with_zero_delta(seed)
    batch = Batch(rng.normal(size=(64, 3)), rng.uniform(-1, 1, (64, 2)), rng.uniform(size=64),
                  rng.integers(0, 2, 64).astype(float), rng.normal(size=(64, 3)),
                  (rng.random(64) < 0.1).astype(float))
    noise = rng.normal(size=(64, 2))
    for kind in (otp.REWARD, otp.COST):
        robust = bellman_target(kind, batch, agent, 0.99, True, noise)
        plain = bellman_target(kind, batch, agent, 0.99, False, noise)
        same = bool(np.array_equal(robust, plain))
        out.append(Check("otp-identities", f"zero_init_target_{kind}", 0,
                         float(np.max(np.abs(robust - plain))), 0.0, same))
    return out


def _fresh_agent_with_zero_delta(seed):
    from ..safe_rl import Agent, TrainConfig
    cfg = TrainConfig(policy_hidden=(8, 8), critic_hidden=(8, 8), otp_hidden=(8, 8))
    return Agent(3, 2, -np.ones(2), np.ones(2), cfg, np.random.default_rng(seed))


# tabular oracle on the chain task -----------------------------------------

CHAIN_EPS = (0.0, 0.05, 0.1, 0.2)


def chain_suite(seed=7, tol=1e-7, eps_grid=CHAIN_EPS) -> list:
    """Brute-force RC-MDP solutions on the chain task against direct evaluation,
    and feasible sets that shrink as the radius grows."""
    from ..envs import make_env
    env = make_env("chain")
    out = []
    prev = None
    for i, eps in enumerate(eps_grid):
        mdp = env.as_rcmdp(eps)
        res = solve_rcmdp_bruteforce(mdp)
        err = 0.0
        order_ok = True
        for row in res.table:
            pol = TabularPolicy.deterministic(row.actions, mdp.n_actions)
            jr = float(mdp.rho0 @ policy_values(pol, robust_policy_evaluation(
                mdp, pol, REWARD, method="dual").values))
            jc = float(mdp.rho0 @ policy_values(pol, robust_policy_evaluation(
                mdp, pol, COST, method="dual").values))
            err = max(err, abs(jr - row.J_reward), abs(jc - row.J_cost))
            order_ok &= (jc <= mdp.budget) == row.feasible
        feas = [r for r in res.table if r.feasible]
        if feas:
            top = max(r.J_reward for r in feas)
            order_ok &= abs(res.J_r_worst - top) <= tol
        out.append(Check("chain", f"eval_agreement_eps{eps}", i, err, tol,
                         err <= tol and order_ok, {"eps": eps}))
        fset = res.feasible_set()
        if prev is not None:
            shrink = fset <= prev
            out.append(Check("chain", f"feasible_shrinks_eps{eps}", i,
                             float(len(fset - prev)), 0.0, shrink,
                             {"eps": eps, "feasible": sorted(map(list, fset)),
                              "previous": sorted(map(list, prev))}))
        prev = fset
    return out


SUITES = {
    "duality": duality_suite,
    "reduction": reduction_suite,
    "contraction": contraction_suite,
    "monotonicity": monotonicity_suite,
    "gradients": gradients_suite,
    "otp-identities": otp_identities_suite,
    "chain": chain_suite,
}


def run_suites(names, seed=7, n_instances=None) -> list:
    if "all" in names:
        names = list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown suite(s) {unknown}; choose from {sorted(SUITES)} or 'all'")
    checks = []
    for name in names:
        fn = SUITES[name]
        if n_instances is not None and name in ("duality", "reduction", "contraction",
                                                "monotonicity"):
            checks.extend(fn(seed=seed, n_instances=n_instances))
        else:
            checks.extend(fn(seed=seed))
    return checks


def write_checks(checks, outdir, manifest="") -> Path:
    """Per-check CSV plus one JSON file per failing instance under ``failures/``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / "verify.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(CHECK_COLUMNS)
        for c in checks:
            w.writerow([CHECK_SCHEMA, manifest, c.suite, c.check, c.instance, repr(float(c.value)),
                        repr(float(c.tol)), int(c.passed)])
    failed = [c for c in checks if not c.passed]
    if failed:
        fdir = outdir / "failures"
        fdir.mkdir(exist_ok=True)
        for c in failed:
            doc = asdict(c)
            (fdir / f"{c.suite}_{c.check}_{c.instance}.json").write_text(
                json.dumps(doc, indent=1, sort_keys=True))
    return path
