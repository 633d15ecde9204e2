"""Training runs, perturbation sweeps and report tables.

Outputs follow ``outdir/{manifest.json, curves.csv, episodes.csv,
checkpoints/, eval.csv, report.md, figures/*.svg}``. Every CSV row names the
manifest hash of the run that wrote it.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .. import safe_rl
from ..envs import make_env, make_test_suite, rollout
from ..safe_rl import TrainConfig, load_agent

PACKAGE_ROOT = Path(__file__).resolve().parents[1]
EVAL_SCHEMA = "eval-v1"
EVAL_COLUMNS = ["schema", "manifest", "row", "method", "task", "param", "seed", "rollouts",
                "total_reward", "total_cost", "safe", "budget"]
TRAINING_FILES = ("nn.py", "otp.py", "safe_rl.py", "envs")


class UsageError(ValueError):
    """Invalid invocation, raised before any compute starts."""


def code_hash(parts=None) -> str:
    """Content hash over the package sources (or the listed sub-paths).

    Files are visited in sorted order and hashed as ``path\\0bytes`` so the
    result depends on content and layout only.
    """
    roots = [PACKAGE_ROOT / p for p in parts] if parts else [PACKAGE_ROOT]
    files = []
    for root in roots:
        if root.is_file():
            files.append(root)
        else:
            files.extend(p for p in root.rglob("*") if p.is_file()
                         and p.suffix in (".py", ".json") and "__pycache__" not in p.parts)
    h = hashlib.sha256()
    for f in sorted(files):
        h.update(f.relative_to(PACKAGE_ROOT).as_posix().encode())
        h.update(b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()


def manifest_hash(config: dict, seeds, code: str) -> str:
    doc = json.dumps({"config": config, "seeds": list(seeds), "code": code}, sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def write_manifest(outdir, command: str, config: dict, seeds) -> dict:
    code = code_hash()
    manifest = {
        "hash": manifest_hash({"command": command, **config}, seeds, code),
        "command": command,
        "config": config,
        "seeds": list(seeds),
        "code_hash": code,
        "training_code_hash": code_hash(TRAINING_FILES),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "outdir": str(outdir),
    }
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def resolve_train_config(task: str, method: str = safe_rl.CRPO, robust: bool = True,
                         seed: int = 0, steps: int | None = None, eps_delta: float | None = None,
                         budget: float | None = None, config: dict | None = None) -> TrainConfig:
    """Defaults, then the task's training profile, then a config file, then flags."""
    try:
        env = make_env(task)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    values = dict(env.config.get("train", {}))
    values.update(config or {})
    values["method"] = method
    values["robust"] = bool(robust)
    values["seed"] = int(seed)
    if steps is not None:
        values["total_steps"] = int(steps)
    if eps_delta is not None:
        values["eps_delta"] = float(eps_delta)
    if budget is not None:
        values["budget"] = float(budget)
    try:
        return TrainConfig.from_dict(values).validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None


def method_label(cfg: dict) -> str:
    return ("otp-" if cfg.get("robust") else "") + cfg.get("method", safe_rl.CRPO)


def cmd_train(task: str, outdir, method: str = safe_rl.CRPO, robust: bool = True, seed: int = 0,
              steps: int | None = None, eps_delta: float | None = None,
              budget: float | None = None, config: dict | None = None) -> dict:
    cfg = resolve_train_config(task, method, robust, seed, steps, eps_delta, budget, config)
    outdir = Path(outdir)
    manifest = write_manifest(outdir, "train", {"task": task, "train": cfg.to_dict()}, [seed])
    env = make_env(task)
    result = safe_rl.train(env, cfg, outdir=outdir, manifest=manifest["hash"])
    summary = {
        "manifest": manifest["hash"],
        "label": method_label(cfg.to_dict()),
        "final_checkpoint": str(result.checkpoints[-1]) if result.checkpoints else None,
        "final_training_cost": result.final_training_cost(),
        "diverged": result.diverged,
    }
    if result.curves:
        from .svg import line_chart
        fig = outdir / "figures"
        fig.mkdir(exist_ok=True)
        steps_ = [c["step"] for c in result.curves]
        line_chart(fig / "constraint_estimate.svg", steps_,
                   {"constraint estimate": [c["constraint_estimate"] for c in result.curves],
                    "threshold": [c["critic_budget"] for c in result.curves]},
                   title="Batch cost estimate", xlabel="step")
    train_eps = [e for e in result.episodes if e["kind"] == "train"]
    if train_eps:
        from .svg import line_chart
        fig = outdir / "figures"
        fig.mkdir(exist_ok=True)
        line_chart(fig / "training_episodes.svg", [e["step"] for e in train_eps],
                   {"total cost": [e["total_cost"] for e in train_eps],
                    "budget": [env.budget] * len(train_eps)},
                   title="Training episode cost", xlabel="step")
    return summary


# evaluation ---------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    checkpoint: str
    task: str
    param: float
    rollouts: int
    seed: int


def rollout_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def _eval_cell(cell: Cell) -> dict:
    agent, meta = load_agent(cell.checkpoint)
    env = make_env(cell.task, param=cell.param)
    totals = np.array([[r.total_reward, r.total_cost] for r in (
        rollout(env, agent.act, deterministic=True, seed=rollout_seed(cell.seed, k))
        for k in range(cell.rollouts))])
    mean_r, mean_c = totals.mean(axis=0)
    return {"method": method_label(meta["config"]), "task": cell.task, "param": cell.param,
            "seed": int(meta["config"]["seed"]), "rollouts": cell.rollouts,
            "total_reward": float(mean_r), "total_cost": float(mean_c),
            "safe": int(mean_c <= env.budget), "budget": env.budget}


def num_workers() -> int:
    raw = os.environ.get("OTP_NUM_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"OTP_NUM_WORKERS must be an integer, got {raw!r}") from None


def cmd_eval(checkpoints, task: str, outdir, n_points: int = 5, rollouts: int = 10,
             seed: int = 0) -> Path:
    """Sweep the test suite for every checkpoint and write ``eval.csv``."""
    checkpoints = [str(c) for c in checkpoints]
    missing = [c for c in checkpoints if not Path(c).is_file()]
    if missing:
        raise FileNotFoundError(f"missing checkpoint(s): {', '.join(missing)}")
    if rollouts < 1:
        raise UsageError("rollouts must be >= 1")
    env = make_env(task)
    try:
        params = [e.param for e in make_test_suite(env, n_points)]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    outdir = Path(outdir)
    manifest = write_manifest(outdir, "eval", {"task": task, "n_points": n_points,
                                               "rollouts": rollouts,
                                               "checkpoints": _checkpoint_digests(checkpoints)},
                              [seed])
    cells = [Cell(c, task, p, rollouts, seed) for c in checkpoints for p in params]
    workers = min(num_workers(), len(cells))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_eval_cell, cells))
    else:
        rows = [_eval_cell(c) for c in cells]
    rows.sort(key=lambda r: (r["method"], r["task"], r["param"], r["seed"]))
    path = outdir / "eval.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS, lineterminator="\r\n")
        w.writeheader()
        for r in rows:
            w.writerow(_fmt_row({"schema": EVAL_SCHEMA, "manifest": manifest["hash"],
                                 "row": "cell", **r}))
        for method in sorted({r["method"] for r in rows}):
            sub = [r for r in rows if r["method"] == method]
            w.writerow(_fmt_row({
                "schema": EVAL_SCHEMA, "manifest": manifest["hash"], "row": "aggregate",
                "method": method, "task": task, "param": "", "seed": "", "rollouts": rollouts,
                "total_reward": float(np.mean([r["total_reward"] for r in sub])),
                "total_cost": float(np.mean([r["total_cost"] for r in sub])),
                "safe": 100.0 * float(np.mean([r["safe"] for r in sub])),
                "budget": env.budget}))
    return path


def _checkpoint_digests(paths):
    return {Path(p).name + ":" + str(i): hashlib.sha256(Path(p).read_bytes()).hexdigest()[:16]
            for i, p in enumerate(paths)}


def _fmt_row(row):
    return {k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()}


def read_eval_csv(path) -> list:
    """Cell rows of an eval CSV, with numeric fields parsed."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in EVAL_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise UsageError(f"{path}: missing column {missing[0]!r}")
        rows = []
        for r in reader:
            if r["schema"] != EVAL_SCHEMA:
                raise UsageError(f"{path}: column 'schema' holds {r['schema']!r}, "
                                 f"expected {EVAL_SCHEMA!r}")
            if r["row"] != "cell":
                continue
            rows.append({"method": r["method"], "task": r["task"], "param": float(r["param"]),
                         "seed": int(r["seed"]), "total_reward": float(r["total_reward"]),
                         "total_cost": float(r["total_cost"]), "safe": int(r["safe"]),
                         "budget": float(r["budget"])})
    return rows


# reporting ----------------------------------------------------------------

@dataclass
class MethodSummary:
    method: str
    n_cells: int
    pct_safe: float
    norm_reward: float
    norm_cost: float
    mean_reward: float
    mean_cost: float


@dataclass
class PairedComparison:
    method: str
    baseline: str
    n: int
    lower_cost: int
    higher_cost: int
    sign_p: float
    t_p: float


def _ratio_of_means(rows, base_rows, key):
    ratios = []
    envs = sorted({(r["task"], r["param"]) for r in base_rows})
    for env in envs:
        m = [r[key] for r in rows if (r["task"], r["param"]) == env]
        b = [r[key] for r in base_rows if (r["task"], r["param"]) == env]
        if m and b and np.mean(b) != 0.0:
            ratios.append(np.mean(m) / np.mean(b))
    return float(np.mean(ratios)) if ratios else math.nan


def sign_test(diffs) -> tuple:
    """Two-sided sign test on non-zero paired differences; returns ``(n_neg, n_pos, p)``."""
    diffs = np.asarray(diffs, float)
    neg, pos = int(np.sum(diffs < 0)), int(np.sum(diffs > 0))
    if neg + pos == 0:
        return neg, pos, 1.0
    return neg, pos, float(stats.binomtest(neg, neg + pos, 0.5).pvalue)


def paired_t(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    d = a - b
    if d.size < 2 or np.all(d == d[0]):
        return 1.0 if np.all(d == 0) else 0.0
    return float(stats.ttest_rel(a, b).pvalue)


def summarize(rows, baseline: str | None = None):
    """Per-method aggregates normalised against ``baseline`` plus paired cost comparisons."""
    methods = sorted({r["method"] for r in rows})
    if not methods:
        raise UsageError("no evaluation rows")
    if baseline is None:
        plain = [m for m in methods if not m.startswith("otp-")]
        baseline = plain[0] if plain else methods[0]
    if baseline not in methods:
        raise UsageError(f"baseline {baseline!r} not among methods {methods}")
    base_rows = [r for r in rows if r["method"] == baseline]
    summaries, comparisons = [], []
    for m in methods:
        sub = [r for r in rows if r["method"] == m]
        summaries.append(MethodSummary(
            m, len(sub), 100.0 * float(np.mean([r["safe"] for r in sub])),
            _ratio_of_means(sub, base_rows, "total_reward"),
            _ratio_of_means(sub, base_rows, "total_cost"),
            float(np.mean([r["total_reward"] for r in sub])),
            float(np.mean([r["total_cost"] for r in sub]))))
        if m == baseline:
            continue
        key = lambda r: (r["task"], r["param"], r["seed"])  # noqa: E731
        base = {key(r): r for r in base_rows}
        matched = [(r, base[key(r)]) for r in sorted(sub, key=key) if key(r) in base]
        a = [r["total_cost"] for r, _ in matched]
        b = [q["total_cost"] for _, q in matched]
        neg, pos, p = sign_test(np.subtract(a, b))
        comparisons.append(PairedComparison(m, baseline, len(matched), neg, pos, p,
                                            paired_t(a, b)))
    return summaries, comparisons, baseline


def render_report(summaries, comparisons, baseline, sources) -> str:
    lines = ["# Evaluation summary", "",
             f"Normalised against `{baseline}` per test environment (ratio of means, "
             "averaged over environments).", "",
             "| method | cells | % safe | normalized reward | normalized cost |",
             "|---|---|---|---|---|"]
    for s in summaries:
        lines.append(f"| {s.method} | {s.n_cells} | {s.pct_safe:.1f} | {s.norm_reward:.2f} "
                     f"| {s.norm_cost:.2f} |")
    if comparisons:
        lines += ["", "Paired cost comparison on matched (task, test env, seed) cells:", ""]
        for c in comparisons:
            lines.append(f"- `{c.method}` vs `{c.baseline}`: lower cost in {c.lower_cost} of "
                         f"{c.n} cells, higher in {c.higher_cost}; sign test p = {c.sign_p:.3g}, "
                         f"paired t-test p = {c.t_p:.3g}")
    lines += ["", "Sources:", ""] + [f"- `{s}`" for s in sources]
    return "\n".join(lines) + "\n"


def cmd_report(eval_csvs, outdir=None, baseline: str | None = None) -> str:
    if not eval_csvs:
        raise UsageError("report needs at least one eval CSV")
    rows = []
    for p in eval_csvs:
        rows.extend(read_eval_csv(p))
    summaries, comparisons, baseline = summarize(rows, baseline)
    text = render_report(summaries, comparisons, baseline, [str(p) for p in eval_csvs])
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "report.md").write_text(text, encoding="utf-8")
        from .svg import line_chart
        fig = outdir / "figures"
        fig.mkdir(exist_ok=True)
        for task in sorted({r["task"] for r in rows}):
            params = sorted({r["param"] for r in rows if r["task"] == task})
            for key in ("total_cost", "total_reward"):
                series = {}
                for m in sorted({r["method"] for r in rows}):
                    series[m] = [float(np.mean([r[key] for r in rows if r["method"] == m
                                                and r["task"] == task and r["param"] == p]
                                               or [math.nan])) for p in params]
                if key == "total_cost":
                    series["budget"] = [rows[0]["budget"]] * len(params)
                line_chart(fig / f"{task}_{key}.svg", params, series,
                           title=f"{task}: {key.replace('_', ' ')}", xlabel="test parameter")
    return text


# paired comparison with a result cache --------------------------------------

def comparison_key(task: str, arms: dict, seeds, steps: int) -> str:
    """Cache key over the training code and every resolved run configuration.

    Training is deterministic, so a finished run stored under this key is
    exactly what re-running it would produce.
    """
    configs = {label: [resolve_train_config(task, seed=s, steps=steps, **kw).to_dict()
                       for s in seeds] for label, kw in sorted(arms.items())}
    doc = json.dumps({"code": code_hash(TRAINING_FILES), "task": task, "configs": configs},
                     sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def run_comparison(task: str, arms: dict, seeds, steps: int, cache_root, log=print) -> dict:
    """Train every ``(arm, seed)`` pair unless a finished copy is cached.

    ``arms`` maps a label to keyword arguments of :func:`cmd_train` (method,
    robust, eps_delta, ...). Returns ``{label: [run summary per seed]}``.
    """
    import shutil
    root = Path(cache_root) / comparison_key(task, arms, seeds, steps)
    out = {}
    for label, kw in sorted(arms.items()):
        out[label] = []
        for s in seeds:
            run_dir = root / f"{label}_seed{s}"
            done = run_dir / "done.json"
            if done.is_file():
                summary = json.loads(done.read_text())
                log(f"cached {label} seed {s}")
            else:
                if run_dir.exists():
                    shutil.rmtree(run_dir)
                t0 = time.time()
                summary = cmd_train(task, run_dir, seed=s, steps=steps, **kw)
                summary["seconds"] = round(time.time() - t0, 1)
                done.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
                log(f"trained {label} seed {s} in {summary['seconds']} s")
            summary["run_dir"] = str(run_dir)
            out[label].append(summary)
    return out
