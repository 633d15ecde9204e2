import csv
import json

import numpy as np
import pytest

from otp_safe_rl import safe_rl
from otp_safe_rl.envs import make_env
from otp_safe_rl.harness import cli, experiment, verify
from otp_safe_rl.harness.experiment import EVAL_COLUMNS, EVAL_SCHEMA, UsageError
from otp_safe_rl.nn import save_checkpoint

CHAIN_STEPS = 300


@pytest.fixture(scope="module")
def chain_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    out = {}
    for robust in (False, True):
        d = root / ("otp" if robust else "plain")
        summary = experiment.cmd_train("chain", d, robust=robust, seed=1, steps=CHAIN_STEPS)
        out[robust] = (d, summary)
    return out


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _write_eval(path, cells, method_override=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS, lineterminator="\r\n")
        w.writeheader()
        for c in cells:
            w.writerow({"schema": EVAL_SCHEMA, "manifest": "x", "row": "cell", "rollouts": 10,
                        "budget": 25.0, **c,
                        **({"method": method_override} if method_override else {})})
    return path


def _synthetic_cells(method, cost_scale=1.0, reward_scale=1.0):
    rng = np.random.default_rng(0)
    cells = []
    for p in (0.5, 0.75, 1.0):
        for seed in range(3):
            r, c = 100 + rng.uniform(0, 50), 10 + rng.uniform(0, 30)
            cells.append({"method": method, "task": "point_goal", "param": p, "seed": seed,
                          "total_reward": r * reward_scale, "total_cost": c * cost_scale,
                          "safe": int(c * cost_scale <= 25.0)})
    return cells


# verify -----------------------------------------------------------------------

def test_verify_cli_passes_and_writes_csv(tmp_path, capsys):
    code = cli.main(["verify", "duality", "--n-instances", "5", "--outdir", str(tmp_path)])
    assert code == 0
    assert "PASS duality: 20/20 checks" in capsys.readouterr().out
    rows = _rows(tmp_path / "verify.csv")
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert len(rows) == 20 and all(r["manifest"] == manifest["hash"] for r in rows)
    assert all(r["schema"] == "verify-v1" for r in rows)


def test_verify_is_deterministic(tmp_path):
    for d in ("a", "b"):
        cli.main(["verify", "contraction", "--n-instances", "4", "--outdir", str(tmp_path / d)])
    assert (tmp_path / "a" / "verify.csv").read_bytes() == \
        (tmp_path / "b" / "verify.csv").read_bytes()


def test_verify_failure_exit_code_and_replay(tmp_path, monkeypatch, capsys):
    def broken(seed=7, n_instances=3):
        return [verify.Check("duality", "gap", i, 1.0, 1e-5, i != 1, {"seed": seed})
                for i in range(n_instances)]

    monkeypatch.setitem(verify.SUITES, "duality", broken)
    assert cli.main(["verify", "duality", "--n-instances", "3", "--outdir", str(tmp_path)]) == 1
    assert "FAIL duality: 2/3 checks" in capsys.readouterr().out
    replay = json.loads((tmp_path / "failures" / "duality_gap_1.json").read_text())
    assert replay["replay"] == {"seed": 7} and replay["passed"] is False


def test_verify_rejects_unknown_suite():
    with pytest.raises(SystemExit) as exc:
        cli.main(["verify", "everything"])
    assert exc.value.code == 2


# train ------------------------------------------------------------------------

def test_train_outputs_and_manifest(chain_runs):
    d, summary = chain_runs[True]
    manifest = json.loads((d / "manifest.json").read_text())
    assert summary["manifest"] == manifest["hash"] and summary["label"] == "otp-crpo"
    assert manifest["config"]["train"]["robust"] is True
    assert manifest["config"]["train"]["total_steps"] == CHAIN_STEPS
    for name in ("curves.csv", "episodes.csv"):
        rows = _rows(d / name)
        assert rows and all(r["manifest"] == manifest["hash"] for r in rows)
    assert (d / "figures" / "constraint_estimate.svg").read_text().startswith("<svg")
    assert sorted(p.name for p in (d / "checkpoints").iterdir()) == \
        ["step_00000000.ckpt", "step_00000300.ckpt"]


def test_robust_flag_only_touches_perturbation(chain_runs):
    plain = _rows(chain_runs[False][0] / "curves.csv")
    robust = _rows(chain_runs[True][0] / "curves.csv")
    assert all(float(r["budget_usage_r"]) == 0.0 for r in plain)
    assert any(float(r["budget_usage_r"]) > 0.0 for r in robust)
    p_cfg = json.loads((chain_runs[False][0] / "manifest.json").read_text())["config"]["train"]
    r_cfg = json.loads((chain_runs[True][0] / "manifest.json").read_text())["config"]["train"]
    assert {k for k in p_cfg if p_cfg[k] != r_cfg[k]} == {"robust"}


def test_train_zero_steps(tmp_path):
    experiment.cmd_train("chain", tmp_path, steps=0)
    assert (tmp_path / "manifest.json").is_file()
    assert [p.name for p in (tmp_path / "checkpoints").iterdir()] == ["step_00000000.ckpt"]


def test_train_config_layers(tmp_path):
    cfg = experiment.resolve_train_config("point_goal", seed=3, steps=10,
                                          config={"batch_size": 8, "lr_policy": 1e-3})
    assert cfg.batch_size == 8 and cfg.lr_policy == 1e-3 and cfg.seed == 3
    assert cfg.policy_hidden == (64, 64)
    assert experiment.resolve_train_config("point_goal").batch_size == 64
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"eps_delta": 0.05}))
    out = tmp_path / "run"
    code = cli.main(["train", "--task", "chain", "--steps", "0", "--config", str(path),
                     "--eps-delta", "0.03", "--outdir", str(out)])
    assert code == 0
    assert json.loads((out / "manifest.json").read_text())["config"]["train"]["eps_delta"] == 0.03


@pytest.mark.parametrize("argv", [
    ["train", "--task", "chain", "--steps", "5", "--config", "{cfg}"],
    ["train", "--task", "chain", "--eps-delta", "-1"],
    ["train", "--task", "nowhere"],
    ["train", "--task", "chain", "--robust", "maybe"],
])
def test_train_usage_errors_before_compute(tmp_path, argv):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"not_a_field": 1}))
    argv = [a.replace("{cfg}", str(bad)) for a in argv] + ["--outdir", str(tmp_path / "o")]
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    assert exc.value.code == 2
    assert not (tmp_path / "o" / "checkpoints").exists()


# eval -------------------------------------------------------------------------

def _final(chain_runs, robust):
    return chain_runs[robust][0] / "checkpoints" / f"step_{CHAIN_STEPS:08d}.ckpt"


def test_eval_cells_and_aggregates(chain_runs, tmp_path):
    ckpts = [_final(chain_runs, False), _final(chain_runs, True)]
    path = experiment.cmd_eval(ckpts, "chain", tmp_path, n_points=3, rollouts=4)
    rows = _rows(path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    cells = [r for r in rows if r["row"] == "cell"]
    aggs = [r for r in rows if r["row"] == "aggregate"]
    assert len(cells) == 6 and {r["method"] for r in aggs} == {"crpo", "otp-crpo"}
    assert all(r["manifest"] == manifest["hash"] for r in rows)
    for r in cells:
        assert int(r["safe"]) == int(float(r["total_cost"]) <= float(r["budget"]))
    for a in aggs:
        sub = [r for r in cells if r["method"] == a["method"]]
        assert 0.0 <= float(a["safe"]) <= 100.0
        assert np.isclose(float(a["total_cost"]), np.mean([float(r["total_cost"]) for r in sub]))


def test_eval_byte_identical_and_worker_independent(chain_runs, tmp_path, monkeypatch):
    ckpts = [_final(chain_runs, False), _final(chain_runs, True)]
    a = experiment.cmd_eval(ckpts, "chain", tmp_path / "a", n_points=2, rollouts=3)
    b = experiment.cmd_eval(ckpts, "chain", tmp_path / "b", n_points=2, rollouts=3)
    assert a.read_bytes() == b.read_bytes()
    monkeypatch.setenv("OTP_NUM_WORKERS", "3")
    c = experiment.cmd_eval(ckpts, "chain", tmp_path / "c", n_points=2, rollouts=3)
    assert a.read_bytes() == c.read_bytes()


def test_cost_free_policy_is_always_safe(tmp_path):
    env = make_env("chain")
    cfg = experiment.resolve_train_config("chain", steps=0)
    agent = safe_rl.build_agent(env, cfg)
    bb = agent.policy.backbone
    bb.param(f"W{bb.n_layers - 1}")[:, 0] = 0.0
    bb.param(f"b{bb.n_layers - 1}")[0] = -5.0  # always the cost-free action
    path = tmp_path / "cost_free.ckpt"
    save_checkpoint(path, agent.arrays(), safe_rl.agent_meta(env, cfg, 0))
    rows = _rows(experiment.cmd_eval([path], "chain", tmp_path, n_points=2, rollouts=3))
    agg = [r for r in rows if r["row"] == "aggregate"][0]
    assert float(agg["safe"]) == 100.0 and float(agg["total_cost"]) == 0.0


def test_eval_missing_checkpoint(tmp_path, capsys):
    code = cli.main(["eval", str(tmp_path / "nope.ckpt"), "--task", "chain",
                     "--outdir", str(tmp_path)])
    assert code == 2
    assert "nope.ckpt" in capsys.readouterr().err


def test_eval_usage_errors(chain_runs, tmp_path, monkeypatch):
    ck = [_final(chain_runs, False)]
    with pytest.raises(UsageError):
        experiment.cmd_eval(ck, "chain", tmp_path, n_points=1)
    with pytest.raises(UsageError):
        experiment.cmd_eval(ck, "chain", tmp_path, rollouts=0)
    monkeypatch.setenv("OTP_NUM_WORKERS", "many")
    with pytest.raises(UsageError):
        experiment.cmd_eval(ck, "chain", tmp_path)


def test_rollout_seeds_distinct():
    seeds = {experiment.rollout_seed(0, k) for k in range(100)}
    assert len(seeds) == 100
    assert experiment.rollout_seed(0, 3) == experiment.rollout_seed(0, 3)


# report -----------------------------------------------------------------------

def test_report_single_method_normalises_to_one(tmp_path):
    p = _write_eval(tmp_path / "e.csv", _synthetic_cells("crpo"))
    summaries, comparisons, base = experiment.summarize(experiment.read_eval_csv(p))
    assert base == "crpo" and len(summaries) == 1 and not comparisons
    assert summaries[0].norm_reward == 1.0 and summaries[0].norm_cost == 1.0
    text = experiment.cmd_report([p], tmp_path / "rep")
    assert "| crpo | 9 |" in text and "1.00 | 1.00 |" in text
    assert (tmp_path / "rep" / "report.md").read_text() == text
    assert (tmp_path / "rep" / "figures" / "point_goal_total_cost.svg").is_file()


def test_report_identical_methods_identical_aggregates(tmp_path):
    a = _write_eval(tmp_path / "a.csv", _synthetic_cells("crpo"))
    b = _write_eval(tmp_path / "b.csv", _synthetic_cells("crpo"), method_override="otp-crpo")
    summaries, comparisons, _ = experiment.summarize(
        experiment.read_eval_csv(a) + experiment.read_eval_csv(b))
    s1, s2 = summaries
    assert (s1.pct_safe, s1.norm_reward, s1.norm_cost) == (s2.pct_safe, s2.norm_reward,
                                                           s2.norm_cost)
    assert comparisons[0].lower_cost == comparisons[0].higher_cost == 0
    assert comparisons[0].sign_p == 1.0


def test_report_half_cost_is_exactly_half(tmp_path):
    a = _write_eval(tmp_path / "a.csv", _synthetic_cells("crpo"))
    b = _write_eval(tmp_path / "b.csv", _synthetic_cells("otp-crpo", cost_scale=0.5))
    summaries, comparisons, _ = experiment.summarize(
        experiment.read_eval_csv(a) + experiment.read_eval_csv(b))
    otp_row = [s for s in summaries if s.method == "otp-crpo"][0]
    assert otp_row.norm_cost == 0.5 and otp_row.norm_reward == 1.0
    c = comparisons[0]
    assert (c.n, c.lower_cost, c.higher_cost) == (9, 9, 0)
    assert np.isclose(c.sign_p, 2 * 0.5 ** 9)


def test_report_numbers_recomputable(tmp_path):
    a = _write_eval(tmp_path / "a.csv", _synthetic_cells("crpo"))
    b = _write_eval(tmp_path / "b.csv", _synthetic_cells("otp-crpo", 0.7, 1.1))
    t1 = experiment.cmd_report([a, b])
    t2 = experiment.cmd_report([a, b])
    assert t1 == t2
    rows = experiment.read_eval_csv(b)
    assert f"{100 * np.mean([r['safe'] for r in rows]):.1f}" in t1


def test_report_schema_errors(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("schema,method\r\neval-v1,crpo\r\n")
    with pytest.raises(UsageError, match="total_reward|task|manifest|row"):
        experiment.cmd_report([p])
    q = _write_eval(tmp_path / "old.csv", _synthetic_cells("crpo"))
    q.write_text(q.read_text().replace(EVAL_SCHEMA, "eval-v0"))
    with pytest.raises(UsageError, match="schema"):
        experiment.cmd_report([q])
    with pytest.raises(SystemExit):
        cli.main(["report", str(q)])
    with pytest.raises(UsageError):
        experiment.summarize(experiment.read_eval_csv(_write_eval(tmp_path / "c.csv", [])))


def test_report_unknown_baseline(tmp_path):
    a = _write_eval(tmp_path / "a.csv", _synthetic_cells("crpo"))
    with pytest.raises(UsageError):
        experiment.cmd_report([a], baseline="mpo")


def test_sign_and_t_tests():
    assert experiment.sign_test([0, 0]) == (0, 0, 1.0)
    neg, pos, p = experiment.sign_test([-1, -2, -3, 4])
    assert (neg, pos) == (3, 1) and np.isclose(p, 0.625)
    assert experiment.paired_t([1, 2, 3], [1, 2, 3]) == 1.0
    assert 0 < experiment.paired_t([1, 2, 3, 5], [2, 2.5, 4, 5.5]) < 1


def test_code_hash_tracks_content():
    h = experiment.code_hash(experiment.TRAINING_FILES)
    assert h == experiment.code_hash(experiment.TRAINING_FILES)
    assert h != experiment.code_hash()
    assert len(experiment.manifest_hash({"a": 1}, [0], h)) == 16
