"""Command line: ``verify``, ``train``, ``eval`` and ``report``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .. import safe_rl
from ..envs import TASKS

log = logging.getLogger("otp_safe_rl")


def _on_off(value: str) -> bool:
    v = value.lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {value!r}")


def _load_config(path):
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise argparse.ArgumentTypeError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise argparse.ArgumentTypeError("config file must hold a JSON object")
    return doc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="otp-safe-rl",
                                description="Robust safe RL with optimal transport perturbations")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run numerical property suites")
    from .verify import SUITES
    v.add_argument("suite", nargs="?", default="all", choices=[*SUITES, "all"])
    v.add_argument("--seed", type=int, default=7)
    v.add_argument("--n-instances", type=int, default=None)
    v.add_argument("--outdir", default="verify_out")

    t = sub.add_parser("train", help="train one agent on the nominal task")
    t.add_argument("--task", choices=sorted(TASKS), default="point_goal")
    t.add_argument("--method", choices=[safe_rl.CRPO, safe_rl.LAGRANGE], default=safe_rl.CRPO)
    t.add_argument("--robust", type=_on_off, default=True, metavar="{on,off}")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--eps-delta", type=float, default=None)
    t.add_argument("--budget", type=float, default=None)
    t.add_argument("--config", default=None, help="JSON file overriding training defaults")
    t.add_argument("--outdir", required=True)

    e = sub.add_parser("eval", help="sweep the test environments for trained checkpoints")
    e.add_argument("checkpoints", nargs="+")
    e.add_argument("--task", choices=sorted(TASKS), default="point_goal")
    e.add_argument("--n-points", type=int, default=5)
    e.add_argument("--rollouts", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--outdir", required=True)

    r = sub.add_parser("report", help="summarise eval CSVs into a markdown table")
    r.add_argument("eval_csvs", nargs="+")
    r.add_argument("--baseline", default=None)
    r.add_argument("--outdir", default=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from . import experiment, verify

    try:
        if args.command == "verify":
            checks = verify.run_suites([args.suite], seed=args.seed,
                                       n_instances=args.n_instances)
            manifest = experiment.write_manifest(
                args.outdir, "verify", {"suite": args.suite, "n_instances": args.n_instances},
                [args.seed])
            path = verify.write_checks(checks, args.outdir, manifest["hash"])
            failed = [c for c in checks if not c.passed]
            by_suite = {}
            for c in checks:
                ok, n = by_suite.get(c.suite, (0, 0))
                by_suite[c.suite] = (ok + c.passed, n + 1)
            for name, (ok, n) in by_suite.items():
                print(f"{'PASS' if ok == n else 'FAIL'} {name}: {ok}/{n} checks")
            print(f"wrote {path}")
            return 1 if failed else 0

        if args.command == "train":
            try:
                config = _load_config(args.config)
            except argparse.ArgumentTypeError as exc:
                parser.error(str(exc))
            summary = experiment.cmd_train(args.task, args.outdir, args.method, args.robust,
                                           args.seed, args.steps, args.eps_delta, args.budget,
                                           config)
            print(json.dumps(summary, indent=2))
            return 1 if summary["diverged"] else 0

        if args.command == "eval":
            path = experiment.cmd_eval(args.checkpoints, args.task, args.outdir, args.n_points,
                                       args.rollouts, args.seed)
            print(f"wrote {path}")
            return 0

        if args.command == "report":
            text = experiment.cmd_report(args.eval_csvs, args.outdir, args.baseline)
            print(text)
            return 0
    except experiment.UsageError as exc:
        parser.error(str(exc))
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
