"""Command-line entry point: pretrain / finetune / deploy / continual /
baseline / eval / report."""

from __future__ import annotations

import argparse
import dataclasses
import sys

from . import baselines, pipelines, results
from .config import ExperimentConfig, load_config


def _with_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if getattr(args, "joint", None) is not None:
        updates["joint"] = args.joint
    if getattr(args, "with_reward", None) is not None:
        updates["with_reward"] = args.with_reward
    if getattr(args, "pretrained", None) is not None:
        updates["pretrained"] = args.pretrained
    if getattr(args, "tasks", None):
        updates["tasks"] = tuple(args.tasks)
    return dataclasses.replace(config, **updates) if updates else config


def _add_common(p: argparse.ArgumentParser, ckpt: bool = True) -> None:
    p.add_argument("--config", default=None, help="YAML config path (defaults used if omitted)")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    if ckpt:
        p.add_argument("--ckpt-dir", default="checkpoints", help="checkpoint/dataset directory")


def _add_switches(p: argparse.ArgumentParser) -> None:
    p.add_argument("--joint", dest="joint", action="store_true", default=None,
                   help="one model over all tasks")
    p.add_argument("--single", dest="joint", action="store_false",
                   help="one model per task")
    p.add_argument("--with-reward", dest="with_reward", action="store_true", default=None)
    p.add_argument("--no-reward-head", dest="with_reward", action="store_false")
    p.add_argument("--pretrained", dest="pretrained", action="store_true", default=None)
    p.add_argument("--scratch", dest="pretrained", action="store_false",
                   help="skip human-clip pretraining (ablation)")
    p.add_argument("--tasks", nargs="*", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="awm",
        description="Affordance-space world models in a 2-D micro-kitchen")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="generate clips, train affordance + world models")
    _add_common(p)

    p = sub.add_parser("finetune", help="collect robot episodes and finetune the world model")
    _add_common(p)
    _add_switches(p)

    p = sub.add_parser("deploy", help="plan to goal images, append episodes to the dataset")
    _add_common(p)
    _add_switches(p)
    p.add_argument("--out", default="results.jsonl")

    p = sub.add_parser("eval", help="deploy without persisting new episodes")
    _add_common(p)
    _add_switches(p)
    p.add_argument("--out", default="results.jsonl")

    p = sub.add_parser("continual", help="alternate deploy and retrain rounds")
    _add_common(p)
    _add_switches(p)
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--out", default="results.jsonl")

    p = sub.add_parser("baseline", help="run a named baseline")
    _add_common(p)
    _add_switches(p)
    p.add_argument("name", choices=baselines.BASELINES)
    p.add_argument("--out", default="results.jsonl")

    p = sub.add_parser("report", help="print the success table from result records")
    p.add_argument("results", help="results.jsonl path")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report":
        recs = results.read_records(args.results)
        print(results.success_table(recs))
        return 0

    config = load_config(args.config) if args.config else ExperimentConfig()
    config = _with_overrides(config, args)

    if args.command == "pretrain":
        info = pipelines.cmd_pretrain(config, args.ckpt_dir)
        print(f"pretrained on {info['clips']} clips -> {args.ckpt_dir}")
    elif args.command == "finetune":
        info = pipelines.cmd_finetune(config, args.ckpt_dir)
        print(f"finetuned ({info['stage']}, pretrained={info['pretrained']}) "
              f"on {info['episodes_per_task']} episodes/task")
    elif args.command in ("deploy", "eval"):
        recs = pipelines.cmd_deploy(config, args.ckpt_dir, args.out,
                                    persist_dataset=args.command == "deploy")
        print(results.success_table(recs, tasks=config.tasks))
    elif args.command == "continual":
        recs = pipelines.cmd_continual(config, args.ckpt_dir, args.out, args.rounds)
        for rec in recs:
            print(f"round {rec.get('round', 1)} {rec['task']}: "
                  f"{rec['successes']}/{rec['trials']}")
    elif args.command == "baseline":
        recs = baselines.run_baseline(args.name, config, args.ckpt_dir, args.out)
        print(results.success_table(recs, tasks=config.tasks))
    return 0


if __name__ == "__main__":
    sys.exit(main())
