"""Experiment configuration: schema-validated, hashable, YAML-backed."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import yaml

from ..planner import PlannerConfig
from ..sim import TASKS
from ..worldmodel import WorldModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    tasks: tuple[str, ...] = TASKS
    seed: int = 0

    # model sizes
    deter: int = 64
    stoch: int = 16
    embed: int = 64
    hidden: int = 64

    # pretraining (desk-scaled from the source protocol's 55k clips)
    pretrain_clips: int = 5000
    pretrain_steps: int = 600
    pretrain_batch: int = 16
    pretrain_lr: float = 3e-4
    affordance_epochs: int = 10
    affordance_lr: float = 3e-3

    # unsupervised finetuning
    finetune_episodes: int = 25        # 25 or 50 per task
    finetune_steps_single: int = 200
    finetune_steps_joint: int = 300
    finetune_batch: int = 8
    finetune_lr: float = 3e-4
    continual_steps: int = 50
    affordance_actions: int = 2
    cartesian_actions: int = 6
    free_nats: float = 1.0
    kl_scale: float = 1.0

    # pipeline switches
    with_reward: bool = True
    joint: bool = True
    pretrained: bool = True
    eval_episodes: int = 25

    planner: PlannerConfig = field(default_factory=PlannerConfig)

    def __post_init__(self):
        unknown = [t for t in self.tasks if t not in TASKS]
        if unknown:
            raise ConfigError(f"unknown tasks {unknown}; valid: {list(TASKS)}")
        if not self.tasks:
            raise ConfigError("need at least one task")
        if self.finetune_episodes < 1:
            raise ConfigError("finetune_episodes must be >= 1")
        horizon = self.affordance_actions + self.cartesian_actions
        if self.planner.horizon != horizon:
            raise ConfigError(
                f"planner horizon {self.planner.horizon} != episode length "
                f"{self.affordance_actions}+{self.cartesian_actions}")

    def world_model_config(self) -> WorldModelConfig:
        return WorldModelConfig(deter=self.deter, stoch=self.stoch,
                                embed=self.embed, hidden=self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def _check_keys(data: dict, cls, where: str) -> None:
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    data = dict(data)
    _check_keys(data, ExperimentConfig, "config")
    planner_data = data.pop("planner", {})
    if not isinstance(planner_data, dict):
        raise ConfigError("planner section must be a mapping")
    _check_keys(planner_data, PlannerConfig, "config.planner")
    if "tasks" in data:
        data["tasks"] = tuple(data["tasks"])
    try:
        return ExperimentConfig(planner=PlannerConfig(**planner_data), **data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    return config_from_dict(data)


def save_config(config: ExperimentConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=True)
