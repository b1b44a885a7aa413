"""Experiment pipelines: pretrain, finetune, deploy, continual improvement.

Every pipeline is a pure function of (config, seed): environment seeds are
derived per (task, episode) with fixed spawn keys, so every method in the
baseline ladder sees identical scenes and evaluation counts, and reruns
reproduce result records byte for byte.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace as dc_replace

import numpy as np

from .. import affordance as aff
from .. import planner as pl
from .. import sim
from ..actions import ACTION_DIM, DEFAULT_ROTATIONS, MODE_CARTESIAN, encode
from ..sim import Observation, Scene
from ..trajectory import EpisodeRecord, execute_actions, make_record
from ..worldmodel import (FrozenEncoder, TrainSequence, WorldModel, train_elbo)
from . import dataset as dataset_io
from . import results
from .config import ExperimentConfig

PIX_CROP_PX = 4.0
GRIPPER_INIT_NOISE_PX = 1.0

# spawn keys for deterministic, non-overlapping seed streams
_KEY_CLIPS = 101
_KEY_COLLECT = 102
_KEY_TRAIN = 103
_KEY_DEPLOY = 104
_KEY_GOAL = 105


def derive_seed(master: int, *keys: int) -> int:
    return int(np.random.SeedSequence(entropy=master, spawn_key=tuple(keys)).generate_state(1)[0])


def clips_to_sequences(clips) -> list[TrainSequence]:
    seqs = []
    for c in clips:
        obs = np.stack([f.image for f in c.frames])
        acts = np.stack([encode(a) for a in c.actions])
        seqs.append(TrainSequence(obs=obs, actions=acts))
    return seqs


# ------------------------------------------------------------------ pretrain

def pretrain_models(config: ExperimentConfig) -> tuple[WorldModel, aff.AffordanceNet]:
    """Generate clips across all tasks, train the affordance model, then the
    world model without its reward head."""
    clip_seed = derive_seed(config.seed, _KEY_CLIPS)
    clips = sim.generate_human_clips(config.pretrain_clips, seed=clip_seed,
                                     tasks=config.tasks)
    net = aff.train(clips, epochs=config.affordance_epochs, lr=config.affordance_lr,
                    seed=derive_seed(config.seed, _KEY_TRAIN, 1))
    model = WorldModel(config.world_model_config(),
                       seed=derive_seed(config.seed, _KEY_TRAIN, 2))
    sequences = clips_to_sequences(clips)
    rng = np.random.default_rng(derive_seed(config.seed, _KEY_TRAIN, 3))
    for _ in range(config.pretrain_steps):
        idx = rng.choice(len(sequences), size=min(config.pretrain_batch, len(sequences)),
                         replace=False)
        train_elbo(model, [sequences[i] for i in idx], lr=config.pretrain_lr,
                   free_nats=config.free_nats, kl_scale=config.kl_scale,
                   with_reward=False)
    return model, net


def clone_model(model: WorldModel, seed: int) -> WorldModel:
    """Fresh optimizer and sampling stream, same weights; keeps the source immutable."""
    out = WorldModel(model.cfg, seed=seed)
    for k, p in model.params.items():
        out.params[k].data = p.data.copy()
    out.reward_trained = model.reward_trained
    out.train_steps = model.train_steps
    return out


# ------------------------------------------------------------- data collection

def object_center(scene: Scene) -> tuple[float, float]:
    """Detected-object-center stand-in: geometric center of the task object."""
    obj = scene.objects[sim.primary_object_index(scene)]
    handle = obj.handle()
    if obj.kind == "prismatic-horizontal":
        return (handle[0] - obj.axis[0] * 0.08, handle[1])
    if obj.kind == "revolute":
        return ((handle[0] + obj.anchor[0]) / 2, (handle[1] + obj.anchor[1]) / 2)
    if obj.kind == "prismatic-vertical":
        return obj.anchor
    return handle


def cartesian_tail(rng: np.random.Generator, n: int, rotation: float) -> np.ndarray:
    rows = np.zeros((n, ACTION_DIM))
    rows[:, 0] = MODE_CARTESIAN
    rows[:, 1] = rotation
    rows[:, 5:7] = rng.normal(0.0, pl.CARTESIAN_TAIL_STD, size=(n, 2))
    return rows


def pix_sequences(observation: Observation, scene: Scene, n: int, horizon: int,
                  seed: int, crop_px: float = PIX_CROP_PX) -> np.ndarray:
    """Grasp/post-grasp pixels sampled uniformly from a crop around the object."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(41,)))
    center_px = sim.CAMERA.world_to_pixel(object_center(scene))
    half = crop_px / sim.IMAGE_SIZE
    band = aff.AffordanceConfig().postgrasp_depth_band
    seqs = np.zeros((n, horizon, ACTION_DIM))
    for i in range(n):
        rot = DEFAULT_ROTATIONS[int(rng.integers(len(DEFAULT_ROTATIONS)))]
        pg = np.clip(np.array(center_px) + rng.uniform(-half, half, 2), 0.0, 1.0)
        ppg = np.clip(np.array(center_px) + rng.uniform(-half, half, 2), 0.0, 1.0)
        d_g = sim.depth_at(observation, tuple(pg))
        center_d = sim.depth_at(observation, tuple(ppg))
        d_pg = max(0.0, rng.uniform(center_d - band, center_d + band))
        seqs[i, 0] = [0.0, rot, pg[0], pg[1], d_g, 0.0, 0.0]
        seqs[i, 1] = [0.0, rot, ppg[0], ppg[1], d_pg, 0.0, 0.0]
        seqs[i, 2:] = cartesian_tail(rng, horizon - 2, rot)
    return seqs


def cartesian_sequences(n: int, horizon: int, seed: int) -> np.ndarray:
    """Pure mode-1 episodes; one rotation per sequence."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(42,)))
    seqs = np.zeros((n, horizon, ACTION_DIM))
    for i in range(n):
        rot = DEFAULT_ROTATIONS[int(rng.integers(len(DEFAULT_ROTATIONS)))]
        seqs[i] = cartesian_tail(rng, horizon, rot)
    return seqs


def centered_reset(task: str, env_seed: int) -> Scene:
    """Reset with the gripper placed near the task object center."""
    scene = sim.reset(task, env_seed)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=env_seed, spawn_key=(43,)))
    noise = rng.uniform(-GRIPPER_INIT_NOISE_PX, GRIPPER_INIT_NOISE_PX, 2) / sim.IMAGE_SIZE
    center = object_center(scene)
    return dc_replace(scene, gripper=(float(np.clip(center[0] + noise[0], 0.0, 1.0)),
                                      float(np.clip(center[1] + noise[1], 0.0, 1.0))))


def collection_env_seeds(config: ExperimentConfig, task: str) -> list[int]:
    base = derive_seed(config.seed, _KEY_COLLECT, sim.TASKS.index(task))
    return [int(s) for s in np.random.SeedSequence(entropy=base).generate_state(config.finetune_episodes)]


def collect_task_episodes(config: ExperimentConfig, task: str, policy: str,
                          net: aff.AffordanceNet | None) -> list[EpisodeRecord]:
    """Roll unsupervised episodes for one task with the given action policy.

    Environment seeds depend only on (config.seed, task, episode), so every
    policy interacts with identical scenes.
    """
    horizon = config.planner.horizon
    records = []
    for episode, env_seed in enumerate(collection_env_seeds(config, task)):
        act_seed = derive_seed(env_seed, 44)
        if policy == "affordance":
            scene = sim.reset(task, env_seed)
            obs0 = sim.render(scene)
            seq = pl.affordance_sequences(net, obs0, 1, horizon, seed=act_seed)[0]
        elif policy == "pix":
            scene = sim.reset(task, env_seed)
            obs0 = sim.render(scene)
            seq = pix_sequences(obs0, scene, 1, horizon, seed=act_seed)[0]
        elif policy == "cartesian":
            scene = centered_reset(task, env_seed)
            seq = cartesian_sequences(1, horizon, seed=act_seed)[0]
        else:
            raise ValueError(f"unknown collection policy {policy!r}")
        seq = pl.sanitize_sequences(seq[None])[0]
        observations, _ = execute_actions(scene, seq)
        records.append(make_record(task, "finetune", env_seed, observations, seq))
    return records


def collect_dataset(config: ExperimentConfig, policy: str,
                    net: aff.AffordanceNet | None) -> list[EpisodeRecord]:
    records = []
    for task in config.tasks:
        records.extend(collect_task_episodes(config, task, policy, net))
    return records


# ------------------------------------------------------------------ training

def goal_for_record(record: EpisodeRecord) -> Observation:
    return sim.goal_observation(record.task, record.seed)


def build_train_sequences(records: list[EpisodeRecord], with_reward: bool,
                          frozen: FrozenEncoder | None) -> list[TrainSequence]:
    """Convert episode records to training sequences; reward targets are
    frozen-encoder cosine distances to each episode's own goal image."""
    seqs = []
    for rec in records:
        rewards = None
        if with_reward:
            if frozen is None:
                raise ValueError("reward targets need a frozen encoder")
            rewards = frozen.goal_distances(rec.frames64(), goal_for_record(rec))
        seqs.append(TrainSequence(obs=rec.frames64(), actions=rec.actions64(),
                                  rewards=rewards))
    return seqs


def train_on_records(model: WorldModel, records: list[EpisodeRecord],
                     config: ExperimentConfig, steps: int, seed: int,
                     frozen: FrozenEncoder | None = None,
                     with_reward: bool | None = None) -> list[dict[str, float]]:
    """Finetune in place for `steps` Adam steps; returns loss components."""
    use_reward = config.with_reward if with_reward is None else with_reward
    sequences = build_train_sequences(records, use_reward, frozen)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(45,)))
    history = []
    for _ in range(steps):
        idx = rng.choice(len(sequences), size=min(config.finetune_batch, len(sequences)),
                         replace=False)
        history.append(train_elbo(model, [sequences[i] for i in idx],
                                  lr=config.finetune_lr, free_nats=config.free_nats,
                                  kl_scale=config.kl_scale, with_reward=use_reward))
    return history


def finetune_models(config: ExperimentConfig, pretrained: WorldModel | None,
                    records: list[EpisodeRecord], frozen: FrozenEncoder | None,
                    joint: bool) -> dict[str, WorldModel]:
    """One jointly-trained model (key 'joint') or one per task."""
    out: dict[str, WorldModel] = {}
    if joint:
        model = (clone_model(pretrained, derive_seed(config.seed, _KEY_TRAIN, 10))
                 if pretrained is not None else
                 WorldModel(config.world_model_config(),
                            seed=derive_seed(config.seed, _KEY_TRAIN, 10)))
        train_on_records(model, records, config, config.finetune_steps_joint,
                         seed=derive_seed(config.seed, _KEY_TRAIN, 11), frozen=frozen)
        out["joint"] = model
        return out
    for t_i, task in enumerate(config.tasks):
        task_records = [r for r in records if r.task == task]
        model = (clone_model(pretrained, derive_seed(config.seed, _KEY_TRAIN, 20 + t_i))
                 if pretrained is not None else
                 WorldModel(config.world_model_config(),
                            seed=derive_seed(config.seed, _KEY_TRAIN, 20 + t_i)))
        train_on_records(model, task_records, config, config.finetune_steps_single,
                         seed=derive_seed(config.seed, _KEY_TRAIN, 30 + t_i), frozen=frozen)
        out[task] = model
    return out


# ------------------------------------------------------------------- deploy

def deployment_goal(config: ExperimentConfig, task: str) -> Observation:
    return sim.goal_observation(task, derive_seed(config.seed, _KEY_GOAL,
                                                  sim.TASKS.index(task)))


def deploy_seed(config: ExperimentConfig, task: str, round_index: int = 1) -> int:
    return derive_seed(config.seed, _KEY_DEPLOY, sim.TASKS.index(task), round_index)


def deploy_task(config: ExperimentConfig, task: str, model: WorldModel,
                net: aff.AffordanceNet | None, records: list[EpisodeRecord],
                use_reward: bool | None = None, round_index: int = 1,
                proposal_fn=None, reset_fn=None) -> pl.DeployResult:
    planner_cfg = pl.PlannerConfig(
        affordance_proposals=config.planner.affordance_proposals,
        gmm_proposals=config.planner.gmm_proposals,
        cem_iterations=config.planner.cem_iterations,
        cem_population=config.planner.cem_population,
        elite_fraction=config.planner.elite_fraction,
        episodes=config.eval_episodes,
        horizon=config.planner.horizon,
        gmm_components=config.planner.gmm_components,
        gmm_iterations=config.planner.gmm_iterations)
    use_reward = config.with_reward if use_reward is None else use_reward
    return pl.deploy(task, deployment_goal(config, task), model, net, records,
                     planner_cfg, seed=deploy_seed(config, task, round_index),
                     use_reward=use_reward, stage=f"deploy-round-{round_index}",
                     proposal_fn=proposal_fn, reset_fn=reset_fn)


def continual_rounds(config: ExperimentConfig, tasks: list[str], model: WorldModel,
                     net: aff.AffordanceNet, records: list[EpisodeRecord],
                     frozen: FrozenEncoder | None, rounds: int) -> list[dict]:
    """Alternate deploy and retrain on the aggregated dataset; returns
    per-round records (task, round, successes)."""
    out = []
    for round_index in range(1, rounds + 1):
        for task in tasks:
            res = deploy_task(config, task, model, net, records,
                              round_index=round_index)
            out.append({"task": task, "round": round_index,
                        "successes": sum(res.successes),
                        "trials": len(res.successes)})
        if round_index < rounds:
            train_on_records(model, records, config, config.continual_steps,
                             seed=derive_seed(config.seed, _KEY_TRAIN, 50 + round_index),
                             frozen=frozen)
    return out


# --------------------------------------------------------------- persistence

def manifest_path(ckpt_dir: str) -> str:
    return os.path.join(ckpt_dir, "manifest.json")


def write_manifest(ckpt_dir: str, entry: dict) -> None:
    path = manifest_path(ckpt_dir)
    data = {}
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    data.update(entry)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)


def cmd_pretrain(config: ExperimentConfig, ckpt_dir: str) -> dict:
    model, net = pretrain_models(config)
    os.makedirs(ckpt_dir, exist_ok=True)
    wm_path = os.path.join(ckpt_dir, "wm_pretrained.ckpt")
    aff_path = os.path.join(ckpt_dir, "affordance.ckpt")
    model.save(wm_path, {"stage": "pretrained", "config_hash": config.hash()})
    net.save(aff_path, {"stage": "pretrained", "config_hash": config.hash()})
    entry = {"pretrain": {"clips": config.pretrain_clips, "seed": config.seed,
                          "config_hash": config.hash(), "stage": "pretrained",
                          "world_model": "wm_pretrained.ckpt",
                          "affordance": "affordance.ckpt"}}
    write_manifest(ckpt_dir, entry)
    return entry["pretrain"]


def cmd_finetune(config: ExperimentConfig, ckpt_dir: str,
                 pretrained: bool | None = None) -> dict:
    pretrained = config.pretrained if pretrained is None else pretrained
    wm_path = os.path.join(ckpt_dir, "wm_pretrained.ckpt")
    aff_path = os.path.join(ckpt_dir, "affordance.ckpt")
    if not os.path.exists(aff_path) or not os.path.exists(wm_path):
        raise FileNotFoundError(
            f"missing pretrained checkpoints under {ckpt_dir}; run pretrain first")
    base = WorldModel.load(wm_path)
    net = aff.AffordanceNet.load(aff_path)
    frozen = base.frozen_encoder()
    records = collect_dataset(config, "affordance", net)
    dataset_path = os.path.join(ckpt_dir, "dataset.awmd")
    dataset_io.write(dataset_path, records)
    models = finetune_models(config, base if pretrained else None, records,
                             frozen if config.with_reward else None, config.joint)
    stage = "finetuned-joint" if config.joint else "finetuned-single"
    saved = {}
    for key, model in models.items():
        path = os.path.join(ckpt_dir, f"wm_{key}.ckpt")
        model.save(path, {"stage": stage, "config_hash": config.hash(),
                          "pretrained": pretrained})
        saved[key] = os.path.basename(path)
    entry = {"finetune": {"stage": stage, "pretrained": pretrained,
                          "episodes_per_task": config.finetune_episodes,
                          "models": saved, "dataset": "dataset.awmd",
                          "config_hash": config.hash()}}
    write_manifest(ckpt_dir, entry)
    return entry["finetune"]


def _load_finetuned(config: ExperimentConfig, ckpt_dir: str):
    net = aff.AffordanceNet.load(os.path.join(ckpt_dir, "affordance.ckpt"))
    records = dataset_io.read(os.path.join(ckpt_dir, "dataset.awmd"))
    models = {}
    if config.joint:
        models["joint"] = WorldModel.load(os.path.join(ckpt_dir, "wm_joint.ckpt"))
    else:
        for task in config.tasks:
            models[task] = WorldModel.load(os.path.join(ckpt_dir, f"wm_{task}.ckpt"))
    return net, records, models


def cmd_deploy(config: ExperimentConfig, ckpt_dir: str, out_path: str,
               method: str = "swim", persist_dataset: bool = True) -> list[dict]:
    net, records, models = _load_finetuned(config, ckpt_dir)
    recs = []
    new_episodes: list[EpisodeRecord] = []
    for task in config.tasks:
        model = models["joint"] if config.joint else models[task]
        before = len(records)
        res = deploy_task(config, task, model, net, records)
        new_episodes.extend(records[before:])
        recs.append(results.make_record(
            "deploy", method, task, config.seed,
            [ep.seed for ep in res.episodes], sum(res.successes),
            len(res.successes), config.hash()))
    if persist_dataset and new_episodes:
        dataset_io.append(os.path.join(ckpt_dir, "dataset.awmd"), new_episodes)
    results.write_records(out_path, recs, append=True)
    return recs


def cmd_continual(config: ExperimentConfig, ckpt_dir: str, out_path: str,
                  rounds: int, tasks: list[str] | None = None) -> list[dict]:
    net, records, models = _load_finetuned(config, ckpt_dir)
    if not config.joint:
        raise ValueError("continual improvement runs on the joint model")
    base = WorldModel.load(os.path.join(ckpt_dir, "wm_pretrained.ckpt"))
    frozen = base.frozen_encoder() if config.with_reward else None
    tasks = list(tasks or config.tasks)
    if rounds == 0:
        return cmd_deploy(config, ckpt_dir, out_path, method="swim",
                          persist_dataset=False)
    rows = continual_rounds(config, tasks, models["joint"], net, records,
                            frozen, rounds)
    recs = [results.make_record("continual", "swim", row["task"], config.seed, [],
                                row["successes"], row["trials"], config.hash(),
                                round=row["round"])
            for row in rows]
    results.write_records(out_path, recs, append=True)
    return recs
