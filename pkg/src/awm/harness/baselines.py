"""Baseline ladder: filtered-BC variants and world-model ablations.

BC variants rank the robot dataset by frozen-encoder feature distance, fit
the 2-center GMM to the top trajectories, and sample actions directly (no
world model). MBRL variants run the full world-model planner but differ in
pretraining and action space: mbrl-affordance trains the model from scratch,
mbrl-pix samples grasp pixels from a crop around the object, mbrl uses only
cartesian actions with the gripper initialized near the object center.

Every arm shares the SWIM environment seeds, episode budgets, and
evaluation counts.
"""

from __future__ import annotations

import os

import numpy as np

from .. import affordance as aff
from .. import planner as pl
from .. import sim
from ..trajectory import EpisodeRecord, execute_actions, make_record
from ..worldmodel import FrozenEncoder, WorldModel
from . import dataset as dataset_io
from . import pipelines, results
from .config import ExperimentConfig

BASELINES = ("bc-affordance", "bc-pix", "mbrl", "mbrl-pix", "mbrl-affordance")

_POLICY = {
    "bc-affordance": "affordance",
    "bc-pix": "pix",
    "mbrl": "cartesian",
    "mbrl-pix": "pix",
    "mbrl-affordance": "affordance",
}


def pix_proposal_fn(gmm: pl.ProposalGMM, scene, obs0, config: pl.PlannerConfig,
                    seed: int) -> np.ndarray:
    fresh = pipelines.pix_sequences(obs0, scene, config.affordance_proposals,
                                    config.horizon, seed=seed)
    sampled = gmm.sample(config.gmm_proposals,
                         np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(33,))))
    sampled = sampled.reshape(config.gmm_proposals, config.horizon, -1)
    return np.concatenate([pl.sanitize_sequences(fresh), pl.sanitize_sequences(sampled)])


def cartesian_proposal_fn(gmm: pl.ProposalGMM, scene, obs0, config: pl.PlannerConfig,
                          seed: int) -> np.ndarray:
    fresh = pipelines.cartesian_sequences(config.affordance_proposals,
                                          config.horizon, seed=seed)
    sampled = gmm.sample(config.gmm_proposals,
                         np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(33,))))
    sampled = sampled.reshape(config.gmm_proposals, config.horizon, -1)
    return np.concatenate([pl.sanitize_sequences(fresh), pl.sanitize_sequences(sampled)])


def rank_by_frozen(dataset: list[EpisodeRecord], goal, frozen: FrozenEncoder,
                   top_fraction: float) -> list[EpisodeRecord]:
    """Top fraction by max-over-frames frozen-encoder cosine; stable ties."""
    if not dataset:
        raise pl.PlannerError("empty dataset")
    scores = np.array([frozen.goal_distances(ep.frames64(), goal).max()
                       for ep in dataset])
    order = np.argsort(-scores, kind="stable")
    keep = max(1, int(len(dataset) * top_fraction))
    return [dataset[i] for i in order[:keep]]


def bc_deploy(task: str, goal, frozen: FrozenEncoder, dataset: list[EpisodeRecord],
              config: pl.PlannerConfig, seed: int) -> pl.DeployResult:
    """Filtered BC: fit the GMM to frozen-ranked elites and sample actions.

    No world model: one GMM sample is executed per episode.
    """
    elites = rank_by_frozen(dataset, goal, frozen, pl.GMM_ELITE_FRACTION)
    gmm = pl.fit_gmm(elites, k=config.gmm_components,
                     iterations=config.gmm_iterations, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(36,)))
    result = pl.DeployResult()
    for env_seed in pl.deployment_env_seeds(seed, config.episodes):
        scene = sim.reset(task, env_seed)
        flat = gmm.sample(1, rng)[0].reshape(config.horizon, -1)
        seq = pl.sanitize_sequences(flat[None])[0]
        observations, final_scene = execute_actions(scene, seq)
        result.episodes.append(make_record(task, "bc-eval", env_seed, observations, seq))
        result.successes.append(sim.success(final_scene, task))
    return result


def baseline_deploy_task(config: ExperimentConfig, name: str, task: str,
                         model: WorldModel | None, net: aff.AffordanceNet | None,
                         frozen: FrozenEncoder, records: list[EpisodeRecord],
                         round_index: int = 1) -> pl.DeployResult:
    """Dispatch one task deployment for a named baseline."""
    if name.startswith("bc-"):
        planner_cfg = pl.PlannerConfig(
            affordance_proposals=config.planner.affordance_proposals,
            gmm_proposals=config.planner.gmm_proposals,
            cem_iterations=config.planner.cem_iterations,
            cem_population=config.planner.cem_population,
            elite_fraction=config.planner.elite_fraction,
            episodes=config.eval_episodes, horizon=config.planner.horizon,
            gmm_components=config.planner.gmm_components,
            gmm_iterations=config.planner.gmm_iterations)
        goal = pipelines.deployment_goal(config, task)
        return bc_deploy(task, goal, frozen, records, planner_cfg,
                         seed=pipelines.deploy_seed(config, task, round_index))
    proposal_fn = None
    reset_fn = None
    if name == "mbrl-pix":
        proposal_fn = pix_proposal_fn
    elif name == "mbrl":
        proposal_fn = cartesian_proposal_fn
        reset_fn = pipelines.centered_reset
    return pipelines.deploy_task(config, task, model, net, records,
                                 round_index=round_index, proposal_fn=proposal_fn,
                                 reset_fn=reset_fn)


def run_baseline(name: str, config: ExperimentConfig, ckpt_dir: str,
                 out_path: str) -> list[dict]:
    """Collect, train (world-model variants), deploy, and emit result records."""
    if name not in BASELINES:
        raise ValueError(f"unknown baseline {name!r}; expected one of {BASELINES}")
    wm_path = os.path.join(ckpt_dir, "wm_pretrained.ckpt")
    aff_path = os.path.join(ckpt_dir, "affordance.ckpt")
    if not os.path.exists(wm_path) or not os.path.exists(aff_path):
        raise FileNotFoundError(
            f"missing pretrained checkpoints under {ckpt_dir}; run pretrain first")
    base = WorldModel.load(wm_path)
    net = aff.AffordanceNet.load(aff_path)
    frozen = base.frozen_encoder()
    policy = _POLICY[name]
    records = pipelines.collect_dataset(config, policy, net)
    dataset_io.write(os.path.join(ckpt_dir, f"dataset_{name}.awmd"), records)

    models: dict[str, WorldModel] = {}
    if name.startswith("mbrl"):
        joint = config.joint and name == "mbrl-affordance"
        models = pipelines.finetune_models(
            config, None, records, frozen if config.with_reward else None, joint)
    method = name
    if name == "mbrl-affordance":
        method = f"{name}-{'joint' if config.joint else 'single'}"

    recs = []
    for task in config.tasks:
        model = None
        if models:
            model = models.get("joint", models.get(task))
        res = baseline_deploy_task(config, name, task, model, net, frozen, records)
        recs.append(results.make_record(
            "baseline", method, task, config.seed,
            [ep.seed for ep in res.episodes], sum(res.successes),
            len(res.successes), config.hash()))
    results.write_records(out_path, recs, append=True)
    return recs
