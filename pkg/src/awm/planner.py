"""Goal-image deployment: trajectory ranking, GMM proposals, CEM planning.

Deployment ranks the robot dataset against the goal in latent feature space,
fits a small Gaussian mixture over the flattened action sequences of the
elites, assembles a mixed population (fresh affordance proposals plus GMM
samples), optimizes it through the world model with the cross-entropy
method, and executes the winner open-loop.

Scoring a population is embarrassingly parallel against the immutable
model; elite selection and refitting are the single-threaded barrier
between rounds, reduced in deterministic order so seeds reproduce.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import affordance as aff
from . import sim
from .actions import ACTION_DIM, DEFAULT_ROTATIONS, MODE_CARTESIAN, encode
from .sim import Observation
from .trajectory import EpisodeRecord, execute_actions, make_record
from .worldmodel import LatentState, WorldModel, imagine_feature_batch

COVARIANCE_FLOOR = 1e-4
GMM_ELITE_FRACTION = 0.2
CARTESIAN_TAIL_STD = 0.05


class PlannerError(RuntimeError):
    pass


@dataclass(frozen=True)
class PlannerConfig:
    affordance_proposals: int = 600    # N
    gmm_proposals: int = 1400          # M
    cem_iterations: int = 3
    cem_population: int = 2000
    elite_fraction: float = 0.1
    episodes: int = 25                 # K deployment episodes per task
    horizon: int = 8
    gmm_components: int = 2
    gmm_iterations: int = 30

    def __post_init__(self):
        if self.affordance_proposals + self.gmm_proposals != self.cem_population:
            raise PlannerError("proposal counts must sum to the CEM population size")
        if min(self.affordance_proposals, self.gmm_proposals, self.cem_iterations,
               self.cem_population, self.horizon, self.gmm_components) <= 0:
            raise PlannerError("all planner counts must be positive")
        if not 0.0 < self.elite_fraction < 1.0:
            raise PlannerError("elite_fraction must be in (0, 1)")
        if self.episodes < 0:
            raise PlannerError("episodes must be >= 0")


@dataclass(frozen=True)
class ProposalGMM:
    """Diagonal Gaussian mixture over flattened action-sequence vectors."""

    weights: np.ndarray    # (k,)
    means: np.ndarray      # (k, D)
    variances: np.ndarray  # (k, D), floored

    def __post_init__(self):
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise PlannerError("mixture weights must be nonnegative and sum to 1")
        if np.any(self.variances < COVARIANCE_FLOOR - 1e-12):
            raise PlannerError("covariance entries below floor")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comps = rng.choice(len(self.weights), size=n, p=self.weights)
        eps = rng.standard_normal((n, self.means.shape[1]))
        return self.means[comps] + eps * np.sqrt(self.variances[comps])

    def log_likelihood(self, data: np.ndarray) -> float:
        return float(_gmm_log_prob(data, self.weights, self.means, self.variances).sum())


def _gmm_log_prob(x: np.ndarray, weights, means, variances) -> np.ndarray:
    """Per-point log p(x) under the mixture; (N,) for x (N, D)."""
    n, d = x.shape
    parts = np.empty((n, len(weights)))
    for j in range(len(weights)):
        diff = x - means[j]
        parts[:, j] = (math.log(weights[j] + 1e-300)
                       - 0.5 * (np.log(2 * np.pi * variances[j]).sum()
                                + (diff * diff / variances[j]).sum(axis=1)))
    top = parts.max(axis=1)
    return top + np.log(np.exp(parts - top[:, None]).sum(axis=1))


def _kmeans_pp_init(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [data[rng.integers(len(data))]]
    for _ in range(k - 1):
        d2 = np.min([((data - c) ** 2).sum(axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0.0:
            centers.append(data[rng.integers(len(data))].copy())
            continue
        centers.append(data[rng.choice(len(data), p=d2 / total)])
    return np.stack(centers)


def fit_gmm(elites, k: int = 2, iterations: int = 30, seed: int = 0) -> ProposalGMM:
    """EM fit over flattened elite action sequences.

    Accepts a list of (T_i, ACTION_DIM) arrays or an already-flat (N, D)
    matrix; shorter sequences are padded with zero cartesian actions. The
    log-likelihood is asserted non-decreasing at every EM iteration.
    """
    data = _flatten_sequences(elites)
    if data.shape[0] < 1:
        raise PlannerError("need at least one elite sequence")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(31,)))
    n, d = data.shape
    means = _kmeans_pp_init(data, k, rng)
    variances = np.maximum(data.var(axis=0), COVARIANCE_FLOOR) * np.ones((k, d))
    weights = np.full(k, 1.0 / k)
    prev = -np.inf
    for it in range(iterations):
        # E-step
        log_parts = np.empty((n, k))
        for j in range(k):
            diff = data - means[j]
            log_parts[:, j] = (math.log(weights[j] + 1e-300)
                               - 0.5 * (np.log(2 * np.pi * variances[j]).sum()
                                        + (diff * diff / variances[j]).sum(axis=1)))
        top = log_parts.max(axis=1, keepdims=True)
        ll = float((top[:, 0] + np.log(np.exp(log_parts - top).sum(axis=1))).sum())
        if ll < prev - 1e-9:
            raise PlannerError(f"EM log-likelihood decreased at iteration {it}: {prev} -> {ll}")
        prev = ll
        resp = np.exp(log_parts - top)
        resp /= resp.sum(axis=1, keepdims=True)
        # M-step
        mass = resp.sum(axis=0)
        weights = mass / n
        safe = np.maximum(mass, 1e-12)[:, None]
        means = resp.T @ data / safe
        for j in range(k):
            diff = data - means[j]
            variances[j] = np.maximum(resp[:, j] @ (diff * diff) / safe[j, 0], COVARIANCE_FLOOR)
    weights = weights / weights.sum()
    return ProposalGMM(weights=weights, means=means, variances=variances)


def _flatten_sequences(elites) -> np.ndarray:
    if isinstance(elites, np.ndarray) and elites.ndim == 2:
        return np.asarray(elites, dtype=np.float64)
    mats = [np.asarray(e.actions if isinstance(e, EpisodeRecord) else e, dtype=np.float64)
            for e in elites]
    if not mats:
        raise PlannerError("need at least one elite sequence")
    for m in mats:
        if m.ndim != 2 or m.shape[1] != ACTION_DIM:
            raise PlannerError(f"elite sequence must be (T,{ACTION_DIM}), got {m.shape}")
    t_max = max(m.shape[0] for m in mats)
    pad_row = np.zeros(ACTION_DIM)
    pad_row[0] = MODE_CARTESIAN  # zero cartesian action
    rows = []
    for m in mats:
        if m.shape[0] < t_max:
            pad = np.tile(pad_row, (t_max - m.shape[0], 1))
            m = np.concatenate([m, pad], axis=0)
        rows.append(m.reshape(-1))
    return np.stack(rows)


# ------------------------------------------------------------------ ranking

def trajectory_scores(dataset: list[EpisodeRecord], goal: Observation,
                      model: WorldModel) -> np.ndarray:
    """Per-episode score: max over frames of cosine(f_W(frame), f_W(goal))."""
    if not dataset:
        raise PlannerError("empty dataset")
    goal_f = model.goal_feature(goal)
    frames = np.concatenate([ep.frames64() for ep in dataset], axis=0)
    steps = model._filter(frames[:, None], np.zeros((frames.shape[0], 0, ACTION_DIM)),
                          None, rng=None)
    feats = np.concatenate([steps[0]["deter"].data, steps[0]["post_mean"].data], axis=1)
    norms = np.linalg.norm(feats, axis=1) * np.linalg.norm(goal_f)
    if np.any(norms == 0.0):
        raise PlannerError("zero-norm feature while ranking")
    cos = feats @ goal_f / norms
    scores = np.empty(len(dataset))
    at = 0
    for i, ep in enumerate(dataset):
        t = ep.observations.shape[0]
        scores[i] = cos[at:at + t].max()
        at += t
    return scores


def rank_trajectories(dataset: list[EpisodeRecord], goal: Observation,
                      model: WorldModel, top_fraction: float) -> list[EpisodeRecord]:
    """Top fraction of the dataset by goal score; ties keep dataset order."""
    scores = trajectory_scores(dataset, goal, model)
    order = np.argsort(-scores, kind="stable")
    keep = max(1, int(len(dataset) * top_fraction))
    return [dataset[i] for i in order[:keep]]


# ----------------------------------------------------------------- proposals

def sanitize_sequences(seqs: np.ndarray,
                       rotations: tuple[float, ...] = DEFAULT_ROTATIONS) -> np.ndarray:
    """Vectorized decode-then-encode: clamp, snap, and zero inactive blocks.

    Matches actions.decode row-for-row (tested equivalence) without building
    per-row objects; used on every CEM resample so all candidate sequences
    stay valid actions.
    """
    out = np.array(seqs, dtype=np.float64, copy=True)
    mode = (out[..., 0] >= 0.5).astype(np.float64)
    out[..., 0] = mode
    rots = np.asarray(rotations)
    snap = np.abs(out[..., 1:2] - rots.reshape(*(1,) * (out.ndim - 1), -1))
    out[..., 1] = rots[np.argmin(snap, axis=-1)]
    afford = mode == 0.0
    out[..., 2] = np.where(afford, np.clip(out[..., 2], 0.0, 1.0), 0.0)
    out[..., 3] = np.where(afford, np.clip(out[..., 3], 0.0, 1.0), 0.0)
    out[..., 4] = np.where(afford, np.maximum(out[..., 4], 0.0), 0.0)
    out[..., 5] = np.where(afford, 0.0, out[..., 5])
    out[..., 6] = np.where(afford, 0.0, out[..., 6])
    return out


def affordance_sequences(net: aff.AffordanceNet, observation: Observation, n: int,
                         horizon: int, seed: int) -> np.ndarray:
    """Grasp + post-grasp proposals with a random cartesian tail, (n, H, A)."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(32,)))
    proposals = aff.propose(net, observation, n, seed=seed)
    seqs = np.zeros((n, horizon, ACTION_DIM))
    for i, prop in enumerate(proposals):
        seqs[i, 0] = encode(prop.grasp_action)
        seqs[i, 1] = encode(prop.postgrasp_action)
        tail = rng.normal(0.0, CARTESIAN_TAIL_STD, size=(horizon - 2, 2))
        seqs[i, 2:, 0] = MODE_CARTESIAN
        seqs[i, 2:, 1] = prop.grasp_action.rotation
        seqs[i, 2:, 5:7] = tail
    return seqs


def assemble_proposals(net: aff.AffordanceNet, gmm: ProposalGMM,
                       observation: Observation, config: PlannerConfig,
                       seed: int) -> np.ndarray:
    """N affordance sequences + M GMM samples, all decoded valid, (N+M, H, A)."""
    h, a = config.horizon, ACTION_DIM
    if gmm.means.shape[1] != h * a:
        raise PlannerError(f"GMM width {gmm.means.shape[1]} != horizon*action {h * a}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(33,)))
    from_aff = affordance_sequences(net, observation, config.affordance_proposals,
                                    h, seed=seed)
    from_gmm = gmm.sample(config.gmm_proposals, rng).reshape(config.gmm_proposals, h, a)
    return np.concatenate([sanitize_sequences(from_aff), sanitize_sequences(from_gmm)], axis=0)


# ----------------------------------------------------------------------- CEM

def cem(score_fn, population: np.ndarray, iterations: int, elite_fraction: float,
        rng: np.random.Generator, postprocess=None) -> tuple[np.ndarray, float, list[float]]:
    """Generic CEM over (P, ...) candidates; refits a diagonal Gaussian per round.

    Returns the best-ever candidate, its score, and the best score after each
    iteration (non-decreasing by construction).
    """
    pop = np.asarray(population, dtype=np.float64)
    p = pop.shape[0]
    flat_dim = int(np.prod(pop.shape[1:]))
    n_elite = max(1, int(p * elite_fraction))
    best_seq = None
    best_score = -np.inf
    history: list[float] = []
    for it in range(iterations):
        scores = np.asarray(score_fn(pop), dtype=np.float64)
        if not np.all(np.isfinite(scores)):
            raise PlannerError("non-finite CEM scores")
        order = np.argsort(-scores, kind="stable")
        if scores[order[0]] > best_score:
            best_score = float(scores[order[0]])
            best_seq = pop[order[0]].copy()
        history.append(best_score)
        if it == iterations - 1:
            break
        elite = pop[order[:n_elite]].reshape(n_elite, flat_dim)
        mean = elite.mean(axis=0)
        std = elite.std(axis=0)
        draws = mean + rng.standard_normal((p, flat_dim)) * std
        pop = draws.reshape(pop.shape)
        if postprocess is not None:
            pop = postprocess(pop)
    return best_seq, best_score, history


def score_sequences(model: WorldModel, start: LatentState, goal: Observation,
                    seqs: np.ndarray, use_reward: bool) -> np.ndarray:
    """Imagined return: sum over steps of feature cosine (+ predicted reward)."""
    goal_f = model.goal_feature(goal)
    feats, rews = imagine_feature_batch(model, start, seqs)
    norms = np.linalg.norm(feats, axis=2) * np.linalg.norm(goal_f)
    if np.any(norms == 0.0):
        raise PlannerError("zero-norm feature while scoring")
    cos = feats @ goal_f / norms
    total = cos.sum(axis=1)
    if use_reward and model.reward_trained:
        total = total + rews.sum(axis=1)
    return total


def cem_optimize(model: WorldModel, start: LatentState, goal: Observation,
                 population: np.ndarray, config: PlannerConfig, seed: int,
                 use_reward: bool = True) -> np.ndarray:
    """Plan one action sequence through the model; returns the best (H, A)."""
    if population.shape[0] != config.cem_population:
        raise PlannerError(f"population size {population.shape[0]} != {config.cem_population}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(34,)))
    best, _, _ = cem(
        lambda seqs: score_sequences(model, start, goal, seqs, use_reward),
        population, config.cem_iterations, config.elite_fraction, rng,
        postprocess=sanitize_sequences)
    return best


# -------------------------------------------------------------------- deploy

@dataclass
class DeployResult:
    episodes: list[EpisodeRecord] = field(default_factory=list)
    successes: list[bool] = field(default_factory=list)

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.successes)) if self.successes else 0.0


def deployment_env_seeds(seed: int, episodes: int) -> list[int]:
    """Shared evaluation scene seeds so every method sees identical resets."""
    return [int(s) for s in
            np.random.SeedSequence(entropy=seed, spawn_key=(35,)).generate_state(episodes)]


def deploy(task: str, goal: Observation, model: WorldModel, net: aff.AffordanceNet,
           dataset: list[EpisodeRecord], config: PlannerConfig, seed: int,
           use_reward: bool = True, stage: str = "deploy-round-1",
           proposal_fn=None, reset_fn=None) -> DeployResult:
    """K planned episodes toward the goal; executed episodes are appended to
    the dataset (for continual rounds) and returned with success flags.

    The dataset is ranked once per deployment, a GMM fit to the top fraction,
    and each episode plans open-loop from its own reset.
    """
    if config.episodes == 0:
        return DeployResult()
    if not dataset:
        raise PlannerError("deploy needs a non-empty finetuning dataset")
    elites = rank_trajectories(dataset, goal, model, GMM_ELITE_FRACTION)
    gmm = fit_gmm(elites, k=config.gmm_components, iterations=config.gmm_iterations,
                  seed=seed)
    result = DeployResult()
    for env_seed in deployment_env_seeds(seed, config.episodes):
        scene = sim.reset(task, env_seed) if reset_fn is None else reset_fn(task, env_seed)
        obs0 = sim.render(scene)
        if proposal_fn is None:
            population = assemble_proposals(net, gmm, obs0, config, seed=env_seed)
        else:
            population = proposal_fn(gmm, scene, obs0, config, env_seed)
        start = model.posterior_state([obs0])
        best = cem_optimize(model, start, goal, population, config, seed=env_seed,
                            use_reward=use_reward)
        observations, final_scene = execute_actions(scene, best)
        record = make_record(task, stage, env_seed, observations, best)
        dataset.append(record)
        result.episodes.append(record)
        result.successes.append(sim.success(final_scene, task))
    return result
