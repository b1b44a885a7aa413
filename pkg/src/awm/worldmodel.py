"""Latent world model: encoder, posterior, prior dynamics, decoders.

The latent state splits into a recurrent deterministic part and a
diagonal-Gaussian stochastic part. Training optimizes reconstruction plus a
free-nats-clamped KL between posterior and prior, with an optional reward
head; sequences of different lengths are bucketed, never padded. Planning
rolls the prior mean open-loop and scores states by cosine similarity
between latent features and the feature of a goal image observed from a
zero initial state.

A trained model is immutable during planning and may serve concurrent
rollouts; training mutates parameters and is single-threaded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint, nn
from .actions import ACTION_DIM
from .autodiff import Tape, Tensor
from .sim import IMAGE_SIZE, Observation

LOG_STD_LO = -4.0
LOG_STD_HI = 1.0


class WorldModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldModelConfig:
    deter: int = 64
    stoch: int = 16
    embed: int = 64
    hidden: int = 64
    image_size: int = IMAGE_SIZE
    action_dim: int = ACTION_DIM


@dataclass(frozen=True)
class LatentState:
    """Filtered or imagined latent state; feature() is what planning scores."""

    deter: np.ndarray
    stoch: np.ndarray
    mean: np.ndarray
    log_std: np.ndarray

    def feature(self) -> np.ndarray:
        return np.concatenate([self.deter, self.mean])


@dataclass
class TrainSequence:
    """One training sequence: T observations, T or T-1 actions, optional rewards."""

    obs: np.ndarray                  # (T, H, W, 1)
    actions: np.ndarray              # (T or T-1, action_dim)
    rewards: np.ndarray | None = None  # (T,)


class _Encoder:
    def __init__(self, rng: np.random.Generator, cfg: WorldModelConfig):
        self.c1 = nn.Conv2d(rng, 1, 8)
        self.c2 = nn.Conv2d(rng, 8, 16)
        self.c3 = nn.Conv2d(rng, 16, 16)
        self.out = nn.Dense(rng, (cfg.image_size // 8) ** 2 * 16, cfg.embed)

    def __call__(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        h = nn.avg_pool2(ad.relu(self.c1(x)))
        h = nn.avg_pool2(ad.relu(self.c2(h)))
        h = nn.avg_pool2(ad.relu(self.c3(h)))
        flat = ad.reshape(h, (x.shape[0], (x.shape[1] // 8) ** 2 * 16))
        return self.out(flat)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return nn.merge_params(self.c1.params(f"{prefix}.c1"), self.c2.params(f"{prefix}.c2"),
                               self.c3.params(f"{prefix}.c3"), self.out.params(f"{prefix}.out"))


class FrozenEncoder:
    """Copy of a pretrained encoder; the external feature space for rewards."""

    def __init__(self, encoder: _Encoder, cfg: WorldModelConfig):
        rng = np.random.default_rng(0)
        self.cfg = cfg
        self.enc = _Encoder(rng, cfg)
        for name, p in self.enc.params("enc").items():
            p.data = encoder.params("enc")[name].data.copy()
            p.requires_grad = False

    def embed(self, images: np.ndarray) -> np.ndarray:
        return self.enc(np.asarray(images, dtype=np.float64)).data

    def goal_distances(self, frames: np.ndarray, goal: Observation) -> np.ndarray:
        """Cosine of each frame's embedding against the goal embedding."""
        e = self.embed(frames)
        g = self.embed(goal.image[None])[0]
        return _cosine_rows(e, g)


def _cosine_rows(rows: np.ndarray, ref: np.ndarray) -> np.ndarray:
    rn = np.linalg.norm(rows, axis=-1)
    gn = np.linalg.norm(ref)
    if gn == 0.0 or np.any(rn == 0.0):
        raise WorldModelError("zero-norm feature in cosine similarity")
    return rows @ ref / (rn * gn)


def _bounded_log_std(raw: Tensor) -> Tensor:
    span = LOG_STD_HI - LOG_STD_LO
    return ad.add(ad.mul(ad.sigmoid(raw), span), LOG_STD_LO)


class WorldModel:
    def __init__(self, config: WorldModelConfig = WorldModelConfig(), seed: int = 0):
        cfg = config
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(21,)))
        self.cfg = cfg
        self.encoder = _Encoder(rng, cfg)
        self.act_in = nn.Dense(rng, cfg.stoch + cfg.action_dim, cfg.hidden)
        self.core = nn.GRUCell(rng, cfg.hidden, cfg.deter)
        self.prior1 = nn.Dense(rng, cfg.deter, cfg.hidden)
        self.prior2 = nn.Dense(rng, cfg.hidden, 2 * cfg.stoch)
        self.post1 = nn.Dense(rng, cfg.deter + cfg.embed, cfg.hidden)
        self.post2 = nn.Dense(rng, cfg.hidden, 2 * cfg.stoch)
        self.dec_in = nn.Dense(rng, cfg.deter + cfg.stoch, (cfg.image_size // 8) ** 2 * 16)
        self.dec1 = nn.Conv2d(rng, 16, 16)
        self.dec2 = nn.Conv2d(rng, 16, 8)
        self.dec3 = nn.Conv2d(rng, 8, 1)
        self.rew1 = nn.Dense(rng, cfg.deter + cfg.stoch, cfg.hidden)
        self.rew2 = nn.Dense(rng, cfg.hidden, 1)
        self.params = nn.merge_params(
            self.encoder.params("enc"), self.act_in.params("act_in"),
            self.core.params("core"),
            self.prior1.params("prior1"), self.prior2.params("prior2"),
            self.post1.params("post1"), self.post2.params("post2"),
            self.dec_in.params("dec_in"), self.dec1.params("dec1"),
            self.dec2.params("dec2"), self.dec3.params("dec3"),
            self.rew1.params("rew1"), self.rew2.params("rew2"))
        self.opt_state = ad.adam_init(self.params)
        self.sample_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(22,)))
        self.reward_trained = False
        self.train_steps = 0

    # ------------------------------------------------------------ core nets

    def _prior(self, deter: Tensor) -> tuple[Tensor, Tensor]:
        raw = self.prior2(ad.relu(self.prior1(deter)))
        mean, raw_std = ad.split_half(raw, axis=-1)
        return mean, _bounded_log_std(raw_std)

    def _posterior(self, deter: Tensor, embed: Tensor) -> tuple[Tensor, Tensor]:
        raw = self.post2(ad.relu(self.post1(ad.concat([deter, embed], axis=-1))))
        mean, raw_std = ad.split_half(raw, axis=-1)
        return mean, _bounded_log_std(raw_std)

    def _advance(self, deter: Tensor, stoch: Tensor, action: Tensor) -> Tensor:
        x = ad.relu(self.act_in(ad.concat([stoch, action], axis=-1)))
        return self.core(x, deter)

    def _decode(self, features: Tensor) -> Tensor:
        b = features.shape[0]
        side = self.cfg.image_size // 8
        h = ad.relu(self.dec_in(features))
        h = ad.reshape(h, (b, side, side, 16))
        h = ad.relu(self.dec1(nn.upsample2(h)))
        h = ad.relu(self.dec2(nn.upsample2(h)))
        return self.dec3(nn.upsample2(h))

    def _reward(self, features: Tensor) -> Tensor:
        out = self.rew2(ad.relu(self.rew1(features)))
        return ad.reshape(out, (out.shape[0],))

    def _zero_state(self, batch: int) -> tuple[Tensor, Tensor]:
        return (Tensor(np.zeros((batch, self.cfg.deter))),
                Tensor(np.zeros((batch, self.cfg.stoch))))

    def _filter(self, obs: np.ndarray, actions: np.ndarray,
                initial: tuple[Tensor, Tensor] | None,
                rng: np.random.Generator | None):
        """Batched filtering pass.

        obs (B,T,H,W,1); actions (B,T,A) for a leading action or (B,T-1,A);
        returns per-step dicts of Tensors. Stochastic part is sampled when a
        generator is given, otherwise the posterior mean (deterministic).
        """
        b, t = obs.shape[0], obs.shape[1]
        if actions.ndim != 3 or actions.shape[2] != self.cfg.action_dim:
            raise WorldModelError(f"action batch must be (B,T,{self.cfg.action_dim}), got {actions.shape}")
        if actions.shape[1] not in (t, t - 1) and not (t == 1 and actions.shape[1] == 0):
            raise WorldModelError(f"got {actions.shape[1]} actions for {t} observations")
        leading = actions.shape[1] == t
        embeds = self.encoder(obs.reshape(b * t, *obs.shape[2:]))
        embeds_bt = ad.reshape(embeds, (b, t, self.cfg.embed))
        return self._filter_steps(obs, actions, leading, embeds_bt, initial, rng)

    def _filter_steps(self, obs, actions, leading, embeds_bt, initial, rng):
        b, t = obs.shape[0], obs.shape[1]
        deter, stoch = initial if initial is not None else self._zero_state(b)
        steps = []
        for k in range(t):
            if k == 0 and not leading:
                act = Tensor(np.zeros((b, self.cfg.action_dim)))
            else:
                act = Tensor(actions[:, k if leading else k - 1])
            deter = self._advance(deter, stoch, act)
            prior_mean, prior_ls = self._prior(deter)
            embed_k = ad.narrow(embeds_bt, 1, k, 1)
            embed_k = ad.reshape(embed_k, (b, self.cfg.embed))
            post_mean, post_ls = self._posterior(deter, embed_k)
            if rng is not None:
                stoch = ad.gaussian_sample(post_mean, post_ls, rng)
            else:
                stoch = post_mean
            steps.append({"deter": deter, "stoch": stoch,
                          "post_mean": post_mean, "post_ls": post_ls,
                          "prior_mean": prior_mean, "prior_ls": prior_ls})
        return steps

    # ------------------------------------------------------------ public ops

    def posterior_state(self, observations: list[Observation],
                        actions: np.ndarray | None = None) -> LatentState:
        """Filtered state after observing a sequence (deterministic)."""
        states, _, _ = observe_sequence(self, observations, actions)
        return states[-1]

    def goal_feature(self, goal: Observation) -> np.ndarray:
        """Encode-then-posterior feature of one observation from a zero state."""
        return self.posterior_state([goal]).feature()

    def save(self, path: str, meta: dict | None = None) -> None:
        arrays = {k: v.data for k, v in self.params.items()}
        info = {"model": "world", "deter": self.cfg.deter, "stoch": self.cfg.stoch,
                "embed": self.cfg.embed, "hidden": self.cfg.hidden,
                "image_size": self.cfg.image_size, "action_dim": self.cfg.action_dim,
                "reward_trained": self.reward_trained, "train_steps": self.train_steps}
        checkpoint.save(path, arrays, {**info, **(meta or {})})

    @classmethod
    def load(cls, path: str) -> "WorldModel":
        arrays, meta = checkpoint.load(path)
        cfg = WorldModelConfig(deter=meta["deter"], stoch=meta["stoch"], embed=meta["embed"],
                               hidden=meta["hidden"], image_size=meta["image_size"],
                               action_dim=meta["action_dim"])
        model = cls(cfg, seed=0)
        for k, v in arrays.items():
            model.params[k].data = v
        model.reward_trained = bool(meta.get("reward_trained", False))
        model.train_steps = int(meta.get("train_steps", 0))
        return model

    def frozen_encoder(self) -> FrozenEncoder:
        return FrozenEncoder(self.encoder, self.cfg)


def _state_from_step(step: dict, idx: int) -> LatentState:
    return LatentState(deter=step["deter"].data[idx].copy(),
                       stoch=step["stoch"].data[idx].copy(),
                       mean=step["post_mean"].data[idx].copy(),
                       log_std=step["post_ls"].data[idx].copy())


def observe_sequence(model: WorldModel, observations, actions=None,
                     initial: LatentState | None = None):
    """Filter one sequence; returns (posterior states, prior and posterior Gaussians).

    Actions may be one per transition (len(obs)-1) or include a leading
    action (len(obs)); omitted entirely means zero actions throughout.
    """
    obs = np.stack([o.image if isinstance(o, Observation) else o for o in observations])
    t = obs.shape[0]
    if actions is None:
        actions = np.zeros((max(t - 1, 0), model.cfg.action_dim))
    actions = np.asarray(actions, dtype=np.float64)
    init = None
    if initial is not None:
        init = (Tensor(initial.deter[None]), Tensor(initial.stoch[None]))
    steps = model._filter(obs[None], actions[None], init, rng=None)
    states = [_state_from_step(s, 0) for s in steps]
    priors = [(s["prior_mean"].data[0].copy(), s["prior_ls"].data[0].copy()) for s in steps]
    posts = [(s["post_mean"].data[0].copy(), s["post_ls"].data[0].copy()) for s in steps]
    return states, priors, posts


def train_elbo(model: WorldModel, batch: list[TrainSequence], lr: float = 3e-4,
               free_nats: float = 1.0, kl_scale: float = 1.0,
               with_reward: bool = False) -> dict[str, float]:
    """One Adam step on the ELBO over a (possibly mixed-length) batch.

    Loss: Gaussian reconstruction NLL (unit variance, so squared error) plus
    kl_scale * max(KL(posterior || prior) - free_nats, 0) per step, plus
    reward squared error when enabled. Sequences are bucketed by length and
    bucket losses combined weighted by sequence count.
    """
    if not batch:
        raise WorldModelError("empty training batch")
    buckets: dict[tuple[int, int], list[TrainSequence]] = {}
    for seq in batch:
        buckets.setdefault((seq.obs.shape[0], seq.actions.shape[0]), []).append(seq)

    ad.zero_grads(model.params)
    totals = {"recon": 0.0, "kl": 0.0, "reward": 0.0, "total": 0.0}
    n_total = len(batch)
    with Tape() as tape:
        loss_terms = []
        for (t, _ta), seqs in sorted(buckets.items()):
            obs = np.stack([s.obs for s in seqs])
            acts = np.stack([s.actions for s in seqs])
            weight = len(seqs) / n_total
            steps = model._filter(obs, acts, None, rng=model.sample_rng)
            b = obs.shape[0]
            feats = ad.concat([ad.concat([s["deter"], s["stoch"]], axis=-1) for s in steps], axis=0)
            decoded = model._decode(feats)
            target = np.concatenate([obs[:, k] for k in range(t)], axis=0)
            err = ad.sub(decoded, Tensor(target))
            sse = ad.sum_(ad.mul(err, err), axis=(1, 2, 3))
            recon = ad.mean(ad.mul(sse, 0.5))
            kl_steps = [ad.kl_diag_gaussians(s["post_mean"], s["post_ls"],
                                             s["prior_mean"], s["prior_ls"]) for s in steps]
            kl_all = ad.concat(kl_steps, axis=0)
            kl_clamped = ad.mean(ad.relu(ad.sub(kl_all, free_nats)))
            term = ad.add(recon, ad.mul(kl_clamped, kl_scale))
            rew_loss = None
            if with_reward:
                targets = [s.rewards for s in seqs]
                if all(r is not None for r in targets):
                    rew_pred = model._reward(feats)
                    rew_target = np.concatenate([np.stack([r[k] for r in targets])
                                                 for k in range(t)], axis=0)
                    rerr = ad.sub(rew_pred, Tensor(rew_target))
                    rew_loss = ad.mean(ad.mul(rerr, rerr))
                    term = ad.add(term, rew_loss)
                    model.reward_trained = True
            loss_terms.append(ad.mul(term, weight))
            totals["recon"] += weight * recon.item()
            totals["kl"] += weight * kl_clamped.item()
            if rew_loss is not None:
                totals["reward"] += weight * rew_loss.item()
        loss = loss_terms[0]
        for extra in loss_terms[1:]:
            loss = ad.add(loss, extra)
    totals["total"] = loss.item()
    ad.backward(tape, loss)
    ad.adam_step(model.params, ad.collect_grads(model.params), model.opt_state, lr=lr)
    model.train_steps += 1
    return totals


def imagine(model: WorldModel, start: LatentState, actions) -> tuple[list[LatentState], np.ndarray]:
    """Open-loop rollout through the prior mean; also decodes each state."""
    acts = np.asarray(actions, dtype=np.float64)
    if acts.size == 0:
        return [start], np.zeros((0, model.cfg.image_size, model.cfg.image_size, 1))
    if acts.shape[-1] != model.cfg.action_dim:
        raise WorldModelError(f"imagine: action width {acts.shape[-1]} != {model.cfg.action_dim}")
    deter = Tensor(start.deter[None])
    stoch = Tensor(start.stoch[None])
    states: list[LatentState] = [start]
    feats = []
    for k in range(acts.shape[0]):
        deter = model._advance(deter, stoch, Tensor(acts[None, k]))
        mean, log_std = model._prior(deter)
        stoch = mean
        states.append(LatentState(deter=deter.data[0].copy(), stoch=mean.data[0].copy(),
                                  mean=mean.data[0].copy(), log_std=log_std.data[0].copy()))
        feats.append(np.concatenate([deter.data[0], mean.data[0]]))
    decoded = model._decode(Tensor(np.stack(feats))).data
    return states, decoded


def imagine_feature_batch(model: WorldModel, start: LatentState,
                          actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched prior-mean rollout for planning: (B,T,A) -> features (B,T,F) and
    reward-head predictions (B,T). No decoding; deterministic."""
    b, t, a = actions.shape
    deter = Tensor(np.broadcast_to(start.deter, (b, start.deter.shape[0])).copy())
    stoch = Tensor(np.broadcast_to(start.stoch, (b, start.stoch.shape[0])).copy())
    feats = np.empty((b, t, model.cfg.deter + model.cfg.stoch))
    for k in range(t):
        deter = model._advance(deter, stoch, Tensor(actions[:, k]))
        mean, _ = model._prior(deter)
        stoch = mean
        feats[:, k, :model.cfg.deter] = deter.data
        feats[:, k, model.cfg.deter:] = mean.data
    flat = feats.reshape(b * t, -1)
    rewards = model._reward(Tensor(flat)).data.reshape(b, t)
    return feats, rewards


def feature_distance(model: WorldModel, state: LatentState, goal: Observation) -> float:
    """Cosine similarity between the goal feature and the state feature."""
    goal_f = model.goal_feature(goal)
    return float(_cosine_rows(state.feature()[None], goal_f)[0])


def predict_reward(model: WorldModel, state: LatentState) -> float:
    if not model.reward_trained:
        raise WorldModelError("reward head was never trained")
    return float(model._reward(Tensor(state.feature()[None])).data[0])
