"""Grasp/post-grasp affordance model distilled from interaction clips.

A conv encoder-decoder produces a grasp heatmap over the image grid; the
spatial softmax of the heatmap is the predicted grasp pixel, and a head on
the bottleneck predicts the post-grasp pixel as an offset from the grasp
pixel. Trained on first frames only, queried on robot scenes to propose
structured mode-0 action pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint, nn, sim
from .actions import DEFAULT_ROTATIONS, HybridAction
from .autodiff import Tape, Tensor
from .sim import Clip, Observation


@dataclass(frozen=True)
class AffordanceProposal:
    grasp_action: HybridAction
    postgrasp_action: HybridAction


@dataclass(frozen=True)
class AffordanceConfig:
    train_temperature: float = 1.0
    proposal_temperature: float = 0.5
    postgrasp_depth_band: float = 0.10
    batch_size: int = 32


def spatial_softmax(heatmap, temperature: float = 1.0) -> Tensor:
    """Expected pixel of softmax(heatmap / T) over all cells, in [0,1]^2.

    Accepts a single (H, W) grid or a (B, H, W) batch; returns (2,) or (B, 2).
    Differentiable; the expectation lies in the convex hull of cell centers.
    """
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    single = (np.ndim(heatmap.data if isinstance(heatmap, Tensor) else heatmap) == 2)
    t = heatmap if isinstance(heatmap, Tensor) else Tensor(heatmap)
    if single:
        t = ad.reshape(t, (1,) + t.shape)
    b, h, w = t.shape
    probs = ad.softmax(ad.reshape(ad.mul(t, 1.0 / temperature), (b, h * w)), axis=1)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([(cols.ravel() + 0.5) / w, (rows.ravel() + 0.5) / h], axis=1)
    out = ad.matmul(probs, Tensor(coords))
    return ad.reshape(out, (2,)) if single else out


class AffordanceNet:
    """Heatmap + offset predictor; immutable once trained, query concurrently."""

    def __init__(self, seed: int = 0, config: AffordanceConfig = AffordanceConfig()):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(11,)))
        self.config = config
        self.enc1 = nn.Conv2d(rng, 1, 8)
        self.enc2 = nn.Conv2d(rng, 8, 16)
        self.enc3 = nn.Conv2d(rng, 16, 16)
        self.dec1 = nn.Conv2d(rng, 16 + 16, 16)   # skip from enc2
        self.dec2 = nn.Conv2d(rng, 16 + 8, 1)     # skip from enc1
        self.off1 = nn.Dense(rng, 8 * 8 * 16, 64)
        self.off2 = nn.Dense(rng, 64, 2)
        self.params = nn.merge_params(
            self.enc1.params("enc1"), self.enc2.params("enc2"), self.enc3.params("enc3"),
            self.dec1.params("dec1"), self.dec2.params("dec2"),
            self.off1.params("off1"), self.off2.params("off2"))
        self.opt_state = ad.adam_init(self.params)
        self.loss_history: list[float] = []

    def forward(self, images) -> tuple[Tensor, Tensor]:
        """images (B,H,W,1) -> heatmap logits (B,H,W) and offsets (B,2)."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        e1 = ad.relu(self.enc1(x))                      # (B,32,32,8)
        e2 = ad.relu(self.enc2(nn.avg_pool2(e1)))       # (B,16,16,16)
        e3 = ad.relu(self.enc3(nn.avg_pool2(e2)))       # bottleneck (B,8,8,16)
        d1 = ad.relu(self.dec1(ad.concat([nn.upsample2(e3), e2], axis=3)))
        logits = self.dec2(ad.concat([nn.upsample2(d1), e1], axis=3))
        b = x.shape[0]
        heat = ad.reshape(logits, (b, x.shape[1], x.shape[2]))
        flat = ad.reshape(e3, (b, 8 * 8 * 16))
        offset = self.off2(ad.relu(self.off1(flat)))
        return heat, offset

    def predict(self, obs: Observation) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Single-scene query: (heatmap logits, grasp pixel, postgrasp offset)."""
        heat, offset = self.forward(obs.image[None])
        pixel = spatial_softmax(heat, self.config.train_temperature)
        return heat.data[0], pixel.data[0], offset.data[0]

    def heatmap_entropy(self, obs: Observation) -> float:
        heat, _ = self.forward(obs.image[None])
        flat = heat.data[0].ravel() / self.config.proposal_temperature
        flat = flat - flat.max()
        p = np.exp(flat)
        p /= p.sum()
        return float(-(p * np.log(p + 1e-12)).sum())

    def save(self, path: str, meta: dict | None = None) -> None:
        arrays = {k: v.data for k, v in self.params.items()}
        checkpoint.save(path, arrays, {"model": "affordance", **(meta or {})})

    @classmethod
    def load(cls, path: str, config: AffordanceConfig = AffordanceConfig()) -> "AffordanceNet":
        arrays, _ = checkpoint.load(path)
        net = cls(seed=0, config=config)
        for k, v in arrays.items():
            net.params[k].data = v
        return net


def train(clips: list[Clip], epochs: int = 10, lr: float = 3e-3, seed: int = 0,
          config: AffordanceConfig = AffordanceConfig()) -> AffordanceNet:
    """Fit heatmap keypoint to grasp pixels and offset head to pixel deltas."""
    if not clips:
        raise ValueError("empty clip dataset")
    net = AffordanceNet(seed=seed, config=config)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(12,)))
    images = np.stack([c.frames[0].image for c in clips])
    grasp = np.array([c.annotation.grasp_pixel for c in clips])
    delta = (np.array([c.annotation.postgrasp_pixel for c in clips]) - grasp)
    n = len(clips)
    bs = min(config.batch_size, n)
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for lo in range(0, n - bs + 1, bs):
            idx = order[lo:lo + bs]
            ad.zero_grads(net.params)
            with Tape() as tape:
                heat, offset = net.forward(Tensor(images[idx]))
                pixel = spatial_softmax(heat, config.train_temperature)
                perr = ad.sub(pixel, Tensor(grasp[idx]))
                oerr = ad.sub(offset, Tensor(delta[idx]))
                loss = ad.add(ad.mean(ad.sum_(ad.mul(perr, perr), axis=1)),
                              ad.mean(ad.sum_(ad.mul(oerr, oerr), axis=1)))
            ad.backward(tape, loss)
            ad.adam_step(net.params, ad.collect_grads(net.params), net.opt_state, lr=lr)
            epoch_losses.append(loss.item())
        net.loss_history.append(float(np.mean(epoch_losses)))
    return net


def propose(net: AffordanceNet, observation: Observation, n: int, seed: int,
            rotations: tuple[float, ...] = DEFAULT_ROTATIONS) -> list[AffordanceProposal]:
    """Sample n grasp/post-grasp pairs from the heatmap softmax distribution.

    Grasp depth is read from the observed depth channel at the sampled pixel;
    post-grasp depth is drawn uniformly from a band around the depth observed
    at the predicted post-grasp pixel. Rotations are uniform over the
    feasible set.
    """
    for name, p in net.params.items():
        if not np.all(np.isfinite(p.data)):
            raise ad.NonFiniteError(f"affordance parameter {name!r} is not finite")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(13,)))
    heat, offset = net.forward(observation.image[None])
    logits = heat.data[0].ravel() / net.config.proposal_temperature
    logits -= logits.max()
    probs = np.exp(logits)
    probs /= probs.sum()
    h, w = heat.data[0].shape
    cells = rng.choice(h * w, size=n, p=probs)
    rots = rng.integers(len(rotations), size=n)
    band = net.config.postgrasp_depth_band
    proposals = []
    for cell, rot_i in zip(cells, rots):
        row, col = divmod(int(cell), w)
        pixel = ((col + 0.5) / w, (row + 0.5) / h)
        depth_g = sim.depth_at(observation, pixel)
        pg = (float(np.clip(pixel[0] + offset.data[0, 0], 0.0, 1.0)),
              float(np.clip(pixel[1] + offset.data[0, 1], 0.0, 1.0)))
        center = sim.depth_at(observation, pg)
        depth_pg = max(0.0, rng.uniform(center - band, center + band))
        rot = rotations[int(rot_i)]
        proposals.append(AffordanceProposal(
            grasp_action=HybridAction.affordance(pixel, depth_g, rot),
            postgrasp_action=HybridAction.affordance(pg, depth_pg, rot)))
    return proposals
