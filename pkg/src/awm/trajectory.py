"""Episode records shared by the planner, dataset store, and pipelines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sim
from .actions import ACTION_DIM, decode
from .sim import Observation, Scene


@dataclass(frozen=True)
class EpisodeRecord:
    """One episode: T+1 observations and T flat action vectors.

    Observations are stored as float32 images; the depth channel is a
    deterministic ramp and is regenerated on demand. Records are immutable
    and datasets append-only.
    """

    task: str
    stage: str
    seed: int
    observations: np.ndarray  # (T+1, H, W, 1) float32
    actions: np.ndarray       # (T, ACTION_DIM) float32

    def __post_init__(self):
        if self.actions.ndim != 2 or self.actions.shape[1] != ACTION_DIM:
            raise ValueError(f"actions must be (T,{ACTION_DIM}), got {self.actions.shape}")
        if self.observations.shape[0] != self.actions.shape[0] + 1:
            raise ValueError("need exactly one more observation than actions")
        for row in self.actions:
            decode(np.asarray(row, dtype=np.float64))

    def frames64(self) -> np.ndarray:
        return np.asarray(self.observations, dtype=np.float64)

    def actions64(self) -> np.ndarray:
        return np.asarray(self.actions, dtype=np.float64)


def make_record(task: str, stage: str, seed: int, observations: list[Observation],
                action_matrix: np.ndarray) -> EpisodeRecord:
    images = np.stack([o.image for o in observations]).astype(np.float32)
    return EpisodeRecord(task=task, stage=stage, seed=seed, observations=images,
                         actions=np.asarray(action_matrix, dtype=np.float32))


def execute_actions(scene: Scene, action_matrix: np.ndarray) -> tuple[list[Observation], Scene]:
    """Run flat action rows open-loop; returns all observations incl. initial."""
    observations = [sim.render(scene)]
    for row in np.asarray(action_matrix, dtype=np.float64):
        scene, obs = sim.step(scene, decode(row))
        observations.append(obs)
    return observations, scene
