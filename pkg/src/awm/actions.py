"""Hybrid action space: structured pixel+depth actions and cartesian deltas.

An action is a fixed-width record [mode, rotation, pixel, depth, delta].
Mode 0 executes the image-space action (pixel + depth projected into the
workspace); mode 1 executes the cartesian delta. The inactive block is
always zeroed so the flat encoding has a fixed 7-entry layout:

    [m, theta, p_x, p_y, d, dy_1, dy_2]

This layout is a stable on-disk contract used by the dataset format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MODE_AFFORDANCE = 0
MODE_CARTESIAN = 1

# Discrete feasible gripper rotations (radians).
DEFAULT_ROTATIONS: tuple[float, ...] = (0.0, -math.pi / 4, -math.pi / 2)

ACTION_DIM = 7


class ActionError(ValueError):
    """Invalid action construction or decoding."""


@dataclass(frozen=True)
class HybridAction:
    """One hybrid action. Pure value type; safe to share across workers."""

    mode: int
    rotation: float
    pixel: tuple[float, float]   # normalized image coordinates, [0,1]^2
    depth: float                 # workspace length units, >= 0
    delta: tuple[float, float]   # cartesian displacement, workspace units

    def __post_init__(self) -> None:
        if self.mode not in (MODE_AFFORDANCE, MODE_CARTESIAN):
            raise ActionError(f"mode must be 0 or 1, got {self.mode}")
        if not all(0.0 <= c <= 1.0 for c in self.pixel):
            raise ActionError(f"pixel out of [0,1]^2: {self.pixel}")
        if self.depth < 0.0:
            raise ActionError(f"depth must be >= 0, got {self.depth}")
        if not any(self.rotation == r for r in DEFAULT_ROTATIONS):
            raise ActionError(f"rotation {self.rotation} not in feasible set")
        # The inactive block holds zeros so the flat encoding is unambiguous.
        if self.mode == MODE_AFFORDANCE and self.delta != (0.0, 0.0):
            raise ActionError("mode-0 action must carry a zero cartesian delta")
        if self.mode == MODE_CARTESIAN and (self.pixel != (0.0, 0.0) or self.depth != 0.0):
            raise ActionError("mode-1 action must carry a zero image action")

    @classmethod
    def affordance(cls, pixel: tuple[float, float], depth: float,
                   rotation: float = 0.0) -> "HybridAction":
        return cls(MODE_AFFORDANCE, rotation, (float(pixel[0]), float(pixel[1])),
                   float(depth), (0.0, 0.0))

    @classmethod
    def cartesian(cls, delta: tuple[float, float],
                  rotation: float = 0.0) -> "HybridAction":
        return cls(MODE_CARTESIAN, rotation, (0.0, 0.0), 0.0,
                   (float(delta[0]), float(delta[1])))


@dataclass(frozen=True)
class WorkspacePoint:
    """A workspace position plus a flag for whether it is inside the bounds."""

    coordinates: tuple[float, float]
    valid: bool


@dataclass(frozen=True)
class CameraModel:
    """Orthographic side-view calibration mapping the 2-D workspace to pixels.

    Column coordinate p_x spans [x_min, x_max] (lateral), row coordinate p_y
    spans [y_min, y_max] (height). Depth is measured along the lateral axis
    from depth_origin, so depth 0 images the camera plane itself.
    """

    x_min: float = 0.0
    x_max: float = 1.0
    y_min: float = 0.0
    y_max: float = 1.0
    depth_origin: float = 0.0

    def world_to_pixel(self, point: tuple[float, float]) -> tuple[float, float]:
        """Continuous forward render map: workspace point -> normalized pixel."""
        px = (point[0] - self.x_min) / (self.x_max - self.x_min)
        py = (point[1] - self.y_min) / (self.y_max - self.y_min)
        return (px, py)

    def depth_of(self, point: tuple[float, float]) -> float:
        return point[0] - self.depth_origin


def encode(action: HybridAction) -> np.ndarray:
    """Flat 7-vector encoding of a valid action."""
    return np.array([
        float(action.mode),
        action.rotation,
        action.pixel[0],
        action.pixel[1],
        action.depth,
        action.delta[0],
        action.delta[1],
    ], dtype=np.float64)


def decode(vector: np.ndarray,
           rotations: tuple[float, ...] = DEFAULT_ROTATIONS) -> HybridAction:
    """Flat vector -> valid action. Clamps pixels, snaps rotation, rounds mode.

    Mode rounds at 0.5 with ties up. Rotation snaps to the nearest entry of
    the feasible set (first wins on a tie). Raises ActionError on wrong width.
    """
    vec = np.asarray(vector, dtype=np.float64)
    if vec.shape != (ACTION_DIM,):
        raise ActionError(f"expected action vector of shape ({ACTION_DIM},), got {vec.shape}")
    mode = MODE_CARTESIAN if vec[0] >= 0.5 else MODE_AFFORDANCE
    rotation = min(rotations, key=lambda r: abs(vec[1] - r))
    if mode == MODE_AFFORDANCE:
        pixel = (float(np.clip(vec[2], 0.0, 1.0)), float(np.clip(vec[3], 0.0, 1.0)))
        depth = float(max(vec[4], 0.0))
        return HybridAction(mode, rotation, pixel, depth, (0.0, 0.0))
    return HybridAction(mode, rotation, (0.0, 0.0), 0.0, (float(vec[5]), float(vec[6])))


def encode_sequence(actions: list[HybridAction]) -> np.ndarray:
    """Stack a list of actions into a (T, 7) array."""
    if not actions:
        return np.zeros((0, ACTION_DIM), dtype=np.float64)
    return np.stack([encode(a) for a in actions])


def decode_sequence(matrix: np.ndarray,
                    rotations: tuple[float, ...] = DEFAULT_ROTATIONS) -> list[HybridAction]:
    return [decode(row, rotations) for row in np.asarray(matrix, dtype=np.float64)]


def project_to_workspace(pixel: tuple[float, float], depth: float,
                         camera: CameraModel) -> WorkspacePoint:
    """Pixel + depth -> workspace point; exact inverse of the render map.

    The row coordinate fixes the height; depth fixes the lateral position
    measured from the camera plane. Out-of-bounds points are returned with
    valid=False rather than raised.
    """
    x = camera.depth_origin + depth
    y = camera.y_min + pixel[1] * (camera.y_max - camera.y_min)
    valid = (camera.x_min <= x <= camera.x_max) and (camera.y_min <= y <= camera.y_max)
    return WorkspacePoint((x, y), valid)
