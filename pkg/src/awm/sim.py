"""Deterministic 2-D micro-kitchen simulator.

Workspace is the unit square: x lateral, y height. A fixed side-view camera
renders 32x32 intensity images; the depth channel carries each pixel's
lateral coordinate, so reading depth at a pixel recovers the lateral
position imaged there (the projection in `actions` inverts this exactly).

Six tasks map onto four mechanism kinds: drawer and dishwasher are
horizontal prismatic joints, cabinet and can lid are revolute, the veg task
has two free objects, and the knife is a vertical prismatic joint that only
yields to a -pi/2 gripper rotation inside a tight grasp radius.

Scenes are immutable; `step` returns a fresh scene, so distinct episodes can
run in parallel with no shared mutable state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .actions import (
    MODE_AFFORDANCE,
    CameraModel,
    DEFAULT_ROTATIONS,
    HybridAction,
    project_to_workspace,
)

IMAGE_SIZE = 32
CAMERA = CameraModel()

TASKS = ("drawer", "dishwasher", "cabinet", "can", "veg", "knife")

SUCCESS_FRACTION = 0.8
GRASP_RADIUS_PX = 1.5
KNIFE_GRASP_RADIUS_PX = 1.0
CARTESIAN_STEP_MAX = 0.1
ANCHOR_JITTER_PX = 2.0
JOINT_JITTER_FRACTION = 0.02

BACKGROUND = 0.0
KIND_INTENSITY = {
    "prismatic-horizontal": 0.35,
    "revolute": 0.45,
    "free": 0.55,
    "prismatic-vertical": 0.30,
}
HANDLE_INTENSITY = 1.0
GRIPPER_INTENSITY = 0.65   # same shade as the hand: the embodiment gap is the
HAND_INTENSITY = 0.65      # footprint shape, not the palette

GRIPPER_HOME = (0.10, 0.85)


class SimError(ValueError):
    """Unknown task id or malformed scene input."""


@dataclass(frozen=True)
class SimObject:
    """One manipulable object; handle position is a function of joint_value."""

    kind: str
    anchor: tuple[float, float]          # rest handle position / hinge
    joint_value: float
    joint_max: float
    joint_min: float = 0.0
    axis: tuple[float, float] = (0.0, 0.0)   # prismatic travel direction
    arm: float = 0.0                          # revolute: hinge-to-handle distance
    closed_angle: float = 0.0                 # revolute: handle bearing when shut
    position: tuple[float, float] = (0.0, 0.0)  # free objects only
    required_rotation: float | None = None
    grasp_radius: float = GRASP_RADIUS_PX / IMAGE_SIZE

    def handle(self) -> tuple[float, float]:
        if self.kind == "free":
            return self.position
        if self.kind == "revolute":
            a = self.closed_angle + self.joint_value
            return (self.anchor[0] + self.arm * math.cos(a),
                    self.anchor[1] + self.arm * math.sin(a))
        return (self.anchor[0] + self.joint_value * self.axis[0],
                self.anchor[1] + self.joint_value * self.axis[1])


@dataclass(frozen=True)
class Scene:
    task: str
    objects: tuple[SimObject, ...]
    gripper: tuple[float, float]
    gripper_rotation: float
    holding: int | None
    rng_seed: int
    time_step: int = 0
    embodiment: str = "robot"


@dataclass(frozen=True)
class Observation:
    image: np.ndarray   # (H, W, 1), intensities in [0, 1]
    depth: np.ndarray   # (H, W), workspace length units


@dataclass(frozen=True)
class AffordanceLabel:
    grasp_pixel: tuple[float, float]
    postgrasp_pixel: tuple[float, float]
    grasp_depth: float
    postgrasp_depth: float


@dataclass(frozen=True)
class Clip:
    """Three frames and the two derived grasp / post-grasp actions."""

    frames: tuple[Observation, Observation, Observation]
    annotation: AffordanceLabel
    actions: tuple[HybridAction, HybridAction]
    task: str
    seed: int


@dataclass(frozen=True)
class HandStyle:
    """Scripted-hand noise and manipulation parameters for clip generation."""

    pixel_noise_px: float = 0.5
    noise_clip_px: float = 1.5
    manipulate_lo: float = 0.6
    manipulate_hi: float = 1.0


def _build_objects(task: str, rng: np.random.Generator) -> tuple[SimObject, ...]:
    jit = ANCHOR_JITTER_PX / IMAGE_SIZE

    def jittered(x: float, y: float) -> tuple[float, float]:
        return (x + rng.uniform(-jit, jit), y + rng.uniform(-jit, jit))

    if task == "drawer":
        objs = [SimObject("prismatic-horizontal", jittered(0.68, 0.38),
                          0.0, 0.30, axis=(-1.0, 0.0))]
    elif task == "dishwasher":
        objs = [SimObject("prismatic-horizontal", jittered(0.30, 0.58),
                          0.0, 0.30, axis=(1.0, 0.0))]
    elif task == "cabinet":
        objs = [SimObject("revolute", jittered(0.62, 0.62),
                          0.0, math.pi / 2, arm=0.18, closed_angle=math.pi)]
    elif task == "can":
        objs = [SimObject("revolute", jittered(0.35, 0.45),
                          0.0, math.pi / 2, arm=0.12, closed_angle=0.0)]
    elif task == "veg":
        objs = []
        for bx, by in ((0.30, 0.30), (0.55, 0.30)):
            anchor = jittered(bx, by)
            objs.append(SimObject("free", anchor, 0.0, 0.40, position=anchor))
    elif task == "knife":
        objs = [SimObject("prismatic-vertical", jittered(0.52, 0.50),
                          0.0, 0.28, axis=(0.0, 1.0),
                          required_rotation=-math.pi / 2,
                          grasp_radius=KNIFE_GRASP_RADIUS_PX / IMAGE_SIZE)]
    else:
        raise SimError(f"unknown task {task!r}; expected one of {TASKS}")

    jittered_objs = []
    for obj in objs:
        rest = obj.joint_min + rng.uniform(0.0, JOINT_JITTER_FRACTION) * (obj.joint_max - obj.joint_min)
        if obj.kind == "free":
            obj = replace(obj, joint_value=0.0)
        else:
            obj = replace(obj, joint_value=rest)
        jittered_objs.append(obj)
    return tuple(jittered_objs)


def reset(task: str, seed: int, embodiment: str = "robot") -> Scene:
    """Deterministic initial scene for (task, seed); joints near rest."""
    if task not in TASKS:
        raise SimError(f"unknown task {task!r}; expected one of {TASKS}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(TASKS.index(task),)))
    objects = _build_objects(task, rng)
    jit = 0.5 / IMAGE_SIZE
    gx = GRIPPER_HOME[0] + rng.uniform(-jit, jit)
    gy = GRIPPER_HOME[1] + rng.uniform(-jit, jit)
    return Scene(task=task, objects=objects, gripper=(gx, gy),
                 gripper_rotation=0.0, holding=None, rng_seed=seed,
                 embodiment=embodiment)


def _clamp_point(p: tuple[float, float]) -> tuple[float, float]:
    return (min(max(p[0], 0.0), 1.0), min(max(p[1], 0.0), 1.0))


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def _move_held(obj: SimObject, target: tuple[float, float]) -> SimObject:
    """Constrained motion of a held object toward the gripper target."""
    if obj.kind == "free":
        x = min(max(target[0], 0.03), 0.97)
        y = min(max(target[1], obj.anchor[1] + obj.joint_min),
                obj.anchor[1] + obj.joint_max)
        return replace(obj, position=(x, y), joint_value=y - obj.anchor[1])
    if obj.kind == "revolute":
        desired = _wrap_angle(math.atan2(target[1] - obj.anchor[1],
                                         target[0] - obj.anchor[0]) - obj.closed_angle)
        joint = min(max(desired, obj.joint_min), obj.joint_max)
        return replace(obj, joint_value=joint)
    handle = obj.handle()
    travel = ((target[0] - handle[0]) * obj.axis[0]
              + (target[1] - handle[1]) * obj.axis[1])
    joint = min(max(obj.joint_value + travel, obj.joint_min), obj.joint_max)
    return replace(obj, joint_value=joint)


def _try_grasp(scene: Scene, objects: tuple[SimObject, ...],
               gripper: tuple[float, float]) -> tuple[int | None, tuple[float, float]]:
    best = None
    best_dist = math.inf
    for idx, obj in enumerate(objects):
        handle = obj.handle()
        dist = math.hypot(handle[0] - gripper[0], handle[1] - gripper[1])
        if dist <= obj.grasp_radius and dist < best_dist:
            if obj.required_rotation is not None and scene.gripper_rotation != obj.required_rotation:
                continue
            best, best_dist = idx, dist
    if best is None:
        return None, gripper
    return best, objects[best].handle()


def step(scene: Scene, action: HybridAction) -> tuple[Scene, Observation]:
    """Execute one hybrid action; infeasible motion is clipped, never rejected.

    Mode 0 is a macro: project the pixel+depth target and move the gripper
    there. Mode 1 translates by the clipped cartesian delta. Held objects
    constrain the motion to their joint; an open gripper that ends a step
    within grasp radius of a compatible handle attaches to it.
    """
    scene = replace(scene, gripper_rotation=action.rotation)
    if action.mode == MODE_AFFORDANCE:
        point = project_to_workspace(action.pixel, action.depth, CAMERA)
        target = _clamp_point(point.coordinates)
    else:
        dx = min(max(action.delta[0], -CARTESIAN_STEP_MAX), CARTESIAN_STEP_MAX)
        dy = min(max(action.delta[1], -CARTESIAN_STEP_MAX), CARTESIAN_STEP_MAX)
        target = _clamp_point((scene.gripper[0] + dx, scene.gripper[1] + dy))

    objects = scene.objects
    holding = scene.holding
    if holding is not None:
        moved = _move_held(objects[holding], target)
        objects = objects[:holding] + (moved,) + objects[holding + 1:]
        gripper = moved.handle()
    else:
        gripper = target
        holding, gripper = _try_grasp(scene, objects, gripper)
        if holding is None:
            gripper = target

    nxt = replace(scene, objects=objects, gripper=gripper, holding=holding,
                  time_step=scene.time_step + 1)
    return nxt, render(nxt)


def _cell(p: float, n: int) -> int:
    return min(max(int(p * n), 0), n - 1)


def _stamp(img: np.ndarray, point: tuple[float, float], offsets, intensity: float) -> None:
    px, py = CAMERA.world_to_pixel(point)
    col, row = _cell(px, IMAGE_SIZE), _cell(py, IMAGE_SIZE)
    for dr, dc in offsets:
        r, c = row + dr, col + dc
        if 0 <= r < IMAGE_SIZE and 0 <= c < IMAGE_SIZE:
            img[r, c] = intensity


def _stamp_box(img: np.ndarray, lo: tuple[float, float], hi: tuple[float, float],
               intensity: float) -> None:
    c0 = _cell(CAMERA.world_to_pixel(lo)[0], IMAGE_SIZE)
    c1 = _cell(CAMERA.world_to_pixel(hi)[0], IMAGE_SIZE)
    r0 = _cell(CAMERA.world_to_pixel(lo)[1], IMAGE_SIZE)
    r1 = _cell(CAMERA.world_to_pixel(hi)[1], IMAGE_SIZE)
    img[min(r0, r1):max(r0, r1) + 1, min(c0, c1):max(c0, c1) + 1] = intensity


def _stamp_segment(img: np.ndarray, a: tuple[float, float], b: tuple[float, float],
                   intensity: float) -> None:
    steps = 2 * IMAGE_SIZE
    for i in range(steps + 1):
        t = i / steps
        _stamp(img, (a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])), ((0, 0),), intensity)


_ROBOT_FOOTPRINT = ((0, 0), (0, 1), (0, -1), (1, 0), (-1, 0))
_HAND_FOOTPRINT = ((0, 0), (0, 1), (1, 0), (1, 1), (-1, 0), (-1, 1))


def _draw_object(img: np.ndarray, obj: SimObject) -> None:
    shade = KIND_INTENSITY[obj.kind]
    handle = obj.handle()
    if obj.kind == "prismatic-horizontal":
        depth_dir = -obj.axis[0]  # body trails behind the handle
        x0, x1 = sorted((handle[0], handle[0] + depth_dir * 0.16))
        _stamp_box(img, (x0, handle[1] - 0.05), (x1, handle[1] + 0.05), shade)
    elif obj.kind == "revolute":
        _stamp_segment(img, obj.anchor, handle, shade)
    elif obj.kind == "free":
        _stamp(img, obj.position, ((0, 0), (0, 1), (1, 0), (1, 1)), shade)
    elif obj.kind == "prismatic-vertical":
        _stamp_box(img, (obj.anchor[0] - 0.05, obj.anchor[1] - 0.10),
                   (obj.anchor[0] + 0.05, obj.anchor[1] - 0.04), shade)
        _stamp_segment(img, (handle[0], handle[1] - 0.10), handle, 0.50)
    _stamp(img, handle, ((0, 0),), HANDLE_INTENSITY)


def render(scene: Scene) -> Observation:
    """Deterministic rasterization; see module docstring for the depth ramp."""
    img = np.full((IMAGE_SIZE, IMAGE_SIZE), BACKGROUND, dtype=np.float64)
    for obj in scene.objects:
        _draw_object(img, obj)
    if scene.embodiment == "hand":
        _stamp(img, scene.gripper, _HAND_FOOTPRINT, HAND_INTENSITY)
    else:
        _stamp(img, scene.gripper, _ROBOT_FOOTPRINT, GRIPPER_INTENSITY)
    cols = (np.arange(IMAGE_SIZE) + 0.5) / IMAGE_SIZE
    lateral = CAMERA.x_min + cols * (CAMERA.x_max - CAMERA.x_min) - CAMERA.depth_origin
    depth = np.broadcast_to(lateral, (IMAGE_SIZE, IMAGE_SIZE)).copy()
    return Observation(image=img[:, :, None], depth=depth)


def depth_at(obs: Observation, pixel: tuple[float, float]) -> float:
    """Read the depth channel at a normalized pixel (cell lookup)."""
    col = _cell(pixel[0], IMAGE_SIZE)
    row = _cell(pixel[1], IMAGE_SIZE)
    return float(obs.depth[row, col])


def success(scene: Scene, task: str) -> bool:
    """True when the task joint (or held free-object lift) clears 80% range."""
    if task not in TASKS:
        raise SimError(f"unknown task {task!r}")
    for idx, obj in enumerate(scene.objects):
        threshold = obj.joint_min + SUCCESS_FRACTION * (obj.joint_max - obj.joint_min)
        if obj.kind == "free":
            if scene.holding == idx and obj.joint_value >= threshold:
                return True
        elif obj.joint_value >= threshold:
            return True
    return False


def primary_object_index(scene: Scene, near: tuple[float, float] | None = None) -> int:
    """Index of the task object; for multi-object scenes, nearest to `near`."""
    if len(scene.objects) == 1:
        return 0
    ref = near if near is not None else scene.gripper
    dists = [math.hypot(o.handle()[0] - ref[0], o.handle()[1] - ref[1])
             for o in scene.objects]
    return int(np.argmin(dists))


def goal_scene(scene: Scene) -> Scene:
    """Copy of the scene with the task object at its success configuration."""
    idx = primary_object_index(scene)
    obj = scene.objects[idx]
    if obj.kind == "free":
        lifted = replace(obj, position=(obj.position[0], obj.anchor[1] + obj.joint_max),
                         joint_value=obj.joint_max)
    else:
        lifted = replace(obj, joint_value=obj.joint_max)
    objects = scene.objects[:idx] + (lifted,) + scene.objects[idx + 1:]
    rotation = obj.required_rotation if obj.required_rotation is not None else scene.gripper_rotation
    return replace(scene, objects=objects, gripper=lifted.handle(),
                   gripper_rotation=rotation, holding=idx)


def goal_observation(task: str, seed: int) -> Observation:
    return render(goal_scene(reset(task, seed)))


def _truncated_noise(rng: np.random.Generator, sigma_px: float, clip_px: float) -> tuple[float, float]:
    n = rng.normal(0.0, sigma_px / IMAGE_SIZE, size=2)
    lim = clip_px / IMAGE_SIZE
    return (float(np.clip(n[0], -lim, lim)), float(np.clip(n[1], -lim, lim)))


def _random_hand_start(rng: np.random.Generator, objects: tuple[SimObject, ...]) -> tuple[float, float]:
    for _ in range(64):
        p = (rng.uniform(0.08, 0.92), rng.uniform(0.08, 0.92))
        if all(math.hypot(p[0] - o.handle()[0], p[1] - o.handle()[1]) > 0.12 for o in objects):
            return p
    return (0.08, 0.92)


def generate_human_clips(n: int, seed: int,
                         style: HandStyle = HandStyle(),
                         tasks: tuple[str, ...] = TASKS) -> list[Clip]:
    """Scripted-hand interaction clips with ground-truth grasp annotations.

    Each clip: the hand appears somewhere free (frame 0), contacts the
    handle of the nearest object (frame t1, grasp pixel), manipulates the
    joint by a sampled fraction of its range, and rests at the moved handle
    (frame t2, post-grasp pixel). The stored actions carry the annotated
    pixels but randomly sampled depth and rotation, as the video source has
    neither.
    """
    if n < 1:
        raise SimError("need n >= 1 clips")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(71,)))
    clips: list[Clip] = []
    for _ in range(n):
        task = tasks[int(rng.integers(len(tasks)))]
        env_seed = int(rng.integers(2**31))
        scene = reset(task, env_seed, embodiment="hand")
        start = _random_hand_start(rng, scene.objects)
        scene = replace(scene, gripper=start)
        target_idx = primary_object_index(scene, near=start)
        obj = scene.objects[target_idx]

        frame0 = render(scene)

        noise_g = _truncated_noise(rng, style.pixel_noise_px, style.noise_clip_px)
        contact = (obj.handle()[0] + noise_g[0], obj.handle()[1] + noise_g[1])
        scene_t1 = replace(scene, gripper=contact, holding=target_idx)
        frame1 = render(scene_t1)
        grasp_pixel = CAMERA.world_to_pixel(contact)
        grasp_depth = CAMERA.depth_of(contact)

        frac = rng.uniform(style.manipulate_lo, style.manipulate_hi)
        joint = obj.joint_min + frac * (obj.joint_max - obj.joint_min)
        if obj.kind == "free":
            moved = replace(obj, position=(obj.position[0], obj.anchor[1] + joint),
                            joint_value=joint)
        else:
            moved = replace(obj, joint_value=joint)
        objects = scene.objects[:target_idx] + (moved,) + scene.objects[target_idx + 1:]
        noise_pg = _truncated_noise(rng, style.pixel_noise_px, style.noise_clip_px)
        rest = (moved.handle()[0] + noise_pg[0], moved.handle()[1] + noise_pg[1])
        scene_t2 = replace(scene_t1, objects=objects, gripper=rest, time_step=2)
        frame2 = render(scene_t2)
        postgrasp_pixel = CAMERA.world_to_pixel(rest)
        postgrasp_depth = CAMERA.depth_of(rest)

        label = AffordanceLabel(
            grasp_pixel=(float(np.clip(grasp_pixel[0], 0.0, 1.0)),
                         float(np.clip(grasp_pixel[1], 0.0, 1.0))),
            postgrasp_pixel=(float(np.clip(postgrasp_pixel[0], 0.0, 1.0)),
                             float(np.clip(postgrasp_pixel[1], 0.0, 1.0))),
            grasp_depth=grasp_depth,
            postgrasp_depth=postgrasp_depth,
        )
        act_g = HybridAction.affordance(
            label.grasp_pixel, depth=float(rng.uniform(0.0, 1.0)),
            rotation=DEFAULT_ROTATIONS[int(rng.integers(len(DEFAULT_ROTATIONS)))])
        act_pg = HybridAction.affordance(
            label.postgrasp_pixel, depth=float(rng.uniform(0.0, 1.0)),
            rotation=DEFAULT_ROTATIONS[int(rng.integers(len(DEFAULT_ROTATIONS)))])
        clips.append(Clip(frames=(frame0, frame1, frame2), annotation=label,
                          actions=(act_g, act_pg), task=task, seed=env_seed))
    return clips
