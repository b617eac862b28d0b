"""Procedural ray-cast world: ground-truth trajectories for training and verification.

Scenes are static arrangements of spheres, boxes and a checkered floor,
generated deterministically from a seed.  Rendering stores z-depth
(perpendicular distance along the optical axis), not ray length; the raymap
keeps unit directions and :mod:`verse.state_memory` applies the cosine
correction when unprojecting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ShapeError
from .geometry import (
    WORLD_UP,
    CameraPose,
    Intrinsics,
    Raymap,
    orthonormalize,
    raymap_from_camera,
    rotation_about,
)
from .state_memory import CompositeState

DEFAULT_WIDTH = 64
DEFAULT_HEIGHT = 48
DEFAULT_FAR = 30.0
DEFAULT_STEP = 0.25
DEFAULT_TURN = math.radians(15.0)
PITCH_LIMIT = math.radians(80.0)

_LIGHT = np.array([0.35, -0.8, -0.45])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)


# ---------------------------------------------------------------------------
# scene


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray
    albedo: np.ndarray


@dataclass(frozen=True)
class CheckerPlane:
    height: float  # y coordinate (y points down; positive = below the camera)
    cell: float
    albedo_a: np.ndarray
    albedo_b: np.ndarray
    extent: tuple | None = None  # (x_lo, x_hi, z_lo, z_hi); None = unbounded


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    primitives: tuple
    background: np.ndarray
    bounds: np.ndarray  # (2, 3) lo/hi containing every primitive
    far: float = DEFAULT_FAR


def make_scene(seed: int) -> SceneSpec:
    """Deterministic cluttered room: checkered floor plus spheres and boxes."""
    rng = np.random.default_rng(seed)
    prims = [
        CheckerPlane(
            height=1.6,
            cell=1.0 + float(rng.uniform(0, 0.5)),
            albedo_a=np.array([0.85, 0.85, 0.8]),
            albedo_b=np.array([0.2, 0.25, 0.3]),
            extent=(-9.0, 9.0, -2.0, 17.0),
        )
    ]
    for _ in range(int(rng.integers(4, 8))):
        center = np.array(
            [rng.uniform(-6, 6), rng.uniform(-0.5, 1.0), rng.uniform(3, 14)]
        )
        prims.append(
            Sphere(
                center=center,
                radius=float(rng.uniform(0.4, 1.4)),
                albedo=rng.uniform(0.2, 0.95, size=3),
            )
        )
    for _ in range(int(rng.integers(1, 4))):
        lo = np.array([rng.uniform(-7, 5), rng.uniform(-0.2, 0.8), rng.uniform(4, 13)])
        size = rng.uniform(0.5, 2.0, size=3)
        prims.append(Box(lo=lo, hi=lo + size, albedo=rng.uniform(0.2, 0.95, size=3)))
    bounds = np.array([[-9.0, -2.0, -2.0], [9.0, 2.0, 17.0]])
    return SceneSpec(
        seed=seed,
        primitives=tuple(prims),
        background=np.array([0.55, 0.7, 0.9]),
        bounds=bounds,
    )


# ---------------------------------------------------------------------------
# actions


class ActionKind(str, Enum):
    FORWARD = "forward"
    BACK = "back"
    STRAFE_LEFT = "strafe_left"
    STRAFE_RIGHT = "strafe_right"
    TURN_LEFT = "turn_left"
    TURN_RIGHT = "turn_right"
    LOOK_UP = "look_up"
    LOOK_DOWN = "look_down"
    STAY = "stay"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    magnitude: float = 0.0

    def __post_init__(self):
        if self.magnitude < 0:
            raise ValueError("action magnitude must be nonnegative")
        object.__setattr__(self, "kind", ActionKind(self.kind))


def _current_pitch(pose: CameraPose) -> float:
    f = pose.forward
    return math.asin(float(np.clip(-f[1], -1.0, 1.0)))


def apply_action(pose: CameraPose, a: Action) -> CameraPose:
    """One kinematic step: translate in the camera frame, yaw about world up,
    pitch about the camera right axis (cumulative pitch clamped to +/-80 deg)."""
    kind, mag = a.kind, a.magnitude
    rot, ctr = pose.rotation, pose.center
    if kind == ActionKind.STAY:
        return pose
    if kind in (ActionKind.FORWARD, ActionKind.BACK):
        sign = 1.0 if kind == ActionKind.FORWARD else -1.0
        return CameraPose(rot, ctr + sign * mag * rot[:, 2])
    if kind in (ActionKind.STRAFE_LEFT, ActionKind.STRAFE_RIGHT):
        sign = 1.0 if kind == ActionKind.STRAFE_RIGHT else -1.0
        return CameraPose(rot, ctr + sign * mag * rot[:, 0])
    if kind in (ActionKind.TURN_LEFT, ActionKind.TURN_RIGHT):
        # +y is down, so a positive rotation about +y turns the view right.
        sign = 1.0 if kind == ActionKind.TURN_RIGHT else -1.0
        new_rot = rotation_about([0.0, 1.0, 0.0], sign * mag) @ rot
        return CameraPose(orthonormalize(new_rot), ctr)
    # look_up / look_down about the camera right axis, clamped
    sign = 1.0 if kind == ActionKind.LOOK_UP else -1.0
    pitch = _current_pitch(pose)
    delta = float(np.clip(pitch + sign * mag, -PITCH_LIMIT, PITCH_LIMIT)) - pitch
    new_rot = rotation_about(rot[:, 0], delta) @ rot
    return CameraPose(orthonormalize(new_rot), ctr)


@dataclass(frozen=True)
class Trajectory:
    scene: SceneSpec
    poses: tuple
    intrinsics: Intrinsics
    actions: tuple

    def __post_init__(self):
        if len(self.poses) != len(self.actions) + 1:
            raise ShapeError("trajectory needs len(poses) == len(actions) + 1")

    def __len__(self) -> int:
        return len(self.poses)


# ---------------------------------------------------------------------------
# rendering


def _intersect_sphere(origins, dirs, sph: Sphere):
    oc = origins - sph.center
    b = np.einsum("...i,...i->...", oc, dirs)
    c = np.einsum("...i,...i->...", oc, oc) - sph.radius**2
    disc = b * b - c
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > 1e-6, t0, t1)
    t = np.where(hit & (t > 1e-6), t, np.inf)
    pts = origins + t[..., None] * dirs
    normals = (pts - sph.center) / sph.radius
    return t, normals, np.broadcast_to(sph.albedo, pts.shape)


def _intersect_box(origins, dirs, box: Box):
    inv = np.where(np.abs(dirs) > 1e-12, 1.0 / dirs, np.sign(dirs) * 1e12 + 1e12)
    t_lo = (box.lo - origins) * inv
    t_hi = (box.hi - origins) * inv
    t_near = np.minimum(t_lo, t_hi)
    t_far = np.maximum(t_lo, t_hi)
    t_enter = t_near.max(axis=-1)
    t_exit = t_far.min(axis=-1)
    hit = (t_enter <= t_exit) & (t_exit > 1e-6)
    t = np.where(t_enter > 1e-6, t_enter, t_exit)
    t = np.where(hit, t, np.inf)
    # normal = axis of the entering slab
    axis = np.argmax(t_near, axis=-1)
    normals = np.zeros(origins.shape)
    idx = np.indices(axis.shape)
    normals[(*idx, axis)] = -np.sign(dirs[(*idx, axis)])
    return t, normals, np.broadcast_to(box.albedo, origins.shape)


def _intersect_plane(origins, dirs, pl: CheckerPlane):
    dy = dirs[..., 1]
    t = np.where(np.abs(dy) > 1e-12, (pl.height - origins[..., 1]) / dy, np.inf)
    t = np.where(t > 1e-6, t, np.inf)
    pts = origins + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
    if pl.extent is not None:
        x_lo, x_hi, z_lo, z_hi = pl.extent
        inside = (
            (pts[..., 0] >= x_lo) & (pts[..., 0] <= x_hi)
            & (pts[..., 2] >= z_lo) & (pts[..., 2] <= z_hi)
        )
        t = np.where(inside, t, np.inf)
    parity = (
        np.floor(pts[..., 0] / pl.cell).astype(np.int64)
        + np.floor(pts[..., 2] / pl.cell).astype(np.int64)
    ) % 2
    albedo = np.where(parity[..., None] == 0, pl.albedo_a, pl.albedo_b)
    normals = np.zeros(origins.shape)
    normals[..., 1] = -1.0  # floor faces up
    return t, normals, albedo


_INTERSECTORS = {
    Sphere: _intersect_sphere,
    Box: _intersect_box,
    CheckerPlane: _intersect_plane,
}


def render(scene: SceneSpec, pose: CameraPose, intr: Intrinsics):
    """Nearest-hit ray cast.  Returns (rgb in [0,1] float32, z-depth float32)."""
    rm = raymap_from_camera(pose, intr)
    origins, dirs = rm.origins, rm.directions
    best_t = np.full(origins.shape[:2], np.inf)
    color = np.broadcast_to(scene.background, origins.shape).copy()
    normal = np.zeros(origins.shape)
    for prim in scene.primitives:
        t, n, alb = _INTERSECTORS[type(prim)](origins, dirs, prim)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        color = np.where(closer[..., None], alb, color)
        normal = np.where(closer[..., None], n, normal)
    hit = np.isfinite(best_t)
    lambert = np.clip(-np.einsum("...i,i->...", normal, _LIGHT), 0.0, 1.0)
    shade = np.where(hit, 0.35 + 0.65 * lambert, 1.0)
    rgb = np.clip(color * shade[..., None], 0.0, 1.0)
    # z-depth: distance along the optical axis, far value for misses
    cos = np.einsum("...i,i->...", dirs, pose.rotation[:, 2])
    depth = np.where(hit, best_t * cos, scene.far)
    return rgb.astype(np.float32), depth.astype(np.float32)


def render_state(scene: SceneSpec, pose: CameraPose, intr: Intrinsics, index: int) -> CompositeState:
    rgb, depth = render(scene, pose, intr)
    return CompositeState(
        rgb=rgb,
        depth=depth,
        raymap=raymap_from_camera(pose, intr),
        index=index,
        pose=pose,
        intrinsics=intr,
    )


def rollout(scene: SceneSpec, pose0: CameraPose, intr: Intrinsics, actions) -> list:
    """Fold apply_action over the actions and render every pose."""
    poses = [pose0]
    for a in actions:
        poses.append(apply_action(poses[-1], a))
    return [render_state(scene, p, intr, i) for i, p in enumerate(poses)]


def default_intrinsics(width: int = DEFAULT_WIDTH, height: int = DEFAULT_HEIGHT) -> Intrinsics:
    return Intrinsics(
        fx=width * 0.8, fy=width * 0.8, cx=width / 2.0, cy=height / 2.0,
        width=width, height=height,
    )


def wander_actions(rng: np.random.Generator, n: int,
                   step: float = DEFAULT_STEP, turn: float = DEFAULT_TURN) -> list:
    """Gentle exploratory action stream: mostly forward with occasional turns.

    Tuned so 57-frame clips usually pass the rotation/movement filters.
    """
    actions = []
    for _ in range(n):
        roll = rng.random()
        if roll < 0.55:
            actions.append(Action(ActionKind.FORWARD, step * float(rng.uniform(0.5, 1.0))))
        elif roll < 0.7:
            kind = ActionKind.STRAFE_LEFT if rng.random() < 0.5 else ActionKind.STRAFE_RIGHT
            actions.append(Action(kind, step * float(rng.uniform(0.4, 0.8))))
        elif roll < 0.9:
            kind = ActionKind.TURN_LEFT if rng.random() < 0.5 else ActionKind.TURN_RIGHT
            actions.append(Action(kind, turn * float(rng.uniform(0.2, 0.6))))
        else:
            actions.append(Action(ActionKind.STAY, 0.0))
    return actions


def make_trajectory(seed: int, frames: int,
                    width: int = DEFAULT_WIDTH, height: int = DEFAULT_HEIGHT) -> Trajectory:
    """Deterministic scene + wander policy, starting slightly above the floor."""
    scene = make_scene(seed)
    rng = np.random.default_rng(seed + 1)
    actions = tuple(wander_actions(rng, frames - 1))
    pose0 = CameraPose(np.eye(3), np.array([0.0, 0.0, 0.0]))
    poses = [pose0]
    for a in actions:
        poses.append(apply_action(poses[-1], a))
    return Trajectory(
        scene=scene, poses=tuple(poses),
        intrinsics=default_intrinsics(width, height), actions=actions,
    )
