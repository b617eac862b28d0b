"""Composite 4D states, the global memory pool, and spatial retrieval.

The pool archives every past state in the coordinate frame of state 0.
Retrieval shortlists the k nearest camera positions and picks the one whose
optical axis best matches the query; ties prefer the most recent state at
both stages.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInputError, OrderingError, ShapeError
from .geometry import (
    CameraPose,
    Intrinsics,
    Raymap,
    SceneScale,
    camera_from_raymap,
)


@dataclass(frozen=True)
class CompositeState:
    """One timestep's observation proxy: rgb + depth + raymap (+ cached pose)."""

    rgb: np.ndarray      # (H, W, 3) in [0, 1]
    depth: np.ndarray    # (H, W) positive, scene units (or codes in (0,1])
    raymap: Raymap
    index: int
    pose: CameraPose = None
    intrinsics: Intrinsics = None

    def __post_init__(self):
        rgb = np.asarray(self.rgb)
        depth = np.asarray(self.depth)
        h, w = depth.shape
        if rgb.shape != (h, w, 3) or self.raymap.shape != (h, w):
            raise ShapeError(
                f"rgb {rgb.shape}, depth {depth.shape}, raymap {self.raymap.shape} disagree"
            )
        if self.index < 0:
            raise ShapeError("index must be nonnegative")
        if self.pose is None:
            pose, intr = camera_from_raymap(self.raymap)
            object.__setattr__(self, "pose", pose)
            if self.intrinsics is None:
                object.__setattr__(self, "intrinsics", intr)
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "depth", depth)

    @property
    def shape(self) -> tuple:
        return self.depth.shape


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 8
    cutoff: int = 56  # only indices <= now - cutoff - 1 are candidates

    def __post_init__(self):
        if self.k < 1 or self.cutoff < 0:
            raise ValueError("need k >= 1 and cutoff >= 0")


class MemoryPool:
    """Append-ordered archive of composite states, single writer / many readers."""

    def __init__(self):
        self._states: list[CompositeState] = []
        self._window_scales: list[SceneScale] = []
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._states)

    @property
    def states(self) -> tuple:
        return tuple(self._states)

    @property
    def window_scales(self) -> tuple:
        return tuple(self._window_scales)

    def state(self, i: int) -> CompositeState:
        return self._states[i]

    def last(self) -> CompositeState:
        if not self._states:
            raise EmptyInputError("memory pool is empty")
        return self._states[-1]

    def append(self, states, scale: SceneScale | None = None) -> None:
        states = list(states)
        with self._lock:
            prev = self._states[-1].index if self._states else -1
            for s in states:
                if s.index <= prev:
                    raise OrderingError(
                        f"state index {s.index} does not increase past {prev}"
                    )
                prev = s.index
            self._states.extend(states)
            if scale is not None:
                self._window_scales.append(scale)

    def pose_arrays(self):
        """(indices, centers (N,3), rotations (N,3,3)) snapshot for retrieval."""
        idx = np.array([s.index for s in self._states], dtype=np.int64)
        centers = np.array([s.pose.center for s in self._states])
        rots = np.array([s.pose.rotation for s in self._states])
        return idx, centers, rots


def retrieve_spatial_arrays(
    indices: np.ndarray,
    centers: np.ndarray,
    forwards: np.ndarray,
    now_pose: CameraPose,
    now_index: int,
    cfg: RetrievalConfig,
) -> int | None:
    """Two-stage argmin over raw pose arrays; returns position in the arrays.

    Stage 1 shortlists the cfg.k candidates with smallest squared distance to
    the query center; stage 2 picks the smallest forward angle.  Ties prefer
    the larger state index at both stages.
    """
    eligible = np.nonzero(indices <= now_index - cfg.cutoff - 1)[0]
    if eligible.size == 0:
        return None
    d2 = np.einsum("ni,ni->n", centers[eligible] - now_pose.center,
                   centers[eligible] - now_pose.center)
    # lexsort: primary key distance ascending, secondary index descending
    order = np.lexsort((-indices[eligible], d2))
    short = eligible[order[: cfg.k]]
    cos = np.clip(forwards[short] @ now_pose.forward, -1.0, 1.0)
    angles = np.arccos(cos)
    best = short[np.lexsort((-indices[short], angles))[0]]
    return int(best)


def retrieve_spatial(
    pool: MemoryPool, current: CameraPose, now_index: int, cfg: RetrievalConfig
) -> CompositeState | None:
    """Spatial-neighbor selection over the pool; None when no candidate exists."""
    if len(pool) == 0:
        return None
    idx, centers, rots = pool.pose_arrays()
    pos = retrieve_spatial_arrays(idx, centers, rots[:, :, 2], current, now_index, cfg)
    return None if pos is None else pool.state(pos)


# ---------------------------------------------------------------------------
# unprojection and fusion


def unproject(state: CompositeState, stride: int = 1):
    """Lift sampled pixels to 3D points with colors.

    Depth stores the z-component in the camera frame while raymap directions
    are unit length, so each ray is stretched by 1/cos(angle to the optical
    axis) here -- the single place this correction lives.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    dirs = state.raymap.directions[::stride, ::stride]
    origins = state.raymap.origins[::stride, ::stride]
    depth = np.asarray(state.depth, dtype=np.float64)[::stride, ::stride]
    cos = np.einsum("...i,i->...", dirs, state.pose.rotation[:, 2])
    points = origins + (depth / cos)[..., None] * dirs
    colors = state.rgb[::stride, ::stride]
    return points.reshape(-1, 3), colors.reshape(-1, 3)


def fuse_pointcloud(pool: MemoryPool, stride: int = 1):
    """Concatenate unprojections over all pool states, index then row-major order."""
    if len(pool) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    pts, cols = [], []
    for s in pool.states:
        p, c = unproject(s, stride)
        pts.append(p)
        cols.append(c)
    return np.concatenate(pts), np.concatenate(cols)
