"""Training-data pipeline: clip filtering, motion captions, preprocessing, batches."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInputError, ShapeError, VocabularyError
from .geometry import (
    DEFAULT_LAMBDA,
    CameraPose,
    DepthMode,
    Intrinsics,
    MotionDelta,
    SceneScale,
    depth_encode,
    forward_angle,
    pose_delta,
    raymap_from_camera,
)
from .state_memory import CompositeState, RetrievalConfig, retrieve_spatial_arrays
from .world_oracle import Trajectory, render_state

log = logging.getLogger(__name__)

CLIP_LEN = 57
MAX_SPLIT_FRAMES = 400


# ---------------------------------------------------------------------------
# clip filtering


@dataclass(frozen=True)
class ClipFilterConfig:
    chunk_size: int = 8
    delta_rot: float = math.radians(90.0)   # cumulative rotation budget
    delta_move: float = 0.5                 # minimum path length
    per_chunk: bool = False                 # alternative reading: cap each chunk angle

    def __post_init__(self):
        if self.chunk_size < 1 or self.delta_rot <= 0 or self.delta_move <= 0:
            raise ValueError("invalid filter thresholds")


@dataclass(frozen=True)
class FilterResult:
    accepted: bool
    reason: str | None
    rotation: float
    path_length: float


def filter_clip(poses, cfg: ClipFilterConfig) -> FilterResult:
    """Accept/reject a clip on chunk-wise rotation and total displacement.

    Chunk boundaries follow the latent layout (frame 0 alone, then groups of
    chunk_size); the per-chunk angle is the forward-direction difference
    between the last frames of consecutive chunks.
    """
    poses = list(poses)
    if len(poses) < 2 * cfg.chunk_size:
        raise ShapeError(f"clip too short to filter: {len(poses)} poses")
    lasts = [0] + list(range(cfg.chunk_size, len(poses), cfg.chunk_size))
    angles = [
        forward_angle(poses[a], poses[b]) for a, b in zip(lasts[:-1], lasts[1:])
    ]
    rotation = float(sum(angles))
    centers = np.array([p.center for p in poses])
    path = float(np.linalg.norm(np.diff(centers, axis=0), axis=1).sum())
    if cfg.per_chunk:
        if angles and max(angles) >= cfg.delta_rot:
            return FilterResult(False, "rotation", rotation, path)
    elif rotation >= cfg.delta_rot:
        return FilterResult(False, "rotation", rotation, path)
    if path < cfg.delta_move:
        return FilterResult(False, "movement", rotation, path)
    return FilterResult(True, None, rotation, path)


# ---------------------------------------------------------------------------
# captions

VOCAB = (
    "stay", "still", "move", "forward", "backward", "left", "right",
    "turn", "slightly", "sharply", "look", "up", "down", "and",
)
_WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
MAX_CAPTION_TOKENS = 10


def tokenize(text: str) -> list:
    ids = []
    for word in text.split():
        if word not in _WORD_TO_ID:
            raise VocabularyError(f"word {word!r} is outside the template vocabulary")
        ids.append(_WORD_TO_ID[word])
    return ids


@dataclass(frozen=True)
class Caption:
    text: str
    token_ids: tuple = ()

    def __post_init__(self):
        ids = tuple(tokenize(self.text))
        if self.token_ids and tuple(self.token_ids) != ids:
            raise VocabularyError("token_ids do not round-trip to text")
        object.__setattr__(self, "token_ids", ids)


@dataclass(frozen=True)
class CaptionThresholds:
    move_min: float = 0.2                   # scene units over the clip
    turn_min: float = math.radians(5.0)
    sharp: float = math.radians(20.0)
    look_min: float = math.radians(5.0)


def caption_from_motion(deltas, thresholds: CaptionThresholds = CaptionThresholds()) -> Caption:
    """Aggregate per-step deltas into a first-person template phrase."""
    deltas = list(deltas)
    if not deltas:
        raise EmptyInputError("no motion deltas to caption")
    yaw = sum(d.yaw for d in deltas)
    pitch = sum(d.pitch for d in deltas)
    fwd = sum(d.forward for d in deltas)
    lat = sum(d.lateral for d in deltas)
    parts = []
    if max(abs(fwd), abs(lat)) >= thresholds.move_min:
        if abs(fwd) >= abs(lat):
            parts.append("move forward" if fwd > 0 else "move backward")
        else:
            parts.append("move right" if lat > 0 else "move left")
    if abs(yaw) >= thresholds.turn_min:
        side = "right" if yaw > 0 else "left"
        degree = "sharply" if abs(yaw) >= thresholds.sharp else "slightly"
        parts.append(f"turn {side} {degree}")
    if abs(pitch) >= thresholds.look_min:
        parts.append("look up" if pitch > 0 else "look down")
    return Caption(" and ".join(parts) if parts else "stay still")


def caption_to_actions(
    caption: Caption,
    step: float = 0.25,
    turn_slight: float = math.radians(2.0),
    turn_sharp: float = math.radians(5.0),
    look: float = math.radians(2.0),
) -> list:
    """Inverse template mapping: parse a grammar caption into per-frame actions.

    Used by the service so raw-caption clients and key-mapped clients converge
    on identical control before conditioning.  The default turn magnitudes are
    chosen so eight repeats re-derive the same slight/sharp phrase.
    """
    from .world_oracle import Action, ActionKind

    text = caption.text
    actions = []
    for phrase in text.split(" and "):
        words = phrase.split()
        if words[:2] == ["stay", "still"]:
            actions.append(Action(ActionKind.STAY, 0.0))
        elif words[0] == "move":
            kind = {
                "forward": ActionKind.FORWARD, "backward": ActionKind.BACK,
                "left": ActionKind.STRAFE_LEFT, "right": ActionKind.STRAFE_RIGHT,
            }[words[1]]
            actions.append(Action(kind, step))
        elif words[0] == "turn":
            kind = ActionKind.TURN_RIGHT if words[1] == "right" else ActionKind.TURN_LEFT
            actions.append(Action(kind, turn_sharp if words[2] == "sharply" else turn_slight))
        elif words[0] == "look":
            kind = ActionKind.LOOK_UP if words[1] == "up" else ActionKind.LOOK_DOWN
            actions.append(Action(kind, look))
        else:
            raise VocabularyError(f"cannot parse caption phrase {phrase!r}")
    return actions


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class SpatialCondition:
    """A historical state normalized into the clip-local frame."""

    rgb: np.ndarray
    depth_code: np.ndarray
    pose: CameraPose


@dataclass(frozen=True)
class TrainingSample:
    rgb: np.ndarray          # (T, H, W, 3) float32
    depth_code: np.ndarray   # (T, H, W) float32, (0, 1]
    poses: tuple             # clip-local CameraPose per frame, frame 0 = identity
    intrinsics: Intrinsics
    caption: Caption
    scale: SceneScale
    anchor: CameraPose       # original frame-0 pose, for inversion
    spatial: SpatialCondition | None = None


def _localize_pose(anchor: CameraPose, pose: CameraPose, factor: float) -> CameraPose:
    return CameraPose(
        anchor.rotation.T @ pose.rotation,
        factor * (anchor.rotation.T @ (pose.center - anchor.center)),
    )


def _globalize_pose(anchor: CameraPose, pose: CameraPose, factor: float) -> CameraPose:
    return CameraPose(
        anchor.rotation @ pose.rotation,
        anchor.center + anchor.rotation @ (pose.center / factor),
    )


def preprocess_clip(
    states,
    lam: float = DEFAULT_LAMBDA,
    mode: DepthMode = DepthMode.LINEAR_NORM,
    spatial_state: CompositeState | None = None,
    expected_len: int = CLIP_LEN,
) -> TrainingSample:
    """Normalize an accepted clip: frame-0 depth anchor, clip-local poses."""
    states = list(states)
    if expected_len is not None and len(states) != expected_len:
        raise ShapeError(f"expected {expected_len} frames, got {len(states)}")
    codes, scale = depth_encode([s.depth for s in states], lam=lam, mode=mode)
    factor = scale.geom_factor
    anchor = states[0].pose
    local = tuple(_localize_pose(anchor, s.pose, factor) for s in states)
    deltas = [pose_delta(a.pose, b.pose) for a, b in zip(states[:-1], states[1:])]
    caption = caption_from_motion(deltas)
    spatial = None
    if spatial_state is not None:
        sp_codes, _ = _encode_with(scale, spatial_state.depth)
        spatial = SpatialCondition(
            rgb=np.asarray(spatial_state.rgb, dtype=np.float32),
            depth_code=sp_codes.astype(np.float32),
            pose=_localize_pose(anchor, spatial_state.pose, factor),
        )
    return TrainingSample(
        rgb=np.stack([np.asarray(s.rgb, dtype=np.float32) for s in states]),
        depth_code=np.stack([c.astype(np.float32) for c in codes]),
        poses=local,
        intrinsics=states[0].intrinsics,
        caption=caption,
        scale=scale,
        anchor=anchor,
        spatial=spatial,
    )


def _encode_with(scale: SceneScale, depth: np.ndarray):
    """Encode one depth map under an existing window scale."""
    d = np.asarray(depth, dtype=np.float64)
    if scale.mode == DepthMode.LINEAR_NORM:
        param = d
    else:
        param = np.sqrt(1.0 / d)
    from .geometry import EPS_CODE

    return np.clip(scale.lam * (param / scale.d_max), EPS_CODE, 1.0), scale


def invert_preprocess(sample: TrainingSample):
    """Undo normalization: original-frame depths and poses (round-trip check)."""
    from .geometry import depth_decode

    depths = depth_decode(list(sample.depth_code.astype(np.float64)), sample.scale)
    poses = [
        _globalize_pose(sample.anchor, p, sample.scale.geom_factor) for p in sample.poses
    ]
    return depths, poses


def local_raymap(sample: TrainingSample, frame: int):
    return raymap_from_camera(sample.poses[frame], sample.intrinsics)


# ---------------------------------------------------------------------------
# batching


def render_split(traj: Trajectory) -> list:
    return [
        render_state(traj.scene, p, traj.intrinsics, i) for i, p in enumerate(traj.poses)
    ]


def candidate_starts(traj: Trajectory, clip_len: int, cfg: ClipFilterConfig) -> list:
    """Start offsets whose clips pass the filter."""
    accepted = []
    for start in range(0, len(traj.poses) - clip_len + 1):
        if filter_clip(traj.poses[start : start + clip_len], cfg).accepted:
            accepted.append(start)
    return accepted


def _pick_spatial(states, start: int, clip_len: int, rcfg: RetrievalConfig):
    """Spatial condition: retrieve among states before the clip, if any."""
    if start == 0:
        return None
    history = states[:start]
    idx = np.array([s.index for s in history])
    centers = np.array([s.pose.center for s in history])
    fwd = np.array([s.pose.rotation[:, 2] for s in history])
    now = states[start + clip_len - 1].pose
    pos = retrieve_spatial_arrays(
        idx, centers, fwd, now, states[start + clip_len - 1].index,
        RetrievalConfig(k=rcfg.k, cutoff=0),
    )
    return None if pos is None else history[pos]


def make_batches(
    splits,
    b: int,
    clip_len: int = CLIP_LEN,
    cfg: ClipFilterConfig = ClipFilterConfig(),
    lam: float = DEFAULT_LAMBDA,
    mode: DepthMode = DepthMode.LINEAR_NORM,
    seed: int = 0,
    retrieval: RetrievalConfig = RetrievalConfig(),
    spatial_prob: float = 0.5,
):
    """Infinite deterministic stream of TrainingSample batches.

    Clips may overlap within a split but never span splits; splits shorter
    than the clip length are skipped with a warning.
    """
    candidates = []  # (split_idx, start)
    rendered = {}
    for si, traj in enumerate(splits):
        if len(traj.poses) > MAX_SPLIT_FRAMES:
            raise ShapeError(
                f"split {si} has {len(traj.poses)} frames (> {MAX_SPLIT_FRAMES})"
            )
        if len(traj.poses) < clip_len:
            log.warning("split %d shorter than clip length, skipped", si)
            continue
        starts = candidate_starts(traj, clip_len, cfg)
        candidates.extend((si, s) for s in starts)
    if not candidates:
        raise EmptyInputError("no clip in any split passes the filter")
    rng = np.random.default_rng(seed)
    while True:
        batch = []
        for _ in range(b):
            si, start = candidates[int(rng.integers(len(candidates)))]
            if si not in rendered:
                rendered[si] = render_split(splits[si])
            states = rendered[si]
            spatial = None
            if rng.random() < spatial_prob:
                spatial = _pick_spatial(states, start, clip_len, retrieval)
            batch.append(
                preprocess_clip(
                    states[start : start + clip_len], lam=lam, mode=mode,
                    spatial_state=spatial, expected_len=clip_len,
                )
            )
        yield batch
