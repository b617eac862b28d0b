"""Long-duration autoregressive rollout with per-window scale bookkeeping.

Each inference window mirrors the training-clip layout: slot 0 holds a single
anchor frame, the remaining slots hold 8-frame chunks.  Entering a window, the
recent frames are re-anchored on the window's first frame and depths are
normalized by that frame's d_max; leaving it, everything is rescaled back to
global units and archived in the memory pool.  A teacher-forced oracle backend
exercises every mechanism independent of model quality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .dataset import caption_from_motion
from .errors import (
    DegenerateRaysError,
    DivergenceError,
    EmptyInputError,
    InvalidPoseError,
    ShapeError,
    TerminalSessionError,
)
from .geometry import (
    DEFAULT_LAMBDA,
    EPS_CODE,
    CameraPose,
    DepthMode,
    Intrinsics,
    MotionDelta,
    Raymap,
    SceneScale,
    geodesic_angle,
    pose_from_raymap,
    raymap_from_camera,
)
from .latent_codec import (
    CodecConfig,
    canonical_raymap_channels,
    chunk_encode,
    chunk_to_slab,
    interpolate_raymaps,
    pool_raymap,
    slab_to_chunk,
    _decode_keyframe,
)
from .state_memory import (
    CompositeState,
    MemoryPool,
    RetrievalConfig,
    retrieve_spatial,
)
from .world_oracle import Action, ActionKind, SceneSpec, apply_action, render

PSNR_CAP = 99.0


@dataclass(frozen=True)
class EngineConfig:
    chunk_size: int = 8
    cache_max_slots: int = 8   # matches the training clip's chunk capacity
    m_slots: int = 7           # context slots carried across windows
    lam: float = DEFAULT_LAMBDA
    mode: DepthMode = DepthMode.LINEAR_NORM
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    sampler_steps: int = 16
    codec: CodecConfig = field(default_factory=CodecConfig)

    def __post_init__(self):
        if not (1 <= self.m_slots < self.cache_max_slots):
            raise ShapeError("need 1 <= m_slots < cache_max_slots")


# ---------------------------------------------------------------------------
# window-unit conversions


def localize_state(state: CompositeState, anchor: CameraPose, scale: SceneScale) -> CompositeState:
    """Global units -> window units: re-anchored pose, frame-0-normalized depth.

    Codes are deliberately NOT clamped here so the window round trip is
    lossless for carried ground truth; the clamp to (0, 1] happens only where
    codes feed the generator (slab assembly).
    """
    d = np.asarray(state.depth, dtype=np.float64)
    param = d if scale.mode == DepthMode.LINEAR_NORM else np.sqrt(1.0 / d)
    code = scale.lam * (param / scale.d_max)
    f = scale.geom_factor
    pose = CameraPose(
        anchor.rotation.T @ state.pose.rotation,
        f * (anchor.rotation.T @ (state.pose.center - anchor.center)),
    )
    return CompositeState(
        rgb=state.rgb,
        depth=code,
        raymap=raymap_from_camera(pose, state.intrinsics),
        index=state.index,
        pose=pose,
        intrinsics=state.intrinsics,
    )


def globalize_state(state: CompositeState, anchor: CameraPose, scale: SceneScale) -> CompositeState:
    """Window units -> global units (exact inverse of :func:`localize_state`)."""
    code = np.asarray(state.depth, dtype=np.float64)
    param = code * (scale.d_max / scale.lam)
    d = param if scale.mode == DepthMode.LINEAR_NORM else 1.0 / (param * param)
    f = scale.geom_factor
    pose = CameraPose(
        anchor.rotation @ state.pose.rotation,
        anchor.center + anchor.rotation @ (state.pose.center / f),
    )
    return CompositeState(
        rgb=np.asarray(state.rgb, dtype=np.float32),
        depth=d.astype(np.float32),
        raymap=raymap_from_camera(pose, state.intrinsics),
        index=state.index,
        pose=pose,
        intrinsics=state.intrinsics,
    )


def _log_rotation(r: np.ndarray) -> np.ndarray:
    """Rotation matrix -> axis * angle vector."""
    ang = geodesic_angle(np.eye(3), r)
    if ang < 1e-12:
        return np.zeros(3)
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    axis /= 2.0 * math.sin(ang)
    return axis * ang


def _exp_rotation(w: np.ndarray) -> np.ndarray:
    ang = float(np.linalg.norm(w))
    if ang < 1e-12:
        return np.eye(3)
    from .geometry import rotation_about

    return rotation_about(w / ang, ang)


def action_to_delta(a: Action) -> MotionDelta:
    """Commanded motion of one action, for text conditioning."""
    k, m = a.kind, a.magnitude
    return MotionDelta(
        yaw=m if k == ActionKind.TURN_RIGHT else -m if k == ActionKind.TURN_LEFT else 0.0,
        pitch=m if k == ActionKind.LOOK_UP else -m if k == ActionKind.LOOK_DOWN else 0.0,
        forward=m if k == ActionKind.FORWARD else -m if k == ActionKind.BACK else 0.0,
        lateral=m if k == ActionKind.STRAFE_RIGHT else -m if k == ActionKind.STRAFE_LEFT else 0.0,
        vertical=0.0,
    )


# ---------------------------------------------------------------------------
# generator backends


@dataclass
class WindowCtx:
    anchor: CameraPose
    scale: SceneScale
    intrinsics: Intrinsics
    next_index: int
    slot: int  # chunk position the new states will occupy


class OracleBackend:
    """Teacher forcing: the next chunk comes from the procedural world."""

    def __init__(self, scene: SceneSpec, intrinsics: Intrinsics,
                 pose0: CameraPose | None = None):
        self.scene = scene
        self.intrinsics = intrinsics
        self.abs_pose = pose0 or CameraPose.identity()
        self.anchor0 = self.abs_pose  # session global frame = first camera frame

    def complete_first(self, rng) -> CompositeState:
        rgb, depth = render(self.scene, self.abs_pose, self.intrinsics)
        pose = CameraPose.identity()
        return CompositeState(
            rgb=rgb, depth=depth,
            raymap=raymap_from_camera(pose, self.intrinsics),
            index=0, pose=pose, intrinsics=self.intrinsics,
        )

    def _globalize_abs(self, abs_pose: CameraPose) -> CameraPose:
        a = self.anchor0
        return CameraPose(a.rotation.T @ abs_pose.rotation,
                          a.rotation.T @ (abs_pose.center - a.center))

    def render_next(self, action: Action, index: int) -> CompositeState:
        """One ground-truth frame in session-global units."""
        self.abs_pose = apply_action(self.abs_pose, action)
        rgb, depth = render(self.scene, self.abs_pose, self.intrinsics)
        pose = self._globalize_abs(self.abs_pose)
        return CompositeState(
            rgb=rgb, depth=depth,
            raymap=raymap_from_camera(pose, self.intrinsics),
            index=index, pose=pose, intrinsics=self.intrinsics,
        )

    def next_chunk(self, ctx: WindowCtx, cache, actions, caption, spatial, rng):
        out = []
        for i, a in enumerate(actions):
            g = self.render_next(a, ctx.next_index + i)
            out.append(localize_state(g, ctx.anchor, ctx.scale))
        return out


class ModelBackend:
    """Learned generator: sample a chunk latent, decode, canonicalize.

    Recovered keyframe poses pass a kinematic guard: per-chunk motion beyond
    a generous multiple of the commanded motion is treated as hallucination
    and clipped toward the previous pose.  Disable with pose_guard=False.
    """

    def __init__(self, model, codec: CodecConfig = CodecConfig(),
                 scales=None, steps: int = 16, pose_guard: bool = True,
                 guard_ratio: float = 3.0):
        from .generator import GuidanceScales

        self.model = model
        self.codec = codec
        self.scales = scales or GuidanceScales()
        self.steps = steps
        self.pose_guard = pose_guard
        self.guard_ratio = guard_ratio

    def complete_first(self, rng, v0=None, intrinsics=None):
        from .generator import complete_first_state

        return complete_first_state(
            self.model, v0, intrinsics, scales=self.scales,
            steps=self.steps, rng=rng, codec_cfg=self.codec,
        )

    def _state_slab(self, state: CompositeState, span) -> np.ndarray:
        # the generator's input domain is (0, 1]: clamp here, not in the cache
        codes = np.clip(np.asarray(state.depth, np.float64), EPS_CODE, 1.0)
        chunk = chunk_encode(
            np.asarray(state.rgb, np.float64)[None],
            codes[None],
            {0: state.raymap},
            self.codec,
        )[0]
        return chunk_to_slab(chunk, depth_modality=self.model.cfg.depth_modality)

    def next_chunk(self, ctx: WindowCtx, cache, actions, caption, spatial, rng):
        from .generator import ConditionSet, sample_chunk

        # cache slots -> history slabs (slot 0 is the lone anchor frame)
        slabs, positions = [], []
        size = ctx.slot
        for slot in range(size):
            kf = cache[0] if slot == 0 else cache[(slot - 1) * len(actions) + len(actions)]
            slabs.append(self._state_slab(kf, (0, 0)))
            positions.append(slot)
        spatial_slab = self._state_slab(spatial, (0, 0)) if spatial is not None else None
        cond = ConditionSet(
            history_slabs=tuple(slabs),
            history_positions=tuple(positions),
            spatial_slab=spatial_slab,
            caption=caption,
            target_position=ctx.slot,
        )
        slab = sample_chunk(self.model, cond, scales=self.scales,
                            steps=self.steps, rng=rng)
        commanded_t = sum(
            a.magnitude for a in actions
            if a.kind in (ActionKind.FORWARD, ActionKind.BACK,
                          ActionKind.STRAFE_LEFT, ActionKind.STRAFE_RIGHT)
        ) * ctx.scale.geom_factor
        commanded_r = sum(
            a.magnitude for a in actions
            if a.kind in (ActionKind.TURN_LEFT, ActionKind.TURN_RIGHT,
                          ActionKind.LOOK_UP, ActionKind.LOOK_DOWN)
        )
        return self._decode_chunk(slab, ctx, cache[-1], len(actions),
                                  commanded_t, commanded_r)

    def _guard_pose(self, pose: CameraPose, prev: CameraPose,
                    commanded_t: float, commanded_r: float) -> CameraPose:
        cap_t = self.guard_ratio * commanded_t + 0.05
        cap_r = self.guard_ratio * commanded_r + math.radians(20.0)
        delta = pose.center - prev.center
        dist = float(np.linalg.norm(delta))
        center = pose.center
        if dist > cap_t:
            center = prev.center + delta * (cap_t / dist)
        rot = pose.rotation
        ang = geodesic_angle(prev.rotation, rot)
        if ang > cap_r:
            # geodesic step of at most cap_r from the previous rotation
            rel = prev.rotation.T @ rot
            w_vec = _log_rotation(rel) * (cap_r / ang)
            rot = prev.rotation @ _exp_rotation(w_vec)
        return CameraPose(rot, center)

    def _decode_chunk(self, slab, ctx: WindowCtx, prev_state, n_frames,
                      commanded_t: float = 0.0, commanded_r: float = 0.0):
        chunk = slab_to_chunk(slab, (0, 0), self.codec,
                              depth_modality=self.model.cfg.depth_modality)
        rgb_kf, code_kf = _decode_keyframe(chunk, self.codec)
        if self.model.cfg.depth_modality:
            code_kf = np.clip(code_kf, EPS_CODE, 1.0)
        else:
            # no generated depth: persist the last known codes so the window
            # scale stays bounded (the model still lacks adaptive anchoring)
            code_kf = np.asarray(prev_state.depth, np.float64)
        rgb_kf = np.clip(rgb_kf, 0.0, 1.0)
        rm_kf = canonical_raymap_channels(chunk.keyframe_raymap)
        h, w = rm_kf.shape[:2]
        if self.pose_guard:
            try:
                kf_pose = pose_from_raymap(
                    Raymap(origins=rm_kf[..., :3], directions=rm_kf[..., 3:])
                )
                guarded = self._guard_pose(kf_pose, prev_state.pose,
                                           commanded_t, commanded_r)
                rm_kf = pool_raymap(
                    raymap_from_camera(guarded, ctx.intrinsics), h, w
                )
            except (DegenerateRaysError, InvalidPoseError):
                rm_kf = pool_raymap(prev_state.raymap, h, w)
        rm_prev = pool_raymap(prev_state.raymap, h, w)
        prev_rgb = np.asarray(prev_state.rgb, np.float64)
        prev_code = np.asarray(prev_state.depth, np.float64)
        states = []
        for i in range(1, n_frames + 1):
            alpha = i / n_frames
            if i == n_frames:
                rgb, code, rm6 = rgb_kf, code_kf, rm_kf
            else:
                rgb = (1 - alpha) * prev_rgb + alpha * rgb_kf
                code = (1 - alpha) * prev_code + alpha * code_kf
                rm6 = interpolate_raymaps(rm_prev, rm_kf, alpha,
                                          slerp=self.codec.slerp_directions)
            try:
                pose = pose_from_raymap(
                    Raymap(origins=rm6[..., :3], directions=rm6[..., 3:])
                )
            except (DegenerateRaysError, InvalidPoseError):
                # ill-formed generation (untrained / diverging): freeze the pose
                pose = prev_state.pose if not states else states[-1].pose
            states.append(
                CompositeState(
                    rgb=rgb.astype(np.float32),
                    depth=np.clip(code, EPS_CODE, 1.0),
                    raymap=raymap_from_camera(pose, ctx.intrinsics),
                    index=ctx.next_index + i - 1,
                    pose=pose,
                    intrinsics=ctx.intrinsics,
                )
            )
        return states


# ---------------------------------------------------------------------------
# session


class Session:
    """Live inference state: memory pool, window cache, action buffering."""

    def __init__(self, backend, intrinsics: Intrinsics, cfg: EngineConfig = EngineConfig(),
                 seed: int = 0, v0: np.ndarray | None = None,
                 first_state: CompositeState | None = None):
        self.backend = backend
        self.intrinsics = intrinsics
        self.cfg = cfg
        self.memory = MemoryPool()
        self.rng = torch.Generator().manual_seed(seed)
        self.poisoned = False
        self.windows_done = 0
        self._action_buffer: list[Action] = []
        if first_state is not None:
            first = first_state
        elif isinstance(backend, OracleBackend):
            first = backend.complete_first(self.rng)
        else:
            if v0 is None:
                raise EmptyInputError("model sessions need the first observation v0")
            first = backend.complete_first(self.rng, v0=v0, intrinsics=intrinsics)
        self.memory.append([first])
        self._begin_window([first])

    # -- window bookkeeping -------------------------------------------------

    def _begin_window(self, recent_global: list):
        anchor_state = recent_global[0]
        d = np.asarray(anchor_state.depth, dtype=np.float64)
        param = d if self.cfg.mode == DepthMode.LINEAR_NORM else np.sqrt(1.0 / d)
        self.window_scale = SceneScale(
            d_max=float(param.max()), lam=self.cfg.lam, mode=self.cfg.mode
        )
        self.window_anchor = anchor_state.pose
        self.cache = [localize_state(s, self.window_anchor, self.window_scale)
                      for s in recent_global]
        self._pending_global: list = []
        # slots already occupied by the carried context
        self.slot = 1 + (len(recent_global) - 1) // self.cfg.chunk_size

    def _finish_window(self):
        """Rescale the cache, archive new states, carry recent context over."""
        self.memory.append(self._pending_global, scale=self.window_scale)
        self.windows_done += 1
        carry = 1 + (self.cfg.m_slots - 1) * self.cfg.chunk_size
        recent = list(self.memory.states[-carry:])
        self._begin_window(recent)

    @property
    def next_index(self) -> int:
        return self.memory.last().index + 1 + len(self._pending_global)

    def current_global_pose(self) -> CameraPose:
        if self._pending_global:
            return self._pending_global[-1].pose
        return self.memory.last().pose

    # -- stepping -----------------------------------------------------------

    def step(self, action: Action) -> list:
        """Buffer one action; returns newly generated global states (possibly
        empty until a chunk's worth of actions has accumulated)."""
        if self.poisoned:
            raise TerminalSessionError("session was poisoned by an earlier divergence")
        self._action_buffer.append(action)
        if len(self._action_buffer) < self.cfg.chunk_size:
            return []
        actions, self._action_buffer = self._action_buffer, []
        return self._generate_chunk(actions)

    def step_immediate(self, action: Action) -> CompositeState:
        """Oracle-only per-action stepping (1 action -> 1 frame), sharing the
        same window/memory evolution as chunked stepping."""
        if not isinstance(self.backend, OracleBackend):
            raise TerminalSessionError("immediate stepping requires an oracle backend")
        if self.poisoned:
            raise TerminalSessionError("session was poisoned by an earlier divergence")
        g = self.backend.render_next(action, self.next_index)
        # route through window units exactly like chunked stepping so both
        # paths emit bit-identical states
        local = localize_state(g, self.window_anchor, self.window_scale)
        out = globalize_state(local, self.window_anchor, self.window_scale)
        self._pending_global.append(out)
        self.cache.append(local)
        if (len(self._pending_global)) % self.cfg.chunk_size == 0:
            self.slot += 1
            if self.slot >= self.cfg.cache_max_slots:
                self._finish_window()
        return out

    def force_chunk(self, actions: list, caption=None) -> list:
        """Generate one chunk immediately from explicit actions, bypassing the
        buffer; optionally condition on a caller-supplied caption (raw text
        control path)."""
        if self.poisoned:
            raise TerminalSessionError("session was poisoned by an earlier divergence")
        if len(actions) != self.cfg.chunk_size:
            raise ShapeError(f"force_chunk needs {self.cfg.chunk_size} actions")
        return self._generate_chunk(list(actions), caption=caption)

    def _generate_chunk(self, actions: list, caption=None) -> list:
        if caption is None:
            caption = caption_from_motion([action_to_delta(a) for a in actions])
        spatial_global = retrieve_spatial(
            self.memory, self.current_global_pose(), self.next_index,
            self.cfg.retrieval,
        )
        spatial_local = (
            localize_state(spatial_global, self.window_anchor, self.window_scale)
            if spatial_global is not None else None
        )
        ctx = WindowCtx(
            anchor=self.window_anchor, scale=self.window_scale,
            intrinsics=self.intrinsics, next_index=self.next_index, slot=self.slot,
        )
        try:
            local_states = self.backend.next_chunk(
                ctx, self.cache, actions, caption, spatial_local, self.rng
            )
        except DivergenceError as exc:
            self.poisoned = True
            raise DivergenceError(
                f"divergence in window {self.windows_done}: {exc}",
                step=exc.step, window=self.windows_done,
            ) from exc
        self.cache.extend(local_states)
        new_global = [
            globalize_state(s, self.window_anchor, self.window_scale)
            for s in local_states
        ]
        self._pending_global.extend(new_global)
        self.slot += 1
        if self.slot >= self.cfg.cache_max_slots:
            self._finish_window()
        return new_global

    def flush(self):
        """Archive any states generated in the unfinished current window."""
        if self._pending_global:
            self.memory.append(self._pending_global, scale=self.window_scale)
            self._pending_global = []


def run_long(backend, intrinsics: Intrinsics, actions, windows: int,
             cfg: EngineConfig = EngineConfig(), seed: int = 0,
             v0: np.ndarray | None = None):
    """Algorithm-1 driver: initialize memory from the first observation, then
    fill windows chunk by chunk.  Yields the first state and every generated
    state in order; stops after ``windows`` windows or when actions run out."""
    session = Session(backend, intrinsics, cfg=cfg, seed=seed, v0=v0)
    yield session.memory.state(0)
    it = iter(actions)
    while session.windows_done < windows:
        done = False
        try:
            a = next(it)
        except StopIteration:
            done = True
        if done:
            session.flush()
            return
        for state in session.step(a):
            yield state
    session.flush()


# ---------------------------------------------------------------------------
# drift metrics


@dataclass(frozen=True)
class DriftRow:
    horizon: int
    translation_err: float
    rotation_err: float
    depth_abs_rel: float
    psnr: float


@dataclass(frozen=True)
class DriftReport:
    horizons: tuple
    rows: tuple

    def to_dict(self) -> dict:
        return {
            "horizons": list(self.horizons),
            "rows": [
                {
                    "horizon": r.horizon,
                    "translation_err": r.translation_err,
                    "rotation_err": r.rotation_err,
                    "depth_abs_rel": r.depth_abs_rel,
                    "psnr": r.psnr,
                }
                for r in self.rows
            ],
        }

    def to_text(self) -> str:
        lines = ["horizon translation_err rotation_err depth_abs_rel psnr"]
        for r in self.rows:
            lines.append(
                f"{r.horizon} {r.translation_err:.9g} {r.rotation_err:.9g} "
                f"{r.depth_abs_rel:.9g} {r.psnr:.9g}"
            )
        return "\n".join(lines) + "\n"


def psnr(a: np.ndarray, b: np.ndarray, cap: float = PSNR_CAP) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse <= 0.0:
        return cap
    return min(cap, -10.0 * math.log10(mse))


def evaluate_drift(generated, reference, horizons=(32, 64, 96, 128)) -> DriftReport:
    """Oracle-referenced errors over growing horizons of generated frames.

    Frame 0 (the given observation) is excluded; horizon h scores generated
    frames 1..h.  Indices must align between the two streams.
    """
    generated = list(generated)
    reference = list(reference)
    max_h = max(horizons)
    if len(generated) < max_h + 1 or len(reference) < max_h + 1:
        raise ShapeError(
            f"need {max_h + 1} aligned frames, got {len(generated)}/{len(reference)}"
        )
    for g, r in zip(generated, reference):
        if g.index != r.index:
            raise ShapeError(f"index mismatch: {g.index} vs {r.index}")
    t_err, r_err, d_err, p_vals = [], [], [], []
    for g, r in zip(generated[1 : max_h + 1], reference[1 : max_h + 1]):
        t_err.append(float(np.linalg.norm(g.pose.center - r.pose.center)))
        r_err.append(geodesic_angle(g.pose.rotation, r.pose.rotation))
        gd = np.asarray(g.depth, np.float64)
        rd = np.asarray(r.depth, np.float64)
        d_err.append(float(np.mean(np.abs(gd - rd) / rd)))
        p_vals.append(psnr(g.rgb, r.rgb))
    rows = []
    for h in horizons:
        rows.append(
            DriftRow(
                horizon=h,
                translation_err=float(np.mean(t_err[:h])),
                rotation_err=float(np.mean(r_err[:h])),
                depth_abs_rel=float(np.mean(d_err[:h])),
                psnr=float(np.mean(p_vals[:h])),
            )
        )
    return DriftReport(horizons=tuple(horizons), rows=tuple(rows))
