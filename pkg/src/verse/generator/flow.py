"""Rectified-flow objective, condition dropout, guided sampling."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from ..dataset import Caption
from ..errors import DivergenceError, ShapeError
from ..geometry import DEFAULT_LAMBDA, SceneScale, raymap_from_camera
from ..latent_codec import CodecConfig, LatentChunk, _decode_keyframe, _embedding, _patchify
from ..state_memory import CompositeState


@dataclass(frozen=True)
class GuidanceScales:
    s_text: float = 4.0
    s_spatial: float = 5.0


@dataclass(frozen=True)
class ConditionSet:
    """Per-sample conditioning: clean history slabs, optional spatial slab, caption."""

    history_slabs: tuple = ()
    history_positions: tuple = ()
    spatial_slab: np.ndarray | None = None
    caption: Caption | None = None
    target_position: int = 1
    text_dropped: bool = False
    spatial_dropped: bool = False

    def __post_init__(self):
        if len(self.history_slabs) != len(self.history_positions):
            raise ShapeError("history slabs and positions disagree")


def apply_condition_dropout(
    cond: ConditionSet, p_text: float = 0.1, p_spatial: float = 0.5,
    rng: np.random.Generator | None = None,
) -> ConditionSet:
    """Independently replace text / spatial conditions with nulls."""
    rng = rng or np.random.default_rng()
    return replace(
        cond,
        text_dropped=cond.text_dropped or bool(rng.random() < p_text),
        spatial_dropped=cond.spatial_dropped or bool(rng.random() < p_spatial),
    )


@dataclass
class BatchedConditions:
    history_slabs: list          # per chunk: (B, h, w, C) tensors
    history_positions: list
    spatial_slab: torch.Tensor | None
    spatial_dropped: list
    captions: list
    text_dropped: list
    target_position: int
    aug_strength: torch.Tensor | None = None
    aug_noise: list | None = None


def collate_conditions(conds) -> BatchedConditions:
    conds = list(conds)
    first = conds[0]
    for c in conds:
        if c.history_positions != first.history_positions or \
                c.target_position != first.target_position:
            raise ShapeError("batched conditions must share the chunk layout")
    hist = [
        torch.stack([torch.as_tensor(c.history_slabs[i], dtype=torch.float32)
                     for c in conds])
        for i in range(len(first.history_slabs))
    ]
    any_spatial = any(c.spatial_slab is not None for c in conds)
    spatial = None
    if any_spatial:
        rows = []
        for c in conds:
            if c.spatial_slab is None:
                rows.append(torch.zeros_like(hist[0][0]) if hist else
                            torch.zeros(conds[0].spatial_slab.shape))
            else:
                rows.append(torch.as_tensor(c.spatial_slab, dtype=torch.float32))
        spatial = torch.stack(rows)
    return BatchedConditions(
        history_slabs=hist,
        history_positions=list(first.history_positions),
        spatial_slab=spatial,
        spatial_dropped=[c.spatial_dropped or c.spatial_slab is None for c in conds],
        captions=[c.caption for c in conds],
        text_dropped=[c.text_dropped or c.caption is None for c in conds],
        target_position=first.target_position,
    )


# ---------------------------------------------------------------------------
# objective


def flow_loss(model, x1, cond, t, noise, loss_channels: slice | None = None,
              clean_channels: slice | None = None):
    """MSE between the predicted velocity and the straight path x1 - noise.

    z_t = (1 - t) * noise + t * x1.  ``clean_channels`` are kept at their
    clean values inside z_t (first-state completion) and ``loss_channels``
    restricts which channels are scored.
    """
    x1 = torch.as_tensor(x1)
    noise = torch.as_tensor(noise)
    t = torch.as_tensor(t).reshape(-1).to(x1.dtype)
    tb = t[:, None, None, None]
    z_t = (1.0 - tb) * noise + tb * x1
    if clean_channels is not None:
        z_t = z_t.clone()
        z_t[..., clean_channels] = x1[..., clean_channels]
    pred = model(z_t, t, cond)
    target = x1 - noise
    if loss_channels is not None:
        pred = pred[..., loss_channels]
        target = target[..., loss_channels]
    return torch.mean((pred - target) ** 2)


# ---------------------------------------------------------------------------
# guidance


def cfg_combine(e_null, e_text, e_both, scales: GuidanceScales):
    """e_null + s_T (e_text - e_null) + s_S (e_both - e_text).

    Unit scales short-circuit to the exact algebraic value so the identities
    hold bitwise.
    """
    if scales.s_text == 1.0 and scales.s_spatial == 1.0:
        return e_both
    if scales.s_spatial == 0.0:
        if scales.s_text == 1.0:
            return e_text
        return e_null + scales.s_text * (e_text - e_null)
    return (
        e_null
        + scales.s_text * (e_text - e_null)
        + scales.s_spatial * (e_both - e_text)
    )


# ---------------------------------------------------------------------------
# sampling


def sample_chunk(
    model,
    cond: ConditionSet,
    scales: GuidanceScales = GuidanceScales(),
    steps: int = 32,
    rng: torch.Generator | None = None,
    clamp_channels: slice | None = None,
    clamp_values: np.ndarray | None = None,
) -> np.ndarray:
    """Euler-integrate the guided velocity field from noise to a target slab.

    Three condition settings per step (none / text / text+spatial) feed the
    two-stage guidance; when no spatial condition exists the third prediction
    reuses the text-only one.  ``clamp_channels`` keeps known channels pinned
    to their flow path (first-state completion).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    cfg = model.cfg
    shape = (1, cfg.grid_h, cfg.grid_w, cfg.channels)
    rng = rng or torch.Generator().manual_seed(0)
    z = torch.randn(shape, generator=rng)
    noise0 = z.clone()
    clamp_t = None
    if clamp_channels is not None:
        clamp_t = torch.as_tensor(clamp_values, dtype=torch.float32)[None]
    cond_null = replace(cond, text_dropped=True, spatial_dropped=True)
    cond_text = replace(cond, spatial_dropped=True)
    has_spatial = cond.spatial_slab is not None and not cond.spatial_dropped
    dt = 1.0 / steps
    with torch.no_grad():
        for k in range(steps):
            t_k = k * dt
            if clamp_t is not None:
                z[..., clamp_channels] = (
                    (1 - t_k) * noise0[..., clamp_channels]
                    + t_k * clamp_t[..., clamp_channels]
                )
            t = torch.full((1,), t_k)
            e_null = model(z, t, collate_conditions([cond_null]))
            e_text = model(z, t, collate_conditions([cond_text]))
            e_both = model(z, t, collate_conditions([cond])) if has_spatial else e_text
            v = cfg_combine(e_null, e_text, e_both, scales)
            z = z + dt * v
            if not torch.isfinite(z).all():
                raise DivergenceError(f"sampler diverged at step {k}", step=k)
    if clamp_t is not None:
        z[..., clamp_channels] = clamp_t[..., clamp_channels]
    return z[0].numpy().astype(np.float64)


def encode_rgb_channels(rgb: np.ndarray, codec_cfg: CodecConfig) -> np.ndarray:
    """Image-latent channels of a single frame (the clamp target)."""
    img = _patchify(np.asarray(rgb, dtype=np.float64), codec_cfg.patch)
    if codec_cfg.mixing:
        e_v = _embedding(codec_cfg.c_v, 3 * codec_cfg.patch**2)
        img = img @ e_v.T
    return img


def complete_first_state(
    model,
    v0: np.ndarray,
    intrinsics,
    scales: GuidanceScales = GuidanceScales(),
    steps: int = 32,
    rng: torch.Generator | None = None,
    codec_cfg: CodecConfig = CodecConfig(),
    lam: float = DEFAULT_LAMBDA,
    strict_probe: bool = False,
) -> CompositeState:
    """Generate depth + raymap for a lone rgb observation.

    The image channels stay clamped to the encoded input throughout sampling;
    the output's rgb equals ``v0`` verbatim.  The recovered raymap is probed
    for validity, then the state is anchored on the identity pose (the global
    frame is defined by this very observation).  Depth decodes under the
    d_max = 1 convention: absolute scale is unobservable from one image.
    """
    from ..latent_codec import canonical_raymap_channels, chunk_to_slab, slab_to_chunk
    from ..geometry import Raymap, camera_from_raymap, depth_decode

    v0 = np.asarray(v0, dtype=np.float64)
    h, w = v0.shape[:2]
    img_channels = encode_rgb_channels(v0, codec_cfg)
    clamp = np.zeros((model.cfg.grid_h, model.cfg.grid_w, model.cfg.channels))
    c_v = img_channels.shape[-1]
    clamp[..., :c_v] = img_channels
    cond = ConditionSet(caption=None, target_position=0,
                        text_dropped=True, spatial_dropped=True)
    slab = sample_chunk(
        model, cond, scales=scales, steps=steps, rng=rng,
        clamp_channels=slice(0, c_v), clamp_values=clamp,
    )
    chunk = slab_to_chunk(slab, (0, 0), codec_cfg,
                          depth_modality=model.cfg.depth_modality)
    _, depth_code = _decode_keyframe(chunk, codec_cfg)
    depth_code = np.clip(depth_code, 1e-4, 1.0)
    scale = SceneScale(d_max=1.0, lam=lam)
    depth = depth_decode([depth_code], scale)[0]
    # validity probe on the generated raymap channels
    rm6 = canonical_raymap_channels(chunk.keyframe_raymap)
    try:
        camera_from_raymap(Raymap(origins=rm6[..., :3], directions=rm6[..., 3:]))
    except Exception:
        if strict_probe:
            raise
    from ..geometry import CameraPose

    pose = CameraPose.identity()
    return CompositeState(
        rgb=v0.astype(np.float32),
        depth=depth.astype(np.float32),
        raymap=raymap_from_camera(pose, intrinsics),
        index=0,
        pose=pose,
        intrinsics=intrinsics,
    )
