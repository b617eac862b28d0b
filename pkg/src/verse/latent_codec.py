"""Temporal chunking and the compact per-chunk latent.

A 1 + 7*8 frame clip becomes 8 chunks: chunk 0 holds frame 0 alone, chunks
1..7 each cover 8 frames.  The deterministic codec keeps each chunk's last
frame (the keyframe) exactly -- 2x2 space-to-channel patchification followed
by a fixed column-orthonormal channel embedding -- and reconstructs the
frames between keyframes by linear interpolation at decode time, mirroring
how the keyframe raymaps are interpolated.  This stands in for a learned 3D
VAE's 8x temporal compression while keeping keyframe round trips exact.

Channel accounting at defaults: 16 (image) + 16 (depth) + 6 (raymap) = 38;
dropping the depth modality leaves 22.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .geometry import Raymap

TEMPORAL_RATIO = 8
PATCH = 2
_MIX_SEED = 0x5EED


@dataclass(frozen=True)
class CodecConfig:
    temporal_ratio: int = TEMPORAL_RATIO
    patch: int = PATCH
    c_v: int = 16
    c_d: int = 16
    codec_kind: str = "deterministic_patch"  # or "learned_tiny"
    mixing: bool = True       # fixed orthogonal channel embedding on/off
    slerp_directions: bool = False

    def __post_init__(self):
        raw_v = 3 * self.patch * self.patch
        raw_d = self.patch * self.patch
        if self.mixing and (self.c_v < raw_v or self.c_d < raw_d):
            raise ConfigError("channel targets too small for an invertible embedding")

    @property
    def channels(self) -> int:
        if self.mixing:
            return self.c_v + self.c_d + 6
        return 3 * self.patch**2 + self.patch**2 + 6

    def chunk_count(self, clip_len: int) -> int:
        if (clip_len - 1) % self.temporal_ratio != 0:
            raise ConfigError(
                f"temporal ratio {self.temporal_ratio} does not divide {clip_len - 1}"
            )
        return 1 + (clip_len - 1) // self.temporal_ratio


@dataclass(frozen=True)
class LatentChunk:
    image_latent: np.ndarray    # (h, w, c_v)
    depth_latent: np.ndarray    # (h, w, c_d)
    keyframe_raymap: np.ndarray  # (h, w, 6), pooled raymap of the span's last frame
    span: tuple                 # (first_frame, last_frame) inclusive

    @property
    def channels(self) -> int:
        return (
            self.image_latent.shape[-1]
            + self.depth_latent.shape[-1]
            + self.keyframe_raymap.shape[-1]
        )

    @property
    def grid(self) -> tuple:
        return self.image_latent.shape[:2]


def chunk_spans(clip_len: int, ratio: int = TEMPORAL_RATIO) -> list:
    """[(0,0), (1,8), (9,16), ...]: chunk 0 is the lone first frame."""
    if (clip_len - 1) % ratio != 0:
        raise ShapeError(f"clip length {clip_len} is not 1 + k*{ratio}")
    spans = [(0, 0)]
    f = 1
    while f < clip_len:
        spans.append((f, f + ratio - 1))
        f += ratio
    return spans


# ---------------------------------------------------------------------------
# fixed orthogonal channel embeddings


def _embedding(rows: int, cols: int) -> np.ndarray:
    """Fixed column-orthonormal (rows, cols) matrix, rows >= cols."""
    rng = np.random.default_rng(_MIX_SEED + rows * 1000 + cols)
    q, _ = np.linalg.qr(rng.standard_normal((rows, rows)))
    return q[:, :cols]


def _patchify(frame: np.ndarray, patch: int) -> np.ndarray:
    """(H, W, C) -> (H/p, W/p, C*p*p) space-to-channel rearrangement."""
    h, w = frame.shape[:2]
    c = frame.shape[2] if frame.ndim == 3 else 1
    if h % patch or w % patch:
        raise ShapeError(f"frame {h}x{w} not divisible by patch {patch}")
    x = frame.reshape(h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 2, 1, 3, 4).reshape(h // patch, w // patch, patch * patch * c)


def _unpatchify(latent: np.ndarray, patch: int, channels: int) -> np.ndarray:
    h, w, _ = latent.shape
    x = latent.reshape(h, w, patch, patch, channels)
    x = x.transpose(0, 2, 1, 3, 4).reshape(h * patch, w * patch, channels)
    return x


def pool_raymap(rm: Raymap, h: int, w: int) -> np.ndarray:
    """Block-average a raymap to (h, w, 6); directions renormalized."""
    big_h, big_w = rm.shape
    if big_h % h or big_w % w:
        raise ShapeError(f"cannot pool {big_h}x{big_w} raymap to {h}x{w}")
    fh, fw = big_h // h, big_w // w
    chans = rm.as_channels()
    if fh == 1 and fw == 1:
        return chans.copy()
    pooled = chans.reshape(h, fh, w, fw, 6).mean(axis=(1, 3))
    dirs = pooled[..., 3:]
    pooled[..., 3:] = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    return pooled


# ---------------------------------------------------------------------------
# encode


def chunk_encode(rgb, depth_code, keyframe_raymaps, cfg: CodecConfig = CodecConfig()):
    """Encode a clip into latent chunks.

    rgb: (T, H, W, 3) in [0,1]; depth_code: (T, H, W) in (0,1];
    keyframe_raymaps: mapping frame index -> Raymap for each span's last frame.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    depth_code = np.asarray(depth_code, dtype=np.float64)
    if rgb.ndim != 4 or depth_code.shape != rgb.shape[:3]:
        raise ShapeError(f"rgb {rgb.shape} / depth {depth_code.shape} disagree")
    t, big_h, big_w, _ = rgb.shape
    spans = chunk_spans(t, cfg.temporal_ratio)
    h, w = big_h // cfg.patch, big_w // cfg.patch
    e_v = _embedding(cfg.c_v, 3 * cfg.patch**2) if cfg.mixing else None
    e_d = _embedding(cfg.c_d, cfg.patch**2) if cfg.mixing else None
    chunks = []
    for span in spans:
        kf = span[1]
        img = _patchify(rgb[kf], cfg.patch)
        dep = _patchify(depth_code[kf][..., None], cfg.patch)
        if cfg.mixing:
            img = img @ e_v.T
            dep = dep @ e_d.T
        rm = keyframe_raymaps[kf]
        chunks.append(
            LatentChunk(
                image_latent=img,
                depth_latent=dep,
                keyframe_raymap=pool_raymap(rm, h, w),
                span=span,
            )
        )
    return chunks


def encode_sample(sample, cfg: CodecConfig = CodecConfig()):
    """Encode a TrainingSample (clip-local units)."""
    from .geometry import raymap_from_camera

    spans = chunk_spans(sample.rgb.shape[0], cfg.temporal_ratio)
    rms = {
        s[1]: raymap_from_camera(sample.poses[s[1]], sample.intrinsics) for s in spans
    }
    return chunk_encode(sample.rgb, sample.depth_code, rms, cfg)


# ---------------------------------------------------------------------------
# decode


@dataclass(frozen=True)
class DecodedClip:
    rgb: np.ndarray        # (T, H, W, 3)
    depth_code: np.ndarray  # (T, H, W)
    raymaps: np.ndarray    # (T, h, w, 6) pooled-resolution raymaps


def _decode_keyframe(chunk: LatentChunk, cfg: CodecConfig):
    img, dep = chunk.image_latent, chunk.depth_latent
    if cfg.mixing:
        e_v = _embedding(cfg.c_v, 3 * cfg.patch**2)
        e_d = _embedding(cfg.c_d, cfg.patch**2)
        img = img @ e_v
        dep = dep @ e_d
    rgb = _unpatchify(img, cfg.patch, 3)
    depth = _unpatchify(dep, cfg.patch, 1)[..., 0]
    return rgb, depth


def interpolate_raymaps(rm_a: np.ndarray, rm_b: np.ndarray, alpha: float,
                        slerp: bool = False) -> np.ndarray:
    """Blend two (h, w, 6) raymap arrays: origins lerp, directions lerp+renorm
    (or slerp when requested)."""
    out = (1.0 - alpha) * rm_a + alpha * rm_b
    da, db = rm_a[..., 3:], rm_b[..., 3:]
    if slerp:
        cos = np.clip(np.einsum("...i,...i->...", da, db), -1.0, 1.0)
        theta = np.arccos(cos)
        sin = np.sin(theta)
        safe = sin > 1e-9
        wa = np.where(safe, np.sin((1 - alpha) * theta) / np.where(safe, sin, 1.0), 1 - alpha)
        wb = np.where(safe, np.sin(alpha * theta) / np.where(safe, sin, 1.0), alpha)
        d = wa[..., None] * da + wb[..., None] * db
    else:
        d = out[..., 3:]
    out[..., 3:] = d / np.linalg.norm(d, axis=-1, keepdims=True)
    return out


def chunk_decode(chunks, cfg: CodecConfig = CodecConfig()) -> DecodedClip:
    """Invert keyframes exactly; fill intermediate frames by interpolation."""
    chunks = list(chunks)
    if not chunks:
        raise ShapeError("no chunks to decode")
    for c in chunks:
        if c.image_latent.ndim != 3 or c.keyframe_raymap.shape[-1] != 6:
            raise ShapeError("malformed latent chunk")
    t = chunks[-1].span[1] + 1
    kf_rgb, kf_depth = {}, {}
    kf_rm = {}
    for c in chunks:
        rgb, depth = _decode_keyframe(c, cfg)
        kf_rgb[c.span[1]] = rgb
        kf_depth[c.span[1]] = depth
        kf_rm[c.span[1]] = c.keyframe_raymap
    big_h, big_w = next(iter(kf_rgb.values())).shape[:2]
    h, w = chunks[0].grid
    out_rgb = np.zeros((t, big_h, big_w, 3))
    out_depth = np.zeros((t, big_h, big_w))
    out_rm = np.zeros((t, h, w, 6))
    kf_times = sorted(kf_rgb)
    for a, b in zip(kf_times[:-1], kf_times[1:]):
        for f in range(a, b + 1):
            alpha = (f - a) / (b - a)
            if f == a:
                out_rgb[f], out_depth[f], out_rm[f] = kf_rgb[a], kf_depth[a], kf_rm[a]
            elif f == b:
                out_rgb[f], out_depth[f], out_rm[f] = kf_rgb[b], kf_depth[b], kf_rm[b]
            else:
                out_rgb[f] = (1 - alpha) * kf_rgb[a] + alpha * kf_rgb[b]
                out_depth[f] = (1 - alpha) * kf_depth[a] + alpha * kf_depth[b]
                out_rm[f] = interpolate_raymaps(kf_rm[a], kf_rm[b], alpha,
                                                slerp=cfg.slerp_directions)
    f0 = kf_times[0]
    out_rgb[f0], out_depth[f0], out_rm[f0] = kf_rgb[f0], kf_depth[f0], kf_rm[f0]
    return DecodedClip(rgb=out_rgb, depth_code=out_depth, raymaps=out_rm)


# ---------------------------------------------------------------------------
# slab packing for the generator

# Window-local camera centers are shrunk by lam/d_max and would otherwise be
# two orders of magnitude smaller than the other channels; the fixed gain
# rebalances the training signal and the sampling SNR.  Exactly inverted on
# unpacking.
ORIGIN_GAIN = 10.0


def chunk_to_slab(chunk: LatentChunk, depth_modality: bool = True) -> np.ndarray:
    rm = chunk.keyframe_raymap.copy()
    rm[..., :3] *= ORIGIN_GAIN
    parts = [chunk.image_latent]
    if depth_modality:
        parts.append(chunk.depth_latent)
    parts.append(rm)
    return np.concatenate(parts, axis=-1)


def slab_to_chunk(slab: np.ndarray, span: tuple, cfg: CodecConfig,
                  depth_modality: bool = True) -> LatentChunk:
    c_v = cfg.c_v if cfg.mixing else 3 * cfg.patch**2
    c_d = cfg.c_d if cfg.mixing else cfg.patch**2
    img = slab[..., :c_v]
    if depth_modality:
        dep = slab[..., c_v : c_v + c_d]
        rm = slab[..., c_v + c_d :]
    else:
        # placeholder mid-range code: the depth modality was not generated
        dep_shape = slab.shape[:2] + (c_d,)
        dep = np.full(dep_shape, 0.0)
        e_d = _embedding(cfg.c_d, cfg.patch**2) if cfg.mixing else None
        flat = np.full(slab.shape[:2] + (cfg.patch**2,), 0.5)
        dep = flat @ e_d.T if cfg.mixing else flat
        rm = slab[..., c_v:]
    if rm.shape[-1] != 6:
        raise ShapeError(f"slab has {slab.shape[-1]} channels; raymap part is {rm.shape[-1]}")
    rm = np.array(rm)
    rm[..., :3] /= ORIGIN_GAIN
    return LatentChunk(image_latent=img, depth_latent=dep, keyframe_raymap=rm, span=span)


def canonical_raymap_channels(raw: np.ndarray) -> np.ndarray:
    """Clean generated raymap channels: shared origin, unit directions.

    Near-zero direction vectors (possible from an untrained generator) fall
    back to the optical axis so the result is always a valid raymap.
    """
    out = np.array(raw, dtype=np.float64)
    out[~np.isfinite(out)] = 0.0
    origin = out[..., :3].reshape(-1, 3).mean(axis=0)
    out[..., :3] = origin
    d = out[..., 3:]
    norms = np.linalg.norm(d, axis=-1, keepdims=True)
    degenerate = norms[..., 0] < 1e-6
    d = np.where(degenerate[..., None], np.array([0.0, 0.0, 1.0]), d)
    norms = np.linalg.norm(d, axis=-1, keepdims=True)
    out[..., 3:] = d / norms
    return out
