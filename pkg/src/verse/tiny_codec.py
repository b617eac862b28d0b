"""Small learned 3D-conv autoencoder behind the chunk-codec interface.

Stride-8 temporal compression over rgb+depth; the first frame goes through a
2D path.  Trained separately from the generator; raymap channels stay on the
deterministic pooling path.  This exists for fidelity experiments -- the
deterministic keyframe codec remains the default everywhere.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .errors import ShapeError
from .latent_codec import CodecConfig, LatentChunk, chunk_spans, pool_raymap


class TinyCodec(nn.Module):
    def __init__(self, cfg: CodecConfig = CodecConfig(codec_kind="learned_tiny")):
        super().__init__()
        self.cfg = cfg
        c = cfg.c_v + cfg.c_d
        # (B, 4, T, H, W) -> (B, c, T/8, H/2, W/2)
        self.enc3d = nn.Sequential(
            nn.Conv3d(4, 32, kernel_size=3, stride=(2, 2, 2), padding=1),
            nn.SiLU(),
            nn.Conv3d(32, 64, kernel_size=3, stride=(2, 1, 1), padding=1),
            nn.SiLU(),
            nn.Conv3d(64, c, kernel_size=3, stride=(2, 1, 1), padding=1),
        )
        self.dec3d = nn.Sequential(
            nn.ConvTranspose3d(c, 64, kernel_size=(4, 3, 3), stride=(2, 1, 1),
                               padding=1),
            nn.SiLU(),
            nn.ConvTranspose3d(64, 32, kernel_size=(4, 3, 3), stride=(2, 1, 1),
                               padding=1),
            nn.SiLU(),
            nn.ConvTranspose3d(32, 4, kernel_size=4, stride=(2, 2, 2), padding=1),
        )
        self.enc2d = nn.Sequential(
            nn.Conv2d(4, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, c, 3, padding=1),
        )
        self.dec2d = nn.Sequential(
            nn.ConvTranspose2d(c, 32, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 4, 3, padding=1),
        )

    def encode_clip(self, rgb: np.ndarray, depth_code: np.ndarray,
                    keyframe_raymaps) -> list:
        t, h, w, _ = rgb.shape
        spans = chunk_spans(t, self.cfg.temporal_ratio)
        x = torch.cat([
            torch.as_tensor(rgb, dtype=torch.float32).permute(0, 3, 1, 2),
            torch.as_tensor(depth_code, dtype=torch.float32)[:, None],
        ], dim=1)
        gh, gw = h // 2, w // 2
        chunks = []
        with torch.no_grad():
            z0 = self.enc2d(x[0:1])[0].permute(1, 2, 0).numpy()
            zrest = None
            if t > 1:
                rest = x[1:].permute(1, 0, 2, 3)[None]  # (1, 4, T-1, H, W)
                zrest = self.enc3d(rest)[0].permute(1, 2, 3, 0).numpy()
        for i, span in enumerate(spans):
            z = z0 if i == 0 else zrest[i - 1]
            if z.shape[:2] != (gh, gw):
                raise ShapeError(f"latent grid {z.shape[:2]} != ({gh}, {gw})")
            chunks.append(LatentChunk(
                image_latent=np.ascontiguousarray(z[..., : self.cfg.c_v], dtype=np.float64),
                depth_latent=np.ascontiguousarray(z[..., self.cfg.c_v :], dtype=np.float64),
                keyframe_raymap=pool_raymap(keyframe_raymaps[span[1]], gh, gw),
                span=span,
            ))
        return chunks

    def decode_chunks(self, chunks: list):
        """Returns (rgb (T,H,W,3), depth_code (T,H,W)); raymaps follow the
        deterministic interpolation path in :mod:`verse.latent_codec`."""
        z0 = torch.as_tensor(
            np.concatenate([chunks[0].image_latent, chunks[0].depth_latent], axis=-1),
            dtype=torch.float32,
        ).permute(2, 0, 1)[None]
        with torch.no_grad():
            f0 = self.dec2d(z0)[0].permute(1, 2, 0).numpy()
            frames = [f0]
            if len(chunks) > 1:
                z = torch.stack([
                    torch.as_tensor(
                        np.concatenate([c.image_latent, c.depth_latent], axis=-1),
                        dtype=torch.float32,
                    ).permute(2, 0, 1)
                    for c in chunks[1:]
                ], dim=1)[None]
                rest = self.dec3d(z)[0].permute(1, 2, 3, 0).numpy()
                frames.extend(rest)
        out = np.stack(frames)
        rgb = np.clip(out[..., :3], 0.0, 1.0)
        depth = np.clip(out[..., 3], 1e-4, 1.0)
        return rgb, depth


def train_tiny_codec(codec: TinyCodec, clips, steps: int = 200, lr: float = 1e-3,
                     seed: int = 0) -> list:
    """Reconstruction training on (rgb, depth_code) clip pairs."""
    rng = np.random.default_rng(seed)
    opt = torch.optim.AdamW(codec.parameters(), lr=lr)
    losses = []
    for _ in range(steps):
        rgb, depth = clips[int(rng.integers(len(clips)))]
        x = torch.cat([
            torch.as_tensor(rgb, dtype=torch.float32).permute(0, 3, 1, 2),
            torch.as_tensor(depth, dtype=torch.float32)[:, None],
        ], dim=1)
        first = x[0:1]
        z0 = codec.enc2d(first)
        r0 = codec.dec2d(z0)
        loss = torch.mean((r0 - first) ** 2)
        if x.shape[0] > 1:
            rest = x[1:].permute(1, 0, 2, 3)[None]
            z = codec.enc3d(rest)
            r = codec.dec3d(z)
            loss = loss + torch.mean((r - rest) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return losses
