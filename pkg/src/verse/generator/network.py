"""Conditional denoiser over chunk latents.

Two history-injection variants share one transformer backbone:

* ``token_wise`` -- history chunks, the optional spatial condition, caption
  tokens and the noised target are separate token blocks.  Condition tokens
  attend only among themselves; target tokens attend to everything.
* ``channel_wise`` -- up to seven history slabs (right-aligned by recency),
  the spatial slab and the noised target are stacked along channels before
  patchification; no extra tokens, text enters through AdaLN pooling only.

Timestep and pooled text modulate every block via adaptive layer norm;
spatial positions use fixed 2D sincos embeddings, temporal positions rotary
embeddings on q/k, and q/k are RMS-normalized per head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..dataset import MAX_CAPTION_TOKENS
from ..errors import ConfigError, ShapeError
from ..text_embed import TextEmbedder

FULL_SCALE_REFERENCE = {"layers": 24, "model_dim": 1536, "heads": 24, "head_dim": 64}


@dataclass(frozen=True)
class DenoiserConfig:
    layers: int = 4
    model_dim: int = 128
    heads: int = 4
    variant: str = "token_wise"  # or "channel_wise"
    depth_modality: bool = True
    grid_h: int = 24
    grid_w: int = 32
    c_v: int = 16
    c_d: int = 16
    patch: int = 2
    m_history: int = 7
    cond_aug_max: float = 0.3  # channel_wise history noise ceiling

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ConfigError("model_dim must equal heads * head_dim")
        if self.variant not in ("token_wise", "channel_wise"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.grid_h % self.patch or self.grid_w % self.patch:
            raise ConfigError("latent grid must be divisible by the token patch")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def channels(self) -> int:
        return self.c_v + (self.c_d if self.depth_modality else 0) + 6

    @property
    def tokens_per_chunk(self) -> int:
        return (self.grid_h // self.patch) * (self.grid_w // self.patch)


# ---------------------------------------------------------------------------
# building blocks


def sincos_2d(dim: int, h: int, w: int) -> torch.Tensor:
    """Fixed (h*w, dim) 2D sin/cos position table."""
    if dim % 4:
        raise ConfigError("sincos embedding needs dim divisible by 4")
    quarter = dim // 4
    omega = 1.0 / (10000 ** (np.arange(quarter) / quarter))
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = []
    for coords in (ys.ravel(), xs.ravel()):
        ang = np.outer(coords, omega)
        out.extend([np.sin(ang), np.cos(ang)])
    return torch.tensor(np.concatenate(out, axis=1), dtype=torch.float32)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t[:, None].float() * 1000.0 * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _rope_angles(positions: torch.Tensor, head_dim: int) -> tuple:
    half = head_dim // 2
    freqs = 1.0 / (10000 ** (torch.arange(half, dtype=torch.float32) / half))
    ang = positions.float()[:, None] * freqs[None]
    return torch.cos(ang), torch.sin(ang)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate (B, H, T, D) q/k by per-token temporal angles."""
    x1, x2 = x[..., 0::2], x[..., 1::2]
    rot1 = x1 * cos - x2 * sin
    rot2 = x1 * sin + x2 * cos
    out = torch.empty_like(x)
    out[..., 0::2] = rot1
    out[..., 1::2] = rot2
    return out


class RMSNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        norm = x.float().pow(2).mean(dim=-1, keepdim=True).add(1e-6).rsqrt()
        return (x * norm) * self.weight


class Attention(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.head_dim
        self.qkv = nn.Linear(cfg.model_dim, 3 * cfg.model_dim)
        self.proj = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.q_norm = RMSNorm(cfg.head_dim)
        self.k_norm = RMSNorm(cfg.head_dim)

    def forward(self, x, rope, mask):
        b, t, _ = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        q, k = self.q_norm(q), self.k_norm(k)
        if rope is not None:
            cos, sin = rope
            q = apply_rope(q, cos, sin)
            k = apply_rope(k, cos, sin)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.proj(out.transpose(1, 2).reshape(b, t, -1))


class Block(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        dim = cfg.model_dim
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn = Attention(cfg)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim)
        )
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def forward(self, x, c, rope, mask):
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(c)[:, None].chunk(6, dim=-1)
        h = self.norm1(x) * (1 + sc1) + sh1
        x = x + g1 * self.attn(h, rope, mask)
        h = self.norm2(x) * (1 + sc2) + sh2
        return x + g2 * self.mlp(h)


# ---------------------------------------------------------------------------
# the denoiser


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        dim = cfg.model_dim
        c = cfg.channels
        patch_in = cfg.patch * cfg.patch * c
        self.patch_embed = nn.Linear(patch_in, dim)
        if cfg.variant == "channel_wise":
            stacked = (cfg.m_history + 2) * c  # history slots + spatial + target
            self.stack_embed = nn.Linear(cfg.patch * cfg.patch * stacked, dim)
            self.null_spatial_channels = nn.Parameter(torch.zeros(c))
        else:
            self.null_spatial_token = nn.Parameter(torch.zeros(dim))
            self.null_text_token = nn.Parameter(torch.zeros(dim))
        self.null_pooled = nn.Parameter(torch.zeros(dim))
        self.text = TextEmbedder(dim=dim)
        self.t_mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.aug_mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.final_norm = nn.LayerNorm(dim, elementwise_affine=False)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))
        self.head = nn.Linear(dim, patch_in)
        nn.init.zeros_(self.final_ada[1].weight)
        nn.init.zeros_(self.final_ada[1].bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        grid = sincos_2d(dim, cfg.grid_h // cfg.patch, cfg.grid_w // cfg.patch)
        self.register_buffer("pos_table", grid, persistent=False)

    # -- slab <-> tokens ----------------------------------------------------

    def _patch_tokens(self, slab: torch.Tensor) -> torch.Tensor:
        """(B, h, w, C) -> (B, n_tok, patch*patch*C)."""
        b, h, w, c = slab.shape
        p = self.cfg.patch
        x = slab.reshape(b, h // p, p, w // p, p, c)
        return x.permute(0, 1, 3, 2, 4, 5).reshape(b, (h // p) * (w // p), p * p * c)

    def _unpatch(self, tokens: torch.Tensor) -> torch.Tensor:
        b, n, _ = tokens.shape
        p, c = self.cfg.patch, self.cfg.channels
        gh, gw = self.cfg.grid_h // p, self.cfg.grid_w // p
        x = tokens.reshape(b, gh, gw, p, p, c)
        return x.permute(0, 1, 3, 2, 4, 5).reshape(b, self.cfg.grid_h, self.cfg.grid_w, c)

    def _embed_slab(self, slab: torch.Tensor) -> torch.Tensor:
        return self.patch_embed(self._patch_tokens(slab)) + self.pos_table[None]

    def _to_velocity(self, xhat, z_t, t):
        # The net predicts the clean slab; the velocity derives analytically,
        # so the -noise component of (x1 - noise) bypasses the token
        # bottleneck (model_dim < patch content dims).  The denominator clamp
        # supports samplers up to 64 Euler steps.
        denom = (1.0 - t).clamp(min=1.0 / 64).view(-1, 1, 1, 1).to(z_t.dtype)
        return (xhat - z_t) / denom

    # -- forward ------------------------------------------------------------

    def forward(self, z_t, t, cond, return_condition_tokens: bool = False):
        """Predict the target velocity.

        z_t: (B, h, w, C) noised target slab; t: (B,) flow times;
        cond: a BatchedConditions built by :func:`collate_conditions`.
        """
        if z_t.shape[1:] != (self.cfg.grid_h, self.cfg.grid_w, self.cfg.channels):
            raise ShapeError(
                f"target slab {tuple(z_t.shape[1:])} does not match config "
                f"({self.cfg.grid_h}, {self.cfg.grid_w}, {self.cfg.channels})"
            )
        pooled = self._pooled_text(cond)
        t = torch.as_tensor(t).reshape(-1)
        c_vec = self.t_mlp(timestep_embedding(t, self.cfg.model_dim)) + pooled
        if self.cfg.variant == "channel_wise":
            if cond.aug_strength is not None:
                c_vec = c_vec + self.aug_mlp(
                    timestep_embedding(cond.aug_strength, self.cfg.model_dim)
                )
            return self._forward_channel_wise(z_t, t, c_vec, cond)
        return self._forward_token_wise(z_t, t, c_vec, cond, return_condition_tokens)

    def _pooled_text(self, cond):
        b = len(cond.captions)
        reals = [c for c, dropped in zip(cond.captions, cond.text_dropped)
                 if c is not None and not dropped]
        pooled = self.null_pooled.expand(b, -1).clone()
        if reals:
            _, _, p = self.text.embed_batch(reals)
            j = 0
            rows = []
            for c, dropped in zip(cond.captions, cond.text_dropped):
                if c is not None and not dropped:
                    rows.append(p[j])
                    j += 1
                else:
                    rows.append(self.null_pooled)
            pooled = torch.stack(rows)
        return pooled

    def _forward_token_wise(self, z_t, t, c_vec, cond, return_condition_tokens):
        b = z_t.shape[0]
        n = self.cfg.tokens_per_chunk
        blocks = []
        positions = []
        # history chunks, ascending
        for slab, pos in zip(cond.history_slabs, cond.history_positions):
            blocks.append(self._embed_slab(slab))
            positions.append(torch.full((n,), float(pos)))
        # spatial condition (always one block; null when absent/dropped)
        sp = self._embed_slab(cond.spatial_slab) if cond.spatial_slab is not None \
            else self.null_spatial_token.expand(b, n, -1)
        rows = []
        for i in range(b):
            use_null = cond.spatial_dropped[i] or cond.spatial_slab is None
            rows.append(self.null_spatial_token.expand(n, -1) if use_null else sp[i])
        blocks.append(torch.stack(rows))
        positions.append(torch.full((n,), -1.0))
        # text tokens
        text_tokens, text_mask = self._text_tokens(cond)
        blocks.append(text_tokens)
        positions.append(torch.zeros(text_tokens.shape[1]))
        n_cond = sum(blk.shape[1] for blk in blocks)
        # noised target
        blocks.append(self._embed_slab(z_t))
        positions.append(torch.full((n,), float(cond.target_position)))

        x = torch.cat(blocks, dim=1)
        total = x.shape[1]
        pos = torch.cat(positions)
        rope = _rope_angles(pos, self.cfg.head_dim)
        rope = (rope[0][None, None], rope[1][None, None])

        # conditions attend to conditions; targets attend to everything;
        # padded text positions are masked out as keys for every query.
        key_ok = torch.ones(b, total, dtype=torch.bool)
        t_start = n_cond - text_tokens.shape[1]
        key_ok[:, t_start:n_cond] = text_mask
        mask = key_ok[:, None, None, :].expand(b, 1, total, total).clone()
        mask[:, :, :n_cond, n_cond:] = False

        for blk in self.blocks:
            x = blk(x, c_vec, rope, mask)
        if return_condition_tokens:
            return x[:, :n_cond]
        sh, sc = self.final_ada(c_vec)[:, None].chunk(2, dim=-1)
        out = self.head(self.final_norm(x[:, n_cond:]) * (1 + sc) + sh)
        return self._to_velocity(self._unpatch(out), z_t, t)

    def _text_tokens(self, cond):
        b = len(cond.captions)
        length = MAX_CAPTION_TOKENS
        reals = [c for c, dropped in zip(cond.captions, cond.text_dropped)
                 if c is not None and not dropped]
        tokens = self.null_text_token.expand(b, length, -1).clone()
        mask = torch.ones(b, length, dtype=torch.bool)
        if reals:
            emb, m, _ = self.text.embed_batch(reals, length=length)
            j = 0
            for i, (c, dropped) in enumerate(zip(cond.captions, cond.text_dropped)):
                if c is not None and not dropped:
                    tokens[i] = emb[j]
                    mask[i] = m[j]
                    j += 1
        return tokens, mask

    def _forward_channel_wise(self, z_t, t, c_vec, cond):
        b, h, w, c = z_t.shape
        slots = []
        hist = list(zip(cond.history_slabs, cond.history_positions))
        # right-align by recency into m_history fixed slots
        stack = [torch.zeros(b, h, w, c)] * (self.cfg.m_history - len(hist))
        stack += [slab for slab, _ in hist]
        sp_rows = []
        for i in range(b):
            if cond.spatial_dropped[i] or cond.spatial_slab is None:
                sp_rows.append(self.null_spatial_channels.expand(h, w, -1))
            else:
                sp_rows.append(cond.spatial_slab[i])
        stack.append(torch.stack(sp_rows))
        stack.append(z_t)
        x = torch.cat(stack, dim=-1)
        tokens = self.stack_embed(self._patch_tokens(x)) + self.pos_table[None]
        for blk in self.blocks:
            tokens = blk(tokens, c_vec, None, None)
        sh, sc = self.final_ada(c_vec)[:, None].chunk(2, dim=-1)
        out = self.head(self.final_norm(tokens) * (1 + sc) + sh)
        return self._to_velocity(self._unpatch(out), z_t, t)

    def config_dict(self) -> dict:
        return asdict(self.cfg)
