"""Training loop: autoregressive next-chunk prediction plus first-state completion."""

from __future__ import annotations

import logging

import numpy as np
import torch

from ..dataset import TrainingSample
from ..latent_codec import CodecConfig, chunk_to_slab, encode_sample, pool_raymap
from ..geometry import raymap_from_camera
from .flow import ConditionSet, apply_condition_dropout, collate_conditions, flow_loss
from .network import Denoiser, DenoiserConfig
from .checkpoint import load_tensors, save_tensors

log = logging.getLogger(__name__)


def sample_to_slabs(sample: TrainingSample, codec_cfg: CodecConfig,
                    depth_modality: bool = True) -> list:
    chunks = encode_sample(sample, codec_cfg)
    return [chunk_to_slab(c, depth_modality=depth_modality) for c in chunks]


def spatial_to_slab(spatial, intrinsics, codec_cfg: CodecConfig,
                    depth_modality: bool = True) -> np.ndarray:
    """Encode a retrieved historical state as a single-keyframe slab."""
    from ..latent_codec import chunk_encode

    rgb = spatial.rgb[None]
    dep = spatial.depth_code[None]
    rm = {0: raymap_from_camera(spatial.pose, intrinsics)}
    chunk = chunk_encode(rgb, dep, rm, codec_cfg)[0]
    return chunk_to_slab(chunk, depth_modality=depth_modality)


def build_condition(slabs, j: int, caption, spatial_slab=None,
                    m_history: int = 7) -> ConditionSet:
    """Condition for predicting chunk j from chunks [max(0, j-m) .. j-1]."""
    lo = max(0, j - m_history)
    return ConditionSet(
        history_slabs=tuple(slabs[lo:j]),
        history_positions=tuple(range(lo, j)),
        spatial_slab=spatial_slab,
        caption=caption,
        target_position=j,
    )


def _sample_times(rng: np.random.Generator, n: int,
                  s_min: float = 0.1, s_max: float = 0.999) -> np.ndarray:
    """Flow times with density proportional to (1 - t)^2.

    The velocity MSE carries an implicit 1/(1-t)^2 weight under the clean-slab
    parametrization; this sampling cancels it so every t gets equal gradient
    pressure - in particular the near-noise regime that sampling starts from.
    The cap s_min on (1 - t) keeps the objective well conditioned.
    """
    u = rng.uniform(0.0, 1.0, size=n)
    s = (s_min**3 + (s_max**3 - s_min**3) * u) ** (1.0 / 3.0)
    return 1.0 - s


def image_channel_slice(cfg: DenoiserConfig) -> slice:
    return slice(0, cfg.c_v)


def geometry_channel_slice(cfg: DenoiserConfig) -> slice:
    return slice(cfg.c_v, cfg.channels)


class TrainState:
    def __init__(self, model: Denoiser, lr: float = 1e-3, weight_decay: float = 0.0,
                 decay_steps: int | None = None):
        self.model = model
        self.opt = torch.optim.AdamW(model.parameters(), lr=lr,
                                     weight_decay=weight_decay)
        # cosine annealing keeps late overfit training from thrashing
        self.scheduler = (
            torch.optim.lr_scheduler.CosineAnnealingLR(
                self.opt, T_max=decay_steps, eta_min=lr * 0.05)
            if decay_steps else None
        )
        self.losses: list[float] = []


def train_step(
    state: TrainState,
    samples: list,
    codec_cfg: CodecConfig,
    rng: np.random.Generator,
    torch_gen: torch.Generator,
    batch_size: int = 4,
    p_text: float = 0.1,
    p_spatial: float = 0.5,
    slab_cache: dict | None = None,
) -> float:
    model = state.model
    cfg = model.cfg
    j = int(rng.integers(0, 8))
    conds, targets = [], []
    aug_strength = None
    if cfg.variant == "channel_wise" and cfg.cond_aug_max > 0:
        aug_strength = float(rng.uniform(0.0, cfg.cond_aug_max))
    for _ in range(batch_size):
        si = int(rng.integers(len(samples)))
        sample = samples[si]
        if slab_cache is not None and si in slab_cache:
            slabs = slab_cache[si]
        else:
            slabs = sample_to_slabs(sample, codec_cfg, cfg.depth_modality)
            if slab_cache is not None:
                slab_cache[si] = slabs
        spatial_slab = None
        if sample.spatial is not None:
            spatial_slab = spatial_to_slab(
                sample.spatial, sample.intrinsics, codec_cfg, cfg.depth_modality
            )
        hist = [np.asarray(s) for s in slabs]
        if aug_strength is not None:
            hist = [
                s + aug_strength * rng.standard_normal(s.shape) for s in hist
            ]
        cond = build_condition(hist, j, sample.caption, spatial_slab, cfg.m_history)
        cond = apply_condition_dropout(cond, p_text, p_spatial, rng)
        conds.append(cond)
        targets.append(slabs[j])
    batched = collate_conditions(conds)
    if aug_strength is not None:
        batched.aug_strength = torch.full((batch_size,), aug_strength)
    x1 = torch.as_tensor(np.stack(targets), dtype=torch.float32)
    noise = torch.randn(x1.shape, generator=torch_gen)
    t = torch.as_tensor(_sample_times(rng, batch_size), dtype=torch.float32)
    if j == 0:
        # first-state completion: image channels stay clean, geometry is scored
        loss = flow_loss(model, x1, batched, t, noise,
                         loss_channels=geometry_channel_slice(cfg),
                         clean_channels=image_channel_slice(cfg))
    else:
        loss = flow_loss(model, x1, batched, t, noise)
    state.opt.zero_grad()
    loss.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
    state.opt.step()
    if state.scheduler is not None:
        state.scheduler.step()
    val = float(loss.detach())
    state.losses.append(val)
    return val


def train_generator(
    model: Denoiser,
    samples: list,
    steps: int,
    codec_cfg: CodecConfig = CodecConfig(),
    batch_size: int = 4,
    lr: float = 1e-3,
    seed: int = 0,
    p_text: float = 0.1,
    p_spatial: float = 0.5,
    stop_below: float | None = None,
    log_every: int = 100,
) -> TrainState:
    """Optimize on fixed samples; optionally early-stop when the smoothed loss
    falls below ``stop_below`` times the initial smoothed loss."""
    state = TrainState(model, lr=lr, decay_steps=steps)
    rng = np.random.default_rng(seed)
    torch_gen = torch.Generator().manual_seed(seed)
    cache: dict = {}
    initial = None
    window = 25
    for step in range(steps):
        train_step(state, samples, codec_cfg, rng, torch_gen,
                   batch_size=batch_size, p_text=p_text, p_spatial=p_spatial,
                   slab_cache=cache)
        if len(state.losses) == window and initial is None:
            initial = float(np.mean(state.losses[:window]))
        if log_every and step % log_every == 0:
            log.info("step %d loss %.5f", step, state.losses[-1])
        if (
            stop_below is not None
            and initial is not None
            and len(state.losses) >= 2 * window
            and float(np.mean(state.losses[-window:])) < stop_below * initial
        ):
            log.info("early stop at step %d", step)
            break
    return state


# ---------------------------------------------------------------------------
# persistence


def save_generator(path, model: Denoiser, extra_config: dict | None = None) -> None:
    config = {"denoiser": model.config_dict()}
    if extra_config:
        config.update(extra_config)
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    save_tensors(path, config, tensors)


def load_generator(path) -> Denoiser:
    config, tensors = load_tensors(path)
    model = Denoiser(DenoiserConfig(**config["denoiser"]))
    sd = {k: torch.as_tensor(v) for k, v in tensors.items()}
    model.load_state_dict(sd)
    return model
