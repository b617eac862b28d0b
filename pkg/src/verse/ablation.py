"""Ablation harnesses: depth-modality on/off trend and architecture comparison.

Runs the whole train -> rollout -> drift pipeline at a reduced benchmark scale
so both studies complete on a CPU in minutes.  The depth study is an ordinal
check (does the depth-equipped model drift less at the longest horizon); the
architecture study's deliverable is the pair of drift reports themselves.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import candidate_starts, ClipFilterConfig, preprocess_clip, render_split
from .generator import Denoiser, DenoiserConfig, GuidanceScales, train_generator
from .geometry import CameraPose, raymap_from_camera
from .inference_engine import (
    DriftReport,
    EngineConfig,
    ModelBackend,
    OracleBackend,
    Session,
    evaluate_drift,
)
from .latent_codec import CodecConfig
from .state_memory import CompositeState
from .world_oracle import (
    default_intrinsics,
    make_scene,
    make_trajectory,
    rollout,
    wander_actions,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchmarkConfig:
    """Overfit-scale benchmark: small frames, small model, short training.

    Guidance is left at 1 (pure conditional sampling): drift comparisons
    measure the learned model, and CFG extrapolation on a briefly trained
    net adds variance without changing the ordering question.
    """

    width: int = 32
    height: int = 24
    scene_seed: int = 11
    n_clips: int = 8
    train_steps: int = 2000
    batch_size: int = 4
    lr: float = 2e-3
    layers: int = 2
    model_dim: int = 64
    heads: int = 2
    sampler_steps: int = 8
    horizon: int = 128
    eval_action_seed: int = 101
    guidance_text: float = 1.0
    guidance_spatial: float = 1.0


def benchmark_scene(seed: int):
    """Enclosed corridor: depth is bounded by geometry everywhere, so the
    frame-0 depth extremum genuinely anchors the scene scale (no open sky)."""
    from .world_oracle import Box, CheckerPlane, SceneSpec, make_scene

    rng = np.random.default_rng(seed)
    prims = [
        CheckerPlane(height=1.6, cell=1.2,
                     albedo_a=np.array([0.85, 0.85, 0.8]),
                     albedo_b=np.array([0.2, 0.25, 0.3]),
                     extent=(-4.0, 4.0, -4.0, 40.0)),
        # side walls, ceiling, far wall
        Box(lo=np.array([-4.5, -3.0, -4.0]), hi=np.array([-3.0, 2.0, 40.0]),
            albedo=np.array([0.75, 0.45, 0.35])),
        Box(lo=np.array([3.0, -3.0, -4.0]), hi=np.array([4.5, 2.0, 40.0]),
            albedo=np.array([0.35, 0.5, 0.75])),
        Box(lo=np.array([-4.5, -3.2, -4.0]), hi=np.array([4.5, -2.6, 40.0]),
            albedo=np.array([0.8, 0.8, 0.85])),
        Box(lo=np.array([-4.5, -3.0, 22.0]), hi=np.array([4.5, 2.0, 24.0]),
            albedo=np.array([0.7, 0.7, 0.4])),
        Box(lo=np.array([-4.5, -3.0, -6.0]), hi=np.array([4.5, 2.0, -4.5]),
            albedo=np.array([0.5, 0.65, 0.5])),
    ]
    for k in range(6):
        z = 2.0 + k * 3.3
        side = -1.8 if k % 2 == 0 else 1.8
        prims.append(
            type(prims[1])(  # Box
                lo=np.array([side - 0.5, float(rng.uniform(0.2, 0.9)), z]),
                hi=np.array([side + 0.5, 1.6, z + 1.0]),
                albedo=rng.uniform(0.25, 0.95, size=3),
            )
        )
    return SceneSpec(
        seed=seed, primitives=tuple(prims),
        background=np.array([0.1, 0.1, 0.12]),
        bounds=np.array([[-5.0, -4.0, -6.0], [5.0, 2.0, 40.0]]),
        far=30.0,
    )


def benchmark_trajectory(bench: BenchmarkConfig):
    """Wander policy inside the corridor scene."""
    from .geometry import CameraPose
    from .world_oracle import Trajectory, apply_action, wander_actions

    scene = benchmark_scene(bench.scene_seed)
    rng = np.random.default_rng(bench.scene_seed + 1)
    actions = tuple(wander_actions(rng, 339, step=0.18))
    pose0 = CameraPose(np.eye(3), np.zeros(3))
    poses = [pose0]
    for a in actions:
        poses.append(apply_action(poses[-1], a))
    intr = default_intrinsics(bench.width, bench.height)
    return Trajectory(scene=scene, poses=tuple(poses), intrinsics=intr, actions=actions)


def benchmark_data(bench: BenchmarkConfig):
    """Training clips plus a held-in evaluation trajectory on the same scene."""
    traj = benchmark_trajectory(bench)
    states = render_split(traj)
    starts = candidate_starts(traj, 57, ClipFilterConfig())
    if not starts:
        raise RuntimeError("benchmark trajectory produced no accepted clips")
    rng = np.random.default_rng(bench.scene_seed)
    picks = rng.choice(len(starts), size=min(bench.n_clips, len(starts)), replace=False)
    samples = [
        preprocess_clip(states[starts[i] : starts[i] + 57]) for i in sorted(picks)
    ]
    return traj, samples


def eval_actions(bench: BenchmarkConfig):
    """Forward-dominant S-curve with real net displacement.

    Actions come in chunk-aligned blocks so every chunk's motion is visible
    to the caption channel ("move forward" / "turn left slightly"); a path
    that actually leaves the start also makes scale drift visible, which a
    looping wander would mask.
    """
    from .world_oracle import Action, ActionKind

    rng = np.random.default_rng(bench.eval_action_seed)
    turn_chunks = {4: ActionKind.TURN_LEFT, 9: ActionKind.TURN_RIGHT,
                   14: ActionKind.TURN_LEFT}
    actions = []
    for chunk in range((bench.horizon + 7) // 8):
        if chunk in turn_chunks:
            actions.extend(Action(turn_chunks[chunk], math.radians(2.0))
                           for _ in range(8))
        else:
            actions.extend(Action(ActionKind.FORWARD, float(rng.uniform(0.1, 0.15)))
                           for _ in range(8))
    return actions[: bench.horizon]


def oracle_reference(scene, intr, pose0, actions):
    states = rollout(scene, pose0, intr, actions)
    out = []
    for s in states:
        rel = CameraPose(
            pose0.rotation.T @ s.pose.rotation,
            pose0.rotation.T @ (s.pose.center - pose0.center),
        )
        out.append(
            CompositeState(
                rgb=s.rgb, depth=s.depth, raymap=raymap_from_camera(rel, intr),
                index=s.index, pose=rel, intrinsics=intr,
            )
        )
    return out


def train_benchmark_model(samples, bench: BenchmarkConfig, seed: int,
                          variant: str = "token_wise",
                          depth_modality: bool = True) -> Denoiser:
    torch.manual_seed(seed)
    cfg = DenoiserConfig(
        layers=bench.layers, model_dim=bench.model_dim, heads=bench.heads,
        variant=variant, depth_modality=depth_modality,
        grid_h=bench.height // 2, grid_w=bench.width // 2,
    )
    model = Denoiser(cfg)
    train_generator(model, samples, steps=bench.train_steps,
                    batch_size=bench.batch_size, lr=bench.lr, seed=seed,
                    log_every=0)
    return model


def rollout_drift(model, bench: BenchmarkConfig, seed: int,
                  horizons=(32, 64, 96, 128)) -> DriftReport:
    """Roll the trained model from the oracle's first frame and score drift.

    The first state is teacher-initialized so pose drift measures generation
    quality rather than single-image scale ambiguity.
    """
    scene = benchmark_scene(bench.scene_seed)
    intr = default_intrinsics(bench.width, bench.height)
    actions = eval_actions(bench)
    reference = oracle_reference(scene, intr, CameraPose.identity(), actions)
    backend = ModelBackend(
        model, codec=CodecConfig(), steps=bench.sampler_steps,
        scales=GuidanceScales(bench.guidance_text, bench.guidance_spatial),
    )
    session = Session(
        backend, intr, cfg=EngineConfig(sampler_steps=bench.sampler_steps),
        seed=seed, first_state=reference[0],
    )
    generated = [reference[0]]
    for a in actions:
        generated.extend(session.step(a))
    session.flush()
    n = min(len(generated), len(reference))
    return evaluate_drift(generated[:n], reference[:n], horizons=horizons)


@dataclass
class DepthAblationResult:
    per_seed: list = field(default_factory=list)  # (seed, drift_on, drift_off)
    median_on: float = 0.0
    median_off: float = 0.0

    @property
    def depth_wins(self) -> bool:
        return self.median_on <= self.median_off

    def to_dict(self) -> dict:
        return {
            "per_seed": [
                {"seed": s, "drift_with_depth": on, "drift_without_depth": off}
                for s, on, off in self.per_seed
            ],
            "median_with_depth": self.median_on,
            "median_without_depth": self.median_off,
            "depth_wins": self.depth_wins,
        }


def depth_ablation(seeds=(0, 1, 2, 3, 4), bench: BenchmarkConfig = BenchmarkConfig()) -> DepthAblationResult:
    """Median-over-seeds translation drift at the longest horizon, depth on vs off."""
    _, samples = benchmark_data(bench)
    result = DepthAblationResult()
    for seed in seeds:
        drifts = {}
        for depth in (True, False):
            model = train_benchmark_model(samples, bench, seed, depth_modality=depth)
            report = rollout_drift(model, bench, seed)
            drifts[depth] = report.rows[-1].translation_err
            log.info("seed %d depth=%s drift@%d %.4f", seed, depth,
                     report.rows[-1].horizon, drifts[depth])
        result.per_seed.append((seed, drifts[True], drifts[False]))
    result.median_on = float(np.median([r[1] for r in result.per_seed]))
    result.median_off = float(np.median([r[2] for r in result.per_seed]))
    return result


def arch_ablation(bench: BenchmarkConfig = BenchmarkConfig(), seed: int = 0) -> dict:
    """Drift reports for both history-injection variants at {32,64,96,128}."""
    _, samples = benchmark_data(bench)
    reports = {}
    for variant in ("token_wise", "channel_wise"):
        model = train_benchmark_model(samples, bench, seed, variant=variant)
        reports[variant] = rollout_drift(model, bench, seed)
    return reports
