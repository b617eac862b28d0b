"""versectl: data generation, filtering, captions, training, rollout, eval, serve."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("versectl")


def _cmd_gen_data(args):
    from .dataset import render_split
    from .trajectory_io import save_trajectory
    from .world_oracle import make_trajectory

    traj = make_trajectory(args.seed, args.frames, width=args.width, height=args.height)
    states = render_split(traj)
    save_trajectory(args.out, states, traj.intrinsics, scene_seed=args.seed)
    print(f"wrote {len(states)} frames to {args.out}")


def _cmd_filter(args):
    from .dataset import ClipFilterConfig, filter_clip
    from .trajectory_io import load_trajectory

    states, _, _ = load_trajectory(args.inp)
    poses = [s.pose for s in states]
    cfg = ClipFilterConfig(
        delta_rot=math.radians(args.rot_deg), delta_move=args.move,
        per_chunk=args.per_chunk,
    )
    res = filter_clip(poses, cfg)
    verdict = "accept" if res.accepted else f"reject({res.reason})"
    print(f"{verdict} rotation={math.degrees(res.rotation):.2f}deg "
          f"path={res.path_length:.3f}")
    return 0 if res.accepted else 1


def _cmd_caption(args):
    from .dataset import caption_from_motion
    from .geometry import pose_delta
    from .trajectory_io import load_trajectory

    states, _, _ = load_trajectory(args.inp)
    deltas = [pose_delta(a.pose, b.pose) for a, b in zip(states[:-1], states[1:])]
    print(caption_from_motion(deltas).text)


def _cmd_train(args):
    import torch

    from .dataset import ClipFilterConfig, make_batches
    from .generator import Denoiser, DenoiserConfig, save_generator, train_generator
    from .trajectory_io import load_trajectory
    from .world_oracle import Trajectory, make_scene

    logging.basicConfig(level=logging.INFO)
    states, intr, manifest = load_trajectory(args.data)
    # slice the stored trajectory into accepted clips
    from .dataset import candidate_starts, preprocess_clip

    poses = [s.pose for s in states]
    scene = make_scene(manifest.get("scene_seed") or 0)
    traj = Trajectory(scene=scene, poses=tuple(poses), intrinsics=intr,
                      actions=tuple([None] * (len(poses) - 1)))
    starts = candidate_starts(traj, 57, ClipFilterConfig())
    if not starts:
        print("no clip passes the filter", file=sys.stderr)
        return 1
    rng = np.random.default_rng(args.seed)
    picks = rng.choice(len(starts), size=min(args.clips, len(starts)), replace=False)
    samples = [preprocess_clip(states[starts[i] : starts[i] + 57]) for i in sorted(picks)]
    torch.manual_seed(args.seed)
    cfg = DenoiserConfig(
        layers=args.layers, model_dim=args.dim, heads=args.heads,
        variant=args.variant, depth_modality=not args.no_depth,
        grid_h=intr.height // 2, grid_w=intr.width // 2,
    )
    model = Denoiser(cfg)
    state = train_generator(model, samples, steps=args.steps, lr=args.lr,
                            batch_size=args.batch, seed=args.seed)
    save_generator(args.ckpt, model)
    print(f"trained {len(state.losses)} steps, "
          f"loss {state.losses[0]:.4f} -> {state.losses[-1]:.4f}, saved {args.ckpt}")


def _cmd_rollout(args):
    from .generator import load_generator
    from .inference_engine import (
        EngineConfig, ModelBackend, OracleBackend, Session, evaluate_drift,
    )
    from .state_memory import MemoryPool
    from .trajectory_io import save_pool
    from .world_oracle import Action, default_intrinsics, make_scene

    intr = default_intrinsics(args.width, args.height)
    scene = make_scene(args.scene_seed)
    actions = [
        Action(a["kind"], a.get("magnitude", 0.25))
        for a in json.loads(Path(args.actions).read_text())
    ]
    if args.oracle:
        backend = OracleBackend(scene, intr)
        session = Session(backend, intr, cfg=EngineConfig(), seed=args.seed)
    else:
        model = load_generator(args.ckpt)
        backend = ModelBackend(model, steps=args.sampler_steps)
        from .geometry import CameraPose
        from .world_oracle import render

        v0, _ = render(scene, CameraPose.identity(), intr)
        session = Session(backend, intr, cfg=EngineConfig(), seed=args.seed, v0=v0)
    emitted = [session.memory.state(0)]
    for a in actions:
        if session.windows_done >= args.windows:
            break
        emitted.extend(session.step(a))
    session.flush()
    out = Path(args.out)
    pool = MemoryPool()
    pool.append(emitted)
    save_pool(out / "trajectory", pool, intr, scene_seed=args.scene_seed)
    # drift vs the oracle on the same action list
    from .ablation import oracle_reference
    from .geometry import CameraPose

    reference = oracle_reference(scene, intr, CameraPose.identity(), actions)
    n = min(len(emitted), len(reference))
    horizons = tuple(h for h in (32, 64, 96, 128) if h < n) or (n - 1,)
    report = evaluate_drift(emitted[:n], reference[:n], horizons=horizons)
    (out / "drift.txt").write_text(report.to_text())
    (out / "drift.json").write_text(json.dumps(report.to_dict(), indent=1))
    print(report.to_text())


def _cmd_eval(args):
    from .ablation import BenchmarkConfig, arch_ablation, depth_ablation

    logging.basicConfig(level=logging.INFO)
    bench = BenchmarkConfig(train_steps=args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.ablate == "depth":
        result = depth_ablation(seeds=tuple(range(args.seeds)), bench=bench)
        (out / "depth_ablation.json").write_text(json.dumps(result.to_dict(), indent=1))
        print(json.dumps(result.to_dict(), indent=1))
    else:
        reports = arch_ablation(bench=bench)
        for variant, rep in reports.items():
            (out / f"arch_{variant}.txt").write_text(rep.to_text())
            print(f"== {variant}\n{rep.to_text()}")


def _cmd_serve(args):
    import uvicorn

    from .service_api import create_app

    host, port = args.addr.rsplit(":", 1)
    app = create_app(args.data, checkpoint=args.ckpt, ui_dir=args.ui)
    uvicorn.run(app, host=host, port=int(port))


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="versectl")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="render a procedural trajectory to disk")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--frames", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=48)
    g.set_defaults(fn=_cmd_gen_data)

    f = sub.add_parser("filter", help="accept/reject a stored trajectory as a clip")
    f.add_argument("--in", dest="inp", required=True)
    f.add_argument("--rot-deg", type=float, default=90.0)
    f.add_argument("--move", type=float, default=0.5)
    f.add_argument("--per-chunk", action="store_true")
    f.set_defaults(fn=_cmd_filter)

    c = sub.add_parser("caption", help="motion caption for a stored trajectory")
    c.add_argument("--in", dest="inp", required=True)
    c.set_defaults(fn=_cmd_caption)

    t = sub.add_parser("train", help="train the denoiser on a stored trajectory")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", choices=("token_wise", "channel_wise"),
                   default="token_wise")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--ckpt", required=True)
    t.add_argument("--clips", type=int, default=32)
    t.add_argument("--layers", type=int, default=4)
    t.add_argument("--dim", type=int, default=128)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--lr", type=float, default=2e-3)
    t.add_argument("--batch", type=int, default=4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--no-depth", action="store_true")
    t.set_defaults(fn=_cmd_train)

    r = sub.add_parser("rollout", help="long-duration rollout, drift report")
    r.add_argument("--ckpt")
    r.add_argument("--oracle", action="store_true", help="teacher-forced backend")
    r.add_argument("--scene-seed", type=int, required=True)
    r.add_argument("--actions", required=True, help="JSON list of {kind, magnitude}")
    r.add_argument("--windows", type=int, default=5)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--width", type=int, default=64)
    r.add_argument("--height", type=int, default=48)
    r.add_argument("--sampler-steps", type=int, default=8)
    r.set_defaults(fn=_cmd_rollout)

    e = sub.add_parser("eval", help="ablation harnesses")
    e.add_argument("--ablate", choices=("depth", "arch"), required=True)
    e.add_argument("--out", default="eval_out")
    e.add_argument("--steps", type=int, default=2000)
    e.add_argument("--seeds", type=int, default=5)
    e.set_defaults(fn=_cmd_eval)

    import os

    s = sub.add_parser("serve", help="HTTP service")
    s.add_argument("--ckpt")
    s.add_argument("--data", default=os.environ.get("VERSE_DATA"),
                   required="VERSE_DATA" not in os.environ)
    s.add_argument("--addr", default=os.environ.get("VERSE_ADDR", "127.0.0.1:8000"))
    s.add_argument("--ui", help="static dir for the browser client")
    s.set_defaults(fn=_cmd_serve)

    args = p.parse_args(argv)
    ret = args.fn(args)
    return int(ret or 0)


if __name__ == "__main__":
    sys.exit(main())
