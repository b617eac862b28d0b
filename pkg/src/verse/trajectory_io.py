"""On-disk trajectory format.

A trajectory directory holds ``manifest.json`` plus one flat little-endian
binary file ``frames.bin``; each frame record is::

    index  u32
    rgb    H*W*3 f32
    depth  H*W   f32
    pose   12    f32   (row-major rotation then translation)

Memory pools reuse the same layout and stash full-precision poses and the
per-window scale records as extra manifest keys, so a pool reload is
bit-exact while plain trajectory readers can ignore the extras.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ShapeError
from .geometry import (
    CameraPose,
    DepthMode,
    Intrinsics,
    SceneScale,
    orthonormalize,
    raymap_from_camera,
)
from .state_memory import CompositeState, MemoryPool

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
FRAMES = "frames.bin"


def _intrinsics_dict(intr: Intrinsics) -> dict:
    return {
        "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
        "width": intr.width, "height": intr.height,
    }


def _intrinsics_from(d: dict) -> Intrinsics:
    return Intrinsics(
        fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
        width=int(d["width"]), height=int(d["height"]),
    )


def frame_record_bytes(width: int, height: int) -> int:
    return 4 + (height * width * 3 + height * width + 12) * 4


def _encode_frame(state: CompositeState) -> bytes:
    h, w = state.shape
    parts = [np.array([state.index], dtype="<u4").tobytes()]
    parts.append(np.ascontiguousarray(state.rgb, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(state.depth, dtype="<f4").tobytes())
    pose12 = np.concatenate([state.pose.rotation.reshape(9), state.pose.center])
    parts.append(pose12.astype("<f4").tobytes())
    return b"".join(parts)


def _decode_frame(buf: bytes, offset: int, width: int, height: int):
    idx = int(np.frombuffer(buf, dtype="<u4", count=1, offset=offset)[0])
    offset += 4
    n_rgb = height * width * 3
    rgb = np.frombuffer(buf, dtype="<f4", count=n_rgb, offset=offset).reshape(height, width, 3)
    offset += n_rgb * 4
    n_d = height * width
    depth = np.frombuffer(buf, dtype="<f4", count=n_d, offset=offset).reshape(height, width)
    offset += n_d * 4
    pose12 = np.frombuffer(buf, dtype="<f4", count=12, offset=offset).astype(np.float64)
    offset += 48
    return idx, rgb.copy(), depth.copy(), pose12, offset


def save_trajectory(
    path,
    states,
    intrinsics: Intrinsics,
    scene_seed: int | None = None,
    extras: dict | None = None,
) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    states = list(states)
    manifest = {
        "format_version": FORMAT_VERSION,
        "scene_seed": scene_seed,
        "intrinsics": _intrinsics_dict(intrinsics),
        "frame_count": len(states),
    }
    if extras:
        manifest.update(extras)
    with open(path / FRAMES, "wb") as f:
        for s in states:
            f.write(_encode_frame(s))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_trajectory(path):
    """Returns (states, intrinsics, manifest).  Poses come from the f32 records
    (re-orthonormalized) unless the manifest carries full-precision extras."""
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    if manifest["format_version"] != FORMAT_VERSION:
        raise ShapeError(f"unsupported trajectory format {manifest['format_version']}")
    intr = _intrinsics_from(manifest["intrinsics"])
    buf = (path / FRAMES).read_bytes()
    expected = manifest["frame_count"] * frame_record_bytes(intr.width, intr.height)
    if len(buf) != expected:
        raise ShapeError(f"frames.bin has {len(buf)} bytes, expected {expected}")
    poses_f64 = manifest.get("poses_f64")
    states = []
    offset = 0
    for i in range(manifest["frame_count"]):
        idx, rgb, depth, pose12, offset = _decode_frame(buf, offset, intr.width, intr.height)
        if poses_f64 is not None:
            arr = np.asarray(poses_f64[i], dtype=np.float64)
            pose = CameraPose(arr[:9].reshape(3, 3), arr[9:])
        else:
            pose = CameraPose(orthonormalize(pose12[:9].reshape(3, 3)), pose12[9:])
        states.append(
            CompositeState(
                rgb=rgb, depth=depth, raymap=raymap_from_camera(pose, intr),
                index=idx, pose=pose, intrinsics=intr,
            )
        )
    return states, intr, manifest


def save_pool(path, pool: MemoryPool, intrinsics: Intrinsics,
              scene_seed: int | None = None, extras: dict | None = None) -> None:
    all_extras = {
        "poses_f64": [
            list(np.concatenate([s.pose.rotation.reshape(9), s.pose.center]))
            for s in pool.states
        ],
        "window_scales": [
            {"d_max": sc.d_max, "lam": sc.lam, "mode": sc.mode.value}
            for sc in pool.window_scales
        ],
    }
    if extras:
        all_extras.update(extras)
    save_trajectory(path, pool.states, intrinsics, scene_seed=scene_seed, extras=all_extras)


def load_pool(path):
    """Returns (pool, intrinsics, manifest); bit-exact against :func:`save_pool`."""
    states, intr, manifest = load_trajectory(path)
    pool = MemoryPool()
    pool.append(states)
    for sc in manifest.get("window_scales", []):
        pool._window_scales.append(
            SceneScale(d_max=sc["d_max"], lam=sc["lam"], mode=DepthMode(sc["mode"]))
        )
    return pool, intr, manifest
