import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from verse.errors import ShapeError
from verse.geometry import (
    CameraPose,
    Raymap,
    camera_from_raymap,
    forward_angle,
    raymap_from_camera,
    rotation_about,
)
from verse.latent_codec import (
    CodecConfig,
    chunk_decode,
    chunk_encode,
    chunk_spans,
    chunk_to_slab,
    encode_sample,
    interpolate_raymaps,
    pool_raymap,
    slab_to_chunk,
)
from verse.world_oracle import default_intrinsics


def synthetic_clip(rng, t=57, h=16, w=16, motion=0.1):
    """Piecewise data + poses on a constant-velocity straight line."""
    rgb = rng.random((t, h, w, 3))
    depth = rng.uniform(0.1, 0.9, size=(t, h, w))
    intr = default_intrinsics(w, h)
    poses = [
        CameraPose(np.eye(3), np.array([motion * i, 0.0, 0.05 * i])) for i in range(t)
    ]
    rms = {i: raymap_from_camera(poses[i], intr) for i in range(t)}
    return rgb, depth, rms, poses, intr


def test_spans_arithmetic():
    spans = chunk_spans(57)
    assert spans == [(0, 0), (1, 8), (9, 16), (17, 24), (25, 32), (33, 40), (41, 48), (49, 56)]
    # spans partition 0..56
    covered = []
    for a, b in spans:
        covered.extend(range(a, b + 1))
    assert covered == list(range(57))
    with pytest.raises(ShapeError):
        chunk_spans(56)


def test_channel_accounting():
    cfg = CodecConfig()
    assert cfg.channels == 38
    rng = np.random.default_rng(0)
    rgb, depth, rms, _, _ = synthetic_clip(rng)
    chunks = chunk_encode(rgb, depth, rms, cfg)
    assert len(chunks) == 8
    assert all(c.channels == 38 for c in chunks)
    slab = chunk_to_slab(chunks[1], depth_modality=True)
    assert slab.shape[-1] == 38
    assert chunk_to_slab(chunks[1], depth_modality=False).shape[-1] == 22


def test_constant_video_identical_chunks():
    rng = np.random.default_rng(1)
    frame = rng.random((16, 16, 3))
    rgb = np.tile(frame, (57, 1, 1, 1))
    depth = np.full((57, 16, 16), 0.5)
    intr = default_intrinsics(16, 16)
    rm = raymap_from_camera(CameraPose.identity(), intr)
    chunks = chunk_encode(rgb, depth, {s[1]: rm for s in chunk_spans(57)})
    for c in chunks[2:]:
        np.testing.assert_array_equal(c.image_latent, chunks[1].image_latent)


def test_keyframes_round_trip_exactly():
    rng = np.random.default_rng(2)
    rgb, depth, rms, _, _ = synthetic_clip(rng)
    for mixing, tol in ((False, 0.0), (True, 1e-6)):
        cfg = CodecConfig(mixing=mixing)
        chunks = chunk_encode(rgb, depth, rms, cfg)
        dec = chunk_decode(chunks, cfg)
        for a, b in chunk_spans(57):
            if tol == 0.0:
                np.testing.assert_array_equal(dec.rgb[b], rgb[b])
                np.testing.assert_array_equal(dec.depth_code[b], depth[b])
            else:
                np.testing.assert_allclose(dec.rgb[b], rgb[b], atol=tol)
                np.testing.assert_allclose(dec.depth_code[b], depth[b], atol=tol)


def test_decode_round_trip_on_linear_content():
    # Content that is linear in time between keyframes is recovered exactly.
    t = 57
    rng = np.random.default_rng(3)
    base = rng.random((16, 16, 3))
    slope = rng.random((16, 16, 3)) * 0.01
    rgb = np.stack([base + i * slope for i in range(t)])
    depth = np.stack([np.full((16, 16), 0.3 + 0.005 * i) for i in range(t)])
    intr = default_intrinsics(16, 16)
    rm = raymap_from_camera(CameraPose.identity(), intr)
    cfg = CodecConfig()
    chunks = chunk_encode(rgb, depth, {s[1]: rm for s in chunk_spans(t)}, cfg)
    dec = chunk_decode(chunks, cfg)
    np.testing.assert_allclose(dec.rgb, rgb, atol=1e-9)
    np.testing.assert_allclose(dec.depth_code, depth, atol=1e-9)


def test_identical_keyframe_poses_constant_raymaps():
    rng = np.random.default_rng(4)
    rgb, depth, _, _, intr = synthetic_clip(rng)
    rm = raymap_from_camera(CameraPose.identity(), intr)
    chunks = chunk_encode(rgb, depth, {s[1]: rm for s in chunk_spans(57)})
    dec = chunk_decode(chunks)
    for f in range(57):
        np.testing.assert_allclose(dec.raymaps[f], dec.raymaps[0], atol=1e-12)


def test_constant_velocity_origins_exact():
    rng = np.random.default_rng(5)
    rgb, depth, rms, poses, _ = synthetic_clip(rng, motion=0.2)
    chunks = chunk_encode(rgb, depth, rms)
    dec = chunk_decode(chunks)
    for f in range(57):
        want = poses[f].center
        got = dec.raymaps[f][..., :3]
        np.testing.assert_allclose(got, np.broadcast_to(want, got.shape), atol=1e-9)


def test_interpolated_raymaps_match_keyframes_exactly():
    rng = np.random.default_rng(6)
    rgb, depth, rms, _, _ = synthetic_clip(rng)
    chunks = chunk_encode(rgb, depth, rms)
    dec = chunk_decode(chunks)
    for c in chunks:
        np.testing.assert_array_equal(dec.raymaps[c.span[1]], c.keyframe_raymap)


def test_rotation_interp_under_one_degree():
    # 15 deg per chunk about world up; intermediate forward angles vs the true
    # geodesic (slerp oracle) stay below 1 degree.
    t = 57
    intr = default_intrinsics(16, 12)
    rate = math.radians(15.0) / 8.0
    poses = [
        CameraPose(rotation_about([0, 1, 0], rate * i), np.array([0.01 * i, 0, 0]))
        for i in range(t)
    ]
    rgb = np.zeros((t, 12, 16, 3))
    depth = np.full((t, 12, 16), 0.5)
    rms = {i: raymap_from_camera(poses[i], intr) for i in range(t)}
    chunks = chunk_encode(rgb, depth, rms)
    dec = chunk_decode(chunks)
    for f in range(t):
        rm6 = dec.raymaps[f]
        h, w = rm6.shape[:2]
        rm = Raymap(origins=rm6[..., :3], directions=rm6[..., 3:])
        pose, _ = camera_from_raymap(rm)
        err = forward_angle(pose, poses[f])
        assert err < math.radians(1.0), f"frame {f}: {math.degrees(err)} deg"


def test_slerp_flag_not_worse():
    intr = default_intrinsics(16, 12)
    rate = math.radians(15.0) / 8.0
    a = raymap_from_camera(CameraPose.identity(), intr)
    b = raymap_from_camera(
        CameraPose(rotation_about([0, 1, 0], rate * 8), np.zeros(3)), intr
    )
    pa = pool_raymap(a, 6, 8)
    pb = pool_raymap(b, 6, 8)
    lerped = interpolate_raymaps(pa, pb, 0.5, slerp=False)
    slerped = interpolate_raymaps(pa, pb, 0.5, slerp=True)
    # both unit norm; measure deviation between the two schemes
    for arr in (lerped, slerped):
        np.testing.assert_allclose(
            np.linalg.norm(arr[..., 3:], axis=-1), 1.0, atol=1e-12
        )
    delta = np.degrees(
        np.arccos(
            np.clip(
                np.einsum("...i,...i->...", lerped[..., 3:], slerped[..., 3:]), -1, 1
            )
        )
    )
    assert delta.max() < 0.05  # lerp vs slerp gap at 15 deg is tiny


def test_pool_raymap_identity_and_constant():
    intr = default_intrinsics(8, 6)
    rm = raymap_from_camera(CameraPose.identity(), intr)
    same = pool_raymap(rm, 6, 8)
    np.testing.assert_array_equal(same, rm.as_channels())
    with pytest.raises(ShapeError):
        pool_raymap(rm, 5, 8)


def test_pooled_recovery_within_tolerance():
    rng = np.random.default_rng(8)
    for trial in range(10):
        pose = CameraPose(
            Rotation.random(random_state=trial).as_matrix(), rng.uniform(-2, 2, 3)
        )
        intr = default_intrinsics(64, 48)
        rm = raymap_from_camera(pose, intr)
        pooled = pool_raymap(rm, 24, 32)
        rec, _ = camera_from_raymap(
            Raymap(origins=pooled[..., :3], directions=pooled[..., 3:])
        )
        assert forward_angle(rec, pose) < 1e-3
        assert np.linalg.norm(rec.center - pose.center) < 1e-3


def test_slab_round_trip():
    rng = np.random.default_rng(9)
    rgb, depth, rms, _, _ = synthetic_clip(rng)
    cfg = CodecConfig()
    chunks = chunk_encode(rgb, depth, rms, cfg)
    slab = chunk_to_slab(chunks[3])
    back = slab_to_chunk(slab, chunks[3].span, cfg)
    np.testing.assert_array_equal(back.image_latent, chunks[3].image_latent)
    np.testing.assert_array_equal(back.depth_latent, chunks[3].depth_latent)
    np.testing.assert_array_equal(back.keyframe_raymap, chunks[3].keyframe_raymap)


def test_encode_sample_wrapper():
    from verse.dataset import preprocess_clip, render_split
    from verse.world_oracle import make_trajectory

    traj = make_trajectory(4, 57, width=16, height=12)
    sample = preprocess_clip(render_split(traj))
    chunks = encode_sample(sample)
    assert [c.span for c in chunks] == chunk_spans(57)
    assert chunks[0].grid == (6, 8)
