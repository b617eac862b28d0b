import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from verse.errors import OrderingError
from verse.geometry import CameraPose, SceneScale, forward_angle
from verse.state_memory import (
    CompositeState,
    MemoryPool,
    RetrievalConfig,
    fuse_pointcloud,
    retrieve_spatial,
    retrieve_spatial_arrays,
    unproject,
)
from verse.world_oracle import default_intrinsics, make_scene, render_state, rollout, wander_actions


def brute_force_retrieve(indices, centers, forwards, now_pose, now_index, cfg):
    """Independent O(n) re-implementation of the two-stage rule."""
    cands = [i for i in range(len(indices)) if indices[i] <= now_index - cfg.cutoff - 1]
    if not cands:
        return None
    by_dist = sorted(
        cands,
        key=lambda i: (float(np.sum((centers[i] - now_pose.center) ** 2)), -indices[i]),
    )
    short = by_dist[: cfg.k]
    def angle(i):
        c = float(np.clip(np.dot(forwards[i], now_pose.forward), -1, 1))
        return math.acos(c)
    best = sorted(short, key=lambda i: (angle(i), -indices[i]))[0]
    return best


def random_pose_set(rng, n):
    centers = rng.uniform(-10, 10, size=(n, 3))
    rots = Rotation.random(n, random_state=int(rng.integers(2**31))).as_matrix()
    indices = np.arange(n, dtype=np.int64)
    return indices, centers, rots


def small_state(index, pose=None, rng=None):
    from verse.geometry import raymap_from_camera

    pose = pose or CameraPose.identity()
    intr = default_intrinsics(8, 6)
    rgb = np.full((6, 8, 3), 0.5, dtype=np.float32)
    if rng is not None:
        rgb = rng.random((6, 8, 3)).astype(np.float32)
    depth = np.full((6, 8), 2.0, dtype=np.float32)
    return CompositeState(rgb=rgb, depth=depth, raymap=raymap_from_camera(pose, intr),
                          index=index, pose=pose, intrinsics=intr)


# ---------------------------------------------------------------------------
# retrieval


def test_singleton_candidate():
    idx = np.array([0])
    centers = np.zeros((1, 3))
    fwd = np.tile([0.0, 0.0, 1.0], (1, 1))
    got = retrieve_spatial_arrays(idx, centers, fwd, CameraPose.identity(), 10,
                                  RetrievalConfig(k=8, cutoff=0))
    assert got == 0


def test_cutoff_boundary():
    # now=10, cutoff=9 -> only index 0 eligible
    idx = np.arange(11)
    centers = np.zeros((11, 3))
    fwd = np.tile([0.0, 0.0, 1.0], (11, 1))
    got = retrieve_spatial_arrays(idx, centers, fwd, CameraPose.identity(), 10,
                                  RetrievalConfig(k=8, cutoff=9))
    assert got == 0
    got = retrieve_spatial_arrays(idx, centers, fwd, CameraPose.identity(), 10,
                                  RetrievalConfig(k=8, cutoff=10))
    assert got is None


def test_matches_brute_force_random():
    rng = np.random.default_rng(12)
    for trial in range(50):
        n = int(rng.integers(1, 200))
        idx, centers, rots = random_pose_set(rng, n)
        fwd = rots[:, :, 2]
        now = CameraPose(Rotation.random(random_state=trial).as_matrix(),
                         rng.uniform(-10, 10, 3))
        cfg = RetrievalConfig(k=int(rng.integers(1, 12)), cutoff=int(rng.integers(0, 20)))
        got = retrieve_spatial_arrays(idx, centers, fwd, now, n, cfg)
        want = brute_force_retrieve(idx, centers, fwd, now, n, cfg)
        assert got == want


def test_matches_brute_force_with_ties():
    # Duplicate positions and duplicate forwards force ties at both stages.
    rng = np.random.default_rng(7)
    for trial in range(30):
        n = 40
        base = rng.uniform(-1, 1, size=(5, 3))
        centers = base[rng.integers(0, 5, size=n)]
        rots = Rotation.random(4, random_state=trial).as_matrix()
        rots = rots[rng.integers(0, 4, size=n)]
        idx = np.arange(n)
        now = CameraPose(np.eye(3), np.zeros(3))
        cfg = RetrievalConfig(k=6, cutoff=3)
        got = retrieve_spatial_arrays(idx, centers, rots[:, :, 2], now, n, cfg)
        want = brute_force_retrieve(idx, centers, rots[:, :, 2], now, n, cfg)
        assert got == want


def test_rigid_invariance():
    rng = np.random.default_rng(3)
    n = 100
    idx, centers, rots = random_pose_set(rng, n)
    now = CameraPose(Rotation.random(random_state=1).as_matrix(), rng.uniform(-5, 5, 3))
    cfg = RetrievalConfig(k=5, cutoff=10)
    base = retrieve_spatial_arrays(idx, centers, rots[:, :, 2], now, n, cfg)
    # apply a rigid transform to everything including the query
    g_rot = Rotation.random(random_state=2).as_matrix()
    g_t = np.array([3.0, -1.0, 2.0])
    centers2 = centers @ g_rot.T + g_t
    rots2 = np.einsum("ij,njk->nik", g_rot, rots)
    now2 = CameraPose(g_rot @ now.rotation, g_rot @ now.center + g_t)
    got = retrieve_spatial_arrays(idx, centers2, rots2[:, :, 2], now2, n, cfg)
    assert got == base


def test_pool_retrieval_returns_state():
    pool = MemoryPool()
    states = [small_state(i) for i in range(3)]
    pool.append(states)
    got = retrieve_spatial(pool, CameraPose.identity(), 10, RetrievalConfig(k=2, cutoff=0))
    assert got is states[2]  # tie on distance+angle -> most recent


# ---------------------------------------------------------------------------
# append


def test_append_ordering():
    pool = MemoryPool()
    pool.append([small_state(i) for i in range(5)])
    assert len(pool) == 5
    pool.append([small_state(5), small_state(6)])
    assert len(pool) == 7
    with pytest.raises(OrderingError):
        pool.append([small_state(3)])


def test_append_preserves_bits():
    rng = np.random.default_rng(0)
    pool = MemoryPool()
    s = small_state(0, rng=rng)
    pool.append([s], scale=SceneScale(d_max=4.0, lam=0.9))
    got = pool.state(0)
    assert got is s
    np.testing.assert_array_equal(got.rgb, s.rgb)
    assert pool.window_scales[0].d_max == 4.0


# ---------------------------------------------------------------------------
# unproject / fuse


def test_unproject_depth_one_identity():
    from verse.geometry import raymap_from_camera

    pose = CameraPose.identity()
    intr = default_intrinsics(9, 7)
    rm = raymap_from_camera(pose, intr)
    depth = np.ones((7, 9), dtype=np.float32)
    st = CompositeState(rgb=np.zeros((7, 9, 3), dtype=np.float32), depth=depth,
                        raymap=rm, index=0, pose=pose, intrinsics=intr)
    pts, _ = unproject(st)
    # z-depth 1 means every point sits on the z=1 plane
    np.testing.assert_allclose(pts[:, 2].reshape(7, 9), 1.0, atol=1e-12)
    # the central pixel's point is along its ray direction
    central = pts.reshape(7, 9, 3)[3, 4]
    d = rm.directions[3, 4]
    np.testing.assert_allclose(central, d / d[2], atol=1e-12)


def test_unproject_stride_count():
    scene = make_scene(0)
    st = render_state(scene, CameraPose.identity(), default_intrinsics(64, 48), 0)
    pts, cols = unproject(st, stride=4)
    assert pts.shape[0] == math.ceil(48 / 4) * math.ceil(64 / 4)
    assert cols.shape == pts.shape


def test_fuse_single_state_equals_unproject():
    pool = MemoryPool()
    scene = make_scene(1)
    st = render_state(scene, CameraPose.identity(), default_intrinsics(16, 12), 0)
    pool.append([st])
    pts, cols = fuse_pointcloud(pool, stride=2)
    p2, c2 = unproject(st, stride=2)
    np.testing.assert_array_equal(pts, p2)
    np.testing.assert_array_equal(cols, c2)


def test_fuse_multi_view_bounding_box():
    # Two views of a static scene: fused cloud must stay inside scene bounds.
    scene = make_scene(4)
    intr = default_intrinsics(32, 24)
    from verse.world_oracle import Action, ActionKind

    states = rollout(scene, CameraPose.identity(), intr,
                     [Action(ActionKind.STRAFE_RIGHT, 0.5)])
    pool = MemoryPool()
    pool.append(states)
    pts, _ = fuse_pointcloud(pool, stride=1)
    # exclude sky points (depth == far): those unproject to the far shell
    finite = np.concatenate([
        (s.depth < scene.far - 1e-3).ravel() for s in states
    ])
    hits = pts[finite]
    lo, hi = scene.bounds
    assert np.all(hits >= lo - 1e-3) and np.all(hits <= hi + 1e-3)


def test_fuse_empty_pool():
    pts, cols = fuse_pointcloud(MemoryPool())
    assert pts.shape == (0, 3)
