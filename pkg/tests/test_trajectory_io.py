import numpy as np

from verse.geometry import SceneScale
from verse.state_memory import MemoryPool
from verse.trajectory_io import load_pool, load_trajectory, save_pool, save_trajectory
from verse.world_oracle import make_trajectory
from verse.dataset import render_split


def small_states():
    traj = make_trajectory(2, 6, width=16, height=12)
    return render_split(traj), traj.intrinsics


def test_trajectory_round_trip(tmp_path):
    states, intr = small_states()
    save_trajectory(tmp_path / "t", states, intr, scene_seed=2)
    loaded, intr2, manifest = load_trajectory(tmp_path / "t")
    assert manifest["scene_seed"] == 2
    assert manifest["frame_count"] == 6
    assert intr2 == intr
    for a, b in zip(states, loaded):
        assert a.index == b.index
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.depth, b.depth)
        # pose goes through f32 quantization + re-orthonormalization
        np.testing.assert_allclose(a.pose.center, b.pose.center, atol=1e-5)
        np.testing.assert_allclose(a.pose.rotation, b.pose.rotation, atol=1e-5)


def test_rewrite_is_byte_identical(tmp_path):
    states, intr = small_states()
    save_trajectory(tmp_path / "a", states, intr)
    loaded, _, _ = load_trajectory(tmp_path / "a")
    save_trajectory(tmp_path / "b", loaded, intr)
    assert (tmp_path / "a" / "frames.bin").read_bytes() == (
        tmp_path / "b" / "frames.bin"
    ).read_bytes()


def test_pool_round_trip_bit_exact(tmp_path):
    states, intr = small_states()
    pool = MemoryPool()
    pool.append(states[:3], scale=SceneScale(d_max=12.0, lam=0.9))
    pool.append(states[3:], scale=SceneScale(d_max=9.5, lam=0.9))
    save_pool(tmp_path / "p", pool, intr, scene_seed=2)
    loaded, _, _ = load_pool(tmp_path / "p")
    assert len(loaded) == len(pool)
    for a, b in zip(pool.states, loaded.states):
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.depth, b.depth)
        # full-precision poses come back exactly
        np.testing.assert_array_equal(a.pose.rotation, b.pose.rotation)
        np.testing.assert_array_equal(a.pose.center, b.pose.center)
        np.testing.assert_array_equal(a.raymap.directions, b.raymap.directions)
    assert [s.d_max for s in loaded.window_scales] == [12.0, 9.5]
