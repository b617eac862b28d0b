import math

import numpy as np
import pytest
import torch

from verse.dataset import (
    Caption,
    CaptionThresholds,
    ClipFilterConfig,
    FilterResult,
    MAX_SPLIT_FRAMES,
    VOCAB,
    caption_from_motion,
    caption_to_actions,
    candidate_starts,
    filter_clip,
    invert_preprocess,
    make_batches,
    preprocess_clip,
    render_split,
    tokenize,
)
from verse.errors import ShapeError, VocabularyError
from verse.geometry import CameraPose, MotionDelta, geodesic_angle, pose_delta
from verse.text_embed import TextEmbedder
from verse.world_oracle import (
    Action,
    ActionKind,
    Trajectory,
    apply_action,
    default_intrinsics,
    make_scene,
    make_trajectory,
    rollout,
)


def pose_chain(actions):
    poses = [CameraPose.identity()]
    for a in actions:
        poses.append(apply_action(poses[-1], a))
    return poses


# ---------------------------------------------------------------------------
# filtering


def test_static_rejected_for_movement():
    poses = [CameraPose.identity()] * 57
    res = filter_clip(poses, ClipFilterConfig(delta_move=1.0))
    assert res == FilterResult(False, "movement", 0.0, 0.0)


def test_spin_rejected_for_rotation():
    # 20 deg per chunk = 2.5 deg per frame; cumulative 7 * 20 = 140 >= 60
    actions = [Action(ActionKind.TURN_RIGHT, math.radians(2.5))] * 56
    poses = pose_chain(actions)
    cfg = ClipFilterConfig(delta_rot=math.radians(60.0), delta_move=0.1)
    res = filter_clip(poses, cfg)
    assert not res.accepted and res.reason == "rotation"
    assert abs(res.rotation - math.radians(140.0)) < 1e-9


def test_gentle_walk_accepted():
    # 56 * 0.25 = 14 units of path, zero rotation
    actions = [Action(ActionKind.FORWARD, 0.25)] * 56
    res = filter_clip(pose_chain(actions), ClipFilterConfig(delta_move=1.0))
    assert res.accepted and res.reason is None
    assert abs(res.path_length - 14.0) < 1e-9


def test_accept_implies_both_criteria():
    rng = np.random.default_rng(0)
    from verse.world_oracle import wander_actions

    cfg = ClipFilterConfig()
    for _ in range(20):
        poses = pose_chain(wander_actions(rng, 56))
        res = filter_clip(poses, cfg)
        if res.accepted:
            assert res.rotation < cfg.delta_rot
            assert res.path_length >= cfg.delta_move


def test_per_chunk_mode():
    # one violent chunk, rest still: cumulative passes, per-chunk fails
    actions = [Action(ActionKind.TURN_RIGHT, math.radians(10.0))] * 8
    actions += [Action(ActionKind.FORWARD, 0.1)] * 48
    poses = pose_chain(actions)
    lenient = ClipFilterConfig(delta_rot=math.radians(85.0), delta_move=0.5)
    strict = ClipFilterConfig(delta_rot=math.radians(75.0), delta_move=0.5, per_chunk=True)
    assert filter_clip(poses, lenient).accepted
    assert filter_clip(poses, strict).reason == "rotation"


def test_too_short_clip():
    with pytest.raises(ShapeError):
        filter_clip([CameraPose.identity()] * 10, ClipFilterConfig())


# ---------------------------------------------------------------------------
# captions


def test_zero_deltas_stay_still():
    deltas = [MotionDelta(0, 0, 0, 0, 0)] * 5
    assert caption_from_motion(deltas).text == "stay still"


def test_pure_forward():
    deltas = [MotionDelta(0, 0, 0.6, 0, 0)] * 5
    assert caption_from_motion(deltas).text == "move forward"


def test_forward_and_sharp_right():
    # yaw +40 deg with forward 2 -> sharp (threshold table: sharp >= 20 deg)
    deltas = [MotionDelta(math.radians(40), 0, 2.0, 0, 0)]
    assert caption_from_motion(deltas).text == "move forward and turn right sharply"


def test_slight_left():
    deltas = [MotionDelta(math.radians(-10), 0, 0, 0, 0)]
    assert caption_from_motion(deltas).text == "turn left slightly"


def test_caption_rigid_invariance():
    rng = np.random.default_rng(1)
    from scipy.spatial.transform import Rotation
    from verse.world_oracle import wander_actions

    poses = pose_chain(wander_actions(rng, 20))
    deltas = [pose_delta(a, b) for a, b in zip(poses[:-1], poses[1:])]
    text = caption_from_motion(deltas).text
    g = Rotation.random(random_state=3).as_matrix()
    t = np.array([5.0, -2.0, 1.0])
    moved = [CameraPose(g @ p.rotation, g @ p.center + t) for p in poses]
    deltas2 = [pose_delta(a, b) for a, b in zip(moved[:-1], moved[1:])]
    assert caption_from_motion(deltas2).text == text


def test_tokenize_round_trip():
    cap = Caption("move forward and turn left sharply")
    assert " ".join(VOCAB[i] for i in cap.token_ids) == cap.text
    with pytest.raises(VocabularyError):
        tokenize("fly upward")


def test_caption_to_actions_inverse():
    cap = Caption("move forward and turn right sharply")
    actions = caption_to_actions(cap)
    kinds = [a.kind for a in actions]
    assert kinds == [ActionKind.FORWARD, ActionKind.TURN_RIGHT]


def test_caption_round_trips_through_replication():
    # parse -> replicate 8x -> re-derive must reproduce the phrase
    from verse.inference_engine import action_to_delta

    for text in ("move forward", "turn right slightly", "turn left sharply",
                 "move backward", "look up"):
        acts = caption_to_actions(Caption(text))
        assert len(acts) == 1
        derived = caption_from_motion([action_to_delta(acts[0])] * 8)
        assert derived.text == text


# ---------------------------------------------------------------------------
# embedder


def test_embedder_deterministic_and_pooled_mean():
    torch.manual_seed(0)
    emb = TextEmbedder(dim=16)
    cap = Caption("move forward")
    t1, p1 = emb.embed(cap)
    t2, p2 = emb.embed(cap)
    assert torch.equal(t1, t2) and torch.equal(p1, p2)
    assert torch.allclose(p1, t1.mean(dim=0))


def test_embedder_discriminates_after_training():
    torch.manual_seed(0)
    emb = TextEmbedder(dim=8)
    a, b = Caption("move forward"), Caption("turn left sharply")
    opt = torch.optim.SGD(emb.parameters(), lr=0.5)
    for _ in range(5):
        _, pa = emb.embed(a)
        _, pb = emb.embed(b)
        loss = -torch.norm(pa - pb)  # push embeddings apart
        opt.zero_grad()
        loss.backward()
        opt.step()
    _, pa = emb.embed(a)
    _, pb = emb.embed(b)
    assert torch.norm(pa - pb) > 0.1


def test_embed_batch_mask_and_pool():
    torch.manual_seed(0)
    emb = TextEmbedder(dim=8)
    caps = [Caption("stay still"), Caption("move forward and look up")]
    tokens, mask, pooled = emb.embed_batch(caps)
    assert tokens.shape == (2, 10, 8)
    assert mask[0].sum() == 2 and mask[1].sum() == 5
    want = tokens[1, :5].mean(dim=0)
    assert torch.allclose(pooled[1], want)


# ---------------------------------------------------------------------------
# preprocessing


@pytest.fixture(scope="module")
def small_clip():
    traj = make_trajectory(5, 57, width=16, height=12)
    return render_split(traj)


def test_scale_anchored_on_frame0(small_clip):
    sample = preprocess_clip(small_clip)
    assert sample.scale.d_max == float(np.asarray(small_clip[0].depth, np.float64).max())


def test_frame0_pose_identity(small_clip):
    sample = preprocess_clip(small_clip)
    assert geodesic_angle(sample.poses[0].rotation, np.eye(3)) < 1e-12
    np.testing.assert_allclose(sample.poses[0].center, 0, atol=1e-12)


def test_frame0_codes_in_lambda_range(small_clip):
    sample = preprocess_clip(small_clip, lam=0.9)
    assert sample.depth_code[0].max() <= 0.9 + 1e-7
    assert sample.depth_code[0].min() > 0


def test_preprocess_round_trip(small_clip):
    sample = preprocess_clip(small_clip)
    depths, poses = invert_preprocess(sample)
    for got_d, got_p, st in zip(depths, poses, small_clip):
        np.testing.assert_allclose(got_d, np.asarray(st.depth, np.float64), rtol=1e-5)
        np.testing.assert_allclose(got_p.rotation, st.pose.rotation, atol=1e-9)
        np.testing.assert_allclose(got_p.center, st.pose.center, atol=1e-5)


# ---------------------------------------------------------------------------
# batching


def make_split(seed, frames):
    return make_trajectory(seed, frames, width=16, height=12)


def test_single_clip_split():
    traj = make_split(3, 57)
    starts = candidate_starts(traj, 57, ClipFilterConfig())
    assert starts == [0] or starts == []  # only one possible offset
    assert len(list(range(0, 57 - 57 + 1))) == 1


def test_candidate_count_400():
    traj = make_split(8, 400)
    # 400 - 57 + 1 = 344 candidate offsets before filtering
    assert len(range(0, len(traj.poses) - 57 + 1)) == 344


def test_split_cap_enforced():
    with pytest.raises(ShapeError):
        list(make_batches([make_split(0, MAX_SPLIT_FRAMES + 1)], b=1))


def test_batches_deterministic_and_within_split():
    splits = [make_split(1, 80), make_split(2, 90)]
    s1 = next(make_batches(splits, b=3, seed=7))
    s2 = next(make_batches(splits, b=3, seed=7))
    for a, b in zip(s1, s2):
        np.testing.assert_array_equal(a.rgb, b.rgb)
        assert a.caption.text == b.caption.text
    # no clip spans splits: every sample's frames must come from one split,
    # guaranteed structurally; check frame count instead
    for s in s1:
        assert s.rgb.shape[0] == 57


def test_short_split_skipped(caplog):
    splits = [make_split(1, 30), make_split(2, 70)]
    with caplog.at_level("WARNING"):
        batch = next(make_batches(splits, b=2, seed=0))
    assert len(batch) == 2
