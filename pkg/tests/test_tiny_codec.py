import numpy as np
import pytest
import torch

from verse.geometry import CameraPose, raymap_from_camera
from verse.latent_codec import chunk_spans
from verse.tiny_codec import TinyCodec, train_tiny_codec
from verse.world_oracle import default_intrinsics


@pytest.fixture(scope="module")
def clip():
    rng = np.random.default_rng(0)
    t, h, w = 57, 16, 16
    return rng.random((t, h, w, 3)), rng.uniform(0.1, 0.9, (t, h, w))


def test_shapes_and_channels(clip):
    torch.manual_seed(0)
    codec = TinyCodec()
    rgb, depth = clip
    intr = default_intrinsics(16, 16)
    rm = raymap_from_camera(CameraPose.identity(), intr)
    chunks = codec.encode_clip(rgb, depth, {s[1]: rm for s in chunk_spans(57)})
    assert len(chunks) == 8
    assert chunks[0].channels == 38
    assert chunks[0].grid == (8, 8)
    r2, d2 = codec.decode_chunks(chunks)
    assert r2.shape == rgb.shape and d2.shape == depth.shape
    assert np.all(d2 > 0)


def test_training_reduces_reconstruction_loss(clip):
    torch.manual_seed(1)
    codec = TinyCodec()
    losses = train_tiny_codec(codec, [clip], steps=40, lr=2e-3)
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_checkpoint_round_trip(tmp_path, clip):
    from verse.generator import load_tensors, save_tensors

    torch.manual_seed(2)
    codec = TinyCodec()
    tensors = {k: v.detach().numpy() for k, v in codec.state_dict().items()}
    save_tensors(tmp_path / "codec.dvrs", {"kind": "learned_tiny"}, tensors)
    cfg, loaded = load_tensors(tmp_path / "codec.dvrs")
    assert cfg["kind"] == "learned_tiny"
    codec2 = TinyCodec()
    codec2.load_state_dict({k: torch.as_tensor(v) for k, v in loaded.items()})
    rgb, depth = clip
    intr = default_intrinsics(16, 16)
    rm = raymap_from_camera(CameraPose.identity(), intr)
    spans = chunk_spans(57)
    a = codec.encode_clip(rgb, depth, {s[1]: rm for s in spans})
    b = codec2.encode_clip(rgb, depth, {s[1]: rm for s in spans})
    np.testing.assert_allclose(a[3].image_latent, b[3].image_latent, atol=1e-6)
