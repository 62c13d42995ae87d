import json
import struct

import numpy as np
import pytest

from cramnet.architecture import ArchitectureSpec, LayerSpec, count_params, load_architecture
from cramnet.model import (
    MAGIC, CheckpointError, Model, backward, build, checkpoint_bytes, forward, forward_train,
    load_checkpoint, save_checkpoint,
)


def micro_spec():
    """Baseline-shaped network on an 8x8 input."""
    L = [
        LayerSpec("conv1", "conv2d", 4, (3, 3), "same"), LayerSpec("relu1", "relu"),
        LayerSpec("conv2", "conv2d", 4, (3, 3), "valid"), LayerSpec("relu2", "relu"),
        LayerSpec("pool1", "maxpool"),
        LayerSpec("conv3", "conv2d", 6, (3, 3), "same"), LayerSpec("relu3", "relu"),
        LayerSpec("flatten", "flatten"),
        LayerSpec("fc1", "dense", 12), LayerSpec("relu4", "relu"),
        LayerSpec("output", "softmax_output", 5),
    ]
    return ArchitectureSpec((8, 8, 3), tuple(L), 5)


def test_build_shapes_match_spec():
    m = build(load_architecture("cifar10_baseline"), seed=3)
    assert m.params["conv1"][0].shape == (3, 3, 3, 32)
    assert m.params["fc1"][0].shape == (512, 2304)
    assert m.param_count() == 1_250_858
    tiny = ArchitectureSpec((1,), (LayerSpec("o", "softmax_output", 1),), 1)
    w, b = build(tiny).params["o"]
    assert w.shape == (1, 1) and b.shape == (1,)


def test_build_is_deterministic_and_seeded():
    spec = micro_spec()
    a, b, c = build(spec, 7), build(spec, 7), build(spec, 8)
    for name in a.params:
        for x, y in zip(a.params[name], b.params[name]):
            assert x.tobytes() == y.tobytes()
    assert not np.array_equal(a.params["conv1"][0], c.params["conv1"][0])


def test_init_bounds_and_zero_bias():
    m = build(micro_spec(), 1)
    w, b = m.params["fc1"]
    limit = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
    assert np.all(np.abs(w) <= limit) and not b.any()
    k, _ = m.params["conv2"]
    limit = np.sqrt(6.0 / (9 * 4 + 9 * 4))
    assert np.all(np.abs(k) <= limit)


def test_zero_model_gives_zero_logits():
    m = build(micro_spec())
    for p in m.params.values():
        for a in p:
            a[...] = 0.0
    logits, acts = forward(m, np.random.default_rng(0).random((3, 8, 8, 3)))
    assert not logits.any() and acts == {}


def test_captured_activation_equals_truncated_forward(rng):
    m = build(micro_spec(), 2)
    x = rng.random((4, 8, 8, 3))
    names = ["input"] + [l.name for l in m.spec.layers]
    logits, acts = forward(m, x, capture=names)
    plain, _ = forward(m, x)
    assert logits.tobytes() == plain.tobytes()
    for name in names[1:]:
        truncated, _ = forward(m, x, stop=name)
        assert truncated.tobytes() == acts[name].tobytes()
    assert acts["input"].tobytes() == x.tobytes()


def test_identical_images_give_identical_rows(rng):
    m = build(micro_spec(), 2)
    img = rng.random((8, 8, 3))
    logits, _ = forward(m, np.stack([img, img]))
    assert logits[0].tobytes() == logits[1].tobytes()


def test_forward_shape_mismatch():
    from cramnet.tensor import ShapeError
    with pytest.raises(ShapeError):
        forward(build(micro_spec()), np.zeros((1, 9, 8, 3)))


def test_backward_respects_trainable(rng):
    m = build(micro_spec(), 2)
    q, caches = forward_train(m, rng.random((2, 8, 8, 3)))
    grads = backward(m, caches, rng.normal(size=q.shape), trainable=["fc1", "output"])
    assert set(grads) == {"fc1", "output"}
    full = backward(m, caches, rng.normal(size=q.shape), need_input_grad=True)
    assert full["input"].shape == (2, 8, 8, 3)


def test_checkpoint_round_trip(tmp_path):
    m = build(micro_spec(), 11)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.spec == m.spec and back.seed == 11
    for name in m.params:
        for x, y in zip(m.params[name], back.params[name]):
            assert x.tobytes() == y.tobytes()
    assert back.digest() == m.digest()


def test_checkpoint_layout(tmp_path):
    m = build(micro_spec(), 1)
    raw = checkpoint_bytes(m)
    assert raw[:8] == MAGIC
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16:16 + hlen])
    assert ArchitectureSpec.from_json(header) == m.spec
    (n,) = struct.unpack_from("<Q", raw, 16 + hlen)
    assert n == m.params["conv1"][0].size
    first = np.frombuffer(raw, "<f8", count=n, offset=24 + hlen)
    assert np.array_equal(first, m.params["conv1"][0].reshape(-1))


def test_baseline_checkpoint_size(tmp_path):
    spec = load_architecture("cifar10_baseline")
    m = build(spec, 0)
    path = tmp_path / "baseline.ckpt"
    save_checkpoint(m, path)
    hlen = struct.unpack_from("<Q", path.read_bytes(), 8)[0]
    blobs = 2 * len(spec.param_layers)
    assert path.stat().st_size == 8 + 8 + hlen + 8 * blobs + 8 * count_params(spec)


def test_corrupt_checkpoints(tmp_path):
    raw = checkpoint_bytes(build(micro_spec(), 1))
    with pytest.raises(CheckpointError):
        (tmp_path / "t").write_bytes(raw[:-5])
        load_checkpoint(tmp_path / "t")
    with pytest.raises(CheckpointError):
        (tmp_path / "m").write_bytes(b"CRAMNET2" + raw[8:])
        load_checkpoint(tmp_path / "m")
    with pytest.raises(CheckpointError):
        (tmp_path / "x").write_bytes(raw + b"\0")
        load_checkpoint(tmp_path / "x")
    # element count in a blob disagrees with the header's shapes
    hlen = struct.unpack_from("<Q", raw, 8)[0]
    bad = bytearray(raw)
    struct.pack_into("<Q", bad, 16 + hlen, 3)
    with pytest.raises(CheckpointError):
        (tmp_path / "s").write_bytes(bytes(bad))
        load_checkpoint(tmp_path / "s")
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_copy_is_independent():
    m = build(micro_spec(), 1)
    c = m.copy()
    c.params["fc1"][0][0, 0] += 1.0
    assert m.params["fc1"][0][0, 0] != c.params["fc1"][0][0, 0]
    assert isinstance(c, Model)
