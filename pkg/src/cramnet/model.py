"""Model construction, forward/backward passes and checkpoint files."""
from __future__ import annotations

import hashlib
import io
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .architecture import ArchitectureSpec, SpecError, layer_param_shapes

MAGIC = b"CRAMNET1"


class CheckpointError(IOError):
    """A checkpoint file is truncated, has the wrong magic, or disagrees with its header."""


@dataclass
class Model:
    spec: ArchitectureSpec
    params: dict[str, list[np.ndarray]] = field(default_factory=dict)
    seed: int = 0

    def copy(self) -> "Model":
        return Model(self.spec, {k: [w.copy(), b.copy()] for k, (w, b) in self.params.items()}, self.seed)

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in self.params.values())

    def flat_params(self) -> list[tuple[str, np.ndarray]]:
        """``(key, array)`` pairs in declaration order, weights before biases."""
        out = []
        for l in self.spec.param_layers:
            w, b = self.params[l.name]
            out += [(f"{l.name}/w", w), (f"{l.name}/b", b)]
        return out

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(self.spec.to_json(), sort_keys=True).encode())
        for _, a in self.flat_params():
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()


def init_layer(spec: ArchitectureSpec, name: str, seed: int) -> list[np.ndarray]:
    """Fan-balanced uniform weights, zero biases.

    The stream is keyed on ``(seed, layer name)`` so one layer can be
    re-initialized without disturbing the others.
    """
    shapes = layer_param_shapes(spec, name)
    if shapes is None:
        raise SpecError(f"layer {name!r} has no parameters")
    wshape, bshape = shapes
    if len(wshape) == 4:
        kh, kw, cin, cout = wshape
        fan_in, fan_out = kh * kw * cin, kh * kw * cout
    else:
        fan_out, fan_in = wshape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
    return [rng.uniform(-limit, limit, size=wshape), np.zeros(bshape)]


def build(spec: ArchitectureSpec, seed: int = 0) -> Model:
    params = {l.name: init_layer(spec, l.name, seed) for l in spec.param_layers}
    return Model(spec, params, seed)


# -- forward / backward -------------------------------------------------

def _layer_forward(model: Model, i: int, x: np.ndarray):
    l = model.spec.layers[i]
    if l.kind == "conv2d":
        w, b = model.params[l.name]
        return T.conv2d_forward(x, w, b, l.padding), x
    if l.kind in ("dense", "softmax_output"):
        w, b = model.params[l.name]
        return T.dense_forward(x, w, b), x
    if l.kind == "relu":
        return T.relu(x)
    if l.kind == "maxpool":
        y, idx = T.maxpool2d(x)
        return y, (idx, x.shape)
    if l.kind == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    raise AssertionError(l.kind)


def _check_batch(spec: ArchitectureSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != spec.input_shape:
        raise T.ShapeError(f"batch shape {x.shape} does not match input shape {spec.input_shape}")
    return x


def forward(model: Model, batch, capture=None, stop: str | None = None):
    """Run a batch through the network.

    Returns ``(logits, activations)``. ``activations`` maps each name in
    ``capture`` (a layer name or ``"input"``) to that layer's output; it is
    empty when nothing is captured. With ``stop`` set, the pass ends after
    that layer and its output is returned in place of the logits.
    """
    x = _check_batch(model.spec, batch)
    wanted = set(capture or ())
    acts = {}
    if "input" in wanted:
        acts["input"] = x
    for i, l in enumerate(model.spec.layers):
        x, _ = _layer_forward(model, i, x)
        if l.name in wanted:
            acts[l.name] = x
        if l.name == stop:
            break
    return x, acts


def forward_train(model: Model, batch):
    """Forward pass that keeps what :func:`backward` needs."""
    x = _check_batch(model.spec, batch)
    caches = []
    for i in range(len(model.spec.layers)):
        x, cache = _layer_forward(model, i, x)
        caches.append(cache)
    return x, caches


def backward(model: Model, caches, grad_logits, trainable=None, need_input_grad: bool = False):
    """Backpropagate ``grad_logits`` and return ``{layer: [grad_w, grad_b]}``.

    Only layers in ``trainable`` (all parametric layers when ``None``) get
    parameter gradients; the pass stops at the earliest trainable layer
    unless ``need_input_grad`` is set, in which case ``grads["input"]`` holds
    the gradient with respect to the batch.
    """
    layers = model.spec.layers
    names = {l.name for l in model.spec.param_layers} if trainable is None else set(trainable)
    first = min((i for i, l in enumerate(layers) if l.name in names), default=len(layers))
    if need_input_grad:
        first = 0
    g = np.asarray(grad_logits, dtype=np.float64)
    grads = {}
    for i in range(len(layers) - 1, first - 1, -1):
        l, cache = layers[i], caches[i]
        if l.kind == "conv2d":
            w, _ = model.params[l.name]
            gi, gw, gb = T.conv2d_backward(g, cache, w, l.padding)
        elif l.kind in ("dense", "softmax_output"):
            w, _ = model.params[l.name]
            gi, gw, gb = T.dense_backward(g, cache, w)
        elif l.kind == "relu":
            gi = T.relu_backward(g, cache)
        elif l.kind == "maxpool":
            idx, shape = cache
            gi = T.maxpool2d_backward(g, idx, shape)
        else:
            gi = g.reshape(cache)
        if l.has_params and l.name in names:
            grads[l.name] = [gw, gb]
        g = gi
    if need_input_grad:
        grads["input"] = g
    return grads


# -- checkpoints ----------------------------------------------------------

def _header(model: Model) -> bytes:
    doc = model.spec.to_json()
    doc["seed"] = model.seed
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def checkpoint_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    header = _header(model)
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(header)))
    buf.write(header)
    for _, a in model.flat_params():
        buf.write(struct.pack("<Q", a.size))
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model: Model, path) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(model))


def checkpoint_from_bytes(raw: bytes) -> Model:
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError("bad magic: not a CRAMNET1 checkpoint")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    pos = 16 + hlen
    if pos > len(raw):
        raise CheckpointError("corrupt checkpoint: header runs past end of file")
    try:
        doc = json.loads(raw[16:pos].decode("utf-8"))
        spec = ArchitectureSpec.from_json(doc)
    except (ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    params = {}
    for l in spec.param_layers:
        arrays = []
        for shape in layer_param_shapes(spec, l.name):
            if pos + 8 > len(raw):
                raise CheckpointError(f"corrupt checkpoint: truncated before {l.name}")
            (n,) = struct.unpack_from("<Q", raw, pos)
            expected = int(np.prod(shape))
            if n != expected:
                raise CheckpointError(f"layer {l.name}: payload has {n} values, header implies {expected}")
            pos += 8
            end = pos + 8 * n
            if end > len(raw):
                raise CheckpointError(f"corrupt checkpoint: truncated inside {l.name}")
            arrays.append(np.frombuffer(raw, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape))
            pos = end
        params[l.name] = arrays
    if pos != len(raw):
        raise CheckpointError(f"corrupt checkpoint: {len(raw) - pos} trailing bytes")
    return Model(spec, params, int(doc.get("seed", 0)))


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())
