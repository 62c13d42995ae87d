"""Declarative layer graphs, shape algebra and exact parameter/MAC accounting."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable

from .tensor import PADDINGS, conv_output_hw, pool_output_hw

KINDS = ("conv2d", "dense", "maxpool", "relu", "flatten", "softmax_output")
PARAM_KINDS = ("conv2d", "dense", "softmax_output")


class SpecError(ValueError):
    """An architecture description is malformed or does not compose."""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    width: int | None = None
    kernel: tuple[int, int] | None = None
    padding: str = "same"
    resizable: bool | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        if self.kind in PARAM_KINDS:
            if self.width is None or int(self.width) < 1:
                raise SpecError(f"layer {self.name!r}: width must be >= 1")
            object.__setattr__(self, "width", int(self.width))
        if self.kind == "conv2d":
            if self.kernel is None:
                raise SpecError(f"layer {self.name!r}: conv2d needs a kernel")
            kh, kw = (int(k) for k in self.kernel)
            if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
                raise SpecError(f"layer {self.name!r}: kernel extents must be odd, got {kh}x{kw}")
            object.__setattr__(self, "kernel", (kh, kw))
            if self.padding not in PADDINGS:
                raise SpecError(f"layer {self.name!r}: padding must be one of {PADDINGS}")
        if self.resizable is None:
            object.__setattr__(self, "resizable", self.kind in ("conv2d", "dense"))
        elif self.resizable and self.kind not in ("conv2d", "dense"):
            raise SpecError(f"layer {self.name!r}: only conv2d/dense layers can be resizable")

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS

    def to_json(self) -> dict:
        d: dict = {"name": self.name, "kind": self.kind}
        if self.has_params:
            d["width"] = self.width
        if self.kind == "conv2d":
            d["kernel"] = list(self.kernel)
            d["padding"] = self.padding
        if self.has_params and self.resizable != (self.kind in ("conv2d", "dense")):
            d["resizable"] = self.resizable
        return d

    @classmethod
    def from_json(cls, d: dict, index: int = 0) -> "LayerSpec":
        unknown = set(d) - {"name", "kind", "width", "kernel", "padding", "resizable"}
        if unknown:
            raise SpecError(f"layer {index}: unknown fields {sorted(unknown)}")
        if "kind" not in d:
            raise SpecError(f"layer {index}: missing 'kind'")
        kernel = d.get("kernel")
        if isinstance(kernel, int):
            kernel = (kernel, kernel)
        return cls(
            name=d.get("name") or f"{d['kind']}{index}",
            kind=d["kind"],
            width=d.get("width"),
            kernel=tuple(kernel) if kernel is not None else None,
            padding=d.get("padding", "same"),
            resizable=d.get("resizable"),
        )


@dataclass(frozen=True)
class ArchitectureSpec:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    classes: int
    _shapes: tuple = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise SpecError("layer names must be unique")
        if "input" in names:
            raise SpecError("'input' is reserved for the input boundary")
        outs = [i for i, l in enumerate(self.layers) if l.kind == "softmax_output"]
        if outs != [len(self.layers) - 1]:
            raise SpecError("exactly one softmax_output layer is required, and it must be last")
        if self.layers[-1].width != self.classes:
            raise SpecError(f"output width {self.layers[-1].width} != classes {self.classes}")
        if self.layers[-1].resizable:
            raise SpecError("the output layer is not resizable")
        object.__setattr__(self, "_shapes", tuple(_propagate(self.input_shape, self.layers)))

    # -- shape algebra -------------------------------------------------
    def output_shape(self, name: str) -> tuple[int, ...]:
        """Activation shape (per sample) produced by layer ``name``; ``"input"`` is the input."""
        if name == "input":
            return self.input_shape
        return self._shapes[self.index(name)]

    def input_shape_of(self, name: str) -> tuple[int, ...]:
        i = self.index(name)
        return self.input_shape if i == 0 else self._shapes[i - 1]

    @property
    def shapes(self) -> tuple[tuple[int, ...], ...]:
        return self._shapes

    def index(self, name: str) -> int:
        for i, l in enumerate(self.layers):
            if l.name == name:
                return i
        raise KeyError(name)

    def layer(self, name: str) -> LayerSpec:
        return self.layers[self.index(name)]

    @property
    def param_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.has_params]

    def with_widths(self, widths: dict[str, int]) -> "ArchitectureSpec":
        """Copy of this spec with the named layers re-sized."""
        missing = set(widths) - {l.name for l in self.layers}
        if missing:
            raise SpecError(f"unknown layers {sorted(missing)}")
        layers = [replace(l, width=int(widths[l.name])) if l.name in widths else l for l in self.layers]
        return replace(self, layers=tuple(layers))

    def tail(self, start: int) -> "ArchitectureSpec":
        """Sub-network made of layers ``start:``, fed by the activation before ``start``."""
        in_shape = self.input_shape if start == 0 else self._shapes[start - 1]
        return ArchitectureSpec(in_shape, self.layers[start:], self.classes)

    # -- serialization -------------------------------------------------
    def to_json(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "classes": self.classes,
            "layers": [l.to_json() for l in self.layers],
        }

    @classmethod
    def from_json(cls, d: dict) -> "ArchitectureSpec":
        try:
            layers = [LayerSpec.from_json(l, i) for i, l in enumerate(d["layers"])]
            return cls(tuple(d["input_shape"]), tuple(layers), int(d["classes"]))
        except KeyError as e:
            raise SpecError(f"architecture missing field {e}") from None


def _propagate(shape: tuple[int, ...], layers: Iterable[LayerSpec]) -> list[tuple[int, ...]]:
    out = []
    for l in layers:
        if l.kind == "conv2d":
            if len(shape) != 3:
                raise SpecError(f"layer {l.name!r}: conv2d needs an (H, W, C) input, got {shape}")
            h, w = conv_output_hw(shape[0], shape[1], *l.kernel, l.padding)
            if h < 1 or w < 1:
                raise SpecError(f"layer {l.name!r}: input {shape} too small for kernel {l.kernel}")
            shape = (h, w, l.width)
        elif l.kind == "maxpool":
            if len(shape) != 3:
                raise SpecError(f"layer {l.name!r}: maxpool needs an (H, W, C) input, got {shape}")
            try:
                shape = pool_output_hw(shape[0], shape[1]) + (shape[2],)
            except ValueError as e:
                raise SpecError(f"layer {l.name!r}: {e}") from None
        elif l.kind == "flatten":
            n = 1
            for s in shape:
                n *= s
            shape = (n,)
        elif l.kind in ("dense", "softmax_output"):
            if len(shape) != 1:
                raise SpecError(f"layer {l.name!r}: dense layer needs a flat input, got {shape}")
            shape = (l.width,)
        out.append(shape)
    return out


def layer_param_shapes(spec: ArchitectureSpec, name: str) -> tuple[tuple[int, ...], tuple[int, ...]] | None:
    """``(weight_shape, bias_shape)`` for a parametric layer, ``None`` otherwise."""
    l = spec.layer(name)
    in_shape = spec.input_shape_of(name)
    if l.kind == "conv2d":
        return (l.kernel[0], l.kernel[1], in_shape[-1], l.width), (l.width,)
    if l.kind in ("dense", "softmax_output"):
        return (l.width, in_shape[0]), (l.width,)
    return None


def layer_params(spec: ArchitectureSpec, name: str) -> int:
    shapes = layer_param_shapes(spec, name)
    if shapes is None:
        return 0
    w, b = shapes
    n = 1
    for s in w:
        n *= s
    return n + b[0]


def layer_macs(spec: ArchitectureSpec, name: str) -> int:
    """Multiply-accumulates of one layer; bias adds, activations and pooling are free."""
    l = spec.layer(name)
    in_shape = spec.input_shape_of(name)
    out_shape = spec.output_shape(name)
    if l.kind == "conv2d":
        kh, kw = l.kernel
        return out_shape[0] * out_shape[1] * l.width * kh * kw * in_shape[-1]
    if l.kind in ("dense", "softmax_output"):
        return in_shape[0] * l.width
    return 0


def count_params(spec: ArchitectureSpec) -> int:
    return sum(layer_params(spec, l.name) for l in spec.layers)


def count_flops(spec: ArchitectureSpec) -> int:
    return sum(layer_macs(spec, l.name) for l in spec.layers)


def load_architecture(path) -> ArchitectureSpec:
    """Load an architecture JSON file; bare names resolve to the bundled specs."""
    p = Path(path)
    if not p.exists() and p.suffix == "" and not p.parent.parts:
        return ArchitectureSpec.from_json(json.loads(bundled_text(f"{path}.json")))
    with open(p) as f:
        return ArchitectureSpec.from_json(json.load(f))


def save_architecture(spec: ArchitectureSpec, path) -> None:
    with open(path, "w") as f:
        json.dump(spec.to_json(), f, indent=2)
        f.write("\n")


def bundled_text(filename: str) -> str:
    return resources.files("cramnet").joinpath("archs").joinpath(filename).read_text()


def bundled_architectures() -> list[str]:
    return sorted(
        p.name[:-5] for p in resources.files("cramnet").joinpath("archs").iterdir()
        if p.name.endswith(".json") and not p.name.startswith("plan_")
    )
