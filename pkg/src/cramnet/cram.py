"""Layer-wise compression of a trained teacher into a thinner dense student.

The student is produced one resized layer at a time. Each sub-problem is
the tail of the network starting at the resized layer: it is fed the
activation the current network produces just before that layer, and is
trained with the combined teacher/label loss against the teacher's logits.
Only the resized layer and the next parametric layer (whose input width
changes) are trained; everything further downstream is frozen.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .architecture import ArchitectureSpec, SpecError, layer_param_shapes
from .data import Dataset
from .model import Model, forward, init_layer, save_checkpoint
from .optim import OptimizerConfig
from .training import EVAL_CHUNK, StopRule, TrainReport, evaluate, predict, train

log = logging.getLogger(__name__)

ORDERS = ("output_to_input", "input_to_output")


class PlanError(ValueError):
    pass


class CacheError(IOError):
    pass


class CompressionDiverged(RuntimeError):
    """A sub-problem diverged; ``student`` and ``reports`` hold the state reached so far."""

    def __init__(self, message, student, reports):
        super().__init__(message)
        self.student = student
        self.reports = reports


@dataclass
class CompressionPlan:
    targets: dict[str, int]
    order: str = "output_to_input"
    stop: StopRule = field(default_factory=StopRule)
    finetune_epochs: int = 0
    teacher: str | None = None
    accuracy_floor: float | None = None
    inherit_weights: bool = False  # seed re-trained layers from the teacher where shapes allow

    def __post_init__(self):
        if self.order not in ORDERS:
            raise PlanError(f"order must be one of {ORDERS}, got {self.order!r}")
        self.targets = {k: int(v) for k, v in self.targets.items()}

    @classmethod
    def from_json(cls, d: dict) -> "CompressionPlan":
        known = {"teacher", "order", "targets", "finetune_epochs", "stop", "accuracy_floor", "inherit_weights"}
        unknown = set(d) - known
        if unknown:
            raise PlanError(f"unknown plan fields {sorted(unknown)}")
        return cls(
            targets=dict(d.get("targets", {})),
            order=d.get("order", "output_to_input"),
            stop=StopRule.from_dict(d.get("stop")),
            finetune_epochs=int(d.get("finetune_epochs", 0)),
            teacher=d.get("teacher"),
            accuracy_floor=d.get("accuracy_floor"),
            inherit_weights=bool(d.get("inherit_weights", False)),
        )

    def to_json(self) -> dict:
        d = {
            "teacher": self.teacher,
            "order": self.order,
            "targets": dict(self.targets),
            "finetune_epochs": self.finetune_epochs,
            "stop": {"max_epochs": self.stop.max_epochs, "patience": self.stop.patience,
                     "min_delta": self.stop.min_delta, "restore_best": self.stop.restore_best},
        }
        if self.accuracy_floor is not None:
            d["accuracy_floor"] = self.accuracy_floor
        if self.inherit_weights:
            d["inherit_weights"] = True
        return d

    def validate(self, spec: ArchitectureSpec) -> None:
        for name, width in self.targets.items():
            try:
                layer = spec.layer(name)
            except KeyError:
                raise PlanError(f"target {name!r} is not a layer of the teacher") from None
            if layer.kind == "softmax_output":
                raise PlanError(f"target {name!r} is the output layer, whose width is fixed")
            if not layer.resizable:
                raise PlanError(f"target {name!r} ({layer.kind}) is not resizable")
            if not 1 <= width <= layer.width:
                raise PlanError(f"target {name!r}: width {width} outside [1, {layer.width}]")

    def apply(self, spec: ArchitectureSpec) -> ArchitectureSpec:
        self.validate(spec)
        return spec.with_widths(self.targets)


def load_plan(path) -> CompressionPlan:
    with open(path) as f:
        return CompressionPlan.from_json(json.load(f))


@dataclass(frozen=True)
class SubProblem:
    index: int
    input_boundary: str  # layer whose output feeds the slice; "input" for the image
    input_shape: tuple[int, ...]
    resized_layer: str
    original_width: int
    new_width: int
    next_layer: str  # next parametric layer; its incoming weights change shape
    start: int  # position of resized_layer in the full network
    spec: ArchitectureSpec  # the slice: resized_layer .. output, at current widths

    @property
    def trainable(self) -> tuple[str, str]:
        return (self.resized_layer, self.next_layer)

    @property
    def output_width(self) -> int:
        return self.spec.layer(self.next_layer).width


def slice_plan(teacher_spec: ArchitectureSpec, plan: CompressionPlan) -> list[SubProblem]:
    """Split ``plan`` into ordered sub-problems.

    With the default order the network is compressed from the output back
    to the input, so every slice is fed at the teacher's width and feeds
    into layers that are already at their compressed width.
    """
    plan.validate(teacher_spec)
    positions = sorted(teacher_spec.index(n) for n in plan.targets)
    if plan.order == "output_to_input":
        positions.reverse()
    widths: dict[str, int] = {}
    subs = []
    for k, pos in enumerate(positions):
        layer = teacher_spec.layers[pos]
        widths[layer.name] = plan.targets[layer.name]
        current = teacher_spec.with_widths(widths)
        nxt = next(l.name for l in teacher_spec.layers[pos + 1:] if l.has_params)
        subs.append(SubProblem(
            index=k,
            input_boundary="input" if pos == 0 else teacher_spec.layers[pos - 1].name,
            input_shape=current.input_shape_of(layer.name),
            resized_layer=layer.name,
            original_width=layer.width,
            new_width=plan.targets[layer.name],
            next_layer=nxt,
            start=pos,
            spec=current.tail(pos),
        ))
    return subs


# -- activation cache -------------------------------------------------------

def prefix_digest(model: Model, boundary: str) -> str:
    """Hash of the layers (spec and parameters) up to and including ``boundary``."""
    h = hashlib.sha256(json.dumps(list(model.spec.input_shape)).encode())
    if boundary == "input":
        return h.hexdigest()
    end = model.spec.index(boundary)
    for l in model.spec.layers[:end + 1]:
        h.update(json.dumps(l.to_json(), sort_keys=True).encode())
        if l.has_params:
            for a in model.params[l.name]:
                h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class ActivationCache:
    boundary: str
    fingerprint: str
    activations: np.ndarray
    logits: np.ndarray
    hit: bool = False
    forward_passes: int = 0
    path: Path | None = None

    @property
    def count(self) -> int:
        return len(self.activations)


def cache_fingerprint(teacher: Model, source: Model, data: Dataset, boundary: str) -> str:
    h = hashlib.sha256()
    for part in (data.fingerprint(), teacher.digest(), prefix_digest(source, boundary), boundary):
        h.update(part.encode())
    return h.hexdigest()[:24]


def _read_cache(d: Path, fingerprint: str) -> ActivationCache | None:
    index = d / "index.json"
    if not index.exists():
        return None
    try:
        meta = json.loads(index.read_text())
        if meta.get("fingerprint") != fingerprint:
            return None
        shape = tuple(meta["shape"])
        acts = np.fromfile(d / "activations.bin", dtype="<f8")
        logits = np.fromfile(d / "logits.bin", dtype="<f8")
        n = meta["count"]
        if acts.size != n * int(np.prod(shape)) or logits.size != n * meta["classes"]:
            return None
    except (OSError, ValueError, KeyError):
        return None
    return ActivationCache(
        meta["boundary"], fingerprint,
        acts.astype(np.float64).reshape((n,) + shape),
        logits.astype(np.float64).reshape(n, meta["classes"]),
        hit=True, path=d,
    )


def capture_activations(teacher: Model, data: Dataset, boundary: str, cache_dir=None,
                        source: Model | None = None) -> ActivationCache:
    """Activations at ``boundary`` plus teacher logits for every sample of ``data``.

    ``source`` is the network whose prefix produces the activations; it
    defaults to the teacher. With ``cache_dir`` set, results are stored as
    ``<cache_dir>/<fingerprint>/<boundary>/`` and reused when the
    fingerprint (data, teacher, source prefix) matches.
    """
    source = source or teacher
    if boundary != "input":
        source.spec.index(boundary)
    fp = cache_fingerprint(teacher, source, data, boundary)
    d = Path(cache_dir) / fp / boundary if cache_dir is not None else None
    if d is not None:
        cached = _read_cache(d, fp)
        if cached is not None:
            return cached

    acts, logits, passes = [], [], 0
    for i in range(0, len(data), EVAL_CHUNK):
        x = data.images[i:i + EVAL_CHUNK]
        if source is teacher:
            out, got = forward(teacher, x, capture=[boundary])
            acts.append(got[boundary])
            logits.append(out)
        else:
            acts.append(x if boundary == "input" else forward(source, x, stop=boundary)[0])
            logits.append(forward(teacher, x)[0])
        passes += 1
    shape = source.spec.output_shape(boundary)
    a = np.concatenate(acts) if acts else np.zeros((0,) + shape)
    z = np.concatenate(logits) if logits else np.zeros((0, teacher.spec.classes))
    cache = ActivationCache(boundary, fp, a, z, hit=False, forward_passes=passes, path=d)

    if d is not None:
        try:
            d.mkdir(parents=True, exist_ok=True)
            a.astype("<f8").tofile(d / "activations.bin")
            z.astype("<f8").tofile(d / "logits.bin")
            meta = {"boundary": boundary, "count": len(a), "shape": list(shape), "classes": z.shape[1],
                    "fingerprint": fp, "dtype": "<f8", "data": data.fingerprint(),
                    "teacher": teacher.digest(), "source_prefix": prefix_digest(source, boundary)}
            # index last: a cache directory without index.json is never trusted
            (d / "index.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        except OSError as e:
            raise CacheError(f"cannot write activation cache {d}: {e}") from e
    return cache


# -- solving sub-problems ---------------------------------------------------

@dataclass
class SubProblemReport:
    index: int
    layer: str
    old_width: int
    new_width: int
    boundary: str
    train: TrainReport
    val_acc: float = math.nan
    test_acc: float = math.nan
    params: int = 0
    cache_hit: bool = False

    def to_json(self) -> dict:
        return {
            "index": self.index, "layer": self.layer, "old_width": self.old_width,
            "new_width": self.new_width, "boundary": self.boundary, "epochs": self.train.epochs,
            "diverged": self.train.diverged, "message": self.train.message,
            "val_acc": self.val_acc, "test_acc": self.test_acc, "params": self.params,
            "cache_hit": self.cache_hit,
        }


def subproblem_model(sub: SubProblem, current: Model, seed: int, inherit: bool = False) -> Model:
    """Slice model for ``sub``: fresh trainable layers, frozen layers copied from ``current``."""
    params = {}
    for l in sub.spec.param_layers:
        if l.name in sub.trainable:
            old = current.params.get(l.name)
            fresh = init_layer(sub.spec, l.name, seed)
            if inherit and old is not None and all(a.shape == b.shape for a, b in zip(old, fresh)):
                fresh = [a.copy() for a in old]
            params[l.name] = fresh
        else:
            params[l.name] = [a.copy() for a in current.params[l.name]]
    return Model(sub.spec, params, seed)


def graft(current: Model, sub: SubProblem, solved: Model) -> Model:
    """Network ``current`` with the slice's layers replaced by ``solved``."""
    layers = current.spec.layers[:sub.start] + sub.spec.layers
    spec = ArchitectureSpec(current.spec.input_shape, layers, current.spec.classes)
    params = {l.name: [a.copy() for a in current.params[l.name]]
              for l in current.spec.layers[:sub.start] if l.has_params}
    params.update({k: [a.copy() for a in v] for k, v in solved.params.items()})
    return Model(spec, params, current.seed)


def train_subproblem(sub: SubProblem, cache: ActivationCache, labels, config: OptimizerConfig,
                     current: Model, stop: StopRule = StopRule(), val_cache: ActivationCache | None = None,
                     val_labels=None, seed: int = 0, inherit: bool = False) -> tuple[Model, TrainReport]:
    """Train the slice for ``sub`` on cached inputs against the teacher logits and labels."""
    if cache.boundary != sub.input_boundary:
        raise PlanError(f"cache holds {cache.boundary!r}, sub-problem {sub.index} needs {sub.input_boundary!r}")
    if cache.activations.shape[1:] != sub.input_shape:
        raise PlanError(f"cached activations {cache.activations.shape[1:]} != slice input {sub.input_shape}")
    model = subproblem_model(sub, current, seed, inherit)
    classes = sub.spec.classes
    data = Dataset(cache.activations, labels, classes, f"sub{sub.index}")
    val = Dataset(val_cache.activations, val_labels, classes, f"sub{sub.index}-val") if val_cache else None
    report = train(model, data, config, loss="cram", teacher=cache.logits,
                   val_data=val, val_teacher=val_cache.logits if val_cache else None,
                   stop=stop, trainable=sub.trainable, seed=seed)
    return model, report


def _sub_seed(seed: int, index: int) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{index}".encode()).digest()[:8], "little")


def compress(teacher: Model, plan: CompressionPlan, train_data: Dataset, val_data: Dataset | None = None,
             config: OptimizerConfig = OptimizerConfig(), cache_dir=None, seed: int = 0,
             test_data: Dataset | None = None, partial_dir=None) -> tuple[Model, list[SubProblemReport]]:
    """Solve every sub-problem of ``plan`` in order and return the assembled student.

    Sub-problems run strictly one after another: each is fed by, and
    grafted onto, the network left by the previous ones. When
    ``plan.accuracy_floor`` (a fraction) is set, compression halts as soon
    as validation accuracy of the network so far falls below it. On
    divergence :class:`CompressionDiverged` is raised; with
    ``partial_dir`` set the last good network is saved there first.
    """
    subs = slice_plan(teacher.spec, plan)
    current = teacher.copy()
    reports: list[SubProblemReport] = []
    for sub in subs:
        cache = capture_activations(teacher, train_data, sub.input_boundary, cache_dir, source=current)
        val_cache = (capture_activations(teacher, val_data, sub.input_boundary, cache_dir, source=current)
                     if val_data is not None and len(val_data) else None)
        sseed = _sub_seed(seed, sub.index)
        solved, tr = train_subproblem(
            sub, cache, train_data.labels, config, current, plan.stop, val_cache,
            val_data.labels if val_cache else None, seed=sseed, inherit=plan.inherit_weights)
        rep = SubProblemReport(sub.index, sub.resized_layer, sub.original_width, sub.new_width,
                               sub.input_boundary, tr, cache_hit=cache.hit)
        if tr.diverged:
            reports.append(rep)
            if partial_dir is not None:
                Path(partial_dir).mkdir(parents=True, exist_ok=True)
                save_checkpoint(current, Path(partial_dir) / f"partial_sub{sub.index}.ckpt")
            raise CompressionDiverged(f"sub-problem {sub.index} ({sub.resized_layer}) diverged: {tr.message}",
                                      current, reports)
        current = graft(current, sub, solved)
        rep.params = current.param_count()
        if val_data is not None and len(val_data):
            rep.val_acc = evaluate(current, val_data)[1]
        if test_data is not None and len(test_data):
            rep.test_acc = evaluate(current, test_data)[1]
        reports.append(rep)
        log.info("sub-problem %d (%s -> %d): val_acc=%.4f test_acc=%.4f epochs=%d", sub.index,
                 sub.resized_layer, sub.new_width, rep.val_acc, rep.test_acc, tr.epochs)
        if plan.accuracy_floor is not None and rep.val_acc < plan.accuracy_floor:
            log.info("accuracy %.4f below floor %.4f; halting", rep.val_acc, plan.accuracy_floor)
            break
    return current, reports


def finetune(student: Model, teacher_logits, data: Dataset, epochs: int,
             config: OptimizerConfig = OptimizerConfig(), val_data: Dataset | None = None,
             val_teacher=None, patience: int = 10, seed: int = 0) -> tuple[Model, TrainReport]:
    """End-to-end training of every student parameter with the combined loss."""
    model = student.copy()
    if epochs <= 0:
        return model, TrainReport()
    report = train(model, data, config, loss="cram", teacher=teacher_logits, val_data=val_data,
                   val_teacher=val_teacher, stop=StopRule(max_epochs=epochs, patience=patience), seed=seed)
    return model, report


def teacher_logits(teacher: Model, data: Dataset) -> np.ndarray:
    return predict(teacher, data.images)


def check_dense(student: Model, expected: ArchitectureSpec) -> None:
    """Raise unless ``student`` is a plain dense network with exactly ``expected``'s layout."""
    if student.spec != expected:
        raise SpecError("student architecture differs from the plan applied to the teacher")
    for l in expected.param_layers:
        w, b = student.params[l.name]
        ws, bs = layer_param_shapes(expected, l.name)
        if w.shape != ws or b.shape != bs:
            raise SpecError(f"layer {l.name}: parameter shapes {w.shape}/{b.shape} != {ws}/{bs}")
