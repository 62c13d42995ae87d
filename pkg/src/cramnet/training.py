"""Mini-batch RMSProp training, evaluation and finite-difference gradient checks."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, batch_indices
from .losses import DivergentLossError, loss_and_grad, one_hot
from .model import Model, backward, forward, forward_train
from .optim import NonFiniteGradientError, OptimizerConfig, rmsprop_step

log = logging.getLogger(__name__)

EVAL_CHUNK = 256
CSV_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass(frozen=True)
class StopRule:
    max_epochs: int = 100
    patience: int = 10
    min_delta: float = 1e-4
    restore_best: bool = True

    @classmethod
    def from_dict(cls, d: dict | None) -> "StopRule":
        return cls(**(d or {}))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float = math.nan
    val_acc: float = math.nan


@dataclass
class TrainReport:
    history: list[EpochRecord] = field(default_factory=list)
    diverged: bool = False
    message: str = ""
    stopped_early: bool = False
    best_epoch: int = 0

    @property
    def epochs(self) -> int:
        return len(self.history)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.history:
            w.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in CSV_FIELDS[1:]])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_csv())


def predict(model: Model, images, chunk: int = EVAL_CHUNK) -> np.ndarray:
    """Logits for ``images`` computed in fixed-size chunks."""
    out = [forward(model, images[i:i + chunk])[0] for i in range(0, len(images), chunk)]
    if not out:
        return np.zeros((0, model.spec.classes))
    return np.concatenate(out)


def evaluate(model: Model, data: Dataset, loss: str = "ce", teacher=None) -> tuple[float, float]:
    """``(mean loss, accuracy in [0, 1])``; a divergent loss comes back as ``inf``."""
    if len(data) == 0:
        return math.nan, math.nan
    total, correct = 0.0, 0
    for i in range(0, len(data), EVAL_CHUNK):
        sl = slice(i, i + EVAL_CHUNK)
        q = forward(model, data.images[sl])[0]
        y = data.labels[sl]
        p = teacher[sl] if teacher is not None else None
        try:
            value, _ = loss_and_grad(loss, q, one_hot(y, data.classes), p)
        except DivergentLossError:
            value = math.inf
        total += value * len(y)
        correct += int((q.argmax(axis=1) == y).sum())
    return total / len(data), correct / len(data)


def _param_views(model: Model, names) -> dict:
    return {(n, j): model.params[n][j] for n in names for j in (0, 1)}


def train(
    model: Model,
    data: Dataset,
    config: OptimizerConfig = OptimizerConfig(),
    loss: str = "ce",
    teacher=None,
    val_data: Dataset | None = None,
    val_teacher=None,
    stop: StopRule = StopRule(),
    trainable=None,
    seed: int = 0,
) -> TrainReport:
    """Train ``model`` in place.

    ``teacher``/``val_teacher`` are teacher logits aligned with ``data`` and
    ``val_data``, needed for ``loss="cram"``. ``trainable`` restricts updates
    to the named layers. Early stopping watches the validation loss (the
    training loss when there is no validation set). A non-finite loss or
    gradient ends training with ``report.diverged`` set.
    """
    names = [l.name for l in model.spec.param_layers] if trainable is None else list(trainable)
    params = _param_views(model, names)
    state: dict = {}
    rng = np.random.default_rng(seed)
    report = TrainReport()
    best, waited, best_epoch = math.inf, 0, 0
    snapshot = None

    for epoch in range(1, stop.max_epochs + 1):
        total, correct = 0.0, 0
        try:
            for idx in batch_indices(len(data), config.batch_size, rng):
                x, y = data.images[idx], data.labels[idx]
                p = teacher[idx] if teacher is not None else None
                q, caches = forward_train(model, x)
                value, g = loss_and_grad(loss, q, one_hot(y, data.classes), p)
                if not math.isfinite(value):
                    raise DivergentLossError(f"loss is {value}")
                total += value * len(idx)
                correct += int((q.argmax(axis=1) == y).sum())
                grads = backward(model, caches, g, trainable=names)
                flat = {(n, j): grads[n][j] for n in names for j in (0, 1)}
                rmsprop_step(params, flat, state, config)
        except (DivergentLossError, NonFiniteGradientError) as e:
            report.diverged = True
            report.message = f"epoch {epoch}: {e}"
            log.warning("training diverged at %s", report.message)
            break

        rec = EpochRecord(epoch, total / max(len(data), 1), correct / max(len(data), 1))
        if val_data is not None and len(val_data):
            rec.val_loss, rec.val_acc = evaluate(model, val_data, loss, val_teacher)
        report.history.append(rec)
        log.debug("epoch %d: %s", epoch, rec)

        watched = rec.val_loss if val_data is not None and len(val_data) else rec.train_loss
        if not math.isfinite(watched):
            report.diverged = True
            report.message = f"epoch {epoch}: monitored loss is {watched}"
            break
        if watched < best - stop.min_delta:
            best, waited, best_epoch = watched, 0, epoch
            if stop.restore_best:
                snapshot = {k: v.copy() for k, v in params.items()}
        else:
            waited += 1
            if waited >= stop.patience:
                report.stopped_early = True
                break
    if stop.restore_best and snapshot is not None:
        for k, v in snapshot.items():
            params[k][...] = v
    report.best_epoch = best_epoch
    return report


def gradient_check(
    model: Model,
    images,
    labels,
    loss: str = "ce",
    teacher=None,
    eps: float = 1e-5,
    coords: int = 500,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between backprop and central differences.

    Checks every parameter when the model has at most ``coords`` of them,
    otherwise a random sample of ``coords``. The relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    y = one_hot(labels, model.spec.classes)

    def objective() -> float:
        return loss_and_grad(loss, forward(model, images)[0], y, teacher)[0]

    q, caches = forward_train(model, images)
    _, g = loss_and_grad(loss, q, y, teacher)
    grads = backward(model, caches, g)

    keys = [(l.name, j) for l in model.spec.param_layers for j in (0, 1)]
    sizes = [model.params[n][j].size for n, j in keys]
    total = sum(sizes)
    offsets = np.cumsum([0] + sizes)
    rng = np.random.default_rng(seed)
    picks = np.arange(total) if total <= coords else np.sort(rng.choice(total, coords, replace=False))

    worst = 0.0
    for flat_i in picks:
        k = int(np.searchsorted(offsets, flat_i, side="right") - 1)
        name, j = keys[k]
        arr = model.params[name][j].reshape(-1)
        i = flat_i - offsets[k]
        orig = arr[i]
        arr[i] = orig + eps
        up = objective()
        arr[i] = orig - eps
        down = objective()
        arr[i] = orig
        numeric = (up - down) / (2 * eps)
        analytic = grads[name][j].reshape(-1)[i]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
    return worst
