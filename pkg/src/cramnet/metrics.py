"""Compression, accuracy and FLOP metrics and the report emitters."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .architecture import ArchitectureSpec, count_flops, count_params
from .data import Dataset
from .training import predict


def _ratio(new: int, old: int) -> float:
    if old == 0:
        raise ZeroDivisionError("reference network has no cost to compare against")
    return 100.0 * new / old


def param_ratio(new_spec: ArchitectureSpec, old_spec: ArchitectureSpec) -> float:
    """Percent of the original parameters kept."""
    return _ratio(count_params(new_spec), count_params(old_spec))


def flop_ratio(new_spec: ArchitectureSpec, old_spec: ArchitectureSpec) -> float:
    """Percent of the original multiply-accumulates kept."""
    return _ratio(count_flops(new_spec), count_flops(old_spec))


def accuracy_from_logits(logits, labels) -> float:
    """Percent of rows whose argmax (lowest index on ties) equals the label."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("accuracy of an empty test set is undefined")
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) == labels))


def accuracy(model, test_set: Dataset) -> float:
    if len(test_set) == 0:
        raise ValueError("accuracy of an empty test set is undefined")
    return accuracy_from_logits(predict(model, test_set.images), test_set.labels)


def delta_a(a_c: float, a_100: float) -> float:
    """Compressed minus baseline accuracy, in percentage points (not normalised)."""
    return a_c - a_100


@dataclass
class MetricsReport:
    run_id: str
    params_new: int
    params_old: int
    flops_new: int
    flops_old: int
    a_100: float = math.nan
    a_c: float = math.nan

    @property
    def param_ratio(self) -> float:
        return _ratio(self.params_new, self.params_old)

    @property
    def flop_ratio(self) -> float:
        return _ratio(self.flops_new, self.flops_old)

    @property
    def delta_a(self) -> float:
        return delta_a(self.a_c, self.a_100)

    @classmethod
    def from_specs(cls, run_id, new_spec, old_spec, a_100=math.nan, a_c=math.nan) -> "MetricsReport":
        return cls(run_id, count_params(new_spec), count_params(old_spec),
                   count_flops(new_spec), count_flops(old_spec), a_100, a_c)

    def to_json(self) -> dict:
        d = asdict(self)
        d.update(param_ratio=self.param_ratio, flop_ratio=self.flop_ratio, delta_a=self.delta_a)
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}

    @classmethod
    def from_json(cls, d: dict) -> "MetricsReport":
        nan = lambda v: math.nan if v is None else float(v)  # noqa: E731
        return cls(d["run_id"], d["params_new"], d["params_old"], d["flops_new"], d["flops_old"],
                   nan(d.get("a_100")), nan(d.get("a_c")))


def _fmt(v: float, signed: bool = False) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    return f"{v:+.2f}" if signed else f"{v:.2f}"


def points_csv(runs: list[MetricsReport]) -> str:
    """Plot-ready rows: ``run_id,param_ratio,flop_ratio,delta_a``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run_id", "param_ratio", "flop_ratio", "delta_a"])
    for r in runs:
        w.writerow([r.run_id, _fmt(r.param_ratio), _fmt(r.flop_ratio), _fmt(r.delta_a, signed=True)])
    return buf.getvalue()


def report_markdown(runs: list[MetricsReport]) -> str:
    lines = [
        "| Test # | # Parameters | % of Parameters | % of FLOPs | Accuracy Difference (±%) |",
        "|---|---|---|---|---|",
    ]
    for r in runs:
        lines.append(f"| {r.run_id} | {r.params_new:,} | {_fmt(r.param_ratio)} | {_fmt(r.flop_ratio)} "
                     f"| {_fmt(r.delta_a, signed=True)} |")
    return "\n".join(lines) + "\n"


def emit_report(runs: list[MetricsReport], out_dir) -> tuple[str, str]:
    """Write ``report.md`` and ``points.csv`` into ``out_dir``; returns their paths."""
    if not runs:
        raise ValueError("need at least one completed run")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    md, pts = out / "report.md", out / "points.csv"
    md.write_text(report_markdown(runs))
    pts.write_text(points_csv(runs))
    return str(md), str(pts)
