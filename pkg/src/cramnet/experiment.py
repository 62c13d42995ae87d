"""Config-driven experiment runs: baseline training, compression, fine-tuning, evaluation.

A run lives in ``<out_dir>/<run_id>/``. Every stage writes its artifacts
there and records its outcome in ``manifest.json``; later stages pick up the
checkpoints left by earlier ones, so stages can be run in separate
invocations. Nothing time-dependent is written, so two runs of one config
produce identical files.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from .architecture import ArchitectureSpec, SpecError, load_architecture
from .cram import CompressionDiverged, CompressionPlan, PlanError, compress, finetune, teacher_logits
from .data import Dataset, DatasetFormatError, load_cifar10, split, synth_dataset
from .metrics import MetricsReport, accuracy
from .model import CheckpointError, Model, build, load_checkpoint, save_checkpoint
from .optim import OptimizerConfig
from .training import StopRule, train

log = logging.getLogger(__name__)

STAGES = ("train", "compress", "finetune", "eval")
TRACE_FIELDS = ("index", "layer", "old_width", "new_width", "boundary", "epochs", "diverged",
                "val_acc", "test_acc", "params", "cache_hit")
TOP_KEYS = {"run_id", "arch", "plan", "data", "optimizer", "seeds", "stages", "train", "finetune",
            "teacher", "out_dir", "cache_dir"}
SEED_KEYS = ("init", "split", "train", "compress", "finetune")


class ConfigError(ValueError):
    """The experiment description itself is unusable (exit code 2)."""


class StageError(RuntimeError):
    """A stage could not complete (exit code 1)."""


@dataclass
class ExperimentConfig:
    run_id: str
    arch: ArchitectureSpec
    data: dict
    plan: CompressionPlan | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seeds: dict = field(default_factory=lambda: dict.fromkeys(SEED_KEYS, 0))
    stages: tuple[str, ...] = STAGES
    train_stop: StopRule = field(default_factory=StopRule)
    finetune_patience: int = 10
    teacher: str | None = None
    out_dir: Path = Path("runs")
    cache_dir: Path | None = None
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.run_id


def _resolve(base: Path, value):
    """Relative paths in a config file are taken relative to that file."""
    p = Path(value)
    return p if p.is_absolute() or not (base / p).exists() else base / p


def parse_config(raw: dict, base: Path = Path("."), *, seed=None, data_dir=None, out_dir=None) -> ExperimentConfig:
    """Validate a config dict; ``seed``/``data_dir``/``out_dir`` override its values."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    try:
        arch_ref = raw["arch"]
        if isinstance(arch_ref, dict):
            arch = ArchitectureSpec.from_json(arch_ref)
        else:
            local = _resolve(base, arch_ref)
            arch = load_architecture(local if local.exists() else arch_ref)

        plan = None
        if raw.get("plan") is not None:
            p = raw["plan"]
            if not isinstance(p, dict):
                p = json.loads(Path(_resolve(base, p)).read_text())
            plan = CompressionPlan.from_json(p)
            plan.validate(arch)

        data = dict(raw.get("data", {"kind": "synthetic"}))
        if data.get("kind") not in ("synthetic", "cifar10"):
            raise ConfigError(f"data.kind must be 'synthetic' or 'cifar10', got {data.get('kind')!r}")
        if data_dir is not None:
            data["dir"] = str(data_dir)
        elif data["kind"] == "cifar10" and "dir" in data:
            data["dir"] = str(_resolve(base, data["dir"]))

        seeds = dict.fromkeys(SEED_KEYS, 0)
        extra = set(raw.get("seeds", {})) - set(SEED_KEYS)
        if extra:
            raise ConfigError(f"unknown seeds {sorted(extra)}")
        seeds.update({k: int(v) for k, v in raw.get("seeds", {}).items()})
        if seed is not None:
            seeds = dict.fromkeys(SEED_KEYS, int(seed))

        stages = tuple(raw.get("stages", STAGES))
        bad = [s for s in stages if s not in STAGES]
        if bad:
            raise ConfigError(f"unknown stages {bad}; choose from {STAGES}")

        teacher = raw.get("teacher")
        return ExperimentConfig(
            run_id=str(raw.get("run_id", "run")),
            arch=arch,
            data=data,
            plan=plan,
            optimizer=OptimizerConfig.from_dict(raw.get("optimizer")),
            seeds=seeds,
            stages=stages,
            train_stop=StopRule.from_dict(raw.get("train")),
            finetune_patience=int(raw.get("finetune", {}).get("patience", 10)),
            teacher=str(_resolve(base, teacher)) if teacher else None,
            out_dir=Path(out_dir if out_dir is not None else raw.get("out_dir", "runs")),
            cache_dir=Path(raw["cache_dir"]) if raw.get("cache_dir") else None,
            raw=raw,
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError, SpecError, PlanError, OSError) as e:
        raise ConfigError(f"{type(e).__name__}: {e}") from e


def load_config(path, **overrides) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(raw, path.parent, **overrides)


# -- data ------------------------------------------------------------------

@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


def load_data(cfg: ExperimentConfig) -> Splits:
    d = cfg.data
    try:
        if d["kind"] == "synthetic":
            n_train, n_test = int(d.get("train", 2000)), int(d.get("test", 500))
            classes = int(d.get("classes", cfg.arch.classes))
            per_class = -(-(n_train + n_test) // classes)
            h, w, c = cfg.arch.input_shape
            full = synth_dataset(classes, per_class, h, w, c, seed=int(d.get("seed", 0)),
                                 noise=float(d.get("noise", 0.25)), jitter=float(d.get("jitter", 1.5)),
                                 blobs=int(d.get("blobs", 2)))
            train_all = full.subset(range(n_train), "train")
            test = full.subset(range(n_train, n_train + n_test), "test")
        else:
            if "dir" not in d:
                raise ConfigError("cifar10 data needs 'dir' (or --data-dir)")
            train_all, test = load_cifar10(d["dir"])
            if "train" in d:
                train_all = train_all.subset(range(int(d["train"])), "train")
            if "test" in d:
                test = test.subset(range(int(d["test"])), "test")
    except (OSError, DatasetFormatError) as e:
        raise StageError(f"data: {e}") from e
    if train_all.classes != cfg.arch.classes:
        raise ConfigError(f"data has {train_all.classes} classes, network has {cfg.arch.classes}")
    tr, val = split(train_all, float(d.get("val_fraction", 0.1)), seed=cfg.seeds["split"])
    return Splits(tr, val, test)


# -- run state -------------------------------------------------------------

class Run:
    """Artifacts and manifest of one run directory."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.dir = cfg.run_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        path = self.dir / "manifest.json"
        self.manifest = json.loads(path.read_text()) if path.exists() else {}
        self.manifest.update(run_id=cfg.run_id, config=cfg.raw)
        self.manifest.setdefault("stages", {})
        self._data: Splits | None = None

    @property
    def data(self) -> Splits:
        if self._data is None:
            self._data = load_data(self.cfg)
        return self._data

    def path(self, name: str) -> Path:
        return self.dir / name

    def write_text(self, name: str, text: str) -> str:
        self.path(name).write_text(text)
        return name

    def save(self) -> None:
        self.path("manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    def record(self, stage: str, status: str, artifacts=(), error: str | None = None, **info) -> None:
        entry = {"status": status, "artifacts": sorted(artifacts)}
        if error:
            entry["error"] = error
        entry.update(info)
        self.manifest["stages"][stage] = entry
        self.save()

    def checkpoint(self, name: str) -> Model:
        p = self.path(name)
        if not p.exists():
            raise StageError(f"missing checkpoint {p}")
        try:
            return load_checkpoint(p)
        except CheckpointError as e:
            raise StageError(f"bad checkpoint {p}: {e}") from e

    def teacher(self) -> Model:
        if self.path("teacher.ckpt").exists():
            return self.checkpoint("teacher.ckpt")
        ref = self.cfg.teacher or (self.cfg.plan.teacher if self.cfg.plan else None)
        if not ref:
            raise StageError("no teacher: run the train stage or set 'teacher' in the config")
        if not Path(ref).exists():
            raise StageError(f"missing checkpoint {ref}")
        try:
            return load_checkpoint(ref)
        except CheckpointError as e:
            raise StageError(f"bad checkpoint {ref}: {e}") from e

    def student(self) -> tuple[Model, str]:
        for name in ("finetuned.ckpt", "student.ckpt"):
            if self.path(name).exists():
                return self.checkpoint(name), name
        raise StageError("missing checkpoint student.ckpt: run the compress stage first")


def trace_csv(reports) -> str:
    """Per-sub-problem accuracy trace in solving order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_FIELDS)
    for r in reports:
        j = r.to_json()
        w.writerow([repr(j[k]) if isinstance(j[k], float) else j[k] for k in TRACE_FIELDS])
    return buf.getvalue()


# -- stages ----------------------------------------------------------------

def stage_train(run: Run) -> dict:
    cfg = run.cfg
    d = run.data
    model = build(cfg.arch, seed=cfg.seeds["init"])
    rep = train(model, d.train, cfg.optimizer, val_data=d.val, stop=cfg.train_stop, seed=cfg.seeds["train"])
    arts = [run.write_text("teacher_train.csv", rep.to_csv())]
    if rep.diverged:
        raise StageError(f"baseline training diverged: {rep.message}")
    save_checkpoint(model, run.path("teacher.ckpt"))
    arts.append("teacher.ckpt")
    return {"artifacts": arts, "epochs": rep.epochs, "test_acc": accuracy(model, d.test)}


def stage_compress(run: Run) -> dict:
    cfg = run.cfg
    if cfg.plan is None:
        raise ConfigError("the compress stage needs a plan")
    teacher = run.teacher()
    d = run.data
    arts = []
    try:
        student, reports = compress(teacher, cfg.plan, d.train, d.val, cfg.optimizer, cache_dir=cfg.cache_dir,
                                    seed=cfg.seeds["compress"], test_data=d.test, partial_dir=run.dir)
    except CompressionDiverged as e:
        arts.append(run.write_text("subproblems.csv", trace_csv(e.reports)))
        arts += [p.name for p in run.dir.glob("partial_sub*.ckpt")]
        raise StageError(str(e), arts) from e
    except PlanError as e:
        raise ConfigError(str(e)) from e
    for r in reports:
        arts.append(run.write_text(f"sub{r.index}_{r.layer}_train.csv", r.train.to_csv()))
    arts.append(run.write_text("subproblems.csv", trace_csv(reports)))
    save_checkpoint(student, run.path("student.ckpt"))
    arts.append("student.ckpt")
    return {"artifacts": arts, "test_acc": accuracy(student, d.test), "params": student.param_count(),
            "subproblems": len(reports)}


def stage_finetune(run: Run) -> dict:
    cfg = run.cfg
    epochs = cfg.plan.finetune_epochs if cfg.plan else 0
    student = run.checkpoint("student.ckpt")
    teacher = run.teacher()
    d = run.data
    tuned, rep = finetune(student, teacher_logits(teacher, d.train), d.train, epochs, cfg.optimizer,
                          d.val, teacher_logits(teacher, d.val), patience=cfg.finetune_patience,
                          seed=cfg.seeds["finetune"])
    arts = [run.write_text("finetune_train.csv", rep.to_csv())]
    if rep.diverged:
        raise StageError(f"fine-tuning diverged: {rep.message}", arts)
    save_checkpoint(tuned, run.path("finetuned.ckpt"))
    arts.append("finetuned.ckpt")
    return {"artifacts": arts, "epochs": rep.epochs, "test_acc": accuracy(tuned, d.test)}


def stage_eval(run: Run) -> dict:
    teacher = run.teacher()
    try:
        student, which = run.student()
    except StageError:
        if run.cfg.plan is not None:
            raise
        student, which = teacher, "teacher"
    test = run.data.test
    m = MetricsReport.from_specs(run.cfg.run_id, student.spec, teacher.spec,
                                 a_100=accuracy(teacher, test), a_c=accuracy(student, test))
    text = json.dumps(m.to_json(), indent=2, sort_keys=True) + "\n"
    return {"artifacts": [run.write_text("metrics.json", text)], "model": which, "metrics": m.to_json()}


STAGE_FUNCS = {"train": stage_train, "compress": stage_compress, "finetune": stage_finetune, "eval": stage_eval}


def run_experiment(cfg: ExperimentConfig, stages=None) -> dict:
    """Execute ``stages`` (default: the config's) in order; stops at the first failure.

    Returns the manifest. Raises :class:`ConfigError` for problems with the
    config itself; stage failures are recorded in the manifest with
    ``status: "failed"`` and the overall ``status`` becomes ``"failed"``.
    """
    run = Run(cfg)
    todo = tuple(stages) if stages is not None else cfg.stages
    run.manifest["status"] = "running"
    for name in todo:
        t0 = time.perf_counter()
        try:
            info = STAGE_FUNCS[name](run)
        except ConfigError:
            run.record(name, "failed", error="config error")
            run.manifest["status"] = "failed"
            run.save()
            raise
        except StageError as e:
            arts = e.args[1] if len(e.args) > 1 else ()
            log.error("stage %s failed: %s", name, e.args[0])
            run.record(name, "failed", arts, error=str(e.args[0]))
            run.manifest["status"] = "failed"
            run.save()
            return run.manifest
        arts = info.pop("artifacts")
        run.record(name, "ok", arts, **info)
        log.info("stage %s done in %.1fs", name, time.perf_counter() - t0)
    run.manifest["status"] = "ok"
    run.save()
    return run.manifest


def load_metrics(run_dir) -> MetricsReport:
    path = Path(run_dir) / "metrics.json"
    return MetricsReport.from_json(json.loads(path.read_text()))
