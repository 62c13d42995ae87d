"""``cramnet`` command line.

Exit codes: 0 on success, 1 when a stage fails, 2 for an unusable config.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .architecture import SpecError, count_flops, count_params, load_architecture
from .cram import PlanError, load_plan
from .experiment import STAGES, ConfigError, load_config, load_metrics, run_experiment
from .metrics import emit_report

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 1, 2


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="override every seed in the config")
    p.add_argument("--data-dir", help="override the dataset directory")
    p.add_argument("--out-dir", help="override the output root (runs go in <out-dir>/<run_id>)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cramnet", description="Layer-wise teacher/student network compression.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb, text in (("train", "train the baseline (teacher) network"),
                       ("compress", "compress the teacher layer by layer"),
                       ("finetune", "fine-tune the compressed student end to end"),
                       ("eval", "compute accuracy and compression metrics"),
                       ("run", "run every stage listed in the config")):
        _common(sub.add_parser(verb, help=text))
    c = sub.add_parser("count", help="parameter and FLOP counts of an architecture (and plan)")
    _common(c, config_required=False)
    c.add_argument("--arch", help="architecture file or bundled name")
    c.add_argument("--plan", help="plan file; report the compressed network against the original")
    r = sub.add_parser("report", help="collect metrics of finished runs into report.md and points.csv")
    _common(r, config_required=False)
    r.add_argument("runs", nargs="*", help="run directories containing metrics.json")
    return ap


def _overrides(args) -> dict:
    return {"seed": args.seed, "data_dir": args.data_dir, "out_dir": args.out_dir}


def _count(args) -> int:
    if args.config:
        cfg = load_config(args.config, **_overrides(args))
        spec, plan = cfg.arch, cfg.plan
    elif args.arch:
        spec = load_architecture(args.arch)
        plan = load_plan(args.plan) if args.plan else None
    else:
        raise ConfigError("count needs --config or --arch")
    rows = [("original", spec)]
    if plan is not None:
        rows.append(("compressed", plan.apply(spec)))
    p0, f0 = count_params(spec), count_flops(spec)
    for label, s in rows:
        p, f = count_params(s), count_flops(s)
        print(f"{label:<11} params={p:,} ({100 * p / p0:.2f}%)  flops={f:,} ({100 * f / f0:.2f}%)")
    return EXIT_OK


def _report(args) -> int:
    dirs = [Path(d) for d in args.runs]
    out = args.out_dir
    if args.config:
        cfg = load_config(args.config, **_overrides(args))
        dirs.append(cfg.run_dir)
        out = out or cfg.run_dir
    if not dirs:
        raise ConfigError("report needs run directories or --config")
    try:
        runs = [load_metrics(d) for d in dirs]
    except (OSError, KeyError, json.JSONDecodeError) as e:
        print(f"error: cannot read metrics: {e}", file=sys.stderr)
        return EXIT_STAGE
    md, pts = emit_report(runs, out or ".")
    print(Path(md).read_text(), end="")
    print(f"wrote {md} and {pts}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "count":
            return _count(args)
        if args.verb == "report":
            return _report(args)
        cfg = load_config(args.config, **_overrides(args))
        stages = None if args.verb == "run" else [args.verb]
        manifest = run_experiment(cfg, stages)
    except (ConfigError, SpecError, PlanError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE
    for name in STAGES:
        st = manifest["stages"].get(name)
        if st and (stages is None or name in stages):
            extra = f" ({st['error']})" if "error" in st else ""
            acc = f" test_acc={st['test_acc']:.4f}" if "test_acc" in st else ""
            print(f"{name}: {st['status']}{acc}{extra}")
    if "metrics" in manifest["stages"].get("eval", {}) and (stages is None or "eval" in stages):
        m = manifest["stages"]["eval"]["metrics"]
        print(f"params {m['param_ratio']:.2f}%  flops {m['flop_ratio']:.2f}%  delta_a {m['delta_a']:+.2f}")
    print(f"run directory: {cfg.run_dir}")
    return EXIT_OK if manifest["status"] == "ok" else EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
