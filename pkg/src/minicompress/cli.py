"""Command-line experiment driver.

Subcommands: ``train-teacher``, ``prune``, ``compress``, ``eval``,
``sweep``, ``report``.  Every command takes ``--config`` (a JSON file with
ExperimentConfig fields) plus any number of ``--set key=value`` overrides
using dotted paths (values parsed as JSON when possible, e.g.
``--set pruning.keep_ratio=0.5 --set method=mir_after``).  Exit status is 0
only when every trial succeeded.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import MiniCompressError
from .flops import count_macs
from .harness import (ExperimentConfig, evaluate, load_checkpoint,
                      load_dataset, run_experiment, save_checkpoint, sweep,
                      train_teacher)
from .pruning import apply_plan, make_plan


def _apply_override(doc: dict, key: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def _load_config(args) -> ExperimentConfig:
    doc = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text())
    for item in args.set or []:
        if "=" not in item:
            raise MiniCompressError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _apply_override(doc, key, raw)
    return ExperimentConfig.from_dict(doc)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train_teacher(args) -> int:
    cfg = _load_config(args)
    train, test = load_dataset(cfg)
    out = _out_dir(args)
    graph, metrics = train_teacher(cfg, train, test,
                                   out_path=out / "teacher.ckpt")
    (out / "teacher_metrics.json").write_text(json.dumps(metrics, indent=2))
    print(f"teacher saved to {out / 'teacher.ckpt'}  "
          f"test top-1 {metrics['test_top1']:.4f} top-5 {metrics['test_top5']:.4f}")
    return 0


def cmd_prune(args) -> int:
    cfg = _load_config(args)
    teacher, _ = load_checkpoint(args.teacher, precision=cfg.precision)
    out = _out_dir(args)
    pr = cfg.pruning
    plan = make_plan(teacher, pr["scheme"], pr["keep_ratio"])
    pruned = apply_plan(teacher, plan)
    (out / "plan.json").write_text(plan.to_json())
    (out / "arch.json").write_text(pruned.to_arch_json())
    save_checkpoint(pruned, out / "pruned.ckpt")
    base = count_macs(teacher)
    rep = count_macs(pruned)
    flops = {"teacher": base.as_dict(), "student": rep.as_dict(),
             "mac_reduction": 1 - rep.total_macs / base.total_macs,
             "param_reduction": 1 - rep.total_params / base.total_params}
    (out / "flops.json").write_text(json.dumps(flops, indent=2))
    print(f"{pr['scheme']} keep={pr['keep_ratio']}: "
          f"MACs -{100 * flops['mac_reduction']:.2f}%  "
          f"params -{100 * flops['param_reduction']:.2f}%")
    return 0


def cmd_compress(args) -> int:
    cfg = _load_config(args)
    teacher, _ = load_checkpoint(args.teacher, precision=cfg.precision)
    train, test = load_dataset(cfg)
    report = run_experiment(cfg, teacher, train, test, out_dir=args.out)
    s = report["summary"]
    print(f"{cfg.method}: top-1 {s['top1_mean']:.4f} ± {s['top1_std']:.4f}  "
          f"top-5 {s['top5_mean']:.4f} ± {s['top5_std']:.4f}  "
          f"({len(report['trials'])} trials, {len(report['failures'])} failures)")
    return 0 if s["ok"] else 1


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    graph, _ = load_checkpoint(args.checkpoint, precision=cfg.precision)
    _, test = load_dataset(cfg)
    top1, top5 = evaluate(graph, test)
    print(f"top-1 {top1:.4f}  top-5 {top5:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    teacher, _ = load_checkpoint(args.teacher, precision=cfg.precision)
    train, test = load_dataset(cfg)
    values = [json.loads(v) for v in args.values.split(",")]
    out = sweep(cfg, args.axis, values, teacher, train, test, out_dir=args.out)
    for point in out["points"]:
        print(f"{args.axis}={point['value']}: "
              f"top-1 {point['top1_mean']:.4f} ± {point['top1_std']:.4f}")
    ok = all(not r["failures"] for r in out["reports"])
    return 0 if ok else 1


def cmd_report(args) -> int:
    run = Path(args.run)
    doc = json.loads((run / "report.json").read_text())
    s = doc["summary"]
    cfgd = doc["config"]
    print(f"model={cfgd['model']} method={cfgd['method']} "
          f"pruning={cfgd['pruning']}")
    print(f"config hash {doc['config_hash']}  "
          f"library {doc['library_version']} / numpy {doc['numpy_version']}")
    fl = doc["flops"]
    if "mac_reduction" in fl:
        print(f"MACs -{100 * fl['mac_reduction']:.2f}%  "
              f"params -{100 * fl['param_reduction']:.2f}%")
    for r in doc["trials"]:
        print(f"  seed {r['seed']}: top-1 {r['top1']:.4f} top-5 {r['top5']:.4f} "
              f"({r['seconds']:.1f}s, final loss {r['final_loss']:.4g})")
    print(f"mean top-1 {s['top1_mean']:.4f} ± {s['top1_std']:.4f}  "
          f"top-5 {s['top5_mean']:.4f} ± {s['top5_std']:.4f}")
    for f in doc["failures"]:
        print(f"  FAILED trial {f['trial']}: {f['error']}")
    return 0 if s["ok"] else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="minicompress",
        description="few-sample model compression experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, teacher=False, out=True):
        p.add_argument("--config", help="JSON config file (ExperimentConfig)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted-path config override")
        if teacher:
            p.add_argument("--teacher", required=True,
                           help="teacher checkpoint path")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train-teacher", help="train and checkpoint a teacher")
    common(p)
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("prune", help="build and apply a pruning plan")
    common(p, teacher=True)
    p.set_defaults(fn=cmd_prune)

    p = sub.add_parser("compress", help="run a multi-trial compression experiment")
    common(p, teacher=True)
    p.set_defaults(fn=cmd_compress)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p, out=False)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="sweep one axis of the experiment")
    common(p, teacher=True)
    p.add_argument("--axis", required=True, choices=("lr", "iterations", "samples"))
    p.add_argument("--values", required=True,
                   help="comma-separated axis values, e.g. 0.002,0.02,0.2")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", help="print a run directory's summary")
    p.add_argument("--run", required=True)
    p.set_defaults(fn=cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except MiniCompressError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
