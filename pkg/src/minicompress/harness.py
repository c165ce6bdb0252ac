"""Experiment driver: teacher training, compression runs, sweeps, reports.

Every experiment is a declarative :class:`ExperimentConfig`.  A run
executes ``trials`` independent trials; trial ``t`` uses seed
``base_seed + t`` and redraws its own few-sample subset (which is what
makes the reported standard deviation meaningful).  Outputs per run:
``trials.csv`` (one row per trial plus mean/std summary rows, fixed column
order) and ``report.json`` (config, config hash, library versions, FLOPs
report, per-trial results).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__ as LIB_VERSION
from .checkpoint import load_arrays, save_arrays
from .data import (FewSampleSpec, ImageDataset, load_cifar10, sample_few,
                   synth_dataset)
from .errors import ConfigurationError, NumericsError
from .flops import FlopsReport, count_macs
from .graph import LayerGraph, arch_from_json
from .mimic import (CompressedModel, MimicConfig, TrainHistory, baseline_bp,
                    baseline_kd, freeze_backbone_tune_head,
                    layerwise_recon_baseline, replace_head, train_mimic)
from .nnops import cross_entropy
from .optim import SGD, step_lr
from .pruning import apply_plan, make_plan, progressive_unstructured
from .tensor import Tape
from .zoo import build_model
from .data import augment_batch, batch_indices

METHODS = ("mir_before", "mir_after", "bp", "kd", "layerwise", "freeze_head")

CSV_COLUMNS = ("method", "scheme", "keep_ratio", "samples_spec", "seed",
               "top1", "top5", "macs", "params", "wall_seconds")


@dataclass
class ExperimentConfig:
    """Full declarative description of one compression experiment."""
    model: str = "resnet-tiny-8"
    num_classes: int = 10
    precision: str = "single"
    input_size: Optional[int] = None
    dataset: dict = field(default_factory=lambda: {
        "kind": "synthetic", "seed": 7, "per_class": 600, "test_per_class": 200,
        "image_size": 32})
    few: dict = field(default_factory=lambda: {"mode": "n_way_k_shot",
                                               "n": 10, "k": 3})
    pruning: dict = field(default_factory=lambda: {"scheme": "normal",
                                                   "keep_ratio": 0.5})
    method: str = "mir_before"
    mimic: dict = field(default_factory=dict)       # MimicConfig overrides
    baseline: dict = field(default_factory=dict)    # bp/kd/freeze settings
    teacher: dict = field(default_factory=lambda: {
        "epochs": 30, "lr": 0.1, "momentum": 0.9, "weight_decay": 5e-4,
        "batch_size": 64, "augment": "flip_crop", "seed": 0})
    augment: str = "flip_crop"
    trials: int = 5
    base_seed: int = 100

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(
                f"unknown method {self.method!r}; choose from {METHODS}")
        if self.trials < 1:
            raise ConfigurationError("trials must be >= 1")
        if self.method == "kd":
            base = self.baseline_settings()
            if base["tau"] is None or base["alpha"] is None:
                raise ConfigurationError("kd requires tau and alpha")
        if self.pruning.get("scheme") == "unstructured":
            if self.method not in ("mir_before", "mir_after"):
                raise ConfigurationError(
                    "unstructured pruning recovers via the mimic trainer; "
                    "use method mir_before or mir_after")
            if "sparsity" not in self.pruning:
                raise ConfigurationError("unstructured pruning needs sparsity")

    # ---- derived views ----

    def mimic_config(self) -> MimicConfig:
        tap = "before_pool" if self.method != "mir_after" else "after_pool"
        fields = {"tap": tap}
        fields.update(self.mimic)
        if "loss" in fields:
            fields["loss"] = tuple(fields["loss"])
        if "lr_decay_points" in fields:
            fields["lr_decay_points"] = tuple(fields["lr_decay_points"])
        return MimicConfig(**fields)

    def baseline_settings(self) -> dict:
        out = {"lr": 1e-3, "momentum": 0.9, "weight_decay": 1e-4,
               "iterations": 2000, "batch_size": 64, "tau": 2.0, "alpha": 0.7,
               "freeze_backbone": "trained", "head_lr": 1e-3,
               "lr_decay_points": (0.4, 0.8)}
        out.update(self.baseline)
        out["lr_decay_points"] = tuple(out["lr_decay_points"])
        return out

    def few_spec(self, seed: int) -> FewSampleSpec:
        return FewSampleSpec(mode=self.few["mode"], n=self.few.get("n"),
                             k=self.few.get("k"), m=self.few.get("m"),
                             seed=seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(doc: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(ExperimentConfig)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown config key(s): {sorted(unknown)}")
        return ExperimentConfig(**doc)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class TrialResult:
    top1: float
    top5: float
    seconds: float
    final_loss: float
    seed: int

    def __post_init__(self):
        if not (0.0 <= self.top1 <= self.top5 <= 1.0):
            raise ConfigurationError(
                f"accuracies out of order: top1={self.top1}, top5={self.top5}")


# datasets -----------------------------------------------------------------------


def load_dataset(cfg: ExperimentConfig) -> Tuple[ImageDataset, ImageDataset]:
    spec = cfg.dataset
    if spec["kind"] == "synthetic":
        train = synth_dataset(spec["seed"], cfg.num_classes,
                              spec["per_class"], spec.get("image_size", 32))
        test = synth_dataset(spec["seed"] + 1, cfg.num_classes,
                             spec.get("test_per_class", 200),
                             spec.get("image_size", 32))
        return train, test
    if spec["kind"] == "cifar10":
        return load_cifar10(spec["directory"])
    raise ConfigurationError(f"unknown dataset kind {spec['kind']!r}")


# evaluation ---------------------------------------------------------------------


def topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Correct if the true label is among the k largest logits.

    Ties at the boundary break toward the lower class index (stable sort).
    """
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (order == labels[:, None]).any(axis=1)


def evaluate(graph: LayerGraph, dataset: ImageDataset,
             batch_size: int = 256) -> Tuple[float, float]:
    """Eval-mode top-1/top-5 accuracy over a dataset."""
    hits1 = hits5 = 0
    k5 = min(5, dataset.num_classes)
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        x = dataset.normalized(dataset.images[sl])
        logits, _ = graph.forward(x, mode="eval")
        labels = dataset.labels[sl]
        hits1 += int(topk_hits(logits.data, labels, 1).sum())
        hits5 += int(topk_hits(logits.data, labels, k5).sum())
    n = len(dataset)
    return hits1 / n, hits5 / n


# teacher ------------------------------------------------------------------------


def train_teacher(cfg: ExperimentConfig, train: ImageDataset,
                  test: ImageDataset, out_path=None):
    """Cross-entropy training of the full model on the full train split."""
    t = cfg.teacher
    graph = build_model(cfg.model, cfg.num_classes, cfg.precision,
                        seed=t.get("seed", 0), input_size=cfg.input_size)
    epochs = t["epochs"]
    batch = t["batch_size"]
    steps_per_epoch = max(1, len(train) // batch)
    total = epochs * steps_per_epoch
    history = TrainHistory()
    if epochs > 0:
        opt = SGD(graph.params, lr=t["lr"], momentum=t["momentum"],
                  weight_decay=t["weight_decay"])
        ss = np.random.SeedSequence(t.get("seed", 0))
        batch_rng, aug_rng = (np.random.default_rng(s) for s in ss.spawn(2))
        t0 = time.perf_counter()
        for it, idx in enumerate(batch_indices(len(train), batch, total,
                                               batch_rng)):
            raw = augment_batch(train.images[idx], aug_rng, t["augment"])
            x = train.normalized(raw, dtype=np.float32
                                 if cfg.precision == "single" else np.float64)
            lr = step_lr(t["lr"], it, total, (0.5, 0.75))
            with Tape() as tape:
                logits, _ = graph.forward(x, mode="train")
                loss = cross_entropy(logits, train.labels[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise NumericsError(
                    f"teacher training diverged: loss={value} at step {it} "
                    f"(lr={lr}, epoch={it // steps_per_epoch})")
            opt.lr = lr
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
            history.losses.append(value)
            history.lrs.append(lr)
            history.wall.append(time.perf_counter() - t0)
    train_acc = evaluate(graph, train)
    test_acc = evaluate(graph, test)
    metrics = {"train_top1": train_acc[0], "train_top5": train_acc[1],
               "test_top1": test_acc[0], "test_top5": test_acc[1],
               "steps": total}
    if out_path is not None:
        save_checkpoint(graph, out_path, extra_meta={"metrics": metrics,
                                                     "model": cfg.model})
    return graph, metrics


def save_checkpoint(graph: LayerGraph, path, extra_meta: dict = None) -> None:
    arrays, kinds = graph.state_arrays()
    meta = {"arch": json.loads(graph.to_arch_json())}
    meta.update(extra_meta or {})
    save_arrays(path, arrays, meta=meta, kinds=kinds)


def load_checkpoint(path, precision: str = "single") -> Tuple[LayerGraph, dict]:
    meta, arrays, _ = load_arrays(path)
    graph = arch_from_json(json.dumps(meta["arch"]), precision=precision)
    graph.load_state(arrays)
    return graph, meta


# trials -------------------------------------------------------------------------


def _build_student(cfg: ExperimentConfig, teacher: LayerGraph,
                   few: ImageDataset, seed: int):
    """Prune (or progressively sparsify) and recover per the config."""
    pr = cfg.pruning
    mimic_cfg = cfg.mimic_config()
    if pr.get("scheme") == "unstructured":
        student, masks, hist = progressive_unstructured(
            teacher, few.unlabeled(), mimic_cfg,
            target_sparsity=pr["sparsity"], step=pr.get("step", 0.2),
            inner_iters=pr.get("inner_iters", 400),
            final_iters=pr.get("final_iters", 4000),
            seed=seed, augment=cfg.augment)
        flat = [h["loss"] for h in hist]
        losses = [v for chunk in flat for v in chunk]
        return replace_head(student, teacher).graph, losses
    plan = make_plan(teacher, pr["scheme"], pr["keep_ratio"])
    student = apply_plan(teacher, plan)
    base = cfg.baseline_settings()
    method = cfg.method
    if method in ("mir_before", "mir_after"):
        hist = train_mimic(teacher, student, few.unlabeled(), mimic_cfg,
                           seed=seed, augment=cfg.augment)
        return replace_head(student, teacher).graph, hist.losses
    if method == "bp":
        hist = baseline_bp(student, few, iterations=base["iterations"],
                           lr=base["lr"], momentum=base["momentum"],
                           weight_decay=base["weight_decay"],
                           batch_size=base["batch_size"],
                           lr_decay_points=base["lr_decay_points"],
                           seed=seed, augment=cfg.augment)
        return student, hist.losses
    if method == "kd":
        hist = baseline_kd(student, teacher, few, tau=base["tau"],
                           alpha=base["alpha"], iterations=base["iterations"],
                           lr=base["lr"], momentum=base["momentum"],
                           weight_decay=base["weight_decay"],
                           batch_size=base["batch_size"],
                           lr_decay_points=base["lr_decay_points"],
                           seed=seed, augment=cfg.augment)
        return student, hist.losses
    if method == "layerwise":
        hist = layerwise_recon_baseline(
            teacher, student, few.unlabeled(), mimic_cfg,
            per_block_iterations=cfg.mimic.get("per_block_iterations", 200),
            seed=seed, augment=cfg.augment)
        return replace_head(student, teacher).graph, hist.losses
    if method == "freeze_head":
        if base["freeze_backbone"] == "trained":
            train_mimic(teacher, student, few.unlabeled(), mimic_cfg,
                        seed=seed, augment=cfg.augment)
        graph = replace_head(student, teacher).graph
        hist = freeze_backbone_tune_head(
            graph, few, lr=base["head_lr"], iterations=base["iterations"],
            momentum=base["momentum"], weight_decay=base["weight_decay"],
            batch_size=base["batch_size"],
            lr_decay_points=base["lr_decay_points"], seed=seed,
            augment=cfg.augment)
        return graph, hist.losses
    raise ConfigurationError(f"unhandled method {method!r}")


def run_trial(cfg: ExperimentConfig, teacher: LayerGraph,
              train: ImageDataset, test: ImageDataset, trial: int):
    seed = cfg.base_seed + trial
    few = sample_few(train, cfg.few_spec(seed))
    t0 = time.perf_counter()
    model, losses = _build_student(cfg, teacher, few, seed)
    seconds = time.perf_counter() - t0
    top1, top5 = evaluate(model, test)
    final_loss = float(losses[-1]) if losses else float("nan")
    return TrialResult(top1=top1, top5=top5, seconds=seconds,
                       final_loss=final_loss, seed=seed), model, losses


def aggregate(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (n-1); a single trial has std 0."""
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, std


def _flops_summary(cfg: ExperimentConfig, teacher: LayerGraph) -> dict:
    base = count_macs(teacher)
    out = {"teacher_macs": base.total_macs, "teacher_params": base.total_params}
    pr = cfg.pruning
    if pr.get("scheme") in ("normal", "residual", "cd_style"):
        pruned = apply_plan(teacher, make_plan(teacher, pr["scheme"],
                                               pr["keep_ratio"]))
        rep = count_macs(pruned)
        out.update({
            "student_macs": rep.total_macs,
            "student_params": rep.total_params,
            "mac_reduction": 1.0 - rep.total_macs / base.total_macs,
            "param_reduction": 1.0 - rep.total_params / base.total_params,
        })
    else:
        out["sparsity"] = pr.get("sparsity")
    return out


def run_experiment(cfg: ExperimentConfig, teacher: LayerGraph,
                   train: ImageDataset, test: ImageDataset,
                   out_dir=None) -> dict:
    """All trials of one experiment; returns (and optionally writes) the report."""
    trials: List[TrialResult] = []
    failures: List[dict] = []
    for t in range(cfg.trials):
        try:
            result, _, _ = run_trial(cfg, teacher, train, test, t)
            trials.append(result)
        except Exception as exc:  # recorded, run continues
            failures.append({"trial": t, "error": f"{type(exc).__name__}: {exc}"})
    mean1, std1 = aggregate([r.top1 for r in trials]) if trials else (0.0, 0.0)
    mean5, std5 = aggregate([r.top5 for r in trials]) if trials else (0.0, 0.0)
    report = {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "library_version": LIB_VERSION,
        "numpy_version": np.__version__,
        "flops": _flops_summary(cfg, teacher),
        "trials": [dataclasses.asdict(r) for r in trials],
        "failures": failures,
        "summary": {
            "top1_mean": mean1, "top1_std": std1,
            "top5_mean": mean5, "top5_std": std5,
            "single_trial": len(trials) == 1,
            "ok": not failures,
        },
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(report, indent=2,
                                                        sort_keys=True))
        (out_dir / "trials.csv").write_text(render_csv(cfg, report))
    return report


def render_csv(cfg: ExperimentConfig, report: dict) -> str:
    pr = cfg.pruning
    scheme = pr.get("scheme", "")
    ratio = pr.get("keep_ratio", 1.0 - pr.get("sparsity", 0.0))
    samples_spec = json.dumps(cfg.few, sort_keys=True).replace(",", ";")
    fl = report["flops"]
    macs = fl.get("student_macs", fl["teacher_macs"])
    params = fl.get("student_params", fl["teacher_params"])
    lines = [",".join(CSV_COLUMNS)]

    def row(seed, top1, top5, secs):
        return (f"{cfg.method},{scheme},{ratio},{samples_spec},{seed},"
                f"{top1:.6f},{top5:.6f},{macs},{params},{secs:.3f}")

    for r in report["trials"]:
        lines.append(row(r["seed"], r["top1"], r["top5"], r["seconds"]))
    s = report["summary"]
    lines.append(row("mean", s["top1_mean"], s["top5_mean"], 0.0))
    lines.append(row("std", s["top1_std"], s["top5_std"], 0.0))
    return "\n".join(lines) + "\n"


# sweeps -------------------------------------------------------------------------

SWEEP_AXES = ("lr", "iterations", "samples")


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence,
          teacher: LayerGraph, train: ImageDataset, test: ImageDataset,
          out_dir=None) -> dict:
    """Run the experiment once per axis value; summarize the trend."""
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"unknown sweep axis {axis!r}")
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    points = []
    for v in values:
        sub = ExperimentConfig.from_dict(cfg.to_dict())
        if axis == "lr":
            sub.mimic = dict(sub.mimic, lr=v)
            sub.baseline = dict(sub.baseline, lr=v)
        elif axis == "iterations":
            sub.mimic = dict(sub.mimic, iterations=int(v))
            sub.baseline = dict(sub.baseline, iterations=int(v))
        else:
            sub.few = {"mode": "random_m", "m": int(v)}
        rep = run_experiment(sub, teacher, train, test)
        points.append({"value": v,
                       "top1_mean": rep["summary"]["top1_mean"],
                       "top1_std": rep["summary"]["top1_std"],
                       "report": rep})
    means = [p["top1_mean"] for p in points]
    stds = [p["top1_std"] for p in points]
    pooled = float(np.sqrt(np.mean(np.square(stds)))) if stds else 0.0
    non_decreasing = all(means[i + 1] >= means[i] - pooled
                         for i in range(len(means) - 1))
    argmax = int(np.argmax(means))
    summary = {
        "axis": axis,
        "values": list(values),
        "top1_means": means,
        "top1_stds": stds,
        "pooled_std": pooled,
        "non_decreasing_within_pooled_std": non_decreasing,
        "argmax_value": values[argmax],
        "argmax_interior": 0 < argmax < len(values) - 1,
    }
    out = {"summary": summary,
           "points": [{k: p[k] for k in ("value", "top1_mean", "top1_std")}
                      for p in points],
           "reports": [p["report"] for p in points]}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "sweep.json").write_text(json.dumps(out, indent=2,
                                                       sort_keys=True))
    return out
