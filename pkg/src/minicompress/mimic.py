"""Feature-mimicking compression and its comparison baselines.

The recovery recipe is two unsupervised steps: train the pruned backbone so
its features at a chosen tap (before or after the final pooling layer)
match the frozen teacher's on a handful of unlabeled images, then graft the
teacher's classifier head verbatim onto the trained backbone.

Baselines implemented for comparison: plain cross-entropy fine-tuning
(``bp``), soft-target distillation (``kd``), sequential per-block feature
reconstruction (``layerwise``), and head-only tuning over a frozen backbone
(``freeze_head``).

Conventions shared by every trainer here: the teacher always runs in eval
mode outside the autodiff tape; the student's BN layers run in train mode;
minibatches come from concatenated shuffled epochs cut into exactly
``iterations`` steps; the learning rate drops 10x at the configured
fractions of the iteration budget.  A learning rate of exactly 0 is the
documented degenerate case: no optimizer step is taken at all.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .data import ImageDataset, UnlabeledImages, augment_batch, batch_indices
from .errors import ConfigurationError, NumericsError, PruningError
from .graph import TAP_AFTER, TAP_BEFORE, LayerGraph
from .nnops import cosine_distance, cross_entropy
from .optim import SGD, step_lr
from .tensor import Tape, Tensor, mul, tabs, tsum

LOSS_KINDS = ("mse", "l1", "cosine")


@dataclass(frozen=True)
class MimicConfig:
    """Hyperparameters of one mimicking run."""
    tap: str = TAP_BEFORE
    loss: Tuple[str, ...] = ("mse",)
    iterations: int = 2000
    batch_size: int = 64
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_points: Tuple[float, ...] = (0.4, 0.8)

    def __post_init__(self):
        if self.tap not in (TAP_BEFORE, TAP_AFTER):
            raise ConfigurationError(f"unknown tap {self.tap!r}")
        if not self.loss:
            raise ConfigurationError("loss set must be nonempty")
        unknown = set(self.loss) - set(LOSS_KINDS)
        if unknown:
            raise ConfigurationError(f"unknown loss kind(s) {sorted(unknown)}")
        pts = tuple(self.lr_decay_points)
        if any(not 0.0 < p < 1.0 for p in pts) or list(pts) != sorted(set(pts)):
            raise ConfigurationError(
                "lr_decay_points must be strictly increasing within (0, 1)")
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigurationError("iterations and batch_size must be >= 1")


@dataclass
class TrainHistory:
    losses: List[float] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    wall: List[float] = field(default_factory=list)

    def log_line(self, i: int) -> str:
        return json.dumps({"iteration": i, "lr": self.lrs[i],
                           "loss": self.losses[i], "wall_time": self.wall[i]})


def mimic_loss(fp: Tensor, fo: Tensor, kinds: Sequence[str] = ("mse",)) -> Tensor:
    """Feature discrepancy averaged over the batch only.

    mse: squared Frobenius norm of (Fp - Fo) / batch;  l1: summed absolute
    difference / batch;  cosine: mean over samples of 1 - cos on flattened
    features (a zero-norm sample contributes exactly 1).  Multiple kinds
    sum with unit weights.
    """
    if fp.shape != fo.shape:
        raise ConfigurationError(
            f"feature shape mismatch {fp.shape} vs {fo.shape}")
    if not kinds:
        raise ConfigurationError("at least one loss kind required")
    n = fp.shape[0]
    total: Optional[Tensor] = None
    for kind in kinds:
        if kind == "mse":
            d = fp - fo
            term = mul(tsum(mul(d, d)), 1.0 / n)
        elif kind == "l1":
            term = mul(tsum(tabs(fp - fo)), 1.0 / n)
        elif kind == "cosine":
            term = mul(tsum(cosine_distance(fp, fo)), 1.0 / n)
        else:
            raise ConfigurationError(f"unknown loss kind {kind!r}")
        total = term if total is None else total + term
    return total


def _check_tap_widths(teacher: LayerGraph, student: LayerGraph) -> None:
    t_ch = teacher.channels()[teacher.tap_sites[TAP_BEFORE]]
    s_ch = student.channels()[student.tap_sites[TAP_BEFORE]]
    if t_ch != s_ch:
        raise ConfigurationError(
            f"teacher tap width {t_ch} != student tap width {s_ch}: "
            "mimicking at the pooling taps needs a pruning scheme that "
            "preserves the final feature width (the built-in schemes exempt "
            "the last coupled group for exactly this reason)")


def _rng_pair(seed: int):
    batch_ss, aug_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(batch_ss), np.random.default_rng(aug_ss)


def train_mimic(teacher: LayerGraph, student: LayerGraph,
                data: UnlabeledImages, cfg: MimicConfig, seed: int = 0,
                augment: str = "none",
                post_step: Optional[Callable[[], None]] = None,
                log_file=None) -> TrainHistory:
    """Train the student backbone to reproduce the teacher's tap features.

    Unsupervised: ``data`` carries no labels.  The teacher is used as a
    frozen eval-mode target; only the student's backbone parameters are
    updated (its head stays exactly as sliced/copied).  Returns the loss
    trajectory.
    """
    _check_tap_widths(teacher, student)
    batch_rng, aug_rng = _rng_pair(seed)
    params = student.backbone_params()
    opt = None
    if cfg.lr > 0:
        opt = SGD(params, lr=cfg.lr, momentum=cfg.momentum,
                  weight_decay=cfg.weight_decay)
    history = TrainHistory()
    t_pool = teacher.head_boundary
    s_pool = student.head_boundary
    t0 = time.perf_counter()
    for it, idx in enumerate(batch_indices(len(data), cfg.batch_size,
                                           cfg.iterations, batch_rng)):
        raw = augment_batch(data.images[idx], aug_rng, augment)
        x = data.normalized(raw, dtype=student_dtype(student))
        _, t_taps = teacher.forward(x, taps={cfg.tap}, mode="eval",
                                    stop_at=t_pool)
        target = t_taps[cfg.tap].detach()
        lr = step_lr(cfg.lr, it, cfg.iterations, cfg.lr_decay_points) \
            if cfg.lr > 0 else 0.0
        with Tape() as tape:
            _, s_taps = student.forward(x, taps={cfg.tap}, mode="train",
                                        stop_at=s_pool)
            loss = mimic_loss(s_taps[cfg.tap], target, cfg.loss)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericsError(f"mimic loss became non-finite at step {it}")
        if opt is not None:
            opt.lr = lr
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
            if post_step is not None:
                post_step()
        history.losses.append(value)
        history.lrs.append(lr)
        history.wall.append(time.perf_counter() - t0)
        if log_file is not None:
            log_file.write(history.log_line(it) + "\n")
    return history


def student_dtype(graph: LayerGraph):
    return next(iter(graph.params.values())).data.dtype


# replacing -----------------------------------------------------------------


@dataclass(frozen=True)
class CompressedModel:
    """Trained backbone with the teacher's classifier grafted on top."""
    graph: LayerGraph
    head_param_names: Tuple[str, ...]

    def forward(self, x, mode: str = "eval"):
        logits, _ = self.graph.forward(x, mode=mode)
        return logits


def replace_head(backbone: LayerGraph, teacher: LayerGraph) -> CompressedModel:
    """Copy the teacher's final linear parameters verbatim onto ``backbone``."""
    t_head = teacher.head_node
    s_head = backbone.head_node
    if (t_head.attrs["in_features"] != s_head.attrs["in_features"]
            or t_head.attrs["out_features"] != s_head.attrs["out_features"]):
        raise ConfigurationError(
            f"head width mismatch: teacher {t_head.attrs['in_features']}->"
            f"{t_head.attrs['out_features']}, backbone "
            f"{s_head.attrs['in_features']}->{s_head.attrs['out_features']}")
    merged = backbone.copy()
    names = []
    for suffix in ("weight", "bias"):
        src = f"{t_head.id}.{suffix}"
        dst = f"{s_head.id}.{suffix}"
        merged.params[dst] = Tensor(teacher.params[src].data.copy(),
                                    requires_grad=True)
        names.append(dst)
    return CompressedModel(graph=merged, head_param_names=tuple(names))


# supervised baselines --------------------------------------------------------


def _supervised_train(graph: LayerGraph, dataset: ImageDataset,
                      params: Dict[str, Tensor], loss_builder,
                      iterations: int, batch_size: int, lr: float,
                      momentum: float, weight_decay: float,
                      lr_decay_points: Tuple[float, ...], seed: int,
                      augment: str) -> TrainHistory:
    batch_rng, aug_rng = _rng_pair(seed)
    opt = None
    if lr > 0:
        opt = SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    history = TrainHistory()
    t0 = time.perf_counter()
    for it, idx in enumerate(batch_indices(len(dataset), batch_size,
                                           iterations, batch_rng)):
        raw = augment_batch(dataset.images[idx], aug_rng, augment)
        x = dataset.normalized(raw, dtype=student_dtype(graph))
        labels = dataset.labels[idx]
        pre = loss_builder.prepare(x) if hasattr(loss_builder, "prepare") else None
        cur_lr = step_lr(lr, it, iterations, lr_decay_points) if lr > 0 else 0.0
        with Tape() as tape:
            logits, _ = graph.forward(x, mode="train")
            loss = loss_builder(logits, labels, pre)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericsError(f"training loss became non-finite at step {it}")
        if opt is not None:
            opt.lr = cur_lr
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
        history.losses.append(value)
        history.lrs.append(cur_lr)
        history.wall.append(time.perf_counter() - t0)
    return history


class _CrossEntropyLoss:
    def __call__(self, logits, labels, _pre):
        return cross_entropy(logits, labels)


class _DistillLoss:
    """(1-alpha) * CE(labels) + alpha * tau^2 * KL(teacher || student)."""

    def __init__(self, teacher: LayerGraph, tau: float, alpha: float):
        if tau <= 0:
            raise ConfigurationError(f"temperature must be positive, got {tau}")
        self.teacher = teacher
        self.tau = tau
        self.alpha = alpha

    def prepare(self, x):
        logits, _ = self.teacher.forward(x, mode="eval")
        z = logits.data / self.tau
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        return p

    def __call__(self, logits, labels, p):
        from .tensor import log_softmax

        ce = cross_entropy(logits, labels)
        n = p.shape[0]
        # constant sum(p log p) keeps the reported value a true KL divergence
        plogp = float(np.where(p > 0, p * np.log(np.maximum(p, 1e-300)), 0.0).sum() / n)
        student_ls = log_softmax(mul(logits, 1.0 / self.tau), axis=1)
        cross = mul(tsum(mul(student_ls, p)), -1.0 / n)
        kl = cross + plogp
        return mul(ce, 1.0 - self.alpha) + mul(kl, self.alpha * self.tau ** 2)


def baseline_bp(student: LayerGraph, dataset: ImageDataset,
                iterations: int = 2000, lr: float = 1e-3,
                momentum: float = 0.9, weight_decay: float = 1e-4,
                batch_size: int = 64, lr_decay_points=(0.4, 0.8),
                seed: int = 0, augment: str = "none") -> TrainHistory:
    """Cross-entropy fine-tuning of the whole pruned network."""
    return _supervised_train(student, dataset, dict(student.params),
                             _CrossEntropyLoss(), iterations, batch_size, lr,
                             momentum, weight_decay, tuple(lr_decay_points),
                             seed, augment)


def baseline_kd(student: LayerGraph, teacher: LayerGraph,
                dataset: ImageDataset, tau: float = 2.0, alpha: float = 0.7,
                iterations: int = 2000, lr: float = 1e-3,
                momentum: float = 0.9, weight_decay: float = 1e-4,
                batch_size: int = 64, lr_decay_points=(0.4, 0.8),
                seed: int = 0, augment: str = "none") -> TrainHistory:
    """Hard-label plus soft-target fine-tuning against the frozen teacher."""
    return _supervised_train(student, dataset, dict(student.params),
                             _DistillLoss(teacher, tau, alpha), iterations,
                             batch_size, lr, momentum, weight_decay,
                             tuple(lr_decay_points), seed, augment)


def freeze_backbone_tune_head(graph: LayerGraph, dataset: ImageDataset,
                              lr: float, iterations: int = 2000,
                              momentum: float = 0.9, weight_decay: float = 1e-4,
                              batch_size: int = 64, lr_decay_points=(0.4, 0.8),
                              seed: int = 0, augment: str = "none") -> TrainHistory:
    """Train only the final linear layer; all backbone parameters frozen."""
    head = {name: graph.params[name] for name in graph.head_param_names()}
    return _supervised_train(graph, dataset, head, _CrossEntropyLoss(),
                             iterations, batch_size, lr, momentum,
                             weight_decay, tuple(lr_decay_points), seed, augment)


# layer-wise reconstruction baseline ---------------------------------------------


def layerwise_recon_baseline(teacher: LayerGraph, student: LayerGraph,
                             data: UnlabeledImages, cfg: MimicConfig,
                             per_block_iterations: int = 200,
                             seed: int = 0, augment: str = "none") -> TrainHistory:
    """Sequential per-block output reconstruction, shallow to deep.

    Each block minimizes the squared feature error at its own output edge
    w.r.t. only that block's parameters, while the student consumes its own
    previous-block outputs, so reconstruction error accumulates along
    depth.  Requires block output widths to match the teacher's (i.e. a
    scheme that only prunes inside blocks).
    """
    if not teacher.blocks:
        raise PruningError("layer-wise baseline needs block annotations")
    t_ch, s_ch = teacher.channels(), student.channels()
    for b in teacher.blocks:
        if t_ch[b.out_node] != s_ch[b.out_node]:
            raise PruningError(
                f"block {b.id} output width changed ({t_ch[b.out_node]} -> "
                f"{s_ch[b.out_node]}); layer-wise reconstruction needs "
                "width-preserving pruning (normal or cd_style)")
    history = TrainHistory()
    t0 = time.perf_counter()
    for bi, block in enumerate(teacher.blocks):
        prefix = f"{block.id}."
        params = {k: v for k, v in student.params.items()
                  if k.startswith(prefix)}
        if not params:
            continue
        batch_rng, aug_rng = _rng_pair(seed + bi)
        opt = None
        if cfg.lr > 0:
            opt = SGD(params, lr=cfg.lr, momentum=cfg.momentum,
                      weight_decay=cfg.weight_decay)
        for it, idx in enumerate(batch_indices(len(data), cfg.batch_size,
                                               per_block_iterations, batch_rng)):
            raw = augment_batch(data.images[idx], aug_rng, augment)
            x = data.normalized(raw, dtype=student_dtype(student))
            _, t_cap = teacher.forward(x, mode="eval", stop_at=block.out_node,
                                       capture={block.out_node})
            target = t_cap[block.out_node].detach()
            lr = step_lr(cfg.lr, it, per_block_iterations,
                         cfg.lr_decay_points) if cfg.lr > 0 else 0.0
            with Tape() as tape:
                _, s_cap = student.forward(x, mode="train",
                                           stop_at=block.out_node,
                                           capture={block.out_node})
                loss = mimic_loss(s_cap[block.out_node], target, ("mse",))
            value = loss.item()
            if not np.isfinite(value):
                raise NumericsError(
                    f"block {block.id} loss became non-finite at step {it}")
            if opt is not None:
                opt.lr = lr
                opt.zero_grad()
                tape.backward(loss)
                opt.step()
            history.losses.append(value)
            history.lrs.append(lr)
            history.wall.append(time.perf_counter() - t0)
    return history
