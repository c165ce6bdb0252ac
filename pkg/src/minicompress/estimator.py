"""Estimator-style front end so the compressor composes with ML pipelines.

:class:`FewSampleCompressor` follows the familiar fit/predict protocol:
construct it with a frozen teacher and declarative hyperparameters, ``fit``
it on a small batch of images (labels optional, only the supervised
baselines read them), then ``predict`` with the compressed model.
``get_params``/``set_params`` are implemented against the constructor
signature, so cloning and grid-search tooling that relies on that protocol
works without this package importing any of it.
"""

from __future__ import annotations

import inspect
from typing import Optional, Sequence, Tuple

import numpy as np

from .data import SYNTH_MEAN, SYNTH_STD, ImageDataset, UnlabeledImages
from .errors import ConfigurationError, DimensionError
from .flops import count_macs
from .graph import LayerGraph
from .harness import METHODS, evaluate, topk_hits
from .mimic import (MimicConfig, baseline_bp, baseline_kd,
                    freeze_backbone_tune_head, layerwise_recon_baseline,
                    replace_head, train_mimic)
from .pruning import apply_plan, make_plan, progressive_unstructured


def check_images(X, input_shape: Tuple[int, int, int]) -> np.ndarray:
    """Validate a batch of images: [N, C, H, W], finite, in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise DimensionError(f"expected images of shape [N, C, H, W], got {X.shape}")
    if X.shape[1:] != tuple(input_shape):
        raise DimensionError(
            f"images have shape {X.shape[1:]}, the teacher expects {input_shape}")
    if not np.isfinite(X).all():
        raise ConfigurationError("images contain non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ConfigurationError("images must be scaled to [0, 1]")
    return X


def check_labels(y, n: int, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise DimensionError(f"labels must have shape ({n},), got {y.shape}")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= num_classes:
        raise ConfigurationError(f"labels must lie in [0, {num_classes})")
    return y


class _ParamsMixin:
    """get_params/set_params against the constructor signature."""

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ConfigurationError(
                    f"invalid parameter {key!r} for {type(self).__name__}")
            setattr(self, key, value)
        return self


class FewSampleCompressor(_ParamsMixin):
    """Prune a teacher and recover it from a few (possibly unlabeled) images.

    Parameters mirror the experiment configuration: ``method`` is one of
    ``mir_before`` / ``mir_after`` (unsupervised feature mimicking at the
    chosen pooling tap, then head grafting), ``bp`` / ``kd`` (supervised
    fine-tuning baselines; these require ``y``), ``layerwise`` (per-block
    reconstruction), or ``freeze_head``.  ``scheme`` is ``normal``,
    ``residual``, ``cd_style``, or ``unstructured``.

    Fitted attributes: ``model_`` (the compressed graph), ``plan_``,
    ``history_`` (loss trajectory), ``flops_report_``.
    """

    def __init__(self, teacher: Optional[LayerGraph] = None,
                 method: str = "mir_before", scheme: str = "normal",
                 keep_ratio: float = 0.5, sparsity: float = 0.9,
                 loss: Sequence[str] = ("mse",), iterations: int = 2000,
                 batch_size: int = 64, lr: float = 0.02, momentum: float = 0.9,
                 weight_decay: float = 1e-4, lr_decay_points=(0.4, 0.8),
                 baseline_lr: float = 1e-3, tau: float = 2.0,
                 alpha: float = 0.7, augment: str = "none",
                 normalize: Tuple = (SYNTH_MEAN, SYNTH_STD), seed: int = 0):
        self.teacher = teacher
        self.method = method
        self.scheme = scheme
        self.keep_ratio = keep_ratio
        self.sparsity = sparsity
        self.loss = loss
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_decay_points = lr_decay_points
        self.baseline_lr = baseline_lr
        self.tau = tau
        self.alpha = alpha
        self.augment = augment
        self.normalize = normalize
        self.seed = seed

    # ---- protocol ----

    def _mimic_config(self) -> MimicConfig:
        tap = "after_pool" if self.method == "mir_after" else "before_pool"
        return MimicConfig(tap=tap, loss=tuple(self.loss),
                           iterations=self.iterations,
                           batch_size=self.batch_size, lr=self.lr,
                           momentum=self.momentum,
                           weight_decay=self.weight_decay,
                           lr_decay_points=tuple(self.lr_decay_points))

    def fit(self, X, y=None) -> "FewSampleCompressor":
        """Compress the teacher using images ``X`` (labels only for bp/kd)."""
        if self.teacher is None:
            raise ConfigurationError("a fitted teacher LayerGraph is required")
        if self.method not in METHODS:
            raise ConfigurationError(
                f"unknown method {self.method!r}; choose from {METHODS}")
        teacher = self.teacher
        X = check_images(X, teacher.input_shape)
        mean, std = self.normalize
        unlabeled = UnlabeledImages(X.astype(np.float32), np.asarray(mean),
                                    np.asarray(std))
        needs_labels = self.method in ("bp", "kd", "freeze_head")
        if needs_labels:
            if y is None:
                raise ConfigurationError(f"method {self.method!r} needs labels")
            y = check_labels(y, len(X), teacher.head_node.attrs["out_features"])
            labeled = ImageDataset(
                X.astype(np.float32), y, [f"fit-{i}" for i in range(len(X))],
                teacher.head_node.attrs["out_features"], np.asarray(mean),
                np.asarray(std))
        cfg = self._mimic_config()

        if self.scheme == "unstructured":
            student, masks, hist = progressive_unstructured(
                teacher, unlabeled, cfg, target_sparsity=self.sparsity,
                seed=self.seed, augment=self.augment)
            self.model_ = replace_head(student, teacher).graph
            self.plan_ = {"scheme": "unstructured", "sparsity": self.sparsity}
            self.history_ = [v for h in hist for v in h["loss"]]
        else:
            plan = make_plan(teacher, self.scheme, self.keep_ratio)
            student = apply_plan(teacher, plan)
            self.plan_ = plan
            if self.method in ("mir_before", "mir_after"):
                hist = train_mimic(teacher, student, unlabeled, cfg,
                                   seed=self.seed, augment=self.augment)
                self.model_ = replace_head(student, teacher).graph
            elif self.method == "bp":
                hist = baseline_bp(student, labeled, iterations=self.iterations,
                                   lr=self.baseline_lr, momentum=self.momentum,
                                   weight_decay=self.weight_decay,
                                   batch_size=self.batch_size, seed=self.seed,
                                   augment=self.augment)
                self.model_ = student
            elif self.method == "kd":
                hist = baseline_kd(student, teacher, labeled, tau=self.tau,
                                   alpha=self.alpha, iterations=self.iterations,
                                   lr=self.baseline_lr, momentum=self.momentum,
                                   weight_decay=self.weight_decay,
                                   batch_size=self.batch_size, seed=self.seed,
                                   augment=self.augment)
                self.model_ = student
            elif self.method == "layerwise":
                hist = layerwise_recon_baseline(teacher, student, unlabeled,
                                                cfg, seed=self.seed,
                                                augment=self.augment)
                self.model_ = replace_head(student, teacher).graph
            else:  # freeze_head
                train_mimic(teacher, student, unlabeled, cfg, seed=self.seed,
                            augment=self.augment)
                grafted = replace_head(student, teacher).graph
                hist = freeze_backbone_tune_head(
                    grafted, labeled, lr=self.baseline_lr,
                    iterations=self.iterations, batch_size=self.batch_size,
                    seed=self.seed, augment=self.augment)
                self.model_ = grafted
            self.history_ = hist.losses
        self.flops_report_ = count_macs(self.model_)
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise ConfigurationError("this compressor has not been fitted yet")

    def decision_function(self, X) -> np.ndarray:
        """Class logits of the compressed model."""
        self._require_fitted()
        X = check_images(X, self.model_.input_shape)
        mean, std = self.normalize
        norm = ((X - np.asarray(mean).reshape(1, -1, 1, 1))
                / np.asarray(std).reshape(1, -1, 1, 1)).astype(np.float32)
        logits, _ = self.model_.forward(norm, mode="eval")
        return logits.data

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def score(self, X, y) -> float:
        """Top-1 accuracy."""
        logits = self.decision_function(X)
        y = check_labels(y, len(logits), logits.shape[1])
        return float(topk_hits(logits, y, 1).mean())
