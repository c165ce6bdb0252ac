"""Datasets: CIFAR-10 binary ingestion, a seeded synthetic generator,
few-sample subset construction, and training-time augmentation.

Images are stored unnormalized in [0, 1]; per-channel normalization
constants travel with the dataset and are applied when batches are drawn
for a model (teacher and student therefore always share them).

CIFAR-10 binary record layout: 1 label byte followed by 3072 pixel bytes
(three 1024-byte channel planes, each a row-major 32x32 grid).  A canonical
batch file holds exactly 10000 records = 30,730,000 bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DataFormatError

RECORD_BYTES = 3073
CIFAR_FILE_BYTES = RECORD_BYTES * 10000

# Documented normalization constants (per channel, on [0, 1] pixels).
CIFAR10_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR10_STD = np.array([0.2470, 0.2435, 0.2616])
SYNTH_MEAN = np.array([0.5, 0.5, 0.5])
SYNTH_STD = np.array([0.25, 0.25, 0.25])


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # [C, H, W], values in [0, 1]
    label: int
    id: str


@dataclass(frozen=True)
class UnlabeledImages:
    """Images plus their normalization constants, with no label channel.

    The unsupervised training entry points accept only this type, so they
    cannot read labels even by accident.
    """
    images: np.ndarray  # [N, C, H, W], values in [0, 1]
    mean: np.ndarray
    std: np.ndarray

    def __len__(self) -> int:
        return len(self.images)

    def normalized(self, images: Optional[np.ndarray] = None,
                   dtype=np.float32) -> np.ndarray:
        src = self.images if images is None else images
        mean = np.asarray(self.mean).reshape(1, -1, 1, 1)
        std = np.asarray(self.std).reshape(1, -1, 1, 1)
        return ((src - mean) / std).astype(dtype)


class ImageDataset:
    """Columnar store of labeled images with stable sample identifiers."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, ids: Sequence[str],
                 num_classes: int, mean: np.ndarray, std: np.ndarray,
                 name: str = ""):
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4:
            raise DataFormatError(f"images must be [N, C, H, W], got {images.shape}")
        if len(labels) != len(images) or len(ids) != len(images):
            raise DataFormatError("images, labels and ids must align")
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise DataFormatError("label outside [0, num_classes)")
        self.images = images
        self.labels = labels
        self.ids = list(ids)
        self.num_classes = num_classes
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self.name = name

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]), self.ids[i])

    def subset(self, indices: Sequence[int]) -> "ImageDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return ImageDataset(self.images[idx], self.labels[idx],
                            [self.ids[i] for i in idx], self.num_classes,
                            self.mean, self.std, name=self.name)

    def normalized(self, images: Optional[np.ndarray] = None,
                   dtype=np.float32) -> np.ndarray:
        """Apply this dataset's per-channel normalization."""
        src = self.images if images is None else images
        mean = self.mean.reshape(1, -1, 1, 1)
        std = self.std.reshape(1, -1, 1, 1)
        return ((src - mean) / std).astype(dtype)

    def unlabeled(self) -> "UnlabeledImages":
        """Drop the labels; what the unsupervised trainers consume."""
        return UnlabeledImages(self.images, self.mean, self.std)


# CIFAR-10 binary format -------------------------------------------------------


def _parse_records(raw: bytes, path: str) -> Tuple[np.ndarray, np.ndarray]:
    if len(raw) % RECORD_BYTES:
        offset = len(raw) - (len(raw) % RECORD_BYTES)
        raise DataFormatError(
            f"{path}: truncated record at offset {offset} "
            f"(file size {len(raw)} is not a multiple of {RECORD_BYTES})")
    count = len(raw) // RECORD_BYTES
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(count, RECORD_BYTES)
    labels = buf[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise DataFormatError(
            f"{path}: label byte {labels[bad[0]]} > 9 at offset "
            f"{int(bad[0]) * RECORD_BYTES}")
    images = buf[:, 1:].reshape(count, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def read_records(path) -> Tuple[np.ndarray, np.ndarray]:
    """Parse any file of CIFAR-format records into ([N,3,32,32], labels)."""
    return _parse_records(Path(path).read_bytes(), str(path))


def encode_record(image: np.ndarray, label: int) -> bytes:
    """Inverse of parsing: 1 label byte + 3072 rounded pixel bytes."""
    pix = np.rint(np.asarray(image) * 255.0).astype(np.uint8)
    return bytes([int(label)]) + pix.tobytes()


def export_binary(dataset: ImageDataset, path) -> None:
    """Write a dataset in the CIFAR-10 binary record format."""
    with open(path, "wb") as fh:
        for i in range(len(dataset)):
            fh.write(encode_record(dataset.images[i], int(dataset.labels[i])))


TRAIN_BATCHES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_BATCH = "test_batch.bin"


def load_cifar10(directory) -> Tuple[ImageDataset, ImageDataset]:
    """Load the canonical binary batches: 50000 train + 10000 test images."""
    directory = Path(directory)
    splits = {}
    for split, files in (("train", TRAIN_BATCHES), ("test", (TEST_BATCH,))):
        images, labels, ids = [], [], []
        for fname in files:
            path = directory / fname
            if not path.exists():
                raise DataFormatError(f"{path}: missing CIFAR-10 batch file")
            raw = path.read_bytes()
            if len(raw) != CIFAR_FILE_BYTES:
                raise DataFormatError(
                    f"{path}: file is {len(raw)} bytes, canonical batches "
                    f"are exactly {CIFAR_FILE_BYTES}")
            imgs, labs = _parse_records(raw, str(path))
            images.append(imgs)
            labels.append(labs)
            stem = path.stem
            ids.extend(f"{stem}-{i:05d}" for i in range(len(imgs)))
        splits[split] = ImageDataset(
            np.concatenate(images), np.concatenate(labels), ids, 10,
            CIFAR10_MEAN, CIFAR10_STD, name=f"cifar10-{split}")
    return splits["train"], splits["test"]


# synthetic dataset --------------------------------------------------------------

# Frozen generator (v8): each image carries a "target" grating inside a
# soft central disk and an independent "distractor" grating over the
# surround, plus noise.  The label is the CENTER orientation only
# (orientations split [0, 90] degrees evenly); the surround orientation is
# uniform over [0, 180) and label-independent.  The design makes the task:
# (i) easy with plenty of data (a padded convnet learns position-aware
# channels), (ii) hard from a few labels (the structured surround
# correlates spuriously with labels in a 3-shot draw), and (iii) sensitive
# to WHERE features are supervised - spatially pooled features entangle
# center and surround, so feature-level supervision before the final
# pooling carries strictly more of the decision-relevant structure than
# supervision after it.  Phase, amplitudes, frequency jitter, and
# per-channel gains are random per sample, so no class has a distinctive
# mean image and a linear probe on raw pixels stays near chance.  Class
# angles stay within [0, 90] degrees, so a horizontal flip (theta ->
# 180 - theta) never maps one class's target grating onto another's.
SYNTH_VERSION = 8
_SYNTH_FREQ = 4.0
_SYNTH_SPAN = 0.5 * math.pi
_SYNTH_DISK_RADIUS = 0.30
_SYNTH_DISK_SOFTNESS = 0.05


def _synth_class_params(num_classes: int) -> List[float]:
    """Per class: its center-grating orientation in radians."""
    if num_classes < 2:
        raise ConfigurationError("the generator needs at least 2 classes")
    return [_SYNTH_SPAN * c / (num_classes - 1) for c in range(num_classes)]


def synth_dataset(seed: int, num_classes: int = 10, per_class: int = 100,
                  image_size: int = 32) -> ImageDataset:
    """Procedural, seeded, linearly non-separable classification data."""
    if per_class < 1:
        raise ConfigurationError(f"per_class must be >= 1, got {per_class}")
    rng = np.random.default_rng(seed)
    coords = (np.arange(image_size) + 0.5) / image_size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    radius = np.sqrt((xx - 0.5) ** 2 + (yy - 0.5) ** 2)
    center_mask = 1.0 / (1.0 + np.exp((radius - _SYNTH_DISK_RADIUS)
                                      / _SYNTH_DISK_SOFTNESS))
    params = _synth_class_params(num_classes)

    n = num_classes * per_class
    images = np.empty((n, 3, image_size, image_size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    ids = []
    i = 0
    for c, theta in enumerate(params):
        field = xx * math.cos(theta) + yy * math.sin(theta)
        for k in range(per_class):
            amp = rng.uniform(0.6, 1.0)
            gains = rng.uniform(0.5, 1.0, size=3)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            f = _SYNTH_FREQ * (1.0 + rng.uniform(-0.08, 0.08))
            target = amp * np.sin(2.0 * math.pi * f * field + phase)

            d_theta = rng.uniform(0.0, math.pi)
            d_amp = rng.uniform(0.6, 1.0)
            d_phase = rng.uniform(0.0, 2.0 * math.pi)
            d_f = _SYNTH_FREQ * (1.0 + rng.uniform(-0.08, 0.08))
            d_field = xx * math.cos(d_theta) + yy * math.sin(d_theta)
            distract = d_amp * np.sin(2.0 * math.pi * d_f * d_field + d_phase)

            wave = center_mask * target + (1.0 - center_mask) * distract
            noise = rng.normal(0.0, 1.0, size=(3, image_size, image_size))
            img = 0.5 + 0.30 * gains[:, None, None] * wave[None] + 0.04 * noise
            images[i] = np.clip(img, 0.0, 1.0)
            labels[i] = c
            ids.append(f"synth{seed}-c{c}-{k:05d}")
            i += 1
    return ImageDataset(images, labels, ids, num_classes, SYNTH_MEAN, SYNTH_STD,
                        name=f"synth-v{SYNTH_VERSION}-s{seed}")


# few-sample subsets --------------------------------------------------------------


@dataclass(frozen=True)
class FewSampleSpec:
    """How to draw the few-sample training subset."""
    mode: str                 # "n_way_k_shot" | "random_m"
    n: Optional[int] = None
    k: Optional[int] = None
    m: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.mode == "n_way_k_shot":
            if not (self.n and self.k):
                raise ConfigurationError("n_way_k_shot needs n and k")
        elif self.mode == "random_m":
            if not self.m:
                raise ConfigurationError("random_m needs m")
        else:
            raise ConfigurationError(f"unknown sampling mode {self.mode!r}")

    def to_json(self) -> str:
        return json.dumps({"mode": self.mode, "n": self.n, "k": self.k,
                           "m": self.m, "seed": self.seed}, sort_keys=True)

    @staticmethod
    def from_json(doc: str) -> "FewSampleSpec":
        d = json.loads(doc)
        return FewSampleSpec(mode=d["mode"], n=d.get("n"), k=d.get("k"),
                             m=d.get("m"), seed=d.get("seed", 0))


def sample_few(dataset: ImageDataset, spec: FewSampleSpec) -> ImageDataset:
    """Deterministically draw the few-sample subset described by ``spec``."""
    rng = np.random.default_rng(spec.seed)
    if spec.mode == "random_m":
        if spec.m > len(dataset):
            raise ConfigurationError(
                f"random_m={spec.m} exceeds dataset size {len(dataset)}")
        idx = rng.choice(len(dataset), size=spec.m, replace=False)
        return dataset.subset(np.sort(idx))
    classes = np.unique(dataset.labels)
    if spec.n > len(classes):
        raise ConfigurationError(
            f"n={spec.n} exceeds the {len(classes)} available classes")
    chosen = rng.choice(classes, size=spec.n, replace=False)
    picked: List[int] = []
    for c in chosen:
        pool = np.nonzero(dataset.labels == c)[0]
        if spec.k > pool.size:
            raise ConfigurationError(
                f"k={spec.k} exceeds class {int(c)} population {pool.size}")
        picked.extend(pool[rng.choice(pool.size, size=spec.k, replace=False)])
    return dataset.subset(np.sort(np.asarray(picked)))


# augmentation ---------------------------------------------------------------------

CROP_PAD = 4
AUGMENT_POLICIES = ("none", "flip", "flip_crop")


def augment(image: np.ndarray, rng, policy: str = "flip_crop") -> np.ndarray:
    """Random horizontal flip (p=0.5), then a random crop from 4-pixel
    zero padding when the policy includes cropping.

    Draw order is fixed: one uniform for the flip, then (for flip_crop) two
    integers in [0, 2*pad] for the crop corner; (pad, pad) is the identity
    crop.
    """
    if policy not in AUGMENT_POLICIES:
        raise ConfigurationError(f"unknown augmentation policy {policy!r}")
    out = image
    if policy in ("flip", "flip_crop"):
        if rng.random() < 0.5:
            out = out[:, :, ::-1]
    if policy == "flip_crop":
        c, h, w = out.shape
        oy, ox = int(rng.integers(0, 2 * CROP_PAD + 1)), \
            int(rng.integers(0, 2 * CROP_PAD + 1))
        padded = np.zeros((c, h + 2 * CROP_PAD, w + 2 * CROP_PAD),
                          dtype=out.dtype)
        padded[:, CROP_PAD:CROP_PAD + h, CROP_PAD:CROP_PAD + w] = out
        out = padded[:, oy:oy + h, ox:ox + w]
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, rng, policy: str) -> np.ndarray:
    if policy == "none":
        return images
    return np.stack([augment(images[i], rng, policy)
                     for i in range(len(images))])


def batch_indices(n: int, batch_size: int, iterations: int,
                  rng) -> Iterator[np.ndarray]:
    """Cut ``iterations`` minibatches from concatenated shuffled epochs.

    Every epoch is a fresh permutation of the ``n`` sample indices; batches
    are consumed contiguously from the concatenated stream, so each sample
    appears once per epoch even when batches straddle epoch boundaries.
    """
    buf: List[int] = []
    produced = 0
    while produced < iterations:
        while len(buf) < batch_size:
            buf.extend(rng.permutation(n).tolist())
        yield np.asarray(buf[:batch_size], dtype=np.int64)
        del buf[:batch_size]
        produced += 1
