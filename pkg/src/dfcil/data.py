"""Datasets, seeded task schedules, batch iteration and coreset storage."""
from __future__ import annotations

import logging
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    """Raised for invalid experiment configuration values."""


@dataclass
class LabeledDataset:
    """Images stored as ``count x H x W x C`` float32 plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be count x H x W x C, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def select(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices], self.num_classes, self.split)


@dataclass(frozen=True)
class TaskSchedule:
    seed: int
    class_order: tuple[int, ...]
    tasks: tuple[tuple[int, ...], ...]

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def num_classes(self) -> int:
        return len(self.class_order)

    def task_sizes(self) -> list[int]:
        return [len(t) for t in self.tasks]

    def cumulative(self, n: int) -> tuple[int, ...]:
        """Classes of tasks ``0..n`` (inclusive, zero-based) in schedule order."""
        return tuple(c for t in self.tasks[: n + 1] for c in t)

    def task_of(self, label: int) -> int:
        for n, t in enumerate(self.tasks):
            if label in t:
                return n
        raise KeyError(label)


def build_task_schedule(num_classes: int, num_tasks: int, seed: int) -> TaskSchedule:
    """Shuffle the class ids under ``seed`` and cut them into equal contiguous tasks."""
    if num_tasks <= 0 or num_classes <= 0 or num_classes % num_tasks != 0:
        raise ConfigurationError(
            f"num_classes={num_classes} is not divisible into num_tasks={num_tasks} equal tasks"
        )
    order = np.random.default_rng(seed).permutation(num_classes)
    per_task = num_classes // num_tasks
    tasks = tuple(
        tuple(int(c) for c in order[k * per_task:(k + 1) * per_task]) for k in range(num_tasks)
    )
    return TaskSchedule(seed=seed, class_order=tuple(int(c) for c in order), tasks=tasks)


def task_subset(dataset: LabeledDataset, classes: Sequence[int]) -> LabeledDataset:
    classes = list(classes)
    if not classes:
        raise ValueError("task_subset needs a non-empty class set")
    bad = [c for c in classes if not 0 <= c < dataset.num_classes]
    if bad:
        raise ValueError(f"classes {bad} outside [0, {dataset.num_classes})")
    mask = np.isin(dataset.labels, classes)
    return dataset.select(np.flatnonzero(mask))


def concat_datasets(parts: Sequence[LabeledDataset]) -> LabeledDataset:
    parts = [p for p in parts if len(p)]
    return LabeledDataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        parts[0].num_classes,
        parts[0].split,
    )


# --- normalization -----------------------------------------------------------

@dataclass(frozen=True)
class Normalizer:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    @classmethod
    def fit(cls, dataset: LabeledDataset) -> "Normalizer":
        x = dataset.images.reshape(-1, dataset.images.shape[-1]).astype(np.float64)
        return cls(tuple(x.mean(0).tolist()), tuple(x.std(0).tolist()))

    def __call__(self, dataset: LabeledDataset) -> LabeledDataset:
        mean = np.asarray(self.mean, dtype=np.float32)
        std = np.asarray(self.std, dtype=np.float32)
        return LabeledDataset((dataset.images - mean) / std, dataset.labels,
                              dataset.num_classes, dataset.split)


# --- batches -------------------------------------------------------------------

def _augment(images: np.ndarray, rng: np.random.Generator, pad: int) -> np.ndarray:
    """Random horizontal flip plus random crop after zero padding."""
    out = images.copy()
    flip = rng.random(len(out)) < 0.5
    out[flip] = out[flip, :, ::-1]
    if pad > 0:
        b, h, w, _ = out.shape
        padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        dy = rng.integers(0, 2 * pad + 1, size=b)
        dx = rng.integers(0, 2 * pad + 1, size=b)
        for i in range(b):
            out[i] = padded[i, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return out


def iterate_batches(
    dataset: LabeledDataset,
    batch_size: int,
    seed: int | Sequence[int],
    augment: bool = False,
    pad: int = 4,
    drop_last: bool = False,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield shuffled ``(images, labels)`` batches.

    The sequence is a pure function of ``seed`` (use e.g. ``(trial, task, epoch)``).
    """
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    stop = len(order) - (len(order) % batch_size if drop_last else 0)
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        images = dataset.images[idx]
        if augment:
            images = _augment(images, rng, pad)
        yield images, dataset.labels[idx]


def sequential_batches(dataset: LabeledDataset, batch_size: int):
    for start in range(0, len(dataset), batch_size):
        yield dataset.images[start:start + batch_size], dataset.labels[start:start + batch_size]


# --- access auditing -------------------------------------------------------------

class AccessAuditor:
    """Records which real training labels are read during each task.

    The trainer reports every batch of real training images it consumes; a data-free
    method must never read a label belonging to an earlier task.
    """

    def __init__(self):
        self.reads: dict[int, Counter] = defaultdict(Counter)

    def record(self, task: int, labels) -> None:
        self.reads[task].update(int(v) for v in np.asarray(labels).ravel())

    def violations(self, schedule: TaskSchedule) -> dict[int, dict[int, int]]:
        out = {}
        for task, counts in self.reads.items():
            past = set(schedule.cumulative(task - 1)) if task > 0 else set()
            bad = {c: n for c, n in counts.items() if c in past}
            if bad:
                out[task] = bad
        return out


# --- coreset -----------------------------------------------------------------------

@dataclass
class CoresetStore:
    capacity: int
    images: np.ndarray | None = None
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.capacity <= 0:
            raise ConfigurationError(f"coreset capacity must be positive, got {self.capacity}")

    def __len__(self) -> int:
        return len(self.labels)

    def class_counts(self) -> dict[int, int]:
        return dict(Counter(int(v) for v in self.labels))

    def as_dataset(self, num_classes: int) -> LabeledDataset:
        return LabeledDataset(self.images, self.labels, num_classes, "train")

    def save(self, path: str | os.PathLike) -> None:
        np.savez(path, images=self.images, labels=self.labels, capacity=self.capacity)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CoresetStore":
        with np.load(path) as f:
            return cls(int(f["capacity"]), f["images"], f["labels"])


def _quotas(classes: Sequence[int], capacity: int) -> dict[int, int]:
    base, extra = divmod(capacity, len(classes))
    # classes earlier in the list absorb the remainder
    return {c: base + (1 if k < extra else 0) for k, c in enumerate(classes)}


def update_coreset(store: CoresetStore, task_data: LabeledDataset, seed: int) -> CoresetStore:
    """Rebalance quotas to ``capacity / seen_classes`` and admit the new task's classes."""
    rng = np.random.default_rng(seed)
    old_classes = list(dict.fromkeys(int(v) for v in store.labels))
    new_classes = sorted(set(int(v) for v in task_data.labels) - set(old_classes))
    quotas = _quotas(old_classes + new_classes, store.capacity)

    keep_images, keep_labels = [], []
    for c in old_classes:
        idx = np.flatnonzero(store.labels == c)
        if len(idx) > quotas[c]:
            idx = np.sort(rng.choice(idx, size=quotas[c], replace=False))
        keep_images.append(store.images[idx])
        keep_labels.append(store.labels[idx])
    for c in new_classes:
        idx = np.flatnonzero(task_data.labels == c)
        take = min(quotas[c], len(idx))
        idx = np.sort(rng.choice(idx, size=take, replace=False))
        keep_images.append(task_data.images[idx])
        keep_labels.append(task_data.labels[idx])

    if not keep_labels:
        return CoresetStore(store.capacity)
    return CoresetStore(store.capacity, np.concatenate(keep_images), np.concatenate(keep_labels))


# --- dataset sources -----------------------------------------------------------------

def make_toy_dataset(
    num_classes: int = 20,
    train_per_class: int = 200,
    test_per_class: int = 50,
    size: int = 16,
    channels: int = 3,
    blobs_per_class: int = 3,
    noise: float = 0.5,
    distractors: int = 6,
    distractor_amp: float = 1.5,
    seed: int = 0,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded Gaussian-blob images.

    Every class owns a prototype built from a few coloured Gaussian blobs; samples jitter
    the prototype by a couple of pixels, rescale its amplitude, add class-agnostic
    distractor blobs and pixel noise.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)

    def blob(cy, cx, width, colour):
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        return g[..., None] * colour[None, None, :]

    prototypes = []
    for _ in range(num_classes):
        img = np.zeros((size, size, channels), np.float32)
        for _ in range(blobs_per_class):
            cy, cx = rng.uniform(2, size - 2, size=2)
            img += blob(cy, cx, rng.uniform(1.5, 3.5), rng.uniform(-1, 1, size=channels))
        prototypes.append(img)

    def draw(count):
        images, labels = [], []
        for c, proto in enumerate(prototypes):
            for _ in range(count):
                shift = rng.integers(-2, 3, size=2)
                img = np.roll(proto, tuple(shift), axis=(0, 1)) * rng.uniform(0.7, 1.3)
                for _ in range(distractors):
                    cy, cx = rng.uniform(0, size, size=2)
                    colour = rng.uniform(-distractor_amp, distractor_amp, size=channels)
                    img = img + blob(cy, cx, rng.uniform(1.5, 3.5), colour)
                img = img + rng.normal(0, noise, size=img.shape)
                images.append(img.astype(np.float32))
                labels.append(c)
        return np.stack(images), np.asarray(labels)

    tr_x, tr_y = draw(train_per_class)
    te_x, te_y = draw(test_per_class)
    return (LabeledDataset(tr_x, tr_y, num_classes, "train"),
            LabeledDataset(te_x, te_y, num_classes, "test"))


def save_array_dataset(path: str | os.PathLike, dataset: LabeledDataset) -> None:
    np.savez(path, images=dataset.images, labels=dataset.labels,
             num_classes=dataset.num_classes, split=dataset.split)


def load_array_dataset(path: str | os.PathLike) -> LabeledDataset:
    with np.load(path) as f:
        return LabeledDataset(f["images"], f["labels"], int(f["num_classes"]), str(f["split"]))


CIFAR100_RECORD = 2 + 32 * 32 * 3


def read_cifar100_binary(path: str | os.PathLike, split: str) -> LabeledDataset:
    """Parse a native CIFAR-100 binary file (coarse byte, fine byte, 3072 plane-major pixels)."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR100_RECORD:
        raise ValueError(f"{path}: size {raw.size} is not a multiple of {CIFAR100_RECORD}")
    raw = raw.reshape(-1, CIFAR100_RECORD)
    labels = raw[:, 1].astype(np.int64)
    images = raw[:, 2:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return LabeledDataset(images, labels, 100, split)


def resolve_data_root(data_root: str | None) -> Path:
    root = data_root or os.environ.get("DFCIL_DATA_ROOT")
    if not root:
        raise ConfigurationError("data_root is not set and DFCIL_DATA_ROOT is empty")
    return Path(root)


def load_cifar100(data_root: str | None) -> tuple[LabeledDataset, LabeledDataset]:
    root = resolve_data_root(data_root)
    for base in (root / "cifar-100-binary", root):
        if (base / "train.bin").exists():
            return (read_cifar100_binary(base / "train.bin", "train"),
                    read_cifar100_binary(base / "test.bin", "test"))
    raise FileNotFoundError(f"no cifar-100-binary/train.bin under {root}")
