"""Accuracy matrices, the normalized Omega score, drift diagnostics, embedding export and timing."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import LabeledDataset, sequential_batches

logger = logging.getLogger(__name__)


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """NHWC numpy batch -> NCHW float tensor."""
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).to(torch.get_default_dtype())


# --- accuracy -----------------------------------------------------------------------------

@torch.no_grad()
def predict(model, dataset: LabeledDataset, tasks: Sequence[int] | None = None,
            batch_size: int = 512) -> np.ndarray:
    """Predicted class ids using the argmax over the heads of ``tasks``."""
    m = getattr(model, "model", model)
    was_training = m.training
    m.eval()
    tasks = list(range(m.num_tasks)) if tasks is None else list(tasks)
    units = [u for t in tasks for u in m.task_units(t)]
    registry = np.asarray(m.class_registry)[units]
    preds = []
    for x, _ in sequential_batches(dataset, batch_size):
        preds.append(registry[m.logits(to_tensor(x), tasks).argmax(1).numpy()])
    if was_training:
        m.train()
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def task_accuracy(model, test_data: LabeledDataset, tasks: Sequence[int] | None = None) -> float:
    """Fraction of ``test_data`` whose argmax over the heads of ``tasks`` is the true class."""
    if len(test_data) == 0:
        raise ValueError("empty test set")
    return float((predict(model, test_data, tasks) == test_data.labels).mean())


@dataclass
class AccuracyMatrix:
    """``per_task[i][n]`` is A_{i,n}; ``cumulative[i][n]`` is A_{i,1:n} (zero-based, n <= i)."""

    task_sizes: list[int]
    per_task: list[list[float]] = field(default_factory=list)
    cumulative: list[list[float]] = field(default_factory=list)

    def add_row(self, per_task: Sequence[float], cumulative: Sequence[float]) -> None:
        i = len(self.per_task)
        if len(per_task) != i + 1 or len(cumulative) != i + 1:
            raise ValueError(f"row {i} needs {i + 1} entries")
        for v in list(per_task) + list(cumulative):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"accuracy {v} outside [0, 1]")
        self.per_task.append([float(v) for v in per_task])
        self.cumulative.append([float(v) for v in cumulative])

    @property
    def num_tasks(self) -> int:
        return len(self.per_task)

    @property
    def final(self) -> float:
        """A_N: accuracy over all classes after the last task."""
        return self.cumulative[-1][-1]


def omega(acc: AccuracyMatrix, offline: Sequence[float]) -> tuple[float, list[float]]:
    """Average normalized accuracy over tasks, plus its running value after each task."""
    n_tasks = acc.num_tasks
    if len(offline) < n_tasks:
        raise ValueError(f"offline table has {len(offline)} prefixes, need {n_tasks}")
    if any(v == 0 for v in offline[:n_tasks]):
        raise ValueError("offline accuracy of 0 makes the normalization undefined")
    sizes = acc.task_sizes
    running, trajectory = 0.0, []
    for i in range(n_tasks):
        seen = sum(sizes[:i + 1])
        running += sum(sizes[n] / seen * acc.cumulative[i][n] / offline[n] for n in range(i + 1))
        trajectory.append(running / (i + 1))
    return trajectory[-1], trajectory


# --- representational diagnostics --------------------------------------------------------------

def mid_score(z_ref: np.ndarray, z_other: np.ndarray) -> float:
    """Distance between sample means, scaled per dimension by the reference sample's std."""
    z_ref, z_other = np.asarray(z_ref, np.float64), np.asarray(z_other, np.float64)
    if len(z_ref) < 2 or len(z_other) < 1:
        raise ValueError("mid_score needs at least two reference samples and one other sample")
    if z_ref.shape[1] != z_other.shape[1]:
        raise ValueError(f"dimension mismatch: {z_ref.shape[1]} vs {z_other.shape[1]}")
    std = z_ref.std(0, ddof=1)
    zero = np.flatnonzero(std == 0)
    if len(zero):
        raise ValueError(f"reference std is zero in dimension {int(zero[0])}")
    return float(np.linalg.norm((z_ref.mean(0) - z_other.mean(0)) / std))


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T
    return np.maximum(d, 0)


def median_bandwidth(z_a: np.ndarray, z_b: np.ndarray) -> float:
    pooled = np.concatenate([z_a, z_b])
    d = np.sqrt(_sq_dists(pooled, pooled))
    med = float(np.median(d[np.triu_indices(len(pooled), k=1)]))
    return med if med > 0 else 1.0


def mmd_score(z_a: np.ndarray, z_b: np.ndarray, bandwidth: float | None = None) -> float:
    """Unbiased MMD^2 with a Gaussian RBF kernel; bandwidth defaults to the median heuristic."""
    z_a, z_b = np.asarray(z_a, np.float64), np.asarray(z_b, np.float64)
    m, n = len(z_a), len(z_b)
    if m < 2 or n < 2:
        raise ValueError("mmd_score needs at least two samples on each side")
    bw = median_bandwidth(z_a, z_b) if bandwidth is None else bandwidth
    k = lambda a, b: np.exp(-_sq_dists(a, b) / (2 * bw ** 2))
    kaa, kbb, kab = k(z_a, z_a), k(z_b, z_b), k(z_a, z_b)
    return float((kaa.sum() - np.trace(kaa)) / (m * (m - 1))
                 + (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
                 - 2 * kab.mean())


@torch.no_grad()
def embed(model, images, batch_size: int = 512) -> np.ndarray:
    """Penultimate features of an NHWC array (or NCHW tensor) in inference mode."""
    m = getattr(model, "model", model)
    was_training = m.training
    m.eval()
    if isinstance(images, torch.Tensor):
        chunks = [m.features(images[s:s + batch_size]) for s in range(0, len(images), batch_size)]
    else:
        chunks = [m.features(to_tensor(images[s:s + batch_size]))
                  for s in range(0, len(images), batch_size)]
    if was_training:
        m.train()
    return torch.cat(chunks).double().numpy()


def drift_report(model, real_a, real_b, synth_a, bandwidth: float | None = None) -> dict:
    """Compare how far synthetic and next-task real data sit from real task-a data.

    Inputs may be embedding arrays or image batches (embedded through ``model``).
    Dimensions that are constant over the reference sample are dropped before MID.
    """
    za, zb, zs = (x if (isinstance(x, np.ndarray) and x.ndim == 2) else embed(model, x)
                  for x in (real_a, real_b, synth_a))
    live = za.std(0, ddof=1) > 0
    if not live.all():
        logger.warning("drift_report: ignoring %d constant feature dimensions", int((~live).sum()))
    mid_synth = mid_score(za[:, live], zs[:, live])
    mid_real = mid_score(za[:, live], zb[:, live])
    bw = median_bandwidth(za, np.concatenate([zb, zs])) if bandwidth is None else bandwidth
    mmd_synth = mmd_score(za, zs, bw)
    mmd_real = mmd_score(za, zb, bw)
    return {
        "mid_real_synth": mid_synth,
        "mid_real_real": mid_real,
        "mid_ratio": mid_synth / mid_real,
        "mmd_real_synth": mmd_synth,
        "mmd_real_real": mmd_real,
        "mmd_ratio": mmd_synth / mmd_real,
        "dropped_dims": int((~live).sum()),
    }


# --- embedding export ------------------------------------------------------------------------------

def export_embeddings(path, embeddings: np.ndarray, labels: Sequence[int], provenance: Sequence[str]) -> None:
    """Write ``dim=D`` then one tab-separated row per sample: D floats, label, provenance."""
    embeddings = np.asarray(embeddings)
    if not (len(embeddings) == len(labels) == len(provenance)):
        raise ValueError("embeddings, labels and provenance must have equal length")
    lines = [f"dim={embeddings.shape[1]}"]
    for z, y, p in zip(embeddings, labels, provenance):
        lines.append("\t".join([*(repr(float(v)) for v in z), str(int(y)), str(p)]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("dim="):
        raise ValueError(f"{path}: missing dim= header")
    dim = int(lines[0][4:])
    rows = [ln.split("\t") for ln in lines[1:] if ln]
    z = np.array([[float(v) for v in r[:dim]] for r in rows]).reshape(len(rows), dim)
    return z, np.array([int(r[dim]) for r in rows], dtype=np.int64), [r[dim + 1] for r in rows]


# --- timing -----------------------------------------------------------------------------------

def batch_timing(step: Callable[[], object], warmup: int = 1, measured: int = 5) -> float:
    """Mean wall-clock seconds of ``step`` over ``measured`` calls after ``warmup`` calls."""
    if warmup < 1:
        raise ValueError("warmup must be >= 1")
    if measured < 1:
        raise ValueError("measured must be >= 1")
    for _ in range(warmup):
        step()
    start = time.perf_counter()
    for _ in range(measured):
        step()
    return (time.perf_counter() - start) / measured


# --- run records ------------------------------------------------------------------------------------

@dataclass
class RunRecord:
    method: str
    seed: int
    class_order: list[int]
    accuracy: AccuracyMatrix
    offline: list[float]
    omega: float
    omega_trajectory: list[float]
    diagnostics: dict = field(default_factory=dict)
    seconds_per_batch: dict = field(default_factory=dict)
    memory: list[dict] = field(default_factory=list)
    config_digest: str = ""

    @property
    def final_accuracy(self) -> float:
        return self.accuracy.final

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        d["accuracy"] = AccuracyMatrix(**d["accuracy"])
        return cls(**d)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=0))


def aggregate(records: Sequence[RunRecord]) -> dict:
    a_mean, a_std = mean_std([r.final_accuracy for r in records])
    o_mean, o_std = mean_std([r.omega for r in records])
    return {"method": records[0].method, "trials": len(records),
            "a_n_mean": a_mean, "a_n_std": a_std, "omega_mean": o_mean, "omega_std": o_std}
