"""Incremental classifier with per-task linear heads, frozen snapshots and checkpoints."""
from __future__ import annotations

import copy
import hashlib
import math
import os
from pathlib import Path
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


# --- backbones --------------------------------------------------------------------

class SmallConvNet(nn.Module):
    """Four 3x3 convolutions with batch norm; the toy-scale backbone."""

    def __init__(self, in_channels: int = 3, width: int = 16, out_dim: int = 64):
        super().__init__()
        chans = [in_channels, width, 2 * width, 2 * width, out_dim]
        strides = [1, 2, 1, 2]
        layers = []
        for k in range(4):
            layers += [
                nn.Conv2d(chans[k], chans[k + 1], 3, stride=strides[k], padding=1, bias=False),
                nn.BatchNorm2d(chans[k + 1]),
                nn.ReLU(inplace=True),
            ]
        self.body = nn.Sequential(*layers)
        self.out_dim = out_dim

    def forward(self, x):
        return F.adaptive_avg_pool2d(self.body(x), 1).flatten(1)


class TinyConvNet(nn.Module):
    """One convolution, batch norm and tanh; a smooth backbone for exact gradient checks."""

    def __init__(self, in_channels: int = 3, out_dim: int = 8):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_dim, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(out_dim)
        self.out_dim = out_dim

    def forward(self, x):
        return F.adaptive_avg_pool2d(torch.tanh(self.bn(self.conv(x))), 1).flatten(1)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class CifarResNet(nn.Module):
    """ResNet for 32x32 inputs with ``6n + 2`` layers (n=5 gives ResNet-32)."""

    def __init__(self, depth: int = 32, in_channels: int = 3):
        super().__init__()
        if (depth - 2) % 6:
            raise ValueError(f"depth must be 6n+2, got {depth}")
        n = (depth - 2) // 6
        self.conv1 = nn.Conv2d(in_channels, 16, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(16)
        blocks, cin = [], 16
        for cout, stride in ((16, 1), (32, 2), (64, 2)):
            for k in range(n):
                blocks.append(BasicBlock(cin, cout, stride if k == 0 else 1))
                cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.out_dim = 64
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.blocks(out)
        return F.adaptive_avg_pool2d(out, 1).flatten(1)


def build_backbone(arch: str, in_channels: int = 3) -> nn.Module:
    if arch == "small_conv":
        return SmallConvNet(in_channels)
    if arch == "tiny":
        return TinyConvNet(in_channels)
    if arch.startswith("resnet"):
        return CifarResNet(int(arch[len("resnet"):]), in_channels)
    raise ValueError(f"unknown architecture {arch!r}")


# --- classifier -------------------------------------------------------------------

class IncrementalClassifier(nn.Module):
    """Backbone plus a bank of linear heads, one block per task.

    ``class_registry`` lists the class id behind every head unit in registry order.
    """

    def __init__(self, arch: str = "small_conv", image_shape: Sequence[int] = (16, 16, 3)):
        super().__init__()
        self.arch = arch
        self.image_shape = tuple(int(v) for v in image_shape)
        self.backbone = build_backbone(arch, self.image_shape[2])
        self.heads = nn.ModuleList()
        self.class_registry: list[int] = []

    @property
    def feature_dim(self) -> int:
        return self.backbone.out_dim

    @property
    def num_tasks(self) -> int:
        return len(self.heads)

    @property
    def num_classes(self) -> int:
        return len(self.class_registry)

    def head_sizes(self) -> list[int]:
        return [h.out_features for h in self.heads]

    def task_units(self, task: int) -> range:
        start = sum(self.head_sizes()[:task])
        return range(start, start + self.heads[task].out_features)

    def _check_input(self, x: torch.Tensor) -> None:
        h, w, c = self.image_shape
        if x.dim() != 4 or tuple(x.shape[1:]) != (c, h, w):
            raise ValueError(f"expected input of shape (B, {c}, {h}, {w}), got {tuple(x.shape)}")

    def features(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.backbone(x)

    def head_logits(self, z: torch.Tensor, tasks: Sequence[int] | None = None) -> torch.Tensor:
        tasks = range(self.num_tasks) if tasks is None else list(tasks)
        for t in tasks:
            if not 0 <= t < self.num_tasks:
                raise KeyError(f"task {t} has no registered head (have {self.num_tasks})")
        if not tasks:
            raise ValueError("empty task span")
        return torch.cat([self.heads[t](z) for t in tasks], dim=1)

    def logits(self, x: torch.Tensor, tasks: Sequence[int] | None = None) -> torch.Tensor:
        return self.head_logits(self.features(x), tasks)

    def forward(self, x):
        return self.logits(x)

    def grow_heads(self, new_classes: Sequence[int], generator: torch.Generator | None = None):
        new_classes = [int(c) for c in new_classes]
        if not new_classes:
            raise ValueError("grow_heads needs at least one new class")
        dup = set(new_classes) & set(self.class_registry)
        if dup or len(set(new_classes)) != len(new_classes):
            raise ValueError(f"classes already registered or repeated: {sorted(dup) or new_classes}")
        head = nn.Linear(self.feature_dim, len(new_classes))
        bound = math.sqrt(3.0 / self.feature_dim)  # kaiming-uniform, gain 1, fan-in
        with torch.no_grad():
            head.weight.uniform_(-bound, bound, generator=generator)
            head.bias.zero_()
        ref = next(self.backbone.parameters())
        self.heads.append(head.to(device=ref.device, dtype=ref.dtype))
        self.class_registry.extend(new_classes)
        return self

    def class_to_unit(self, labels: torch.Tensor) -> torch.Tensor:
        """Map class ids to head-unit indices; unknown ids raise."""
        lookup = {c: k for k, c in enumerate(self.class_registry)}
        try:
            units = [lookup[int(v)] for v in labels.reshape(-1).tolist()]
        except KeyError as err:
            raise KeyError(f"class {err.args[0]} is not registered") from None
        return torch.tensor(units, dtype=torch.long, device=labels.device).reshape(labels.shape)


def parameter_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class ModelSnapshot:
    """Frozen deep copy of a classifier taken at a task boundary.

    Always evaluated with running batch-norm statistics; parameters never require grad.
    """

    def __init__(self, model: IncrementalClassifier, task_index: int):
        self.model = copy.deepcopy(model)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.task_index = task_index

    @property
    def num_classes(self) -> int:
        return self.model.num_classes

    @property
    def class_registry(self) -> list[int]:
        return list(self.model.class_registry)

    def _frozen(self):
        # guard against callers flipping the copy into training mode
        if self.model.training:
            self.model.eval()

    def features(self, x):
        self._frozen()
        return self.model.features(x)

    def logits(self, x, tasks=None):
        self._frozen()
        return self.model.logits(x, tasks)

    def head_logits(self, z, tasks=None):
        return self.model.head_logits(z, tasks)

    def head_weight(self) -> torch.Tensor:
        """Stacked weight of every head, shape ``classes x D``."""
        if not self.model.heads:
            raise ValueError("snapshot has no linear heads")
        return torch.cat([h.weight for h in self.model.heads], dim=0)

    def digest(self) -> str:
        return parameter_digest(self.model)


def snapshot(model: IncrementalClassifier, task_index: int) -> ModelSnapshot:
    return ModelSnapshot(model, task_index)


def features(model, x):
    return model.features(x)


def padded_teacher_probs(snap: ModelSnapshot, x: torch.Tensor, total_classes: int,
                         temperature: float) -> torch.Tensor:
    """Tempered softmax over the snapshot's classes, zero-extended to ``total_classes``."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if total_classes < snap.num_classes:
        raise ValueError(f"total_classes={total_classes} < snapshot classes {snap.num_classes}")
    with torch.no_grad():
        p = F.softmax(snap.logits(x) / temperature, dim=1)
    return F.pad(p, (0, total_classes - p.shape[1]))


@dataclass
class BatchNormStats:
    means: list[torch.Tensor]
    stds: list[torch.Tensor]

    def __len__(self):
        return len(self.means)


def bn_layers(module: nn.Module) -> list[nn.BatchNorm2d]:
    return [m for m in module.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]


def extract_bn_stats(snap: ModelSnapshot | nn.Module) -> BatchNormStats:
    model = snap.model if isinstance(snap, ModelSnapshot) else snap
    layers = bn_layers(model)
    if not layers:
        raise ValueError("model has no batch-norm layers; statistic alignment needs them")
    return BatchNormStats(
        [m.running_mean.detach().clone() for m in layers],
        [m.running_var.detach().clamp_min(0).sqrt().clone() for m in layers],
    )


# --- checkpoints --------------------------------------------------------------------

def save_checkpoint(path, model: IncrementalClassifier, task_index: int, extra: dict | None = None):
    """Write to a temp file next to ``path`` and rename, so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    torch.save({
        "arch": model.arch,
        "image_shape": list(model.image_shape),
        "head_sizes": model.head_sizes(),
        "class_registry": list(model.class_registry),
        "task_index": task_index,
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[IncrementalClassifier, int, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    model = IncrementalClassifier(blob["arch"], blob["image_shape"])
    registry = blob["class_registry"]
    start = 0
    for size in blob["head_sizes"]:
        model.grow_heads(registry[start:start + size])
        start += size
    model.load_state_dict(blob["state_dict"])
    return model, blob["task_index"], blob["extra"]
