"""Incremental-learning objectives.

Baseline distillation (cross-entropy plus zero-padded KD over real and synthetic data)
and the proposed objective: cross-entropy local to the newest heads, feature distillation
weighted through the frozen past-class heads, and head-only fine-tuning on the mixed batch.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .model import IncrementalClassifier, ModelSnapshot

logger = logging.getLogger(__name__)


@dataclass
class ObjectiveWeights:
    lambda_kd: float = 0.1
    lambda_ft: float = 1.0
    kd_temperature: float = 2.0
    kd_weight: float = 1.0  # weight of each KD term in the baseline objectives

    def __post_init__(self):
        for name in ("lambda_kd", "lambda_ft", "kd_temperature", "kd_weight"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")
        if self.kd_temperature <= 0:
            raise ValueError("kd_temperature must be positive")


@dataclass
class Ablation:
    no_balancing: bool = False
    standard_ce: bool = False
    wfeat_real_only: bool = False
    wfeat_synth_only: bool = False
    no_ft: bool = False
    balance_all: bool = False  # extend task balancing to the cross-entropy term

    def __post_init__(self):
        if self.wfeat_real_only and self.wfeat_synth_only:
            raise ValueError("wfeat_real_only and wfeat_synth_only are mutually exclusive")

    def any(self) -> bool:
        return any(vars(self).values())


@dataclass
class MixedBatch:
    """Real current-task samples plus (optionally) synthetic past-task samples."""

    x: torch.Tensor
    y: torch.Tensor
    x_syn: torch.Tensor | None = None
    y_syn: torch.Tensor | None = None

    @property
    def has_synthetic(self) -> bool:
        return self.x_syn is not None and len(self.x_syn) > 0

    @property
    def provenance(self) -> torch.Tensor:
        """True for synthetic rows, in the order ``[real, synthetic]``."""
        n_syn = len(self.x_syn) if self.has_synthetic else 0
        return torch.cat([torch.zeros(len(self.x), dtype=torch.bool),
                          torch.ones(n_syn, dtype=torch.bool)])


# --- logit/feature level -----------------------------------------------------------------

def kl_padded(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
              temperature: float) -> torch.Tensor:
    """Batch-mean KL(padded teacher || student); zero teacher mass contributes nothing."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    n_new = student_logits.shape[1] - teacher_logits.shape[1]
    if n_new < 0:
        raise ValueError("student has fewer classes than teacher")
    p_t = F.pad(F.softmax(teacher_logits / temperature, dim=1), (0, n_new))
    log_p_s = F.log_softmax(student_logits / temperature, dim=1)
    return (torch.xlogy(p_t, p_t) - p_t * log_p_s).sum(1).mean()


def kl_past_slice(student_logits, teacher_logits, temperature):
    """Classic LwF distillation: KL restricted to the teacher's classes, no padding."""
    return kl_padded(student_logits[:, :teacher_logits.shape[1]], teacher_logits, temperature)


def squared_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).pow(2).sum(1).mean()


def weighted_squared_distance(z_s, z_t, weight: torch.Tensor) -> torch.Tensor:
    """``mean_b ||W z_s - W z_t||^2``; any head bias cancels in the difference."""
    if z_s.shape != z_t.shape:
        raise ValueError(f"dimension mismatch: {tuple(z_s.shape)} vs {tuple(z_t.shape)}")
    return ((z_s - z_t) @ weight.detach().t()).pow(2).sum(1).mean()


def task_balance_weights(is_past: torch.Tensor, n_past_classes: int, n_new_classes: int) -> torch.Tensor:
    """Per-sample weights equalizing the per-class mass of past and current classes.

    Past samples get ``|T_1:n-1| / |T_1:n|``, current samples ``|T_n| / |T_1:n|``; the
    result is renormalized to mean 1 over the batch.
    """
    total = n_past_classes + n_new_classes
    w = torch.where(is_past, torch.tensor(n_past_classes / total), torch.tensor(n_new_classes / total))
    if is_past.all() or not is_past.any():
        logger.warning("task balancing on a single-provenance batch; weights collapse to 1")
    return (w / w.mean()).to(torch.get_default_dtype())


def _units(model: IncrementalClassifier, labels: torch.Tensor) -> torch.Tensor:
    return model.class_to_unit(labels)


# --- model level ---------------------------------------------------------------------------

def kd_di_loss(student: IncrementalClassifier, teacher: ModelSnapshot, x: torch.Tensor,
               temperature: float) -> torch.Tensor:
    with torch.no_grad():
        t = teacher.logits(x)
    return kl_padded(student.logits(x), t, temperature)


def local_ce_loss(student: IncrementalClassifier, x: torch.Tensor, y: torch.Tensor,
                  task: int | None = None, z: torch.Tensor | None = None) -> torch.Tensor:
    """Cross-entropy over the newest task's head only, labels remapped to local indices."""
    task = student.num_tasks - 1 if task is None else task
    units = student.task_units(task)
    allowed = set(student.class_registry[units.start:units.stop])
    bad = sorted(set(int(v) for v in y.tolist()) - allowed)
    if bad:
        raise ValueError(f"labels {bad} are outside the current task's classes")
    local = _units(student, y) - units.start
    z = student.features(x) if z is None else z
    return F.cross_entropy(student.head_logits(z, [task]), local)


def feature_distillation_loss(student, teacher: ModelSnapshot, x) -> torch.Tensor:
    with torch.no_grad():
        z_t = teacher.features(x)
    return squared_distance(student.features(x), z_t)


def weighted_feature_distillation_loss(student, teacher: ModelSnapshot, batch: MixedBatch,
                                       weight: torch.Tensor | None = None) -> torch.Tensor:
    if weight is None:
        weight = teacher.head_weight()
    xs = [batch.x] + ([batch.x_syn] if batch.has_synthetic else [])
    z_s = torch.cat([student.features(x) for x in xs])
    with torch.no_grad():
        z_t = torch.cat([teacher.features(x) for x in xs])
    return weighted_squared_distance(z_s, z_t, weight)


def ft_ce_from_features(student, z: torch.Tensor, labels: torch.Tensor,
                        weights: torch.Tensor | None = None) -> torch.Tensor:
    """Head-only cross-entropy over all heads; ``z`` is detached so the backbone gets no gradient."""
    logits = student.head_logits(z.detach())
    per_sample = F.cross_entropy(logits, _units(student, labels), reduction="none")
    if weights is None:
        return per_sample.mean()
    return (weights.to(per_sample.dtype) * per_sample).mean()


def ft_ce_loss(student, batch: MixedBatch, balance: bool = True) -> torch.Tensor:
    xs = [batch.x] + ([batch.x_syn] if batch.has_synthetic else [])
    labels = torch.cat([batch.y] + ([batch.y_syn] if batch.has_synthetic else []))
    with torch.no_grad():
        z = torch.cat([student.features(x) for x in xs])
    weights = None
    if balance:
        n_new = student.heads[-1].out_features
        weights = task_balance_weights(batch.provenance, student.num_classes - n_new, n_new)
    return ft_ce_from_features(student, z, labels, weights)


def ours_objective(student: IncrementalClassifier, teacher: ModelSnapshot | None,
                   batch: MixedBatch, w: ObjectiveWeights, ablation: Ablation | None = None):
    """Local CE + lambda_kd * weighted feature KD + lambda_ft * head fine-tuning.

    Returns ``(total, breakdown)``; on the first task this is plain cross-entropy.
    """
    ablation = ablation or Ablation()
    if teacher is None or student.num_tasks == 1:
        loss = F.cross_entropy(student.logits(batch.x), _units(student, batch.y))
        return loss, {"ce": loss.item()}

    n_new = student.heads[-1].out_features
    n_past = student.num_classes - n_new
    z_real = student.features(batch.x)
    if ablation.standard_ce:
        ce = F.cross_entropy(student.head_logits(z_real), _units(student, batch.y))
    else:
        ce = local_ce_loss(student, batch.x, batch.y, z=z_real)
    terms = {"ce": ce}

    z_syn = student.features(batch.x_syn) if batch.has_synthetic else None
    if w.lambda_kd > 0:
        with torch.no_grad():
            t_real = teacher.features(batch.x)
            t_syn = teacher.features(batch.x_syn) if batch.has_synthetic else None
        pairs = []
        if not ablation.wfeat_synth_only:
            pairs.append((z_real, t_real))
        if not ablation.wfeat_real_only and z_syn is not None:
            pairs.append((z_syn, t_syn))
        if pairs:
            z_s = torch.cat([p[0] for p in pairs])
            z_t = torch.cat([p[1] for p in pairs])
            terms["wfeat"] = weighted_squared_distance(z_s, z_t, teacher.head_weight())

    if not ablation.no_ft and w.lambda_ft > 0:
        z_all = z_real if z_syn is None else torch.cat([z_real, z_syn])
        labels = batch.y if z_syn is None else torch.cat([batch.y, batch.y_syn])
        weights = None
        if not ablation.no_balancing:
            weights = task_balance_weights(batch.provenance, n_past, n_new)
        terms["ft"] = ft_ce_from_features(student, z_all, labels, weights)

    scale = {"ce": 1.0, "wfeat": w.lambda_kd, "ft": w.lambda_ft}
    total = sum(scale[k] * v for k, v in terms.items())
    breakdown = {k: scale[k] * v.item() for k, v in terms.items()}
    return total, breakdown


def lwf_di_objective(student: IncrementalClassifier, teacher: ModelSnapshot | None,
                     batch: MixedBatch, temperature: float, kd_weight: float = 1.0,
                     padded: bool = True):
    """Cross-entropy over all heads on real data plus KD on real and synthetic data.

    ``padded=False`` swaps the zero-padded KD for the classic past-slice KD.
    """
    z = student.features(batch.x)
    ce = F.cross_entropy(student.head_logits(z), _units(student, batch.y))
    terms = {"ce": ce}
    if teacher is not None and student.num_tasks > 1:
        kd = kl_padded if padded else kl_past_slice
        with torch.no_grad():
            t_real = teacher.logits(batch.x)
        terms["kd_real"] = kd_weight * kd(student.head_logits(z), t_real, temperature)
        if batch.has_synthetic:
            with torch.no_grad():
                t_syn = teacher.logits(batch.x_syn)
            terms["kd_syn"] = kd_weight * kd(student.logits(batch.x_syn), t_syn, temperature)
    total = sum(terms.values())
    return total, {k: v.item() for k, v in terms.items()}
