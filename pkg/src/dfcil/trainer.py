"""Per-task training loops for every method, experiment runs and the offline upper bound."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import (AccessAuditor, ConfigurationError, CoresetStore, LabeledDataset, Normalizer,
                   TaskSchedule, build_task_schedule, concat_datasets, iterate_batches, task_subset,
                   update_coreset)
from .losses import Ablation, MixedBatch, ObjectiveWeights, lwf_di_objective, ours_objective
from .metrics import (AccuracyMatrix, RunRecord, aggregate, drift_report, omega, task_accuracy,
                      to_tensor)
from .model import IncrementalClassifier, ModelSnapshot, save_checkpoint, snapshot
from .synthesis import (DirectInversion, InversionWeights, sample_synthetic, save_image_grid,
                        train_generator)

logger = logging.getLogger(__name__)

METHODS = ("base", "lwf", "lwf_synth", "deep_inversion", "naive_rehearsal", "lwf_coreset", "ours")
SYNTHESIS_METHODS = {"lwf_synth", "deep_inversion", "ours"}
CORESET_METHODS = {"naive_rehearsal", "lwf_coreset"}
TEACHER_METHODS = {"lwf", "lwf_synth", "deep_inversion", "lwf_coreset", "ours"}
DATA_FREE_METHODS = {"base", "lwf", "lwf_synth", "deep_inversion", "ours"}
REPLAY_KIND = {"base": "None", "lwf": "None", "lwf_synth": "Synthetic",
               "deep_inversion": "Synthetic", "naive_rehearsal": "Coreset",
               "lwf_coreset": "Coreset", "ours": "Synthetic", "upper_bound": "None"}


@dataclass
class OptimSchedule:
    epochs: int = 250
    lr: float = 0.1
    milestones: tuple[int, ...] = (100, 150, 200)
    gamma: float = 0.1
    weight_decay: float = 2e-4
    momentum: float = 0.9
    batch_size: int = 128

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.epochs < 1:
            raise ConfigurationError("optim.epochs must be >= 1")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigurationError(f"optim.milestones must be strictly increasing: {self.milestones}")
        if any(m >= self.epochs or m <= 0 for m in self.milestones):
            raise ConfigurationError(f"optim.milestones must lie in (0, epochs): {self.milestones}")
        if self.batch_size < 1:
            raise ConfigurationError("optim.batch_size must be >= 1")


@dataclass
class SynthesisConfig:
    steps: int = 5000
    lr: float = 1e-3
    batch_size: int = 128
    noise_dim: int = 1000
    width: int = 64
    backend: str = "generator"  # or "direct"
    direct_steps: int = 200

    def __post_init__(self):
        if self.backend not in ("generator", "direct"):
            raise ConfigurationError(f"synthesis.backend must be generator or direct, got {self.backend!r}")
        if self.steps < 1:
            raise ConfigurationError("synthesis.steps must be >= 1")


@dataclass
class MethodConfig:
    method: str = "ours"
    ablation: Ablation = field(default_factory=Ablation)
    objective: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    inversion: InversionWeights = field(default_factory=InversionWeights)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    coreset_capacity: int = 2000

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.ablation.any() and self.method != "ours":
            raise ConfigurationError(f"ablation flags are only valid with method=ours, not {self.method!r}")
        if self.method in CORESET_METHODS and self.coreset_capacity <= 0:
            raise ConfigurationError("coreset.capacity must be positive for replay methods")

    @property
    def uses_synthesis(self) -> bool:
        return self.method in SYNTHESIS_METHODS

    @property
    def uses_coreset(self) -> bool:
        return self.method in CORESET_METHODS

    @property
    def uses_teacher(self) -> bool:
        return self.method in TEACHER_METHODS


@dataclass
class TrainerOptions:
    arch: str = "small_conv"
    augment: bool = True
    crop_pad: int = 4
    log_every: int = 50
    checkpoint_dir: str | None = None
    synth_grid_dir: str | None = None
    diagnose_pair: tuple[int, int] | None = (0, 1)
    diagnose_samples: int = 500


def apply_ablation(cfg: MethodConfig) -> dict:
    """Describe which objective terms are active for ``cfg`` (``ours`` only)."""
    if cfg.method != "ours":
        raise ConfigurationError("ablations apply to method=ours only")
    a = cfg.ablation
    return {
        "ce": "all_heads" if a.standard_ce else "local",
        "wfeat": "real" if a.wfeat_real_only else "synthetic" if a.wfeat_synth_only else "real+synthetic",
        "ft": None if a.no_ft else ("unbalanced" if a.no_balancing else "balanced"),
        "lambda_kd": cfg.objective.lambda_kd,
        "lambda_ft": 0.0 if a.no_ft else cfg.objective.lambda_ft,
    }


@dataclass
class TrainState:
    model: IncrementalClassifier
    snapshot: ModelSnapshot | None = None
    coreset: CoresetStore | None = None
    generator: object | None = None
    tasks_done: int = 0
    auditor: AccessAuditor = field(default_factory=AccessAuditor)
    loss_log: list[dict] = field(default_factory=list)
    memory: list[dict] = field(default_factory=list)
    seconds_per_batch: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    generators_alive_peak: int = 0


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _torch_gen(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def new_model(arch: str, image_shape, seed: int) -> IncrementalClassifier:
    torch.manual_seed(seed)
    return IncrementalClassifier(arch, image_shape)


def _memory_entry(state: TrainState, task: int, phase: str) -> dict:
    count = lambda m: sum(p.numel() for p in m.parameters())
    return {
        "task": task,
        "phase": phase,
        "model_params": count(state.model),
        "snapshot_params": count(state.snapshot.model) if state.snapshot else 0,
        "generator_params": state.generator.num_parameters if state.generator is not None else 0,
        "coreset_images": len(state.coreset) if state.coreset is not None else 0,
    }


def _step_loss(cfg: MethodConfig, model, teacher, batch: MixedBatch):
    m = cfg.method
    w = cfg.objective
    if m == "ours":
        return ours_objective(model, teacher, batch, w, cfg.ablation)
    if m in ("base", "naive_rehearsal") or teacher is None:
        loss = F.cross_entropy(model.logits(batch.x), model.class_to_unit(batch.y))
        return loss, {"ce": loss.item()}
    # lwf, lwf_coreset, deep_inversion: zero-padded KD; lwf_synth: classic past-slice KD
    return lwf_di_objective(model, teacher, batch, w.kd_temperature, w.kd_weight,
                            padded=(m != "lwf_synth"))


def train_task(state: TrainState, task_idx: int, train: LabeledDataset, schedule: TaskSchedule,
               cfg: MethodConfig, sched: OptimSchedule, seed: int,
               options: TrainerOptions | None = None,
               on_task_end: Callable[[TrainState, int], None] | None = None) -> TrainState:
    """Train one task: snapshot, grow heads, fit generator, epoch loop, coreset, discard generator."""
    options = options or TrainerOptions()
    if task_idx != state.tasks_done:
        raise RuntimeError(f"tasks must be trained in order: expected {state.tasks_done}, got {task_idx}")
    classes = schedule.tasks[task_idx]
    model = state.model

    if task_idx > 0 and cfg.uses_teacher:
        state.snapshot = snapshot(model, task_idx - 1)  # older snapshot released here
    teacher = state.snapshot if (task_idx > 0 and cfg.uses_teacher) else None
    if task_idx > 0 and cfg.uses_teacher and teacher is None:
        raise RuntimeError("missing teacher snapshot")

    model.grow_heads(classes, generator=_torch_gen(_seed(seed, task_idx, 1)))

    if cfg.uses_synthesis and task_idx > 0:
        s = cfg.synthesis
        if s.backend == "generator":
            state.generator = train_generator(
                teacher, cfg.inversion, s.steps, s.batch_size, _seed(seed, task_idx, 2),
                noise_dim=s.noise_dim, lr=s.lr, width=s.width)
        else:
            state.generator = DirectInversion(teacher, cfg.inversion, s.direct_steps)
        state.generators_alive_peak = max(state.generators_alive_peak, 1)
        if options.synth_grid_dir:
            x, _ = sample_synthetic(state.generator, teacher, 32, _seed(seed, task_idx, 3))
            save_image_grid(Path(options.synth_grid_dir) / f"synthetic_task{task_idx + 1}.png", x)
    state.memory.append(_memory_entry(state, task_idx, "training"))

    data = task_subset(train, classes)
    if cfg.uses_coreset and state.coreset is not None and len(state.coreset):
        data = concat_datasets([data, state.coreset.as_dataset(train.num_classes)])

    model.train()
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=sched.lr, momentum=sched.momentum, weight_decay=sched.weight_decay)
    lr_sched = torch.optim.lr_scheduler.MultiStepLR(opt, list(sched.milestones), sched.gamma)
    synth_stream = _torch_gen(_seed(seed, task_idx, 4))
    step, elapsed = 0, 0.0
    for epoch in range(sched.epochs):
        for images, labels in iterate_batches(data, sched.batch_size, (seed, task_idx, epoch),
                                              augment=options.augment, pad=options.crop_pad):
            if len(labels) < 2:
                continue  # batch norm needs more than one sample
            t0 = time.perf_counter()
            state.auditor.record(task_idx, labels)
            batch = MixedBatch(to_tensor(images), torch.from_numpy(labels))
            if state.generator is not None:
                batch.x_syn, batch.y_syn = sample_synthetic(state.generator, teacher, len(labels), synth_stream)
            opt.zero_grad()
            loss, parts = _step_loss(cfg, model, teacher, batch)
            loss.backward()
            opt.step()
            elapsed += time.perf_counter() - t0
            if options.log_every and step % options.log_every == 0:
                for term, value in parts.items():
                    state.loss_log.append({"step": step, "task": task_idx + 1, "term": term, "value": value})
            step += 1
        lr_sched.step()
    state.seconds_per_batch[task_idx + 1] = elapsed / max(step, 1)
    model.eval()

    if cfg.uses_coreset:
        store = state.coreset or CoresetStore(cfg.coreset_capacity)
        state.coreset = update_coreset(store, task_subset(train, classes), _seed(seed, task_idx, 5))
    if on_task_end is not None:
        on_task_end(state, task_idx)
    state.generator = None
    state.tasks_done += 1
    state.memory.append(_memory_entry(state, task_idx, "end"))
    return state


# --- evaluation / experiment -------------------------------------------------------------

def evaluate_row(model, test: LabeledDataset, schedule: TaskSchedule, i: int):
    """Row i of the accuracy matrix: per-task and cumulative accuracy, predictions over T_1..T_i."""
    span = list(range(i + 1))
    per_task = [task_accuracy(model, task_subset(test, schedule.tasks[n]), span) for n in span]
    cumulative = [task_accuracy(model, task_subset(test, schedule.cumulative(n)), span) for n in span]
    return per_task, cumulative


def train_upper_bound(train: LabeledDataset, sched: OptimSchedule, seed: int,
                      options: TrainerOptions | None = None):
    """Offline model trained on every class at once (head units in class-id order)."""
    options = options or TrainerOptions()
    normalizer = Normalizer.fit(train)
    data = normalizer(train)
    model = new_model(options.arch, train.image_shape, seed)
    schedule = TaskSchedule(seed, tuple(range(train.num_classes)), (tuple(range(train.num_classes)),))
    state = TrainState(model)
    train_task(state, 0, data, schedule, MethodConfig("base"), sched, seed, options)
    return model, normalizer


def offline_table(model, normalizer: Normalizer, test: LabeledDataset, schedule: TaskSchedule) -> list[float]:
    """A_offline,1:n for each prefix of ``schedule``, predicting over all heads."""
    data = normalizer(test)
    return [task_accuracy(model, task_subset(data, schedule.cumulative(n)))
            for n in range(schedule.num_tasks)]


def run_trial(train: LabeledDataset, test: LabeledDataset, num_tasks: int, cfg: MethodConfig,
              sched: OptimSchedule, seed: int, offline=None, options: TrainerOptions | None = None,
              config_digest: str = "") -> tuple[RunRecord, TrainState]:
    """One full task sequence under ``seed``; ``offline`` is ``(model, normalizer)`` or a table."""
    options = options or TrainerOptions()
    schedule = build_task_schedule(train.num_classes, num_tasks, seed)
    normalizer = Normalizer.fit(task_subset(train, schedule.tasks[0]))
    train_n, test_n = normalizer(train), normalizer(test)
    state = TrainState(new_model(options.arch, train.image_shape, seed))
    acc = AccuracyMatrix(schedule.task_sizes())

    def on_task_end(st: TrainState, task_idx: int):
        pair = options.diagnose_pair
        if pair and task_idx == pair[1] and st.generator is not None:
            a, b = pair
            real_a = task_subset(test_n, schedule.tasks[a])
            real_b = task_subset(test_n, schedule.tasks[b])
            synth, _ = sample_synthetic(st.generator, st.snapshot, options.diagnose_samples,
                                        _seed(seed, task_idx, 6))
            st.diagnostics[f"task{a + 1}_vs_task{b + 1}"] = drift_report(
                st.model, real_a.images, real_b.images, synth)

    for t in range(num_tasks):
        train_task(state, t, train_n, schedule, cfg, sched, seed, options, on_task_end)
        acc.add_row(*evaluate_row(state.model, test_n, schedule, t))
        logger.info("%s seed=%d task %d: A=%.4f", cfg.method, seed, t + 1, acc.cumulative[t][t])
        if options.checkpoint_dir:
            save_checkpoint(Path(options.checkpoint_dir) / f"seed{seed}_task{t + 1}.pt", state.model, t,
                            {"normalizer": [list(normalizer.mean), list(normalizer.std)],
                             "class_order": list(schedule.class_order), "seed": seed})

    if offline is None:
        table = [1.0] * num_tasks
    elif isinstance(offline, (list, tuple)) and not isinstance(offline[0], torch.nn.Module):
        table = list(offline)
    else:
        table = offline_table(offline[0], offline[1], test, schedule)
    om, traj = omega(acc, table)
    record = RunRecord(
        method=cfg.method, seed=seed, class_order=list(schedule.class_order), accuracy=acc,
        offline=table, omega=om, omega_trajectory=traj, diagnostics=state.diagnostics,
        seconds_per_batch=state.seconds_per_batch, memory=state.memory, config_digest=config_digest)
    return record, state


def run_experiment(train: LabeledDataset, test: LabeledDataset, num_tasks: int, cfg: MethodConfig,
                   sched: OptimSchedule, seeds: Sequence[int], offline=None,
                   options: TrainerOptions | None = None, config_digest: str = ""):
    """Run one trial per seed (class order reshuffled per seed) and aggregate A_N and Omega."""
    seeds = list(seeds)
    if len(seeds) < 1:
        raise ConfigurationError("trials must be >= 1")
    if len(set(seeds)) != len(seeds):
        raise ConfigurationError(f"trial seeds must be distinct: {seeds}")
    records = [run_trial(train, test, num_tasks, cfg, sched, s, offline, options, config_digest)[0]
               for s in seeds]
    return records, aggregate(records)
