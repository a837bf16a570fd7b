"""Flat ``dotted.key = value`` experiment configs, presets and validation.

Values are JSON literals (``0.1``, ``[100, 150]``, ``"ours"``, ``true``); bare words are
read as strings. ``#`` starts a comment line.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

from .data import ConfigurationError
from .losses import Ablation, ObjectiveWeights
from .synthesis import InversionWeights
from .trainer import METHODS, MethodConfig, OptimSchedule, SynthesisConfig, TrainerOptions

DEFAULTS: dict[str, object] = {
    "dataset": "cifar100",
    "data_root": "",
    "data.train_path": "",
    "data.test_path": "",
    "num_tasks": 10,
    "method": "ours",
    "ablation.no_balancing": False,
    "ablation.standard_ce": False,
    "ablation.wfeat_real_only": False,
    "ablation.wfeat_synth_only": False,
    "ablation.no_ft": False,
    "ablation.balance_all": False,
    "optim.epochs": 250,
    "optim.lr": 0.1,
    "optim.milestones": [100, 150, 200],
    "optim.gamma": 0.1,
    "optim.weight_decay": 2e-4,
    "optim.momentum": 0.9,
    "optim.batch_size": 128,
    "inversion.alpha_con": 1.0,
    "inversion.alpha_div": 1.0,
    "inversion.alpha_stat": 50.0,
    "inversion.alpha_prior": 1e-3,
    "inversion.alpha_temp": 1e3,
    "synthesis.steps": 5000,
    "synthesis.lr": 1e-3,
    "synthesis.batch_size": 128,
    "synthesis.noise_dim": 1000,
    "synthesis.width": 64,
    "synthesis.backend": "generator",
    "synthesis.direct_steps": 200,
    "objective.lambda_kd": 0.1,
    "objective.lambda_ft": 1.0,
    "objective.kd_temperature": 2.0,
    "objective.kd_weight": 1.0,
    "coreset.capacity": 2000,
    "model.arch": "resnet32",
    "train.augment": True,
    "train.crop_pad": 4,
    "train.log_every": 50,
    "toy.num_classes": 20,
    "toy.train_per_class": 200,
    "toy.test_per_class": 50,
    "toy.size": 16,
    "toy.seed": 0,
    "trials": 3,
    "seeds": [],
    "seed": 0,
    "output_dir": "",
    "checkpoint_every_task": False,
    "dump_synth_grid": False,
    "upper_bound.enabled": True,
    "upper_bound.checkpoint": "",
    "diagnose.pair": [1, 2],
    "diagnose.samples": 500,
}

# Desk-scale profile on the Gaussian-blob dataset.
TOY_PROFILE: dict[str, object] = {
    "dataset": "toy",
    "num_tasks": 4,
    "model.arch": "small_conv",
    "optim.epochs": 10,
    "optim.lr": 0.05,
    "optim.milestones": [7],
    "optim.weight_decay": 5e-4,
    "optim.batch_size": 64,
    "synthesis.steps": 200,
    "synthesis.batch_size": 64,
    "synthesis.noise_dim": 64,
    "synthesis.width": 32,
    "train.crop_pad": 2,
    "coreset.capacity": 400,
}

PRESET = re.compile(r"^(toy|cifar100)_([a-z_]+?)_(\d+)task$")


def parse_text(text: str) -> dict[str, object]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def dump_text(values: dict[str, object]) -> str:
    return "".join(f"{k} = {json.dumps(values[k])}\n" for k in sorted(values))


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigurationError(f"{key}: expected a list, got {value!r}")
        return value
    if not isinstance(value, str):
        raise ConfigurationError(f"{key}: expected a string, got {value!r}")
    return value


@dataclass
class ExperimentConfig:
    values: dict[str, object]
    name: str = "experiment"

    @classmethod
    def from_dict(cls, given: dict[str, object], name: str = "experiment") -> "ExperimentConfig":
        unknown = sorted(set(given) - set(DEFAULTS))
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        base = dict(DEFAULTS)
        if given.get("dataset", base["dataset"]) == "toy":
            base.update(TOY_PROFILE)
        values = {k: _coerce(k, v, DEFAULTS[k]) for k, v in given.items()}
        base.update(values)
        cfg = cls(base, name)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, source: str, overrides: dict | None = None) -> "ExperimentConfig":
        """Read a config file, or expand a preset name like ``cifar100_ours_10task``.

        ``overrides`` are merged in before validation.
        """
        path = Path(source)
        if path.exists():
            given, name = parse_text(path.read_text()), path.stem
        else:
            m = PRESET.match(source)
            if not m:
                raise ConfigurationError(f"config {source!r} is neither a file nor a preset name")
            given = {"dataset": m.group(1), "method": m.group(2), "num_tasks": int(m.group(3))}
            name = source
        return cls.from_dict({**given, **(overrides or {})}, name)

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        given = {k: v for k, v in self.values.items() if DEFAULTS.get(k) != v}
        given.update(overrides)
        return ExperimentConfig.from_dict(given, self.name)

    def dump(self) -> str:
        return dump_text(self.values)

    def digest(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()[:16]

    # --- typed views -----------------------------------------------------------------

    def method_config(self) -> MethodConfig:
        v = self.values
        sub = lambda prefix: {k[len(prefix):]: val for k, val in v.items() if k.startswith(prefix)}
        return MethodConfig(
            method=v["method"],
            ablation=Ablation(**sub("ablation.")),
            objective=ObjectiveWeights(**sub("objective.")),
            inversion=InversionWeights(**sub("inversion.")),
            synthesis=SynthesisConfig(**sub("synthesis.")),
            coreset_capacity=v["coreset.capacity"],
        )

    def optim_schedule(self) -> OptimSchedule:
        v = self.values
        return OptimSchedule(v["optim.epochs"], v["optim.lr"], tuple(v["optim.milestones"]),
                             v["optim.gamma"], v["optim.weight_decay"], v["optim.momentum"],
                             v["optim.batch_size"])

    def trainer_options(self, run_dir: Path | None = None) -> TrainerOptions:
        v = self.values
        pair = v["diagnose.pair"]
        return TrainerOptions(
            arch=v["model.arch"], augment=v["train.augment"], crop_pad=v["train.crop_pad"],
            log_every=v["train.log_every"],
            checkpoint_dir=str(run_dir / "checkpoints") if run_dir and v["checkpoint_every_task"] else None,
            synth_grid_dir=str(run_dir / "synthetic") if run_dir and v["dump_synth_grid"] else None,
            diagnose_pair=(pair[0] - 1, pair[1] - 1) if pair else None,
            diagnose_samples=v["diagnose.samples"],
        )

    def seeds(self) -> list[int]:
        v = self.values
        if v["seeds"]:
            return [int(s) for s in v["seeds"]]
        return [v["seed"] + k for k in range(v["trials"])]

    def validate(self) -> None:
        v = self.values
        if v["dataset"] not in ("toy", "cifar100", "array"):
            raise ConfigurationError(f"dataset: unknown dataset {v['dataset']!r}")
        if v["method"] not in METHODS:
            raise ConfigurationError(f"method: unknown method {v['method']!r}; choose from {METHODS}")
        classes = {"toy": v["toy.num_classes"], "cifar100": 100}.get(v["dataset"])
        if classes is not None and (v["num_tasks"] < 1 or classes % v["num_tasks"]):
            raise ConfigurationError(
                f"num_tasks: num_classes={classes} is not divisible into num_tasks={v['num_tasks']} equal tasks")
        if v["trials"] < 1:
            raise ConfigurationError("trials: must be >= 1")
        if v["seeds"] and len(v["seeds"]) != v["trials"]:
            raise ConfigurationError(f"seeds: {len(v['seeds'])} seeds given for trials={v['trials']}")
        if v["seeds"] and len(set(v["seeds"])) != len(v["seeds"]):
            raise ConfigurationError("seeds: trial seeds must be distinct")
        pair = v["diagnose.pair"]
        if pair and (len(pair) != 2 or not 1 <= pair[0] < pair[1] <= v["num_tasks"]):
            raise ConfigurationError(f"diagnose.pair: need two increasing task numbers in 1..num_tasks, got {pair}")
        try:
            self.method_config()
            self.optim_schedule()
        except (ConfigurationError, ValueError, TypeError) as err:
            raise ConfigurationError(str(err)) from None
