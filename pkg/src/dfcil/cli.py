"""Command-line runner: ``dfcil run | compare | diagnose | upper-bound``.

Every artifact is written atomically (temp file then rename). Tables are tab-separated;
figures are PNG files written next to the tables they render.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import traceback
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import ExperimentConfig, parse_text
from .data import (ConfigurationError, LabeledDataset, Normalizer, build_task_schedule, load_array_dataset,
                   load_cifar100, make_toy_dataset, task_subset)
from .metrics import RunRecord, aggregate, drift_report, embed, export_embeddings, mean_std
from .model import load_checkpoint, save_checkpoint, snapshot
from .synthesis import sample_synthetic, train_generator
from .trainer import DATA_FREE_METHODS, METHODS, REPLAY_KIND, _seed, offline_table, run_trial, train_upper_bound

logger = logging.getLogger("dfcil")


# --- file helpers -------------------------------------------------------------------------

def atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def _tsv(header: Sequence[str], rows) -> str:
    lines = ["\t".join(header)]
    lines += ["\t".join(str(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def _pm(values: Sequence[float]) -> str:
    """Percent mean ± population std with one decimal place."""
    m, s = mean_std([100 * v for v in values])
    return f"{m:.1f} ± {s:.1f}"


# --- data ------------------------------------------------------------------------------------

def load_datasets(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    v = cfg.values
    if v["dataset"] == "toy":
        return make_toy_dataset(v["toy.num_classes"], v["toy.train_per_class"], v["toy.test_per_class"],
                                size=v["toy.size"], seed=v["toy.seed"])
    if v["dataset"] == "cifar100":
        return load_cifar100(v["data_root"] or None)
    if not v["data.train_path"] or not v["data.test_path"]:
        raise ConfigurationError("data.train_path / data.test_path: required for dataset=array")
    train = load_array_dataset(v["data.train_path"])
    test = load_array_dataset(v["data.test_path"])
    test.split = "test"
    return train, test


def method_label(cfg: ExperimentConfig) -> str:
    flags = [k.split(".", 1)[1] for k, val in cfg.values.items() if k.startswith("ablation.") and val]
    return cfg["method"] + (f"[{','.join(sorted(flags))}]" if flags else "")


def load_config(args) -> ExperimentConfig:
    """The ``--config`` file or preset with ``--set`` and flag overrides applied."""
    over = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        over.update(parse_text(item))
    if args.seed is not None:
        over["seed"] = args.seed
        over["seeds"] = []
    if args.trials is not None:
        over["trials"] = args.trials
        over.setdefault("seeds", [])
    if getattr(args, "checkpoint_every_task", False):
        over["checkpoint_every_task"] = True
    if getattr(args, "dump_synth_grid", False):
        over["dump_synth_grid"] = True
    return ExperimentConfig.load(args.config, over)


def _offline_reference(cfg: ExperimentConfig, train, out: Path | None):
    """``(model, normalizer)`` for Omega, from a checkpoint or a fresh offline run; None if disabled."""
    if not cfg["upper_bound.enabled"]:
        return None
    if cfg["upper_bound.checkpoint"]:
        model, _, extra = load_checkpoint(cfg["upper_bound.checkpoint"])
        return model, Normalizer(*(tuple(x) for x in extra["normalizer"]))
    logger.info("training offline upper bound (seed %d)", cfg["seed"])
    model, norm = train_upper_bound(train, cfg.optim_schedule(), cfg["seed"], cfg.trainer_options())
    if out is not None:
        save_checkpoint(out / "upper_bound.pt", model, 0,
                        {"normalizer": [list(norm.mean), list(norm.std)], "seed": cfg["seed"]})
    return model, norm


# --- run ---------------------------------------------------------------------------------------

def write_run_tables(out: Path, label: str, records: Sequence[RunRecord]) -> None:
    agg = aggregate(records)
    replay = REPLAY_KIND.get(records[0].method, "None")
    atomic_write(out / "aggregate.tsv", _tsv(
        ["method", "replay", "trials", "A_N", "Omega", "a_n_mean", "a_n_std", "omega_mean", "omega_std"],
        [[label, replay, agg["trials"], _pm([r.final_accuracy for r in records]),
          _pm([r.omega for r in records]), repr(agg["a_n_mean"]), repr(agg["a_n_std"]),
          repr(agg["omega_mean"]), repr(agg["omega_std"])]]))
    rows = []
    for r in records:
        for i, (pt, cu) in enumerate(zip(r.accuracy.per_task, r.accuracy.cumulative)):
            rows += [[r.seed, i + 1, n + 1, repr(pt[n]), repr(cu[n])] for n in range(i + 1)]
    atomic_write(out / "accuracy.tsv", _tsv(["seed", "after_task", "task", "per_task", "cumulative"], rows))
    rows = [[r.seed, t + 1, repr(v)] for r in records for t, v in enumerate(r.omega_trajectory)]
    atomic_write(out / "omega.tsv", _tsv(["seed", "task", "omega"], rows))
    rows = [[r.seed, name, k, repr(val)] for r in records for name, rep in r.diagnostics.items()
            for k, val in rep.items()]
    if rows:
        atomic_write(out / "drift.tsv", _tsv(["seed", "pair", "quantity", "value"], rows))


def write_run_figures(out: Path, label: str, records: Sequence[RunRecord]) -> None:
    from .plotting import plot_accuracy_matrix, plot_drift, plot_omega_curves

    plot_omega_curves({label: [r.omega_trajectory for r in records]}, out / "omega.png", label)
    for r in records:
        plot_accuracy_matrix(r.accuracy.cumulative, out / f"accuracy_seed{r.seed}.png", f"{label} seed {r.seed}")
        for name, rep in r.diagnostics.items():
            plot_drift(rep, out / f"drift_{name}_seed{r.seed}.png", f"{label} {name}")


def cmd_run(args) -> int:
    cfg = load_config(args)
    out = Path(args.out or cfg["output_dir"] or Path("runs") / cfg.name)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.txt", cfg.dump())
    label = method_label(cfg)
    records: list[RunRecord] = []
    try:
        train, test = load_datasets(cfg)
        offline = _offline_reference(cfg, train, out)
        options = cfg.trainer_options(out)
        logs = []
        for seed in cfg.seeds():
            rec, state = run_trial(train, test, cfg["num_tasks"], cfg.method_config(), cfg.optim_schedule(),
                                   seed, offline, options, cfg.digest())
            violations = state.auditor.violations(build_task_schedule(train.num_classes, cfg["num_tasks"], seed))
            if cfg["method"] in DATA_FREE_METHODS and violations:
                raise RuntimeError(f"data-free method read past-task data: {violations}")
            records.append(rec)
            atomic_write(out / "records" / f"seed{seed}.json", json.dumps(rec.to_dict(), indent=1) + "\n")
            logs += [json.dumps({"seed": seed, **e}) for e in state.loss_log]
            atomic_write(out / "losses.jsonl", "".join(line + "\n" for line in logs))
            logger.info("seed %d: A_N=%.4f Omega=%.4f", seed, rec.final_accuracy, rec.omega)
        write_run_tables(out, label, records)
        write_run_figures(out, label, records)
    except Exception as err:  # partial artifacts stay; the manifest says what happened
        atomic_write(out / "error.json", json.dumps({
            "error": type(err).__name__, "message": str(err),
            "completed_trials": [r.seed for r in records], "traceback": traceback.format_exc(),
        }, indent=1) + "\n")
        if isinstance(err, ConfigurationError):
            raise
        print(f"run failed: {type(err).__name__}: {err} (see {out / 'error.json'})", file=sys.stderr)
        return 1
    print((out / "aggregate.tsv").read_text(), end="")
    print(f"run directory: {out}")
    return 0


# --- compare -------------------------------------------------------------------------------------

def _load_run(run_dir: Path) -> tuple[ExperimentConfig, list[RunRecord]]:
    if not (run_dir / "config.txt").exists():
        raise ConfigurationError(f"{run_dir}: not a run directory (no config.txt)")
    cfg = ExperimentConfig.from_dict(parse_text((run_dir / "config.txt").read_text()), run_dir.name)
    files = sorted((run_dir / "records").glob("seed*.json"))
    if not files:
        raise ConfigurationError(f"{run_dir}: no trial records")
    return cfg, [RunRecord.from_dict(json.loads(f.read_text())) for f in files]


def compare_runs(run_dirs: Sequence[Path]) -> list[list[str]]:
    if len(run_dirs) < 2:
        raise ConfigurationError("compare needs at least two run directories")
    runs = [_load_run(Path(d)) for d in run_dirs]
    tasks = {cfg["num_tasks"] for cfg, _ in runs}
    if len(tasks) != 1:
        raise ConfigurationError(f"incompatible runs: task counts {sorted(tasks)}")
    order = {m: k for k, m in enumerate(METHODS)}
    runs.sort(key=lambda r: order[r[0]["method"]])  # stable for equal methods
    return [[method_label(cfg), REPLAY_KIND[cfg["method"]], _pm([r.final_accuracy for r in recs]),
             _pm([r.omega for r in recs])] for cfg, recs in runs]


def cmd_compare(args) -> int:
    rows = compare_runs([Path(d) for d in args.runs])
    text = _tsv(["method", "replay", "A_N (up)", "Omega (up)"], rows)
    out = Path(args.out or "comparison.tsv")
    atomic_write(out, text)
    from .plotting import plot_omega_curves

    curves = {}
    for d in args.runs:
        cfg, recs = _load_run(Path(d))
        curves[f"{method_label(cfg)} ({Path(d).name})"] = [r.omega_trajectory for r in recs]
    plot_omega_curves(curves, out.with_suffix(".png"))
    print(text, end="")
    return 0


# --- diagnose ----------------------------------------------------------------------------------------

def diagnose_run(run_dir: Path, pair: tuple[int, int], seed: int | None = None,
                 samples: int | None = None, out: Path | None = None) -> dict:
    """Rebuild the drift report for tasks ``a < b`` (1-based) from saved checkpoints."""
    run_dir = Path(run_dir)
    if not (run_dir / "config.txt").exists():
        raise ConfigurationError(f"{run_dir}: not a run directory (no config.txt)")
    cfg = ExperimentConfig.from_dict(parse_text((run_dir / "config.txt").read_text()), run_dir.name)
    a, b = pair
    n = cfg["num_tasks"]
    if not (1 <= a < b <= n):
        raise ConfigurationError(f"task pair ({a}, {b}) invalid for a {n}-task run; need 1 <= a < b <= {n}")
    seed = cfg.seeds()[0] if seed is None else seed
    ckpt = lambda t: run_dir / "checkpoints" / f"seed{seed}_task{t}.pt"
    for t in (b - 1, b):
        if not ckpt(t).exists():
            raise FileNotFoundError(f"missing checkpoint {ckpt(t)}; rerun with --checkpoint-every-task")
    model_b, _, extra = load_checkpoint(ckpt(b))
    model_prev, prev_idx, _ = load_checkpoint(ckpt(b - 1))
    norm = Normalizer(*(tuple(x) for x in extra["normalizer"]))
    _, test = load_datasets(cfg)
    test = norm(test)
    schedule = build_task_schedule(test.num_classes, n, seed)
    if list(schedule.class_order) != list(extra["class_order"]):
        raise RuntimeError("checkpoint class order does not match the configured schedule")

    mc = cfg.method_config()
    s = mc.synthesis
    teacher = snapshot(model_prev, prev_idx)
    gen = train_generator(teacher, mc.inversion, s.steps, s.batch_size, _seed(seed, b - 1, 2),
                          noise_dim=s.noise_dim, lr=s.lr, width=s.width)
    samples = samples or cfg["diagnose.samples"]
    synth, synth_y = sample_synthetic(gen, teacher, samples, _seed(seed, b - 1, 6))
    real_a = task_subset(test, schedule.tasks[a - 1])
    real_b = task_subset(test, schedule.tasks[b - 1])
    za, zb, zs = embed(model_b, real_a.images), embed(model_b, real_b.images), embed(model_b, synth)
    report = drift_report(model_b, za, zb, zs)

    out = Path(out or run_dir / f"diagnose_task{a}_task{b}_seed{seed}")
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "drift.tsv", _tsv(["quantity", "value"], [[k, repr(v)] for k, v in report.items()]))
    labels = np.concatenate([real_a.labels, real_b.labels, synth_y.numpy()])
    prov = [f"real_task{a}"] * len(za) + [f"real_task{b}"] * len(zb) + [f"synthetic_task{a}"] * len(zs)
    fd, tmp = tempfile.mkstemp(dir=out, prefix=".embeddings.")
    os.close(fd)
    export_embeddings(tmp, np.concatenate([za, zb, zs]), labels, prov)
    os.replace(tmp, out / "embeddings.tsv")
    from .plotting import plot_drift

    plot_drift(report, out / "drift.png", f"{method_label(cfg)} tasks {a}/{b}")
    return report


def cmd_diagnose(args) -> int:
    torch.manual_seed(0)
    report = diagnose_run(Path(args.run), tuple(args.pair), args.seed, args.samples,
                          Path(args.out) if args.out else None)
    for k, v in report.items():
        print(f"{k}\t{v}")
    return 0


# --- upper bound -----------------------------------------------------------------------------------------

def cmd_upper_bound(args) -> int:
    cfg = load_config(args)
    out = Path(args.out or cfg["output_dir"] or Path("runs") / f"{cfg.name}_upper_bound")
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.txt", cfg.dump())
    train, test = load_datasets(cfg)
    model, norm = train_upper_bound(train, cfg.optim_schedule(), cfg["seed"], cfg.trainer_options())
    save_checkpoint(out / "upper_bound.pt", model, 0,
                    {"normalizer": [list(norm.mean), list(norm.std)], "seed": cfg["seed"]})
    rows = []
    for seed in cfg.seeds():
        schedule = build_task_schedule(train.num_classes, cfg["num_tasks"], seed)
        rows += [[seed, k + 1, repr(v)] for k, v in enumerate(offline_table(model, norm, test, schedule))]
    atomic_write(out / "offline.tsv", _tsv(["seed", "prefix_tasks", "accuracy"], rows))
    print(f"offline accuracy over all classes: {float(rows[-1][2]):.4f}")
    print(f"checkpoint: {out / 'upper_bound.pt'}")
    return 0


# --- entry point -------------------------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="config file or preset name such as toy_ours_4task")
    p.add_argument("--out", help="output directory (default: output_dir from the config, else runs/<name>)")
    p.add_argument("--seed", type=int, help="first trial seed; later trials use seed+1, seed+2, ...")
    p.add_argument("--trials", type=int, help="number of trials")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfcil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one method over all trials and write the run directory")
    _common(p)
    p.add_argument("--checkpoint-every-task", action="store_true", help="save a checkpoint after each task")
    p.add_argument("--dump-synth-grid", action="store_true", help="save a grid of synthetic images per task")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="tabulate A_N and Omega across run directories")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", help="output table path (default comparison.tsv)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("diagnose", help="MID/MMD drift report from saved checkpoints")
    p.add_argument("run", help="run directory created with --checkpoint-every-task")
    p.add_argument("--pair", type=int, nargs=2, default=(1, 2), metavar=("A", "B"), help="1-based tasks a < b")
    p.add_argument("--seed", type=int, help="trial seed (default: the run's first)")
    p.add_argument("--samples", type=int, help="synthetic sample count")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("upper-bound", help="train the offline reference model and its prefix accuracies")
    _common(p)
    p.set_defaults(func=cmd_upper_bound)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
