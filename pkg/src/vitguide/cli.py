"""Command line entry point: ``vitguide --config exp.yaml --mode train --out runs/a``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import platform
import sys
import traceback
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .autodiff import NumericFault
from .data import Normalization
from .diagnostics import attention_distance, attention_rollout, compare_runs, write_grid_text, write_pgm
from .models import VitConfig, load_checkpoint, resnet_config
from .trainer import (
    TeacherResult,
    TrainConfig,
    TrainingAborted,
    evaluate,
    load_dataset,
    load_teacher,
    pretrain_teacher,
    student_attention,
    train_student,
)

log = logging.getLogger("vitguide")

MODES = ("pretrain-teacher", "train", "eval", "diagnose", "sweep")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SweepGrid:
    beta: tuple = ()
    ratio: tuple = ()
    transform: tuple = ()
    teacher_depth: tuple = ()

    def points(self) -> list:
        axes = {k: v for k, v in asdict(self).items() if v}
        if not axes:
            raise ConfigError("sweep: at least one axis (beta, ratio, transform, teacher_depth) must be non-empty")
        names = list(axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig
    mode: str = "train"
    out: str = "runs/default"
    sweep: SweepGrid = field(default_factory=SweepGrid)
    checkpoint: Optional[str] = None  # eval / diagnose target
    baseline_checkpoint: Optional[str] = None  # diagnose: compare against this run
    diag_samples: int = 200
    rollout_maps: int = 4

    def to_dict(self) -> dict:
        """Flat tree in the same layout :func:`build_config` reads back."""
        d = self.train.to_dict()
        for f in fields(self):
            if f.name != "train":
                d[f.name] = getattr(self, f.name)
        d["sweep"] = {k: list(v) for k, v in asdict(self.sweep).items() if v}
        return d


def _set_path(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = tree
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {dotted}: {key} is not a section")
    node[keys[-1]] = value


def parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    if not key.strip():
        raise ConfigError(f"--set has an empty key in {text!r}")
    return key.strip(), yaml.safe_load(raw)


_TOP_LEVEL = {f.name for f in fields(ExperimentConfig)} - {"train"}


def build_config(tree: dict) -> ExperimentConfig:
    """Validate a parsed config tree; errors name the offending field."""
    tree = dict(tree or {})
    top = {k: tree.pop(k) for k in list(tree) if k in _TOP_LEVEL}
    try:
        train = TrainConfig.from_dict(tree)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training config: {exc}") from None
    sweep = top.pop("sweep", None) or {}
    if not isinstance(sweep, dict):
        raise ConfigError("sweep must be a mapping of axis -> list")
    unknown = set(sweep) - {f.name for f in fields(SweepGrid)}
    if unknown:
        raise ConfigError(f"unknown sweep axes: {', '.join(sorted(unknown))}")
    grid = SweepGrid(**{k: tuple(v if isinstance(v, list) else [v]) for k, v in sweep.items()})
    cfg = ExperimentConfig(train=train, sweep=grid, **top)
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {cfg.mode!r}")
    if cfg.mode == "sweep":
        grid.points()
    if cfg.diag_samples < 1:
        raise ConfigError("diag_samples must be >= 1")
    return cfg


def load_config(path: Optional[str], overrides=(), mode: Optional[str] = None, out: Optional[str] = None) -> ExperimentConfig:
    tree = {}
    if path:
        try:
            with open(path) as fh:
                tree = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        if not isinstance(tree, dict):
            raise ConfigError(f"config {path} must be a mapping at top level")
    for text in overrides:
        key, value = parse_override(text)
        _set_path(tree, key, value)
    if mode is not None:
        tree["mode"] = mode
    if out is not None:
        tree["out"] = out
    return build_config(tree)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(out: Path, cfg: ExperimentConfig, status: str, extra: Optional[dict] = None) -> Path:
    manifest = {
        "config": cfg.to_dict(),
        "config_sha256": config_hash(cfg),
        "seed": cfg.train.seed,
        "mode": cfg.mode,
        "status": status,
        "versions": {"vitguide": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    manifest.update(extra or {})
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------- modes


def _teacher_for(cfg: TrainConfig, out: Path, train, test) -> TeacherResult:
    if cfg.teacher_checkpoint:
        teacher = load_teacher(cfg.teacher_checkpoint)
        if teacher.config != cfg.teacher:
            raise ConfigError(f"teacher_checkpoint {cfg.teacher_checkpoint} holds {teacher.config}, config asks for {cfg.teacher}")
        return teacher
    path = out / "teacher.npz"
    if path.exists():
        teacher = load_teacher(path)
        if teacher.config == cfg.teacher:
            return teacher
    log.info("pretraining teacher (%d layers)", cfg.teacher.depth)
    return pretrain_teacher(cfg, train, test, path)


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def run_pretrain(cfg: ExperimentConfig, out: Path) -> dict:
    train, test = load_dataset(cfg.train.dataset)
    teacher = pretrain_teacher(cfg.train, train, test, out / "teacher.npz")
    summary = {"teacher_train_acc": teacher.train_acc, "teacher_test_acc": teacher.test_acc}
    _write_json(out / "teacher_metrics.json", {**summary, "history": teacher.history})
    print(f"teacher test accuracy: {teacher.test_acc:.6f}")
    return summary


def run_train(cfg: ExperimentConfig, out: Path) -> dict:
    train, test = load_dataset(cfg.train.dataset)
    teacher = _teacher_for(cfg.train, out, train, test) if cfg.train.guided else None
    result = train_student(cfg.train, teacher, train, test, out)
    summary = {"student_test_acc": result.final_test_acc}
    if teacher is not None:
        summary["teacher_test_acc"] = teacher.test_acc
    _write_json(out / "result.json", summary)
    print(f"student test accuracy: {result.final_test_acc:.6f}")
    return summary


def run_eval(cfg: ExperimentConfig, out: Path) -> dict:
    path = Path(cfg.checkpoint) if cfg.checkpoint else out / "student.npz"
    ckpt = load_checkpoint(path)
    _, test = load_dataset(cfg.train.dataset)
    acc = evaluate(ckpt, test, cfg.train.eval_batch_size)
    recorded = ckpt.meta.get("test_acc")
    print(f"accuracy: {acc:.6f}")
    if recorded is not None:
        print(f"recorded: {recorded:.6f}")
    return {"accuracy": acc, "recorded": recorded, "checkpoint": str(path)}


def _distance_for(path: Path, cfg: ExperimentConfig, test):
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("model") != "vit":
        raise ConfigError(f"{path} is not a student checkpoint")
    vcfg = VitConfig(**ckpt.meta["config"])
    norm = Normalization(tuple(ckpt.meta["normalization"]["mean"]), tuple(ckpt.meta["normalization"]["std"]))
    records = student_attention(vcfg, ckpt.tensors(), test, norm, cfg.diag_samples)
    return vcfg, records, attention_distance(records, vcfg.grid, vcfg.use_class_token)


def run_diagnose(cfg: ExperimentConfig, out: Path) -> dict:
    path = Path(cfg.checkpoint) if cfg.checkpoint else out / "student.npz"
    _, test = load_dataset(cfg.train.dataset)
    vcfg, records, report = _distance_for(path, cfg, test)
    report.to_csv(out / "attention_distance.csv")
    rollout = attention_rollout(records, vcfg.grid, vcfg.use_class_token)
    maps_dir = out / "rollout"
    for b in range(min(cfg.rollout_maps, rollout.maps.shape[0])):
        write_pgm(maps_dir / f"sample{b}.pgm", rollout.final()[b])
        write_grid_text(maps_dir / f"sample{b}.txt", rollout.final()[b])
    summary = {"mean_attention_distance": report.global_mean}
    print(f"mean attention distance: {report.global_mean:.6f}")
    if cfg.baseline_checkpoint:
        _, _, base = _distance_for(Path(cfg.baseline_checkpoint), cfg, test)
        delta = compare_runs(base, report)
        delta.to_csv(out / "attention_distance_delta.csv")
        summary["baseline_mean_attention_distance"] = base.global_mean
        summary["delta"] = delta.global_delta
        print(f"delta vs baseline: {delta.global_delta:+.6f}")
    _write_json(out / "diagnostics.json", summary)
    return summary


def _point_config(base: TrainConfig, point: dict) -> TrainConfig:
    changes = {}
    if "beta" in point:
        changes["beta"] = float(point["beta"])
    if "ratio" in point:
        changes["ratio"] = float(point["ratio"])
    if "transform" in point:
        changes["transform"] = str(point["transform"])
    if "teacher_depth" in point:
        t = base.teacher
        changes["teacher"] = resnet_config(
            int(point["teacher_depth"]), base_channels=t.base_channels, input_size=t.input_size, num_classes=t.num_classes
        )
        changes["teacher_checkpoint"] = None
    try:
        return replace(base, **changes)
    except ValueError as exc:
        raise ConfigError(f"sweep point {point}: {exc}") from None


def _point_name(point: dict) -> str:
    return "_".join(f"{k}={v}" for k, v in point.items())


def run_sweep(cfg: ExperimentConfig, out: Path) -> dict:
    train, test = load_dataset(cfg.train.dataset)
    teachers: dict = {}
    rows = []
    for point in cfg.sweep.points():
        pcfg = _point_config(cfg.train, point)
        pdir = out / "points" / _point_name(point)
        pdir.mkdir(parents=True, exist_ok=True)
        teacher = None
        if pcfg.guided:
            key = pcfg.teacher
            if key not in teachers:
                tdir = out / "teachers" / f"depth{key.depth}"
                tdir.mkdir(parents=True, exist_ok=True)
                teachers[key] = _teacher_for(pcfg, tdir, train, test)
            teacher = teachers[key]
        result = train_student(pcfg, teacher, train, test, pdir)
        row = {
            **point,
            "teacher_acc": "" if teacher is None else f"{teacher.test_acc:.6f}",
            "student_acc": f"{result.final_test_acc:.6f}",
            "l_guidance_first": f"{result.metrics[0].l_guidance:.8g}",
            "l_guidance_last": f"{result.metrics[-1].l_guidance:.8g}",
            "metrics": str((pdir / "metrics.csv").relative_to(out)),
        }
        rows.append(row)
        print(" ".join(f"{k}={v}" for k, v in row.items() if k != "metrics"), flush=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return {"points": len(rows)}


RUNNERS = {
    "pretrain-teacher": run_pretrain,
    "train": run_train,
    "eval": run_eval,
    "diagnose": run_diagnose,
    "sweep": run_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vitguide", description=__doc__)
    parser.add_argument("--config", help="YAML experiment config")
    parser.add_argument("--mode", choices=MODES, help="overrides the config's mode")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. beta=1.0 or student.depth=6 (repeatable)")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.mode, args.out)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    write_manifest(out, cfg, "running")
    try:
        summary = RUNNERS[cfg.mode](cfg, out)
    except ConfigError as exc:
        write_manifest(out, cfg, "failed", {"failure": str(exc)})
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericFault, TrainingAborted) as exc:
        ckpt = getattr(exc, "checkpoint", None)
        write_manifest(out, cfg, "failed", {"failure": str(exc), "last_good_checkpoint": str(ckpt) if ckpt else None})
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:
        write_manifest(out, cfg, "failed", {"failure": repr(exc), "traceback": traceback.format_exc()})
        raise
    write_manifest(out, cfg, "ok", {"summary": summary})
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
