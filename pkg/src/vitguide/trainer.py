"""Teacher pretraining, guided student training and evaluation."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import SGD, AdamW, LrSchedule, NumericFault, Tensor, backward, lr_at, no_grad, ops
from .data import Normalization, Split, load_cifar, make_batches, synth_dataset
from .guidance import LocalityGuidance, TransformKind, init_projections, select_positions, total_loss
from .models import (
    CnnConfig,
    FrozenTeacher,
    VitConfig,
    cnn_forward,
    freeze,
    init_cnn,
    init_vit,
    load_checkpoint,
    save_checkpoint,
    vit_forward,
)
from .models.resnet import MapFeature

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "l_cls", "l_guidance", "total", "train_acc", "test_acc", "lr", "seconds"]


class TrainingAborted(RuntimeError):
    """A run hit a numeric fault; ``checkpoint`` points at the last good state, if saved."""

    def __init__(self, message: str, checkpoint: Optional[Path] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"  # synthetic | cifar10 | cifar100
    path: Optional[str] = None
    n_train: int = 2000
    n_test: int = 1000
    classes: int = 4
    size: int = 32
    seed: int = 0
    motif_size: int = 12
    period: int = 4
    noise: float = 0.12


def load_dataset(spec: DatasetSpec):
    if spec.kind == "synthetic":
        return synth_dataset(
            spec.seed,
            spec.n_train,
            spec.n_test,
            classes=spec.classes,
            size=spec.size,
            motif_size=spec.motif_size,
            period=spec.period,
            noise=spec.noise,
        )
    if spec.kind in ("cifar10", "cifar100"):
        if not spec.path:
            raise ValueError(f"dataset kind {spec.kind} needs a path")
        return load_cifar(spec.path, 10 if spec.kind == "cifar10" else 100)
    raise ValueError(f"unknown dataset kind {spec.kind!r}")


@dataclass(frozen=True)
class TrainConfig:
    student: VitConfig = field(default_factory=lambda: VitConfig(num_classes=4))
    teacher: CnnConfig = field(default_factory=lambda: CnnConfig(num_classes=4))
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    beta: float = 2.5
    ratio: float = 1.0
    transform: str = "linear"
    guidance: bool = True
    epochs: int = 30
    warmup_epochs: int = 3
    batch_size: int = 64
    base_lr: float = 5e-4
    final_lr: float = 5e-6
    weight_decay: float = 0.05
    seed: int = 0
    augment: bool = True
    teacher_input: str = "aligned"  # aligned | clean
    cache_teacher: bool = False
    teacher_checkpoint: Optional[str] = None
    teacher_epochs: int = 30
    teacher_lr: float = 0.1
    teacher_momentum: float = 0.9
    teacher_weight_decay: float = 5e-4
    teacher_seed: int = 0
    eval_batch_size: int = 250

    def __post_init__(self):
        if not (self.beta >= 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not 0 < self.ratio <= 1:
            raise ValueError(f"ratio must lie in (0, 1], got {self.ratio}")
        if self.epochs < 1 or self.teacher_epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if self.teacher_input not in ("aligned", "clean"):
            raise ValueError(f"teacher_input must be 'aligned' or 'clean', got {self.teacher_input!r}")
        TransformKind.parse(self.transform)
        if self.student.num_classes != self.teacher.num_classes:
            raise ValueError("student and teacher must predict the same number of classes")

    @property
    def kind(self) -> TransformKind:
        return TransformKind.parse(self.transform)

    @property
    def guided(self) -> bool:
        return self.guidance and self.kind is not TransformKind.NONE

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {', '.join(sorted(unknown))}")
        for key, typ in (("student", VitConfig), ("teacher", CnnConfig), ("dataset", DatasetSpec)):
            if key in data and isinstance(data[key], dict):
                sub_known = {f.name for f in fields(typ)}
                bad = set(data[key]) - sub_known
                if bad:
                    raise ValueError(f"unknown {key} fields: {', '.join(sorted(bad))}")
                data[key] = typ(**data[key])
        return cls(**data)


@dataclass
class EpochMetrics:
    epoch: int
    l_cls: float
    l_guidance: float
    total: float
    train_acc: float
    test_acc: float
    lr: float
    seconds: float

    def row(self) -> list:
        return [
            self.epoch,
            f"{self.l_cls:.8g}",
            f"{self.l_guidance:.8g}",
            f"{self.total:.8g}",
            f"{self.train_acc:.6f}",
            f"{self.test_acc:.6f}",
            f"{self.lr:.8g}",
            f"{self.seconds:.3f}",
        ]


def write_metrics_csv(path, rows: Sequence[EpochMetrics]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for r in rows:
            writer.writerow(r.row())
    return path


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            EpochMetrics(
                int(r["epoch"]),
                float(r["l_cls"]),
                float(r["l_guidance"]),
                float(r["total"]),
                float(r["train_acc"]),
                float(r["test_acc"]),
                float(r["lr"]),
                float(r["seconds"]),
            )
            for r in reader
        ]


# ------------------------------------------------------------------ evaluation


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> int:
    return int((logits.argmax(axis=1) == labels).sum())


def evaluate_vit(config: VitConfig, params: dict, split: Split, normalization: Normalization, batch_size: int = 250) -> float:
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    correct = 0
    batch_size = min(batch_size, len(split))
    with no_grad():
        for batch in make_batches(split, batch_size, 0, student_res=config.image_size, normalization=normalization, shuffle=False):
            out = vit_forward(config, params, batch.student_view, record_attention=False)
            correct += _accuracy(out.logits.data, batch.labels)
    return correct / len(split)


def evaluate_cnn(
    config: CnnConfig, params: dict, buffers: dict, split: Split, normalization: Normalization, batch_size: int = 250
) -> float:
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    correct = 0
    batch_size = min(batch_size, len(split))
    with no_grad():
        for batch in make_batches(
            split, batch_size, 0, student_res=config.input_size, teacher_res=config.input_size,
            normalization=normalization, shuffle=False,
        ):
            out = cnn_forward(config, params, buffers, batch.student_view, training=False)
            correct += _accuracy(out.logits.data, batch.labels)
    return correct / len(split)


def evaluate(checkpoint, split: Split, batch_size: int = 250) -> float:
    """Top-1 accuracy of a saved student or teacher checkpoint on ``split``."""
    ckpt = load_checkpoint(checkpoint) if not hasattr(checkpoint, "meta") else checkpoint
    meta = ckpt.meta
    norm = Normalization(tuple(meta["normalization"]["mean"]), tuple(meta["normalization"]["std"]))
    params = ckpt.tensors()
    if meta.get("model") == "vit":
        config = VitConfig(**meta["config"])
        return evaluate_vit(config, params, split, norm, batch_size)
    if meta.get("model") == "cnn":
        config = CnnConfig(**meta["config"])
        return evaluate_cnn(config, params, ckpt.buffers, split, norm, batch_size)
    raise ValueError(f"checkpoint has unknown model kind {meta.get('model')!r}")


# -------------------------------------------------------------------- teacher


@dataclass
class TeacherResult:
    config: CnnConfig
    params: dict
    buffers: dict
    normalization: Normalization
    train_acc: float
    test_acc: float
    checkpoint: Optional[Path] = None
    history: list = field(default_factory=list)

    def frozen(self) -> FrozenTeacher:
        return freeze(self.config, self.params, self.buffers)


def _check_classes(split: Split, num_classes: int, who: str) -> None:
    if split.num_classes != num_classes:
        raise ValueError(f"{who} predicts {num_classes} classes but the dataset has {split.num_classes}")


def _norm_meta(norm: Normalization) -> dict:
    return {"mean": list(norm.mean), "std": list(norm.std)}


def pretrain_teacher(config: TrainConfig, train: Split, test: Split, out_path=None) -> TeacherResult:
    """Train the CNN teacher at its own (low) resolution with momentum SGD and cosine decay."""
    tcfg = config.teacher
    _check_classes(train, tcfg.num_classes, "teacher")
    norm = Normalization.fit(train)
    init_seq, data_seq = np.random.SeedSequence([config.teacher_seed, 1]).spawn(2)
    params, buffers = init_cnn(tcfg, np.random.default_rng(init_seq))
    opt = SGD(list(params.values()), lr=config.teacher_lr, momentum=config.teacher_momentum,
              weight_decay=config.teacher_weight_decay)
    data_seed = int(data_seq.generate_state(1)[0])
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    schedule = LrSchedule(config.teacher_lr, 0.0, 0, config.teacher_epochs * steps_per_epoch)
    step = 0
    history = []
    train_acc = 0.0
    for epoch in range(config.teacher_epochs):
        correct = 0
        seen = 0
        loss_sum = 0.0
        for batch in make_batches(
            train, config.batch_size, data_seed, epoch, augment_data=config.augment,
            student_res=tcfg.input_size, teacher_res=tcfg.input_size, normalization=norm,
        ):
            opt.lr = lr_at(schedule, step)
            out = cnn_forward(tcfg, params, buffers, batch.student_view, training=True)
            loss = ops.cross_entropy(out.logits, batch.labels)
            if not math.isfinite(loss.item()):
                raise NumericFault(f"teacher loss diverged at epoch {epoch + 1}, step {step}")
            opt.zero_grad()
            backward(loss)
            opt.step()
            step += 1
            n = len(batch.labels)
            correct += _accuracy(out.logits.data, batch.labels)
            loss_sum += loss.item() * n
            seen += n
        train_acc = correct / seen
        history.append({"epoch": epoch + 1, "loss": loss_sum / seen, "train_acc": train_acc})
        log.info("teacher epoch %d loss %.4f train acc %.4f", epoch + 1, loss_sum / seen, train_acc)
    test_acc = evaluate_cnn(tcfg, params, buffers, test, norm, config.eval_batch_size)
    result = TeacherResult(tcfg, params, buffers, norm, train_acc, test_acc, history=history)
    if out_path is not None:
        result.checkpoint = save_checkpoint(
            out_path,
            params,
            buffers,
            meta={
                "model": "cnn",
                "config": tcfg.to_dict(),
                "normalization": _norm_meta(norm),
                "train_acc": train_acc,
                "test_acc": test_acc,
                "seed": config.teacher_seed,
            },
        )
    return result


def load_teacher(path) -> TeacherResult:
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("model") != "cnn":
        raise ValueError(f"{path} is not a teacher checkpoint")
    norm = Normalization(tuple(ckpt.meta["normalization"]["mean"]), tuple(ckpt.meta["normalization"]["std"]))
    return TeacherResult(
        CnnConfig(**ckpt.meta["config"]),
        ckpt.tensors(),
        ckpt.buffers,
        norm,
        ckpt.meta.get("train_acc", float("nan")),
        ckpt.meta.get("test_acc", float("nan")),
        checkpoint=Path(path),
    )


# -------------------------------------------------------------------- student


@dataclass
class StudentResult:
    config: TrainConfig
    params: dict
    projections: list
    metrics: list
    step_losses: list
    normalization: Normalization
    checkpoint: Optional[Path] = None

    @property
    def final_test_acc(self) -> float:
        return self.metrics[-1].test_acc


class _TeacherCache:
    """Teacher taps for every training sample, computed once (no-augmentation runs only)."""

    def __init__(self, teacher: FrozenTeacher, train: Split, norm: Normalization, res: int, batch_size: int):
        maps = [[] for _ in range(teacher.config.stages)]
        for batch in make_batches(train, min(batch_size, len(train)), 0, student_res=res, teacher_res=res,
                                  normalization=norm, shuffle=False):
            for s, tap in enumerate(teacher(batch.student_view).taps):
                maps[s].append(tap.map.data)
        self.maps = [np.concatenate(m) for m in maps]
        self.order = np.argsort(train.ids)
        self.sorted_ids = train.ids[self.order]

    def taps(self, ids: np.ndarray) -> list:
        rows = self.order[np.searchsorted(self.sorted_ids, ids)]
        return [MapFeature(Tensor(m[rows]), s + 1) for s, m in enumerate(self.maps)]


def _rng_streams(seed: int):
    student_seq, proj_seq, data_seq = np.random.SeedSequence(seed).spawn(3)
    return (
        np.random.default_rng(student_seq),
        np.random.default_rng(proj_seq),
        int(data_seq.generate_state(1)[0]),
    )


def train_student(
    config: TrainConfig,
    teacher: Optional[TeacherResult],
    train: Split,
    test: Split,
    out_dir=None,
) -> StudentResult:
    """Train the ViT on ``l_cls + beta * l_guidance`` with a frozen teacher.

    With ``config.guided`` false the teacher is never touched and the run is
    plain supervised training (the baseline).
    """
    scfg = config.student
    plan = None
    guide = None
    frozen = None
    if config.guided:
        if teacher is None:
            raise ValueError("guided training needs a teacher")
        if teacher.config != config.teacher:
            raise ValueError(f"teacher checkpoint config {teacher.config} does not match {config.teacher}")
        plan = select_positions(scfg.depth, teacher.config.stages, config.ratio)
    _check_classes(train, scfg.num_classes, "student")
    norm = Normalization.fit(train)

    student_rng, proj_rng, data_seed = _rng_streams(config.seed)
    params = init_vit(scfg, student_rng)
    trainable = list(params.values())
    projections: list = []
    cache = None
    if config.guided:
        frozen = teacher.frozen()
        if config.kind is TransformKind.LINEAR:
            projections = init_projections(plan, scfg.embed_dim, teacher.config.widths, proj_rng)
        guide = LocalityGuidance(plan, config.kind, projections)
        trainable += guide.parameters()
        if config.cache_teacher and not config.augment:
            cache = _TeacherCache(frozen, train, norm, teacher.config.input_size, config.eval_batch_size)

    opt = AdamW(trainable, lr=config.base_lr, weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    schedule = LrSchedule(
        config.base_lr, config.final_lr, config.warmup_epochs * steps_per_epoch, config.epochs * steps_per_epoch
    )
    teacher_res = config.teacher.input_size

    metrics: list = []
    step_losses: list = []
    step = 0
    last_good = {k: v.data.copy() for k, v in params.items()}
    out_dir = Path(out_dir) if out_dir is not None else None

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        sums = np.zeros(3)
        correct = seen = 0
        lr = opt.lr
        clean_views = config.teacher_input == "clean"
        for batch in make_batches(
            train, config.batch_size, data_seed, epoch, augment_data=config.augment,
            student_res=scfg.image_size, teacher_res=teacher_res, normalization=norm,
        ):
            lr = lr_at(schedule, step)
            opt.lr = lr
            try:
                out = vit_forward(scfg, params, batch.student_view, record_attention=False)
                l_cls = ops.cross_entropy(out.logits, batch.labels)
                if guide is not None:
                    if cache is not None:
                        t_taps = cache.taps(batch.ids)
                    elif clean_views:
                        t_taps = frozen(_clean_teacher_view(train, batch.ids, norm, teacher_res)).taps
                    else:
                        t_taps = frozen(batch.teacher_view).taps
                    per_pair, l_guid = guide(out.taps, t_taps)
                    loss = total_loss(l_cls, l_guid, config.beta, per_pair)
                else:
                    loss = total_loss(l_cls, None, config.beta)
                if not math.isfinite(loss.total):
                    raise NumericFault(f"non-finite loss {loss.total}")
                opt.zero_grad()
                backward(loss.objective)
                opt.step()
            except NumericFault as exc:
                path = None
                if out_dir is not None:
                    path = save_checkpoint(out_dir / "student_last_good.npz", last_good, meta={
                        "model": "vit", "config": scfg.to_dict(), "normalization": _norm_meta(norm),
                        "epoch": epoch, "aborted_at_step": step,
                    })
                raise TrainingAborted(f"numeric fault at epoch {epoch + 1}, step {step}: {exc}", path) from exc
            step += 1
            n = len(batch.labels)
            step_losses.append((loss.l_cls, loss.l_guidance, loss.total))
            sums += n * np.array([loss.l_cls, loss.l_guidance, loss.total])
            correct += _accuracy(out.logits.data, batch.labels)
            seen += n
        test_acc = evaluate_vit(scfg, params, test, norm, config.eval_batch_size)
        row = EpochMetrics(
            epoch + 1, *(float(v) for v in sums / seen), correct / seen, test_acc, float(lr), time.perf_counter() - t0
        )
        metrics.append(row)
        last_good = {k: v.data.copy() for k, v in params.items()}
        log.info(
            "epoch %d l_cls %.4f l_guid %.4f train %.4f test %.4f (%.1fs)",
            row.epoch, row.l_cls, row.l_guidance, row.train_acc, row.test_acc, row.seconds,
        )

    result = StudentResult(config, params, projections, metrics, step_losses, norm)
    if out_dir is not None:
        stored = dict(params)
        for k, p in enumerate(projections):
            stored[f"proj.{k}.weight"] = p.weight
            stored[f"proj.{k}.bias"] = p.bias
        result.checkpoint = save_checkpoint(
            out_dir / "student.npz",
            {k: v for k, v in stored.items() if not k.startswith("proj.")},
            {k: v.data for k, v in stored.items() if k.startswith("proj.")},
            meta={
                "model": "vit",
                "config": scfg.to_dict(),
                "normalization": _norm_meta(norm),
                "test_acc": metrics[-1].test_acc,
                "train_config": config.to_dict(),
                "plan": list(plan.pairs) if plan else None,
            },
        )
        write_metrics_csv(out_dir / "metrics.csv", metrics)
    return result


def _clean_teacher_view(train: Split, ids: np.ndarray, norm: Normalization, res: int) -> np.ndarray:
    from .data import resize_images

    order = np.argsort(train.ids)
    rows = order[np.searchsorted(train.ids[order], ids)]
    return norm.apply(resize_images(train.images[rows].astype(np.float32), res)).astype(np.float32)


def student_attention(config: VitConfig, params: dict, split: Split, norm: Normalization, limit: int = 200):
    """Attention records of the student on the first ``limit`` samples of ``split``."""
    sub = split.subset(slice(0, min(limit, len(split))))
    batch = next(make_batches(sub, len(sub), 0, student_res=config.image_size, normalization=norm, shuffle=False))
    with no_grad():
        out = vit_forward(config, params, batch.student_view, record_attention=True)
    return out.attn


def with_overrides(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, **changes)
