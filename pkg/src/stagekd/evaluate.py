"""Evaluation protocols: top-1, frozen-feature linear probe, loss-term
ablation grids, and the augmentation-vs-auxiliary-label comparison.

Strict mode evaluates one sample at a time so results are bitwise equal to
a naive per-sample loop (BLAS kernels pick different blocking per batch
shape, which perturbs last-bit logits otherwise). Non-strict mode batches.
"""

from __future__ import annotations

import hashlib
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import Dataset, expand_batch
from .errors import ConfigError, ContractError
from .losses import cross_entropy
from .models import StagedModel, build_model
from .optim import SGDMomentum, lr_at
from .tensor import Parameter, Tensor
from .training import (
    Checkpoint,
    MetricsWriter,
    _batch_indices,
    frozen_backbone_phase,
    train_student,
    train_teacher,
)
from .transforms import LabelSpace, quarter_rotations

VALID_ABLATION_FLAGS = ("task", "kl_q", "kl_p", "kd", "ce_sad_s")


@dataclass
class EvalReport:
    """Top-1 plus per-class accuracies; per-class rates weight-average back
    to the headline number."""

    top1: float
    per_class: list[float]
    sample_count: int
    config_echo: str
    wall_seconds: float

    def to_text(self) -> str:
        lines = [
            f"top1 = {self.top1:.4f}",
            f"samples = {self.sample_count}",
            f"wall_seconds = {self.wall_seconds:.3f}",
            "",
            "class,accuracy",
        ]
        for c, acc in enumerate(self.per_class):
            lines.append(f"{c},{acc:.4f}")
        return "\n".join(lines) + "\n"


def _predictions(model: StagedModel, data: Dataset, batch_size: int) -> np.ndarray:
    preds = np.empty(len(data), dtype=np.int64)
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            stop = min(start + batch_size, len(data))
            x = data.images[start:stop].astype(np.float32) / np.float32(255.0)
            logits = model.predict_class_logits(Tensor(x))
            preds[start:stop] = logits.data.argmax(axis=1)
    return preds


def evaluate_top1(model_or_ckpt, data: Dataset, batch_size: int = 128) -> EvalReport:
    """Accuracy of the final head on unrotated images; aux heads untouched."""
    if len(data) == 0:
        raise ContractError("evaluation data is empty")
    model = model_or_ckpt.build_model() if isinstance(model_or_ckpt, Checkpoint) \
        else model_or_ckpt
    if model.N != data.N:
        raise ConfigError(f"model has {model.N} classes, dataset has {data.N}")
    start = time.perf_counter()
    if T.strict_mode():
        batch_size = 1
    preds = _predictions(model, data, batch_size)
    wall = time.perf_counter() - start

    correct = preds == data.labels
    per_class = []
    for c in range(data.N):
        mask = data.labels == c
        per_class.append(100.0 * float(correct[mask].mean()) if mask.any() else 0.0)
    return EvalReport(
        top1=100.0 * float(correct.mean()),
        per_class=per_class,
        sample_count=len(data),
        config_echo=f"classes = {data.N}",
        wall_seconds=wall,
    )


def _pooled_features(model: StagedModel, data: Dataset, batch_size: int = 128) -> np.ndarray:
    feats = np.empty((len(data), model.embedding_dim), dtype=np.float32)
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            stop = min(start + batch_size, len(data))
            x = data.images[start:stop].astype(np.float32) / np.float32(255.0)
            _, taps = model.forward_taps(Tensor(x))
            feats[start:stop] = T.global_avg_pool(taps[-1]).data
    return feats


def linear_probe(ckpt: Checkpoint, target: Dataset, epochs: int,
                 eval_data: Optional[Dataset] = None, lr: float = 0.1,
                 batch_size: int = 64, seed: int = 0) -> EvalReport:
    """Train a fresh linear head on frozen pooled features of ``target``;
    report top-1 on ``eval_data`` (default: ``target`` itself)."""
    if epochs < 0:
        raise ContractError(f"epochs must be non-negative, got {epochs}")
    model = ckpt.build_model()
    start = time.perf_counter()
    feats = _pooled_features(model, target)
    d = feats.shape[1]

    w = Parameter("probe.weight", Tensor(np.zeros((d, target.N), dtype=np.float32)))
    b = Parameter("probe.bias", Tensor(np.zeros(target.N, dtype=np.float32)))
    opt = SGDMomentum([w, b], lr=lr, momentum=0.9)
    for epoch in range(epochs):
        for take in _batch_indices(len(target), batch_size, seed, epoch):
            x = Tensor(feats[take])
            logits = T.add(T.matmul(x, w.tensor), T.reshape(b.tensor, (1, target.N)))
            loss = cross_entropy(logits, target.labels[take])
            T.backward(loss)
            opt.step()
            opt.zero_grads()
            T.clear_tape()

    hold = eval_data if eval_data is not None else target
    if hold.N != target.N:
        raise ConfigError(f"probe trained for {target.N} classes, eval data has {hold.N}")
    hold_feats = feats if hold is target else _pooled_features(model, hold)
    with T.no_grad():
        logits = hold_feats @ w.data + b.data
    preds = logits.argmax(axis=1)
    correct = preds == hold.labels
    per_class = []
    for c in range(hold.N):
        mask = hold.labels == c
        per_class.append(100.0 * float(correct[mask].mean()) if mask.any() else 0.0)
    return EvalReport(
        top1=100.0 * float(correct.mean()),
        per_class=per_class,
        sample_count=len(hold),
        config_echo=f"probe_epochs = {epochs}",
        wall_seconds=time.perf_counter() - start,
    )


# Ablation grid --------------------------------------------------------------


@dataclass(frozen=True)
class FlagSet:
    """One ablation cell: enabled loss terms plus an optional restriction of
    the per-stage mimicry to a stage subset."""

    flags: tuple[str, ...]
    kl_q_stages: tuple[int, ...] = ()

    def __post_init__(self):
        for f in self.flags:
            if f not in VALID_ABLATION_FLAGS:
                raise ContractError(
                    f"unknown loss flag {f!r}; valid: {', '.join(VALID_ABLATION_FLAGS)}")
        if "task" not in self.flags:
            raise ContractError("every ablation cell includes the task loss")
        if self.kl_q_stages and "kl_q" not in self.flags:
            raise ContractError("kl_q_stages given but kl_q is not enabled")

    def label(self) -> str:
        text = "+".join(self.flags)
        if self.kl_q_stages:
            text += "@" + ",".join(str(s) for s in self.kl_q_stages)
        return text


@dataclass
class AblationRow:
    """One trained cell; every row carries the shared teacher and data
    hashes so a report is self-evidently comparable."""

    flag_set: FlagSet
    seed: int
    top1: float
    teacher_hash: str
    data_hash: str


@dataclass
class AblationGrid:
    rows: list[AblationRow] = field(default_factory=list)

    def mean_top1(self, flag_set: FlagSet) -> float:
        vals = [r.top1 for r in self.rows if r.flag_set == flag_set]
        if not vals:
            raise ContractError(f"no rows for flag set {flag_set.label()}")
        return float(np.mean(vals))

    def to_text(self) -> str:
        lines = ["flags,seed,top1,teacher_hash,data_hash"]
        for r in self.rows:
            lines.append(f"{r.flag_set.label()},{r.seed},{r.top1:.4f},"
                         f"{r.teacher_hash},{r.data_hash}")
        lines.append("")
        lines.append("flags,mean_top1")
        seen = []
        for r in self.rows:
            if r.flag_set not in seen:
                seen.append(r.flag_set)
        for fs in seen:
            lines.append(f"{fs.label()},{self.mean_top1(fs):.4f}")
        return "\n".join(lines) + "\n"


def hash_arrays(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    return h.hexdigest()[:16]


def hash_dataset(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(ds.labels.tobytes())
    h.update(ds.images.tobytes())
    return h.hexdigest()[:16]


def worker_count(cells: int) -> int:
    """HSAKD_THREADS caps grid parallelism; strict mode forces 1."""
    if T.strict_mode():
        return 1
    try:
        cap = int(os.environ.get("HSAKD_THREADS", "1"))
    except ValueError:
        cap = 1
    return max(1, min(cap, cells))


def _flags_to_config(base: RunConfig, fs: FlagSet, seed: int) -> RunConfig:
    return replace(
        base,
        seed=seed,
        kl_q="kl_q" in fs.flags,
        kl_p="kl_p" in fs.flags,
        kd="kd" in fs.flags,
        ce_sad_s="ce_sad_s" in fs.flags,
        kl_q_stages=fs.kl_q_stages,
        out_dir="",
    )


def run_ablation(base_config: RunConfig, grid: Sequence[FlagSet], seeds: Sequence[int],
                 teacher: Checkpoint, train: Dataset, test: Dataset) -> AblationGrid:
    """Train one student per (flag set, seed) against a shared teacher and
    shared splits; report test top-1 per cell."""
    if not seeds:
        raise ContractError("ablation needs at least one seed")
    if not grid:
        raise ContractError("ablation needs at least one flag set")
    cells = [(fs, seed) for fs in grid for seed in seeds]
    t_hash = hash_arrays(teacher.arrays)
    d_hash = hash_dataset(train)

    def run_cell(cell):
        fs, seed = cell
        cfg = _flags_to_config(base_config, fs, seed)
        ckpt = train_student(cfg, teacher, train, metrics=MetricsWriter(""))
        report = evaluate_top1(ckpt, test)
        return AblationRow(flag_set=fs, seed=seed, top1=report.top1,
                           teacher_hash=t_hash, data_hash=d_hash)

    # pool.map preserves cell order, so rows come out sorted by
    # (flag set, seed) no matter which worker finishes first.
    workers = worker_count(len(cells))
    if workers == 1:
        rows = [run_cell(c) for c in cells]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, cells))
    return AblationGrid(rows=rows)


# Rotation-as-augmentation vs auxiliary-label comparison ---------------------


@dataclass
class ComparisonRow:
    arm: str
    seed: int
    top1: float


@dataclass
class ComparisonReport:
    rows: list[ComparisonRow] = field(default_factory=list)

    def mean(self, arm: str) -> float:
        vals = [r.top1 for r in self.rows if r.arm == arm]
        if not vals:
            raise ContractError(f"no rows for arm {arm!r}")
        return float(np.mean(vals))

    def to_text(self) -> str:
        lines = ["arm,seed,top1"]
        for r in self.rows:
            lines.append(f"{r.arm},{r.seed},{r.top1:.4f}")
        lines.append("")
        lines.append("arm,mean_top1")
        for arm in ("baseline", "da", "sal"):
            if any(r.arm == arm for r in self.rows):
                lines.append(f"{arm},{self.mean(arm):.4f}")
        return "\n".join(lines) + "\n"


def _train_da_arm(config: RunConfig, data: Dataset) -> StagedModel:
    """Rotation used as plain augmentation: every view keeps the original
    class label, and the backbone sees all of them in one batch."""
    space = LabelSpace(config.classes, config.transforms)
    transforms = quarter_rotations()
    model = build_model(config.stages, config.classes, config.transforms,
                        seed=config.seed, in_channels=config.in_channels)
    opt = SGDMomentum(model.backbone_parameters(), lr=config.lr, momentum=config.momentum,
                      weight_decay=config.weight_decay)
    for epoch in range(config.epochs):
        opt.lr = lr_at(epoch, config.lr, config.milestones, config.lr_decay)
        for take in _batch_indices(len(data), config.batch_size, config.seed, epoch):
            batch = expand_batch(data.images[take], data.labels[take], transforms, space)
            logits, _ = model.forward_taps(Tensor(batch.images))
            loss = cross_entropy(logits, batch.class_labels, config.tau_task)
            T.backward(loss)
            opt.step()
            opt.zero_grads()
            T.clear_tape()
    return model


def compare_da_sal(config: RunConfig, train: Dataset, test: Dataset,
                   seeds: Sequence[int]) -> ComparisonReport:
    """Three backbones on identical budgets: plain CE, rotation as data
    augmentation, and rotation as auxiliary joint labels."""
    if not seeds:
        raise ContractError("comparison needs at least one seed")
    report = ComparisonReport()
    for seed in seeds:
        cfg = replace(config, seed=seed, out_dir="")

        base_model = build_model(cfg.stages, cfg.classes, cfg.transforms,
                                 seed=cfg.seed, in_channels=cfg.in_channels)
        frozen_backbone_phase(cfg, train, base_model, MetricsWriter(""))
        report.rows.append(ComparisonRow(
            "baseline", seed, evaluate_top1(base_model, test).top1))

        da_model = _train_da_arm(cfg, train)
        report.rows.append(ComparisonRow("da", seed, evaluate_top1(da_model, test).top1))

        sal_ckpt = train_teacher(replace(cfg, teacher_regime="joint"), train,
                                 metrics=MetricsWriter(""))
        report.rows.append(ComparisonRow(
            "sal", seed, evaluate_top1(sal_ckpt, test).top1))
    return report
