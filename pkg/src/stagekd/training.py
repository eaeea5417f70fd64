"""Teacher and student training loops, checkpointing, and metrics.

Two teacher regimes exist. The joint regime (default) optimizes the class
CE on unrotated rows plus the aux-head CE over all transform views in one
objective, with aux gradients flowing into the backbone. The frozen regime
first trains backbone+head with plain CE, then trains the aux heads on
detached taps, leaving the backbone bitwise untouched.

Students minimize task CE (unrotated rows only) plus the two mimicry terms
against a fixed teacher. Teacher outputs over the expanded training set are
precomputed once per run: data order is deterministic, so per-batch slices
of the cached logits are exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .config import RunConfig, config_from_pairs, parse_kv_text
from .data import Dataset, expand_batch, iterate_batches
from .errors import ConfigError, ContractError, FormatError, NumericError
from .losses import (
    StudentLossFlags,
    ce_sad,
    compose_student_loss,
    cross_entropy,
    kd_kl_loss,
    loss_kl_p,
    loss_kl_q,
)
from .models import StagedModel, build_model
from .optim import SGDMomentum, lr_at
from .tensor import Tensor
from .transforms import LabelSpace, quarter_rotations

CKPT_MAGIC = b"HSKD-CK1"
CKPT_VERSION = 1
_DTYPE_CODES = {0: np.float32}


@dataclass
class Checkpoint:
    """A config echo plus named parameter arrays; epoch counts completed
    training epochs."""

    config: RunConfig
    arrays: dict[str, np.ndarray]
    epoch: int = 0

    def build_model(self) -> StagedModel:
        model = build_model(self.config.stages, self.config.classes, self.config.transforms,
                            seed=self.config.seed, in_channels=self.config.in_channels)
        model.load_state_arrays(self.arrays)
        return model


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Canonical form: config text first, then tensors sorted by name."""
    blob = bytearray()
    config_text = ckpt.config.to_text() + f"epoch = {ckpt.epoch}\n"
    cfg = config_text.encode("utf-8")
    blob += CKPT_MAGIC
    blob += struct.pack("<I", CKPT_VERSION)
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    names = sorted(ckpt.arrays)
    blob += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(ckpt.arrays[name], dtype=np.float32)
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb))
        blob += nb
        blob += struct.pack("<BB", 0, arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"checkpoint truncated at byte {off} while reading {what}")
        piece = blob[off:off + n]
        off += n
        return piece

    if take(8, "magic") != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic, expected {CKPT_MAGIC!r}")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    pairs = parse_kv_text(take(cfg_len, "config blob").decode("utf-8"))
    try:
        epoch = int(pairs.pop("epoch", "0"))
    except ValueError as e:
        raise FormatError("bad epoch field in checkpoint config") from e
    config = config_from_pairs(pairs)

    (count,) = struct.unpack("<I", take(4, "tensor count"))
    arrays: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"tensor {i} name length"))
        name = take(name_len, f"tensor {i} name").decode("utf-8")
        code, rank = struct.unpack("<BB", take(2, f"tensor {name} dtype/rank"))
        if code not in _DTYPE_CODES:
            raise FormatError(f"tensor {name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"tensor {name} dims"))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = take(size * 4, f"tensor {name} values")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if off != len(blob):
        raise FormatError(f"trailing {len(blob) - off} bytes after checkpoint payload")
    return Checkpoint(config=config, arrays=arrays, epoch=epoch)


class MetricsWriter:
    """Appends `epoch,phase,metric,value` rows; creates header once."""

    def __init__(self, out_dir: str):
        self.path = Path(out_dir) / "metrics.csv" if out_dir else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not self.path.exists():
                self.path.write_text("epoch,phase,metric,value\n")

    def write(self, epoch: int, phase: str, metric: str, value: float) -> None:
        if self.path is None:
            return
        with self.path.open("a") as fh:
            fh.write(f"{epoch},{phase},{metric},{value:.10g}\n")


def _identity_selector(B: int, M: int, dtype=np.float32) -> Tensor:
    """Constant 0/1 matrix picking the unrotated row of each sample."""
    sel = np.zeros((B, B * M), dtype=dtype)
    sel[np.arange(B), np.arange(B) * M] = 1.0
    return Tensor(sel)


def select_identity_rows(logits: Tensor, B: int, M: int) -> Tensor:
    """Rows i*M of an expanded-batch tensor, as a tape operation."""
    return T.matmul(_identity_selector(B, M, logits.dtype.type), logits)


def _abort_context(err: NumericError, phase: str, epoch: int, batch: int) -> NumericError:
    return NumericError(f"{phase}: non-finite loss at epoch {epoch}, batch {batch}: {err}")


def train_teacher(config: RunConfig, data: Dataset,
                  metrics: Optional[MetricsWriter] = None) -> Checkpoint:
    """Train a teacher per the configured regime and return its checkpoint."""
    if len(data) == 0:
        raise ContractError("training data is empty")
    metrics = metrics or MetricsWriter(config.out_dir)
    model = build_model(config.stages, config.classes, config.transforms,
                        seed=config.seed, in_channels=config.in_channels)
    if config.teacher_regime == "joint":
        _teacher_joint(config, data, model, metrics)
        epochs_done = config.epochs
    else:
        _teacher_frozen(config, data, model, metrics)
        epochs_done = 2 * config.epochs
    return Checkpoint(config=config, arrays={k: v.copy() for k, v in model.state_arrays().items()},
                      epoch=epochs_done)


def _teacher_joint(config: RunConfig, data: Dataset, model: StagedModel,
                   metrics: MetricsWriter) -> None:
    space = LabelSpace(config.classes, config.transforms)
    transforms = quarter_rotations()
    opt = SGDMomentum(model.parameters(), lr=config.lr, momentum=config.momentum,
                      weight_decay=config.weight_decay)
    for epoch in range(config.epochs):
        opt.lr = lr_at(epoch, config.lr, config.milestones, config.lr_decay)
        sums = {"loss_total": 0.0, "loss_ce": 0.0, "loss_ce_sad": 0.0}
        batches = 0
        for bi, (images, labels) in enumerate(iterate_batches(data, config.batch_size,
                                                              config.seed, epoch)):
            batch = expand_batch(images, labels, transforms, space)
            x = Tensor(batch.images)
            try:
                logits, taps = model.forward_taps(x)
                aux = model.aux_forward(taps, detach=False)
                B = images.shape[0]
                ce = cross_entropy(select_identity_rows(logits, B, space.M),
                                   labels, config.tau_task)
                sad = ce_sad(aux, batch.joint_labels, config.tau_task)
                total = T.add(ce, sad)
                T.backward(total)
            except NumericError as e:
                raise _abort_context(e, "teacher_joint", epoch, bi) from e
            opt.step()
            opt.zero_grads()
            T.clear_tape()
            sums["loss_total"] += total.item()
            sums["loss_ce"] += ce.item()
            sums["loss_ce_sad"] += sad.item()
            batches += 1
        for name, value in sums.items():
            metrics.write(epoch, "teacher_joint", name, value / batches)
        metrics.write(epoch, "teacher_joint", "lr", opt.lr)


def _teacher_frozen(config: RunConfig, data: Dataset, model: StagedModel,
                    metrics: MetricsWriter) -> None:
    frozen_backbone_phase(config, data, model, metrics)
    frozen_aux_phase(config, data, model, metrics)


def frozen_backbone_phase(config: RunConfig, data: Dataset, model: StagedModel,
                          metrics: MetricsWriter) -> None:
    """Phase 1 of the frozen regime: plain CE on unrotated images, touching
    only backbone and final head."""
    opt = SGDMomentum(model.backbone_parameters(), lr=config.lr, momentum=config.momentum,
                      weight_decay=config.weight_decay)
    for epoch in range(config.epochs):
        opt.lr = lr_at(epoch, config.lr, config.milestones, config.lr_decay)
        total_sum, batches = 0.0, 0
        for bi, (images, labels) in enumerate(iterate_batches(data, config.batch_size,
                                                              config.seed, epoch)):
            x = Tensor(images.astype(np.float32) / np.float32(255.0))
            try:
                logits, _ = model.forward_taps(x)
                loss = cross_entropy(logits, labels, config.tau_task)
                T.backward(loss)
            except NumericError as e:
                raise _abort_context(e, "teacher_backbone", epoch, bi) from e
            opt.step()
            opt.zero_grads()
            T.clear_tape()
            total_sum += loss.item()
            batches += 1
        metrics.write(epoch, "teacher_backbone", "loss_ce", total_sum / batches)
        metrics.write(epoch, "teacher_backbone", "lr", opt.lr)


def frozen_aux_phase(config: RunConfig, data: Dataset, model: StagedModel,
                     metrics: MetricsWriter) -> None:
    """Phase 2 of the frozen regime: aux heads on detached taps; the
    backbone must come out bitwise identical."""
    space = LabelSpace(config.classes, config.transforms)
    transforms = quarter_rotations()
    aux_opt = SGDMomentum(model.aux_parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    for epoch in range(config.epochs):
        aux_opt.lr = lr_at(epoch, config.lr, config.milestones, config.lr_decay)
        total_sum, batches = 0.0, 0
        for bi, (images, labels) in enumerate(iterate_batches(data, config.batch_size,
                                                              config.seed, config.epochs + epoch)):
            batch = expand_batch(images, labels, transforms, space)
            try:
                with T.no_grad():
                    _, taps = model.forward_taps(Tensor(batch.images))
                aux = model.aux_forward(taps, detach=True)
                loss = ce_sad(aux, batch.joint_labels, config.tau_task)
                T.backward(loss)
            except NumericError as e:
                raise _abort_context(e, "teacher_aux", epoch, bi) from e
            aux_opt.step()
            aux_opt.zero_grads()
            T.clear_tape()
            total_sum += loss.item()
            batches += 1
        metrics.write(epoch, "teacher_aux", "loss_ce_sad", total_sum / batches)
        metrics.write(epoch, "teacher_aux", "lr", aux_opt.lr)


@dataclass
class TeacherOutputs:
    """Cached teacher logits over the expanded dataset, indexed by sample.

    class_logits: (S, M, N); aux_logits[l]: (S, M, N*M).
    """

    class_logits: np.ndarray
    aux_logits: list[np.ndarray]

    def batch_views(self, take: np.ndarray):
        B = take.shape[0]
        cls = self.class_logits[take].reshape(B * self.class_logits.shape[1], -1)
        aux = [a[take].reshape(B * a.shape[1], -1) for a in self.aux_logits]
        return cls, aux


def precompute_teacher_outputs(teacher: StagedModel, data: Dataset,
                               chunk: int = 64) -> TeacherOutputs:
    """One forward sweep of the teacher over all M views of every sample."""
    space = LabelSpace(teacher.N, teacher.M)
    transforms = quarter_rotations()
    S = len(data)
    M = space.M
    cls = np.empty((S, M, teacher.N), dtype=np.float32)
    aux = [np.empty((S, M, teacher.N * M), dtype=np.float32) for _ in range(teacher.L)]
    with T.no_grad():
        for start in range(0, S, chunk):
            idx = np.arange(start, min(start + chunk, S))
            batch = expand_batch(data.images[idx], data.labels[idx], transforms, space)
            logits, taps = teacher.forward_taps(Tensor(batch.images))
            outs = teacher.aux_forward(taps)
            B = idx.shape[0]
            cls[idx] = logits.data.reshape(B, M, -1)
            for l in range(teacher.L):
                aux[l][idx] = outs[l].data.reshape(B, M, -1)
    return TeacherOutputs(class_logits=cls, aux_logits=aux)


def _batch_indices(n: int, batch_size: int, seed: int, epoch: int):
    perm = np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def train_student(config: RunConfig, teacher: Checkpoint, data: Dataset,
                  metrics: Optional[MetricsWriter] = None) -> Checkpoint:
    """Distill ``teacher`` into a fresh student per the configured flags."""
    if len(data) == 0:
        raise ContractError("training data is empty")
    if len(teacher.config.stages) != len(config.stages):
        raise ConfigError(
            f"teacher has {len(teacher.config.stages)} stages, student config has "
            f"{len(config.stages)}; one-to-one pairing needs equal stage counts")
    if teacher.config.classes != config.classes or teacher.config.transforms != config.transforms:
        raise ConfigError("teacher and student label spaces differ")
    metrics = metrics or MetricsWriter(config.out_dir)
    space = LabelSpace(config.classes, config.transforms)
    transforms = quarter_rotations()
    flags = StudentLossFlags(kl_q=config.kl_q, kl_p=config.kl_p, kd=config.kd,
                             ce_sad_s=config.ce_sad_s)

    teacher_model = teacher.build_model()
    teacher_hash = {k: v.copy() for k, v in teacher.arrays.items()}
    need_teacher = flags.kl_q or flags.kl_p or flags.kd
    cache = precompute_teacher_outputs(teacher_model, data) if need_teacher else None

    model = build_model(config.stages, config.classes, config.transforms,
                        seed=config.seed, in_channels=config.in_channels)
    opt = SGDMomentum(model.parameters(), lr=config.lr, momentum=config.momentum,
                      weight_decay=config.weight_decay)
    need_aux = flags.kl_q or flags.ce_sad_s
    # Only mimicry over all views and ce_sad consume rotated rows; task CE
    # (and vanilla kd) read the j=0 rows, so flag sets without the former
    # forward just the original images.
    need_expanded = flags.kl_q or flags.kl_p or flags.ce_sad_s
    stage_subset = tuple(config.kl_q_stages) or tuple(range(1, len(config.stages) + 1))

    for epoch in range(config.epochs):
        opt.lr = lr_at(epoch, config.lr, config.milestones, config.lr_decay)
        sums: dict[str, float] = {}
        batches = 0
        for bi, take in enumerate(_batch_indices(len(data), config.batch_size,
                                                 config.seed, epoch)):
            images, labels = data.images[take], data.labels[take]
            B = images.shape[0]
            try:
                if need_expanded:
                    batch = expand_batch(images, labels, transforms, space)
                    logits, taps = model.forward_taps(Tensor(batch.images))
                    aux = model.aux_forward(taps) if need_aux else []
                    identity_logits = select_identity_rows(logits, B, space.M)
                else:
                    x = images.astype(np.float32) / np.float32(255.0)
                    identity_logits, _ = model.forward_taps(Tensor(x))
                    logits, aux = identity_logits, []
                task = cross_entropy(identity_logits, labels, config.tau_task)

                klq = klp = kd = sad_s = None
                if cache is not None:
                    t_cls, t_aux = cache.batch_views(take)
                    if flags.kl_q:
                        pairs = [(t_aux[l - 1], aux[l - 1]) for l in stage_subset]
                        klq = loss_kl_q([p[0] for p in pairs], [p[1] for p in pairs],
                                        config.tau_mimic)
                    if flags.kl_p:
                        klp = loss_kl_p(t_cls, logits, config.tau_mimic)
                    if flags.kd:
                        t_identity = t_cls.reshape(B, space.M, -1)[:, 0]
                        kd = kd_kl_loss(t_identity, identity_logits, config.tau_mimic)
                if flags.ce_sad_s:
                    sad_s = ce_sad(aux, batch.joint_labels, config.tau_task)

                bundle = compose_student_loss(task, flags, kl_q=klq, kl_p=klp,
                                              kd=kd, ce_sad_s=sad_s)
                T.backward(bundle.total)
            except NumericError as e:
                raise _abort_context(e, "student", epoch, bi) from e
            opt.step()
            opt.zero_grads()
            T.clear_tape()
            for name, value in bundle.values().items():
                sums[f"loss_{name}"] = sums.get(f"loss_{name}", 0.0) + value
            batches += 1
        for name, value in sums.items():
            metrics.write(epoch, "student", name, value / batches)
        metrics.write(epoch, "student", "lr", opt.lr)

    for name, arr in teacher.arrays.items():
        if not np.array_equal(arr, teacher_hash[name]):
            raise ContractError(f"teacher parameter {name} changed during distillation")
    return Checkpoint(config=config, arrays={k: v.copy() for k, v in model.state_arrays().items()},
                      epoch=config.epochs)
