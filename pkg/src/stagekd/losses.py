"""Temperature-scaled classification and distillation losses.

All losses are batch means, so magnitudes are independent of batch size.
Sums over the M transform views are realized by feeding the expanded batch
(B*M rows) and taking its mean, which folds the 1/M normalization into the
batch-mean convention. Distillation targets are always gradient-stopped:
the teacher side is consumed as plain numbers, never through the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor


@dataclass(frozen=True)
class TemperatureConfig:
    """Softening temperatures: tau_task for hard-label CE, tau_mimic for
    distribution matching."""

    tau_task: float = 1.0
    tau_mimic: float = 3.0

    def __post_init__(self):
        if self.tau_task <= 0 or self.tau_mimic <= 0:
            raise ContractError(
                f"temperatures must be positive, got task={self.tau_task}, mimic={self.tau_mimic}")


@dataclass(frozen=True)
class StudentLossFlags:
    """Term toggles for the student objective. Defaults give the full
    method: task CE plus both mimicry terms, no vanilla-KD term and no
    hard-label supervision on the student's aux heads."""

    kl_q: bool = True
    kl_p: bool = True
    kd: bool = False
    ce_sad_s: bool = False


@dataclass
class LossBundle:
    """Evaluated loss terms plus their composed total, all tape-connected
    scalars. Disabled terms hold constant zeros."""

    task: Tensor
    ce_sad: Tensor
    kl_q: Tensor
    kl_p: Tensor
    kd: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {
            "task": self.task.item(),
            "ce_sad": self.ce_sad.item(),
            "kl_q": self.kl_q.item(),
            "kl_p": self.kl_p.item(),
            "kd": self.kd.item(),
            "total": self.total.item(),
        }


def softmax_np(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Stable row softmax on plain arrays (float64 internally)."""
    z = np.asarray(logits, dtype=np.float64) / float(tau)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_np(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / float(tau)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels, tau: float = 1.0) -> Tensor:
    """Mean over the batch of -log softmax(logits/tau)[label]."""
    if tau <= 0:
        raise ContractError(f"tau must be positive, got {tau}")
    if logits.ndim != 2:
        raise ContractError(f"cross_entropy expects 2-D logits, got shape {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ContractError(
            f"labels shape {labels.shape} does not match batch of {logits.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractError(f"label outside 0..{logits.shape[1] - 1}")
    scaled = T.mul_scalar(logits, 1.0 / tau) if tau != 1.0 else logits
    picked = T.gather_rows(T.log_softmax(scaled, axis=1), labels)
    return T.mul_scalar(T.reduce_mean(picked), -1.0)


def ce_sad(aux_logits: Sequence[Tensor], joint_labels, tau: float = 1.0) -> Tensor:
    """Hard-label CE on every aux head over the expanded batch, summed over
    heads. The per-transform average is the expanded-batch mean."""
    if len(aux_logits) == 0:
        raise ContractError("ce_sad needs at least one aux head")
    total = cross_entropy(aux_logits[0], joint_labels, tau)
    for logits in aux_logits[1:]:
        total = T.add(total, cross_entropy(logits, joint_labels, tau))
    return total


def kd_kl_loss(teacher_logits, student_logits: Tensor, tau: float = 1.0) -> Tensor:
    """Batch mean of tau^2 * KL(softmax(t/tau) || softmax(s/tau)).

    The teacher side may be a Tensor or a plain array; either way it is
    treated as a constant, so no gradient ever reaches it.
    """
    if tau <= 0:
        raise ContractError(f"tau must be positive, got {tau}")
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t.shape != student_logits.shape:
        raise ContractError(
            f"teacher logits shape {t.shape} vs student {student_logits.shape}")
    if t.ndim != 2:
        raise ContractError(f"kd_kl_loss expects 2-D logits, got shape {t.shape}")
    dtype = student_logits.dtype
    logp = log_softmax_np(t, tau)
    p = np.exp(logp)
    # The p*log(p) entropy term carries no gradient; fold it in as a constant.
    const = float((p * logp).sum(axis=1).mean()) * tau * tau
    p_t = Tensor(p.astype(dtype))
    scaled = T.mul_scalar(student_logits, 1.0 / tau) if tau != 1.0 else student_logits
    logq = T.log_softmax(scaled, axis=1)
    cross = T.reduce_mean(T.reduce_sum(T.mul(p_t, logq), axis=1))
    loss = T.add(T.mul_scalar(cross, -tau * tau), Tensor(np.asarray(const, dtype=dtype)))
    return loss


def loss_kl_q(teacher_aux: Sequence, student_aux: Sequence[Tensor], tau: float = 3.0) -> Tensor:
    """Stage-matched mimicry over the joint distributions: kd_kl_loss summed
    over the one-to-one head pairs, fed the expanded batch."""
    if len(teacher_aux) != len(student_aux):
        raise ContractError(
            f"stage counts differ: teacher has {len(teacher_aux)} heads, student {len(student_aux)}")
    if len(student_aux) == 0:
        raise ContractError("loss_kl_q needs at least one head pair")
    total = kd_kl_loss(teacher_aux[0], student_aux[0], tau)
    for t_l, s_l in zip(teacher_aux[1:], student_aux[1:]):
        total = T.add(total, kd_kl_loss(t_l, s_l, tau))
    return total


def loss_kl_p(teacher_logits, student_logits: Tensor, tau: float = 3.0) -> Tensor:
    """Final-layer class-distribution mimicry over the expanded batch."""
    return kd_kl_loss(teacher_logits, student_logits, tau)


def compose_student_loss(task: Tensor, flags: StudentLossFlags,
                         kl_q: Optional[Tensor] = None,
                         kl_p: Optional[Tensor] = None,
                         kd: Optional[Tensor] = None,
                         ce_sad_s: Optional[Tensor] = None) -> LossBundle:
    """Unit-weighted sum of the enabled terms on top of the task CE."""
    def zero() -> Tensor:
        return Tensor(np.zeros((), dtype=task.dtype))

    total = task
    parts = {"kl_q": kl_q, "kl_p": kl_p, "kd": kd, "ce_sad_s": ce_sad_s}
    for name in parts:
        if getattr(flags, "ce_sad_s" if name == "ce_sad_s" else name) and parts[name] is None:
            raise ContractError(f"flag {name} enabled but no {name} term was supplied")
    if flags.kl_q:
        total = T.add(total, kl_q)
    if flags.kl_p:
        total = T.add(total, kl_p)
    if flags.kd:
        total = T.add(total, kd)
    if flags.ce_sad_s:
        total = T.add(total, ce_sad_s)
    return LossBundle(
        task=task,
        ce_sad=ce_sad_s if (flags.ce_sad_s and ce_sad_s is not None) else zero(),
        kl_q=kl_q if (flags.kl_q and kl_q is not None) else zero(),
        kl_p=kl_p if (flags.kl_p and kl_p is not None) else zero(),
        kd=kd if (flags.kd and kd is not None) else zero(),
        total=total,
    )
