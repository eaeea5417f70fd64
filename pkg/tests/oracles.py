"""Naive high-precision loss references, shared by unit and acceptance tests.

Everything here is written as explicit loops over rows, heads, and classes
in float64 with compensated summation, deliberately ignoring the vectorized
implementations under test.
"""

from __future__ import annotations

import math

import numpy as np


def row_log_softmax(row, tau):
    z = [v / tau for v in row]
    m = max(z)
    lse = m + math.log(math.fsum(math.exp(v - m) for v in z))
    return [v - lse for v in z]


def ce_oracle(logits, labels, tau=1.0) -> float:
    """Mean over rows of -log softmax(row/tau)[label]."""
    logits = np.asarray(logits, dtype=np.float64)
    total = []
    for row, label in zip(logits, labels):
        total.append(-row_log_softmax(row, tau)[int(label)])
    return math.fsum(total) / len(total)


def ce_sad_oracle(aux_logits, joint_labels, M, tau=1.0) -> float:
    """Triple loop (head, transform, sample) mirroring the averaged
    per-transform CE; rows are laid out sample-major, transform-minor."""
    total = []
    for head in aux_logits:
        head = np.asarray(head, dtype=np.float64)
        B = head.shape[0] // M
        for j in range(M):
            for i in range(B):
                row = head[i * M + j]
                label = int(joint_labels[i * M + j])
                total.append(-row_log_softmax(row, tau)[label] / (M * B))
    return math.fsum(total)


def kl_oracle(teacher_logits, student_logits, tau=1.0) -> float:
    """Mean over rows of tau^2 * KL(softmax(t/tau) || softmax(s/tau))."""
    t = np.asarray(teacher_logits, dtype=np.float64)
    s = np.asarray(student_logits, dtype=np.float64)
    rows = []
    for trow, srow in zip(t, s):
        logp = row_log_softmax(trow, tau)
        logq = row_log_softmax(srow, tau)
        rows.append(math.fsum(math.exp(lp) * (lp - lq) for lp, lq in zip(logp, logq)))
    return tau * tau * math.fsum(rows) / len(rows)


def kl_q_oracle(teacher_aux, student_aux, tau=3.0) -> float:
    return math.fsum(kl_oracle(t, s, tau) for t, s in zip(teacher_aux, student_aux))


def kl_p_oracle(teacher_logits, student_logits, tau=3.0) -> float:
    return kl_oracle(teacher_logits, student_logits, tau)
