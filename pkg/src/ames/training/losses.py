"""Supervised and distillation losses."""

from __future__ import annotations

import numpy as np

SCORE_CLAMP = 1e-7


def bce_loss(s, y):
    """Binary cross-entropy of a score in (0, 1) against a {0,1} label."""
    s = np.clip(np.asarray(s, dtype=np.float64), SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    return -y * np.log(s) - (1.0 - y) * np.log(1.0 - s)


def balance_weights(labels):
    """Per-pair weights giving positives and negatives equal total mass.

    With only one class present the weights reduce to a plain mean.
    """
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return np.full(len(labels), 1.0 / len(labels))
    return np.where(pos, 0.5 / n_pos, 0.5 / n_neg)


def balanced_bce(scores, labels):
    """Mean BCE over positives and over negatives, averaged with equal weight."""
    return float(np.sum(balance_weights(labels) * bce_loss(scores, labels)))


def teacher_rows(l_x_teacher, l_q_teacher, l_x_student, l_q_student):
    """Teacher token rows matching the student's tokens.

    Student sets are prefixes of the teacher's (strength-sorted), so the
    trimmed teacher keeps the first ``l_x_student`` X rows, the first
    ``l_q_student`` Q rows and the matching token.
    """
    if l_x_student > l_x_teacher or l_q_student > l_q_teacher:
        raise IndexError("student set larger than teacher set")
    k_t = l_x_teacher + l_q_teacher + 1
    return np.concatenate([
        np.arange(l_x_student),
        l_x_teacher + np.arange(l_q_student),
        [k_t - 1],
    ])


def distill_loss(z_teacher, z_student, student_indices=None):
    """Token-space distillation ``||Z_t[idx] - Z_s||_F / (d * K_s)``.

    ``student_indices`` selects teacher rows (defaults to all rows).  Works
    on one pair (K, d) or a batch (B, K, d), returning the per-pair values.
    """
    z_teacher = np.asarray(z_teacher, dtype=np.float64)
    z_student = np.asarray(z_student, dtype=np.float64)
    if student_indices is not None:
        idx = np.asarray(student_indices)
        k_t = z_teacher.shape[-2]
        if idx.size and (idx.min() < -k_t or idx.max() >= k_t):
            raise IndexError(f"student index out of teacher range [0, {k_t})")
        z_teacher = z_teacher[..., idx, :]
    if z_teacher.shape != z_student.shape:
        raise ValueError(f"trimmed teacher {z_teacher.shape} != student {z_student.shape}")
    k_s, d = z_student.shape[-2:]
    diff = z_teacher - z_student
    return np.sqrt(np.sum(diff * diff, axis=(-2, -1))) / (d * k_s)


def score_distill_loss(s_teacher, s_student):
    """Squared error between final local similarities (alternative mode)."""
    diff = np.asarray(s_student, dtype=np.float64) - np.asarray(s_teacher, dtype=np.float64)
    return diff * diff


def total_loss(bce: float, dis: float, beta: float) -> float:
    if beta < 0:
        raise ValueError("beta must be non-negative")
    return bce + beta * dis
