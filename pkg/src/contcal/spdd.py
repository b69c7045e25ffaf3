"""Structure-preserving dual distillation.

The teacher's top-``M`` centers define an active set per batch element; the
student is pulled towards the teacher on three channels restricted to that
set (coarse assignment distribution, per-center metric offsets) plus the
final coordinate. Teacher outputs are treated as constants throughout.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np

from .errors import InvalidInputError
from .scr_head import (
    ClusterCenters,
    HeadGrads,
    HeadOutput,
    ScaleBounds,
    clamp_scale,
    clamp_scale_grad,
    head_backward,
    log_softmax,
    predict_coordinate,
    softmax_with_temperature,
)


@dataclass(frozen=True)
class DistillWeights:
    alpha: float = 1.0
    beta_metric: float = 1.0
    gamma: float = 1.0
    tau: float = 2.0
    active_size: int = 50

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidInputError("tau must be positive")
        if self.active_size < 1:
            raise InvalidInputError("active_size must be >= 1")
        if min(self.alpha, self.beta_metric, self.gamma) < 0:
            raise InvalidInputError("loss weights must be nonnegative")


@dataclass(frozen=True)
class DistillLosses:
    prior: float
    metric: float
    output: float
    total: float

    def as_row(self) -> list[float]:
        return [self.prior, self.metric, self.output, self.total]


def select_active_set(teacher_probs: np.ndarray, m: int) -> np.ndarray:
    """Indices of the ``min(m, K)`` most probable centers, best first.

    Equal probabilities are ordered by the lower index. Works row-wise on
    ``(..., K)`` inputs.
    """
    if m < 1:
        raise InvalidInputError("active set size must be >= 1")
    p = np.asarray(teacher_probs, dtype=float)
    k = min(int(m), p.shape[-1])
    return np.argsort(-p, axis=-1, kind="stable")[..., :k]


def _gather(x: np.ndarray, active: np.ndarray) -> np.ndarray:
    active = np.asarray(active, dtype=np.int64)
    if active.ndim == 1:
        return x[..., active]
    return np.take_along_axis(x, active, axis=-1)


def renormalized_distribution(logits: np.ndarray, active: np.ndarray, tau: float) -> np.ndarray:
    active = np.asarray(active)
    if active.shape[-1] == 0:
        raise InvalidInputError("active set is empty")
    return softmax_with_temperature(_gather(np.asarray(logits, dtype=float), active), tau)


def _prior_terms(teacher_logits, student_logits, active, tau):
    zt = _gather(np.asarray(teacher_logits, dtype=float), active)
    zs = _gather(np.asarray(student_logits, dtype=float), active)
    log_pt = log_softmax(zt, tau)
    log_ps = log_softmax(zs, tau)
    pt = np.exp(log_pt)
    kl = (pt * (log_pt - log_ps)).sum(axis=-1)
    return tau * tau * np.maximum(kl, 0.0), pt, np.exp(log_ps)


def prior_loss(teacher_logits: np.ndarray, student_logits: np.ndarray, active: np.ndarray, tau: float) -> float:
    """``tau^2 KL(p_T || p_S)`` of the active-set temperature softmaxes."""
    if not tau > 0:
        raise InvalidInputError("tau must be positive")
    loss, _, _ = _prior_terms(teacher_logits, student_logits, active, tau)
    return float(np.mean(loss))


def metric_loss(teacher: HeadOutput, student: HeadOutput, bounds: ScaleBounds, active: np.ndarray) -> float:
    """Mean over active centers of the L1 gap between effective offsets."""
    if teacher.logits.shape != student.logits.shape:
        raise InvalidInputError("teacher and student head shapes differ")
    diff = _effective_gap(teacher, student, bounds, np.asarray(active))
    return float(np.mean(np.abs(diff).sum(axis=-1).mean(axis=-1)))


def _effective_gap(teacher, student, bounds, active):
    idx = active[..., None] if active.ndim > 1 else active
    if active.ndim == 1:
        ds = student.offsets[..., active, :] / np.asarray(clamp_scale(student.raw_scales[..., active], bounds))[..., None]
        dt = teacher.offsets[..., active, :] / np.asarray(clamp_scale(teacher.raw_scales[..., active], bounds))[..., None]
    else:
        ws = np.asarray(clamp_scale(np.take_along_axis(student.raw_scales, active, axis=-1), bounds))
        wt = np.asarray(clamp_scale(np.take_along_axis(teacher.raw_scales, active, axis=-1), bounds))
        ds = np.take_along_axis(student.offsets, idx, axis=-2) / ws[..., None]
        dt = np.take_along_axis(teacher.offsets, idx, axis=-2) / wt[..., None]
    return ds - dt


def output_loss(student_coord: np.ndarray, teacher_coord: np.ndarray) -> float:
    d = np.asarray(student_coord, dtype=float) - np.asarray(teacher_coord, dtype=float)
    return float(np.mean(np.abs(d).sum(axis=-1)))


def _as_batch(out: HeadOutput) -> HeadOutput:
    if out.logits.ndim == 1:
        return HeadOutput(out.logits[None], out.offsets[None], out.raw_scales[None])
    return out


def spdd_loss_and_grad(
    teacher: HeadOutput,
    student: HeadOutput,
    centers: ClusterCenters,
    bounds: ScaleBounds,
    weights: DistillWeights,
    mode: str = "blend",
    need_grad: bool = True,
) -> tuple[DistillLosses, HeadGrads | None]:
    """Batch-averaged distillation losses and the student-head gradient of
    their weighted total. Batch inputs have shape ``(B, K)`` etc."""
    teacher, student = _as_batch(teacher), _as_batch(student)
    if teacher.logits.shape != student.logits.shape:
        raise InvalidInputError("teacher and student head shapes differ")
    B, K = student.logits.shape
    if B == 0:
        raise InvalidInputError("distillation batch is empty")
    tau = weights.tau
    active = select_active_set(softmax_with_temperature(teacher.logits, tau), weights.active_size)
    M = active.shape[-1]

    prior_each, pt, ps = _prior_terms(teacher.logits, student.logits, active, tau)
    gap = _effective_gap(teacher, student, bounds, active)
    metric_each = np.abs(gap).sum(axis=-1).mean(axis=-1)
    xs = predict_coordinate(student, centers, bounds, mode)
    xt = predict_coordinate(teacher, centers, bounds, mode)
    out_diff = xs - xt
    out_each = np.abs(out_diff).sum(axis=-1)

    prior, metric, output = float(prior_each.mean()), float(metric_each.mean()), float(out_each.mean())
    total = weights.alpha * prior + weights.beta_metric * metric + weights.gamma * output
    losses = DistillLosses(prior, metric, output, total)
    if not need_grad:
        return losses, None

    grads = HeadGrads.zeros_like(student)
    # prior: d/dz_S = tau (p_S - p_T) on active entries.
    if weights.alpha:
        np.put_along_axis(grads.logits, active, weights.alpha / B * tau * (ps - pt), axis=-1)
    if weights.beta_metric:
        g_delta = weights.beta_metric / (B * M) * np.sign(gap)
        raw_a = np.take_along_axis(student.raw_scales, active, axis=-1)
        off_a = np.take_along_axis(student.offsets, active[..., None], axis=-2)
        w_a = np.asarray(clamp_scale(raw_a, bounds))
        g_off = g_delta / w_a[..., None]
        g_raw = -(g_delta * off_a).sum(axis=-1) / (w_a * w_a) * clamp_scale_grad(raw_a, bounds)
        # Active indices are distinct per row, so scattering into zeros is exact.
        np.put_along_axis(grads.offsets, np.broadcast_to(active[..., None], g_off.shape), g_off, axis=-2)
        np.put_along_axis(grads.raw_scales, active, g_raw, axis=-1)
    if weights.gamma:
        grads = grads + head_backward(student, centers, bounds, weights.gamma / B * np.sign(out_diff), mode)
    return losses, grads


def spdd_loss(
    teacher: HeadOutput,
    student: HeadOutput,
    centers: ClusterCenters,
    bounds: ScaleBounds,
    weights: DistillWeights,
    mode: str = "blend",
) -> DistillLosses:
    return spdd_loss_and_grad(teacher, student, centers, bounds, weights, mode, need_grad=False)[0]


def spdd_backward(
    teacher: HeadOutput,
    student: HeadOutput,
    centers: ClusterCenters,
    bounds: ScaleBounds,
    weights: DistillWeights,
    mode: str = "blend",
) -> HeadGrads:
    return spdd_loss_and_grad(teacher, student, centers, bounds, weights, mode)[1]


def write_loss_log(fh: TextIO, rows: Sequence[tuple[int, DistillLosses]]) -> None:
    """Debug dump: ``iteration,prior,metric,output,total`` per row."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["iteration", "prior", "metric", "output", "total"])
    for it, l in rows:
        w.writerow([it, *(repr(v) for v in l.as_row())])
