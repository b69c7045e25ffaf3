"""Cluster-center scene-coordinate head.

A prediction blends fixed 3D cluster centers with softmax weights and refines
each center by an offset divided by a clamped positive scale. All functions
accept arbitrary leading batch dimensions: logits ``(..., K)``, offsets
``(..., K, 3)``, raw scales ``(..., K)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class ClusterCenters:
    centers: np.ndarray

    def __post_init__(self):
        c = np.array(self.centers, dtype=float)
        if c.ndim != 2 or c.shape[1] != 3 or c.shape[0] < 1:
            raise InvalidInputError(f"centers must be K x 3 with K >= 1, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise InvalidInputError("centers must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "centers", c)

    @property
    def K(self) -> int:
        return self.centers.shape[0]

    def save(self, fh: TextIO) -> None:
        np.savetxt(fh, self.centers, fmt="%.17g")

    @classmethod
    def load(cls, fh: TextIO) -> ClusterCenters:
        return cls(np.loadtxt(fh, ndmin=2))


@dataclass(frozen=True)
class ScaleBounds:
    q_min: float = 0.1
    q_max: float = 100.0

    def __post_init__(self):
        if not (0 < self.q_min < self.q_max):
            raise InvalidInputError("need 0 < q_min < q_max")
        if not self.q_max > 1:
            raise InvalidInputError("q_max must exceed 1")

    @property
    def beta_softplus(self) -> float:
        return float(np.log(2.0) / (1.0 - 1.0 / self.q_max))


@dataclass
class HeadOutput:
    logits: np.ndarray
    offsets: np.ndarray
    raw_scales: np.ndarray

    def __post_init__(self):
        K = self.logits.shape[-1]
        if self.offsets.shape != self.logits.shape + (3,) or self.raw_scales.shape != self.logits.shape:
            raise InvalidInputError(
                f"inconsistent head shapes {self.logits.shape}, {self.offsets.shape}, {self.raw_scales.shape}"
            )
        if K < 1:
            raise InvalidInputError("K must be >= 1")

    @property
    def K(self) -> int:
        return self.logits.shape[-1]

    def __getitem__(self, idx) -> HeadOutput:
        return HeadOutput(self.logits[idx], self.offsets[idx], self.raw_scales[idx])


@dataclass
class HeadGrads:
    logits: np.ndarray
    offsets: np.ndarray
    raw_scales: np.ndarray

    @classmethod
    def zeros_like(cls, out: HeadOutput) -> HeadGrads:
        return cls(np.zeros_like(out.logits), np.zeros_like(out.offsets), np.zeros_like(out.raw_scales))

    def __add__(self, other: HeadGrads) -> HeadGrads:
        return HeadGrads(self.logits + other.logits, self.offsets + other.offsets, self.raw_scales + other.raw_scales)

    def scaled(self, a: float) -> HeadGrads:
        return HeadGrads(a * self.logits, a * self.offsets, a * self.raw_scales)


def softmax_with_temperature(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise InvalidInputError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=float) / tau
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=float) / tau
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _softplus_part(raw: np.ndarray, bounds: ScaleBounds) -> np.ndarray:
    beta = bounds.beta_softplus
    x = beta * np.asarray(raw, dtype=float)
    return (np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))) / beta + 1.0 / bounds.q_max


def clamp_scale(raw, bounds: ScaleBounds):
    """Positive scale in ``(1/q_max, 1/q_min]``, monotone in ``raw``."""
    w = np.minimum(1.0 / bounds.q_min, _softplus_part(raw, bounds))
    return float(w) if np.ndim(w) == 0 else w


def clamp_scale_grad(raw: np.ndarray, bounds: ScaleBounds) -> np.ndarray:
    """``dw/draw``; zero wherever the upper clamp is active (kink included)."""
    raw = np.asarray(raw, dtype=float)
    beta = bounds.beta_softplus
    sig = 0.5 * (1.0 + np.tanh(0.5 * beta * raw))
    return np.where(_softplus_part(raw, bounds) >= 1.0 / bounds.q_min, 0.0, sig)


def _check_active(active: np.ndarray, K: int) -> np.ndarray:
    active = np.asarray(active, dtype=np.int64)
    if active.size and (active.min() < 0 or active.max() >= K):
        raise InvalidInputError(f"active indices out of range [0, {K})")
    return active


def effective_offsets(out: HeadOutput, bounds: ScaleBounds, active: Sequence[int] | np.ndarray | None = None) -> np.ndarray:
    """Offsets divided by their clamped scales, optionally gathered on ``active``.

    ``active`` is either a 1-D index list shared across the batch or an
    array with the batch shape plus a trailing index axis.
    """
    w = clamp_scale(out.raw_scales, bounds)
    delta = out.offsets / np.asarray(w)[..., None]
    if active is None:
        return delta
    active = _check_active(active, out.K)
    if active.ndim == 1:
        return delta[..., active, :]
    return np.take_along_axis(delta, active[..., None], axis=-2)


def _check_centers(out: HeadOutput, centers: ClusterCenters) -> None:
    if out.K != centers.K:
        raise InvalidInputError(f"head has K={out.K} but {centers.K} centers were given")


def predict_coordinate(out: HeadOutput, centers: ClusterCenters, bounds: ScaleBounds, mode: str = "blend") -> np.ndarray:
    """Scene coordinate for each batch element.

    ``mode="blend"`` weights every refined center ``c_i + Δ_i`` by its softmax
    probability. ``mode="literal"`` blends the bare centers and adds the
    effective offset of the most probable center only.
    """
    _check_centers(out, centers)
    p = softmax_with_temperature(out.logits)
    delta = effective_offsets(out, bounds)
    if mode == "blend":
        return np.einsum("...k,...kc->...c", p, centers.centers + delta)
    if mode == "literal":
        top = np.argmax(out.logits, axis=-1)[..., None, None]
        return p @ centers.centers + np.take_along_axis(delta, top, axis=-2)[..., 0, :]
    raise InvalidInputError(f"unknown head mode {mode!r}")


def head_backward(
    out: HeadOutput, centers: ClusterCenters, bounds: ScaleBounds, upstream_grad: np.ndarray, mode: str = "blend"
) -> HeadGrads:
    """Gradients of ``<upstream_grad, predict_coordinate(out)>`` w.r.t. the head."""
    _check_centers(out, centers)
    g = np.asarray(upstream_grad, dtype=float)
    p = softmax_with_temperature(out.logits)
    w = np.asarray(clamp_scale(out.raw_scales, bounds))
    dw_draw = clamp_scale_grad(out.raw_scales, bounds)
    if mode == "blend":
        refined = centers.centers + out.offsets / w[..., None]
        s = np.einsum("...kc,...c->...k", refined, g)
        g_logits = p * (s - (p * s).sum(axis=-1, keepdims=True))
        coef = p / w
        g_offsets = coef[..., None] * g[..., None, :]
        g_w = -coef / w * np.einsum("...kc,...c->...k", out.offsets, g)
    elif mode == "literal":
        s = np.einsum("kc,...c->...k", centers.centers, g)
        g_logits = p * (s - (p * s).sum(axis=-1, keepdims=True))
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, np.argmax(out.logits, axis=-1)[..., None], 1.0, axis=-1)
        g_offsets = (onehot / w)[..., None] * g[..., None, :]
        g_w = -onehot / (w * w) * np.einsum("...kc,...c->...k", out.offsets, g)
    else:
        raise InvalidInputError(f"unknown head mode {mode!r}")
    return HeadGrads(g_logits, g_offsets, g_w * dw_draw)
