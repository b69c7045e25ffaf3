"""Pose algebra: quaternions, rigid transforms, pose distances and alignment.

Conventions
-----------
- Quaternions are stored w-first ``(w, x, y, z)`` and canonicalised so that
  ``w >= 0`` after normalisation (first nonzero component positive when
  ``w == 0``).
- A :class:`Pose` maps camera-frame points into the world/base frame:
  ``x_world = R(q) @ o_cam + p``.
- Angles are radians unless a name says otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateConfigurationError, InvalidInputError, NoConsensusError
from .seeding import as_rng

_UNIT_TOL = 1e-6


def _canonical_sign(q: np.ndarray) -> np.ndarray:
    for c in q:
        if c > 0:
            return q
        if c < 0:
            return -q
    return q


@dataclass(frozen=True)
class Quaternion:
    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise InvalidInputError(f"non-finite quaternion {self!r}")

    @classmethod
    def identity(cls) -> Quaternion:
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, q: Sequence[float], normalize: bool = True) -> Quaternion:
        q = np.asarray(q, dtype=float).reshape(4)
        if normalize:
            q = normalize_quat(q)
        return cls(*(float(c) for c in q))

    @classmethod
    def from_axis_angle(cls, axis: Sequence[float], angle: float) -> Quaternion:
        axis = np.asarray(axis, dtype=float)
        n = np.linalg.norm(axis)
        if n == 0:
            raise InvalidInputError("zero rotation axis")
        axis = axis / n
        h = 0.5 * angle
        return cls.from_array([np.cos(h), *(np.sin(h) * axis)])

    @classmethod
    def from_matrix(cls, R: np.ndarray) -> Quaternion:
        return cls.from_array(matrix_to_quat(R))

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=float)

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    def normalized(self) -> Quaternion:
        return Quaternion.from_array(self.as_array())

    def conjugate(self) -> Quaternion:
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: Quaternion) -> Quaternion:
        return Quaternion.from_array(quat_multiply(self.as_array(), other.as_array()), normalize=False)

    def __neg__(self) -> Quaternion:
        return Quaternion(-self.w, -self.x, -self.y, -self.z)

    def to_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.as_array())


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    orientation: Quaternion = field(default_factory=Quaternion.identity)

    def __post_init__(self):
        p = np.array(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            raise InvalidInputError("non-finite position")
        p.setflags(write=False)
        object.__setattr__(self, "position", p)
        if abs(self.orientation.norm() - 1.0) > _UNIT_TOL:
            raise InvalidInputError(f"orientation is not unit-norm: {self.orientation!r}")

    @classmethod
    def from_row(cls, row: Sequence[float]) -> Pose:
        row = [float(v) for v in row]
        if len(row) != 7:
            raise InvalidInputError(f"pose row needs 7 numbers, got {len(row)}")
        return cls(np.array(row[:3]), Quaternion.from_array(row[3:]))

    def to_row(self) -> list[float]:
        """``[px, py, pz, qw, qx, qy, qz]``."""
        return [float(v) for v in self.position] + [float(v) for v in self.orientation.as_array()]


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def is_proper(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(np.allclose(R @ R.T, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) <= tol)


# -- array-level quaternion helpers ------------------------------------------


def normalize_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if not np.all(np.isfinite(q)):
        raise InvalidInputError("non-finite quaternion components")
    n = np.linalg.norm(q)
    if n == 0:
        raise InvalidInputError("zero quaternion")
    return _canonical_sign(q / n)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for quaternions of shape ``(..., 4)``."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(R.shape[:-1] + (3, 3))


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns a canonical (w >= 0) unit quaternion."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return normalize_quat(np.array(q))


def angular_distance_array(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    """Broadcasting geodesic angle ``2 acos(|qa . qb|)`` over the last axis."""
    dot = (np.asarray(qa, dtype=float) * np.asarray(qb, dtype=float)).sum(axis=-1)
    return 2.0 * np.arccos(np.clip(np.abs(dot), -1.0, 1.0))


def hybrid_distance_array(pa: np.ndarray, qa: np.ndarray, pb: np.ndarray, qb: np.ndarray, lam: float) -> np.ndarray:
    """Broadcasting form of :func:`hybrid_pose_distance`."""
    d = np.asarray(pa, dtype=float) - np.asarray(pb, dtype=float)
    return np.sqrt((d * d).sum(axis=-1)) + lam * angular_distance_array(qa, qb)


# -- pose-level operations ----------------------------------------------------


def quat_angular_distance(a: Quaternion, b: Quaternion) -> float:
    """Rotation angle between ``a`` and ``b`` in radians, in ``[0, pi]``."""
    qa, qb = a.as_array(), b.as_array()
    if abs(np.linalg.norm(qa) - 1) > _UNIT_TOL or abs(np.linalg.norm(qb) - 1) > _UNIT_TOL:
        raise InvalidInputError("quaternions must be unit-norm")
    return float(angular_distance_array(qa, qb))


def hybrid_pose_distance(a: Pose, b: Pose, lam: float) -> float:
    """Position distance plus ``lam`` times the geodesic rotation angle."""
    if not lam >= 0:
        raise InvalidInputError(f"lambda must be nonnegative, got {lam}")
    return float(
        hybrid_distance_array(a.position, a.orientation.as_array(), b.position, b.orientation.as_array(), lam)
    )


def pose_to_transform(p: Pose) -> RigidTransform:
    return RigidTransform(p.orientation.to_matrix(), p.position)


def transform_to_pose(T: RigidTransform) -> Pose:
    return Pose(T.translation, Quaternion.from_matrix(T.rotation))


def transform_point(T: RigidTransform, point: np.ndarray) -> np.ndarray:
    return T.apply(point)


def pose_error(estimate: Pose, truth: Pose) -> tuple[float, float]:
    """Translation error in meters and rotation error in degrees."""
    t_err = float(np.linalg.norm(estimate.position - truth.position))
    r_err = float(np.degrees(quat_angular_distance(estimate.orientation, truth.orientation)))
    return t_err, r_err


@dataclass
class PoseNormalizer:
    """Affine map of positions into the unit cube of a reference bounding box."""

    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, positions: np.ndarray) -> PoseNormalizer:
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        return cls(positions.min(axis=0), positions.max(axis=0))

    @property
    def extent(self) -> np.ndarray:
        ext = self.hi - self.lo
        return np.where(ext > 0, ext, 1.0)

    def positions(self, p: np.ndarray) -> np.ndarray:
        return (np.asarray(p, dtype=float) - self.lo) / self.extent

    def __call__(self, pose: Pose) -> Pose:
        return Pose(self.positions(pose.position), pose.orientation)


# -- alignment -----------------------------------------------------------------


def _kabsch_batch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched least-squares rotation/translation for ``(..., n, 3)`` inputs.

    Returns ``R, t, s`` where ``s`` are the singular values of the
    cross-covariance, used by callers for degeneracy checks.
    """
    mu_s = src.mean(axis=-2, keepdims=True)
    mu_d = dst.mean(axis=-2, keepdims=True)
    H = np.swapaxes(src - mu_s, -1, -2) @ (dst - mu_d)
    U, s, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.swapaxes(Vt, -1, -2) @ np.swapaxes(U, -1, -2)))
    d = np.where(d == 0, 1.0, d)
    D = np.zeros(H.shape)
    D[..., 0, 0] = 1.0
    D[..., 1, 1] = 1.0
    D[..., 2, 2] = d
    R = np.swapaxes(Vt, -1, -2) @ D @ np.swapaxes(U, -1, -2)
    t = mu_d[..., 0, :] - (R @ mu_s[..., 0, :, None])[..., 0]
    return R, t, s


def kabsch_align(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Rigid transform minimising ``sum ||R src_i + t - dst_i||^2``.

    Raises
    ------
    DegenerateConfigurationError
        Fewer than three points, or (near-)collinear configurations whose
        cross-covariance has rank below two.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise InvalidInputError(f"shape mismatch {src.shape} vs {dst.shape}")
    if len(src) < 3:
        raise DegenerateConfigurationError(f"need at least 3 correspondences, got {len(src)}")
    R, t, s = _kabsch_batch(src, dst)
    if s[0] <= 0 or s[1] <= 1e-10 * s[0]:
        raise DegenerateConfigurationError("rank-deficient cross-covariance (collinear points)")
    return RigidTransform(R, t)


def ransac_align(
    src: np.ndarray,
    dst: np.ndarray,
    inlier_threshold: float,
    iterations: int = 128,
    rng_seed: int | np.random.Generator | None = 0,
    min_inliers: int = 3,
) -> tuple[RigidTransform, np.ndarray]:
    """Robust rigid alignment from minimal 3-point hypotheses.

    Every hypothesis is scored by its inlier count (residual below
    ``inlier_threshold``); the best one is refit on its inliers with
    :func:`kabsch_align`, then inliers are recomputed and refit once more.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    n = len(src)
    if src.shape != dst.shape:
        raise InvalidInputError(f"shape mismatch {src.shape} vs {dst.shape}")
    if n < 3:
        raise DegenerateConfigurationError(f"need at least 3 correspondences, got {n}")
    rng = as_rng(rng_seed)
    # Three distinct indices per hypothesis.
    idx = np.argsort(rng.random((iterations, n)), axis=1)[:, :3]
    R, t, s = _kabsch_batch(src[idx], dst[idx])
    ok = s[:, 1] > 1e-10 * np.maximum(s[:, 0], 1e-300)
    pred = np.einsum("hij,nj->hni", R, src) + t[:, None, :]
    resid = np.linalg.norm(pred - dst[None], axis=-1)
    counts = np.where(ok, (resid < inlier_threshold).sum(axis=1), -1)
    best = int(np.argmax(counts))
    if counts[best] < max(3, min_inliers):
        raise NoConsensusError(f"best hypothesis has {max(counts[best], 0)} inliers")
    mask = resid[best] < inlier_threshold
    for _ in range(3):
        try:
            T = kabsch_align(src[mask], dst[mask])
        except DegenerateConfigurationError as exc:
            raise NoConsensusError("inlier set is degenerate") from exc
        new_mask = np.linalg.norm(T.apply(src) - dst, axis=1) < inlier_threshold
        if new_mask.sum() < 3 or np.array_equal(new_mask, mask):
            break
        mask = new_mask
    return T, np.linalg.norm(T.apply(src) - dst, axis=1) < inlier_threshold
