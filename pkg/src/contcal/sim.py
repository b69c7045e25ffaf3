"""Synthetic multi-scene localization data.

Each scene is a box of landmarks in a shared world frame; scenes occupy
disjoint boxes. A camera follows an orbit inside the box looking at the
landmark centroid, optionally dwelling in one arc for a configurable share of
the frames. Per-point features come from a fixed random nonlinear encoding of
the landmark's position inside its box plus a per-landmark code that carries
a scene-specific style, so similar-looking structure in different scenes maps
to different world coordinates.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError, VisibilityError
from .geometry import Pose, PoseNormalizer, Quaternion, hybrid_distance_array, matrix_to_quat, pose_to_transform
from .scr_head import ClusterCenters

MIN_POINTS = 12


@dataclass(frozen=True)
class FeatureEncoder:
    """Fixed random projection ``tanh(A [fourier(pos), code, s * fourier(view)] + b)``.

    The view term depends on the unit direction from the camera to the
    landmark, so the same landmark looks different from distant viewpoints;
    ``view_strength`` 0 makes features viewpoint-invariant.
    """

    freqs: np.ndarray
    A: np.ndarray
    b: np.ndarray
    view_freqs: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    view_strength: float = 0.0

    @classmethod
    def create(
        cls,
        feature_dim: int = 32,
        code_dim: int = 8,
        n_freq: int = 12,
        freq_scale: float = 1.0,
        seed=0,
        n_view_freq: int = 0,
        view_freq_scale: float = 0.5,
        view_strength: float = 0.0,
    ) -> FeatureEncoder:
        rng = np.random.default_rng(seed)
        freqs = rng.normal(0.0, freq_scale, (n_freq, 3))
        d_in = 2 * n_freq + code_dim + 2 * n_view_freq
        A = rng.normal(0.0, 1.0, (feature_dim, d_in)) / math.sqrt(d_in) * 1.5
        b = rng.normal(0.0, 0.2, feature_dim)
        view_freqs = rng.normal(0.0, view_freq_scale, (n_view_freq, 3))
        return cls(freqs, A, b, view_freqs, float(view_strength))

    @property
    def feature_dim(self) -> int:
        return self.A.shape[0]

    @property
    def code_dim(self) -> int:
        return self.A.shape[1] - 2 * self.freqs.shape[0] - 2 * self.view_freqs.shape[0]

    @property
    def view_dependent(self) -> bool:
        return self.view_freqs.shape[0] > 0 and self.view_strength != 0.0

    def encode(self, local_pos: np.ndarray, codes: np.ndarray, view_dirs: np.ndarray | None = None) -> np.ndarray:
        phase = 2.0 * np.pi * local_pos @ self.freqs.T
        parts = [np.sin(phase), np.cos(phase), codes]
        nv = self.view_freqs.shape[0]
        if nv:
            if view_dirs is None or self.view_strength == 0.0:
                parts.append(np.zeros(local_pos.shape[:-1] + (2 * nv,)))
            else:
                vphase = 2.0 * np.pi * view_dirs @ self.view_freqs.T
                parts += [self.view_strength * np.sin(vphase), self.view_strength * np.cos(vphase)]
        u = np.concatenate(parts, axis=-1)
        return np.tanh(u @ self.A.T + self.b)


@dataclass(frozen=True)
class SyntheticScene:
    scene_id: int
    landmarks: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    feature_codebook: np.ndarray
    style: np.ndarray

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    @property
    def centroid(self) -> np.ndarray:
        return self.landmarks.mean(axis=0)

    def local(self, points: np.ndarray) -> np.ndarray:
        return (points - self.lo) / (self.hi - self.lo)

    def landmark_features(self, encoder: FeatureEncoder) -> np.ndarray:
        return encoder.encode(self.local(self.landmarks), self.feature_codebook)


@dataclass
class Frame:
    gt_pose: Pose
    features: np.ndarray
    cam_points: np.ndarray
    gt_coords: np.ndarray


@dataclass
class Trajectory:
    poses: list[Pose]
    center: np.ndarray
    dwell_angle: float
    dwell_width: float

    def __len__(self) -> int:
        return len(self.poses)

    def __iter__(self):
        return iter(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    def orbit_angles(self, positions: np.ndarray | None = None) -> np.ndarray:
        if positions is None:
            positions = np.array([p.position for p in self.poses])
        d = positions[:, :2] - self.center[:2]
        return np.arctan2(d[:, 1], d[:, 0])

    def in_subregion(self, positions: np.ndarray | None = None) -> np.ndarray:
        ang = self.orbit_angles(positions)
        delta = np.angle(np.exp(1j * (ang - self.dwell_angle)))
        return np.abs(delta) <= 0.5 * self.dwell_width + 1e-12


@dataclass
class FrameSet:
    """Frames stacked into arrays (``n`` frames of ``P`` points)."""

    poses: list[Pose]
    features: np.ndarray
    cam_points: np.ndarray
    gt_coords: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.poses)

    def frame(self, i: int) -> Frame:
        return Frame(self.poses[i], self.features[i], self.cam_points[i], self.gt_coords[i])

    def positions(self) -> np.ndarray:
        return np.array([p.position for p in self.poses]).reshape(-1, 3)

    def quats(self) -> np.ndarray:
        return np.array([p.orientation.as_array() for p in self.poses]).reshape(-1, 4)

    @classmethod
    def stack(cls, frames: Sequence[Frame], indices: Sequence[int]) -> FrameSet:
        if not frames:
            raise InvalidInputError("no frames to stack")
        return cls(
            [f.gt_pose for f in frames],
            np.stack([f.features for f in frames]),
            np.stack([f.cam_points for f in frames]),
            np.stack([f.gt_coords for f in frames]),
            np.asarray(indices, dtype=np.int64),
        )


@dataclass
class SceneStream:
    scene: SyntheticScene
    train: FrameSet
    test: FrameSet

    @property
    def scene_id(self) -> int:
        return self.scene.scene_id

    @property
    def n_train(self) -> int:
        return len(self.train)


# -- generation ------------------------------------------------------------------


def generate_scene(
    scene_id: int,
    box: tuple[Sequence[float], Sequence[float]],
    landmark_count: int = 600,
    rng_seed=0,
    code_dim: int = 8,
    code_noise: float = 0.3,
    style_scale: float = 1.0,
) -> SyntheticScene:
    lo, hi = (np.asarray(v, dtype=float) for v in box)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
        raise InvalidInputError("box must be a nondegenerate (lo, hi) pair of 3-vectors")
    if landmark_count < 50:
        raise InvalidInputError("need at least 50 landmarks")
    rng = np.random.default_rng(rng_seed)
    landmarks = lo + rng.random((landmark_count, 3)) * (hi - lo)
    style = rng.normal(0.0, style_scale, code_dim)
    codebook = style + code_noise * rng.normal(0.0, 1.0, (landmark_count, code_dim))
    for a in (landmarks, codebook, style):
        a.setflags(write=False)
    return SyntheticScene(int(scene_id), landmarks, lo, hi, codebook, style)


def look_at(position: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation whose +z axis points at ``target``."""
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=float))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def _smooth_noise(rng: np.random.Generator, t: np.ndarray, n_terms: int = 4) -> np.ndarray:
    """Zero-mean, roughly unit-scale band-limited signal sampled at ``t`` in [0, 1]."""
    out = np.zeros_like(t)
    for k in range(1, n_terms + 1):
        out += rng.normal() * np.sin(2 * np.pi * (k * t + rng.random())) / k
    return out / sum(1.0 / k for k in range(1, n_terms + 1))


def generate_trajectory(
    scene: SyntheticScene,
    frame_count: int,
    clustering: float = 0.0,
    rng_seed=0,
    orbit_fraction: float = 0.6,
    dwell_width: float = np.pi / 4,
    jitter_deg: float = 4.0,
) -> Trajectory:
    """Closed orbit around the landmark centroid, ``clustering`` of whose
    frames dwell within one arc of angular width ``dwell_width``."""
    if not 0.0 <= clustering <= 1.0:
        raise InvalidInputError("clustering must lie in [0, 1]")
    if frame_count < 2:
        raise InvalidInputError("need at least 2 frames")
    rng = np.random.default_rng(rng_seed)
    n_dwell = int(round(clustering * frame_count))
    n_loop = frame_count - n_dwell
    phi0 = rng.uniform(0, 2 * np.pi)
    dwell_angle = rng.uniform(0, 2 * np.pi)

    loop = phi0 + 2 * np.pi * (np.arange(n_loop) + 0.5) / max(n_loop, 1)
    # Insert the dwell where the loop passes the dwell arc.
    cut = int(np.argmin(np.mod(loop - dwell_angle, 2 * np.pi))) if n_loop else 0
    if n_dwell:
        td = np.linspace(0.0, 1.0, n_dwell)
        cycles = max(1, n_dwell // 150)
        dwell = dwell_angle + 0.5 * dwell_width * 0.95 * np.sin(2 * np.pi * cycles * td)
    else:
        dwell = np.empty(0)
    angles = np.concatenate([loop[:cut], dwell, loop[cut:]]) if n_loop else dwell

    half = 0.5 * (scene.hi - scene.lo)
    center = 0.5 * (scene.hi + scene.lo)
    t = np.linspace(0.0, 1.0, frame_count)
    radial = orbit_fraction * (1.0 + 0.08 * _smooth_noise(rng, t))
    x = center[0] + radial * half[0] * np.cos(angles)
    y = center[1] + radial * half[1] * np.sin(angles)
    z = center[2] + 0.25 * half[2] * _smooth_noise(rng, t)
    target = scene.centroid
    jitter = np.radians(jitter_deg) * np.stack([_smooth_noise(rng, t, 6) for _ in range(3)], axis=1)

    poses = []
    for i in range(frame_count):
        pos = np.array([x[i], y[i], z[i]])
        R = look_at(pos, target)
        j = jitter[i]
        ang = np.linalg.norm(j)
        if ang > 0:
            R = R @ Quaternion.from_axis_angle(j / ang, ang).to_matrix()
        poses.append(Pose(pos, Quaternion.from_array(matrix_to_quat(R))))
    return Trajectory(poses, center, float(np.mod(dwell_angle, 2 * np.pi)), float(dwell_width))


def visible_landmarks(scene: SyntheticScene, pose: Pose, half_angle_deg: float = 45.0, max_range: float | None = None) -> np.ndarray:
    T = pose_to_transform(pose)
    cam = (scene.landmarks - T.translation) @ T.rotation
    dist = np.linalg.norm(cam, axis=1)
    if max_range is None:
        max_range = scene.diameter
    cos_ang = cam[:, 2] / np.maximum(dist, 1e-12)
    ok = (cam[:, 2] > 0) & (cos_ang >= np.cos(np.radians(half_angle_deg))) & (dist <= max_range)
    return np.flatnonzero(ok)


def render_frame(
    scene: SyntheticScene,
    pose: Pose,
    points_per_frame: int,
    noise_sigma: float,
    rng_seed,
    encoder: FeatureEncoder,
    half_angle_deg: float = 45.0,
    max_range: float | None = None,
    landmark_features: np.ndarray | None = None,
) -> Frame:
    """Observe up to ``points_per_frame`` visible landmarks from ``pose``.

    When fewer than ``points_per_frame`` but at least 12 landmarks are
    visible, points are drawn with replacement so frames keep a fixed size.
    """
    if points_per_frame < MIN_POINTS:
        raise InvalidInputError(f"points_per_frame must be >= {MIN_POINTS}")
    rng = np.random.default_rng(rng_seed)
    vis = visible_landmarks(scene, pose, half_angle_deg, max_range)
    if len(vis) < MIN_POINTS:
        raise VisibilityError(f"only {len(vis)} landmarks visible")
    idx = rng.choice(vis, size=points_per_frame, replace=len(vis) < points_per_frame)
    if encoder.view_dependent:
        d = scene.landmarks[idx] - pose.position
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        feats = encoder.encode(scene.local(scene.landmarks[idx]), scene.feature_codebook[idx], d)
    else:
        if landmark_features is None:
            landmark_features = scene.landmark_features(encoder)
        feats = landmark_features[idx]
    if noise_sigma > 0:
        feats = feats + noise_sigma * rng.normal(0.0, 1.0, feats.shape)
    T = pose_to_transform(pose)
    cam = (scene.landmarks[idx] - T.translation) @ T.rotation
    return Frame(pose, feats, cam, T.apply(cam))


def render_trajectory(
    scene: SyntheticScene,
    trajectory: Iterable[Pose],
    points_per_frame: int,
    noise_sigma: float,
    rng_seed,
    encoder: FeatureEncoder,
    half_angle_deg: float = 45.0,
    max_range: float | None = None,
) -> list[Frame]:
    ss = np.random.SeedSequence(rng_seed) if not isinstance(rng_seed, np.random.SeedSequence) else rng_seed
    lf = scene.landmark_features(encoder)
    poses = list(trajectory)
    seeds = ss.spawn(len(poses))
    return [
        render_frame(scene, p, points_per_frame, noise_sigma, s, encoder, half_angle_deg, max_range, lf)
        for p, s in zip(poses, seeds)
    ]


def make_stream(scene: SyntheticScene, frames: Sequence[Frame], train_fraction: float, rng_seed=0) -> SceneStream:
    """Split a rendered trajectory into train (trajectory order) and test.

    Test frames are drawn by systematic sampling: the trajectory is cut into
    equal consecutive blocks and one random frame is held out per block.
    """
    if not 0.0 < train_fraction < 1.0:
        raise InvalidInputError("train_fraction must lie in (0, 1)")
    n = len(frames)
    n_test = int(round((1.0 - train_fraction) * n))
    n_test = min(max(n_test, 1), n - 1)
    rng = np.random.default_rng(rng_seed)
    edges = np.floor(np.linspace(0, n, n_test + 1)).astype(int)
    test_idx = np.array([rng.integers(a, b) for a, b in zip(edges[:-1], edges[1:])], dtype=int)
    mask = np.zeros(n, dtype=bool)
    mask[test_idx] = True
    train_idx = np.flatnonzero(~mask)
    return SceneStream(
        scene,
        FrameSet.stack([frames[i] for i in train_idx], train_idx),
        FrameSet.stack([frames[i] for i in test_idx], test_idx),
    )


# -- cluster centers ---------------------------------------------------------------


def _allocate(weights: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder allocation with at least one slot per entry."""
    n = len(weights)
    base = np.ones(n, dtype=int)
    rest = total - n
    share = weights / weights.sum() * rest
    alloc = np.floor(share).astype(int)
    left = rest - alloc.sum()
    order = np.lexsort((np.arange(n), -(share - alloc)))
    alloc[order[:left]] += 1
    return base + alloc


def _partition_centroids(points: np.ndarray, k: int) -> list[np.ndarray]:
    """Recursive axis-aligned bisection into ``k`` cells of near-equal count."""
    if k == 1:
        return [points.mean(axis=0)]
    if len(points) < 2:
        return [points.mean(axis=0)] * k
    axis = int(np.argmax(points.max(axis=0) - points.min(axis=0)))
    order = np.argsort(points[:, axis], kind="stable")
    k_left = k // 2
    cut = int(round(len(points) * k_left / k))
    cut = min(max(cut, 1), len(points) - 1)
    left, right = points[order[:cut]], points[order[cut:]]
    return _partition_centroids(left, k_left) + _partition_centroids(right, k - k_left)


def build_cluster_centers(
    scenes: Sequence[SyntheticScene], K_total: int, existing: ClusterCenters | None = None
) -> ClusterCenters:
    """Fixed centers over the ground-truth coordinates of ``scenes``.

    ``K_total`` is split across scenes proportionally to box volume; each
    scene's landmarks are cut into that many axis-aligned cells and the cell
    centroids become centers. With ``existing`` the new centers are appended.
    """
    if K_total < len(scenes) or not scenes:
        raise InvalidInputError(f"K_total={K_total} must be >= number of scenes ({len(scenes)})")
    alloc = _allocate(np.array([s.volume for s in scenes]), K_total)
    cs = []
    for s, k in zip(scenes, alloc):
        cs.extend(_partition_centroids(np.asarray(s.landmarks), int(k)))
    c = np.array(cs)
    if existing is not None:
        c = np.vstack([existing.centers, c])
    return ClusterCenters(c)


# -- dataset io --------------------------------------------------------------------


def _frameset_records(fs: FrameSet, scene_id: int, split: str):
    for i in range(len(fs)):
        yield {
            "scene_id": scene_id,
            "split": split,
            "index": int(fs.indices[i]),
            "pose": fs.poses[i].to_row(),
            "features": fs.features[i].tolist(),
            "cam_points": fs.cam_points[i].tolist(),
            "gt_coords": fs.gt_coords[i].tolist(),
        }


def dump_dataset(streams: Sequence[SceneStream], path) -> str:
    """Write streams as JSON lines (scene headers, then frames); returns the
    content hash."""
    with open(path, "w") as fh:
        for st in streams:
            s = st.scene
            fh.write(
                json.dumps(
                    {
                        "type": "scene",
                        "scene_id": s.scene_id,
                        "lo": s.lo.tolist(),
                        "hi": s.hi.tolist(),
                        "landmarks": s.landmarks.tolist(),
                        "codebook": s.feature_codebook.tolist(),
                        "style": s.style.tolist(),
                    }
                )
                + "\n"
            )
            for split, fs in (("train", st.train), ("test", st.test)):
                for rec in _frameset_records(fs, s.scene_id, split):
                    fh.write(json.dumps({"type": "frame", **rec}) + "\n")
    return dataset_hash(streams)


def load_dataset(path) -> list[SceneStream]:
    scenes: dict[int, SyntheticScene] = {}
    frames: dict[tuple[int, str], list] = {}
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec["type"] == "scene":
                scenes[rec["scene_id"]] = SyntheticScene(
                    rec["scene_id"],
                    np.array(rec["landmarks"]),
                    np.array(rec["lo"]),
                    np.array(rec["hi"]),
                    np.array(rec["codebook"]),
                    np.array(rec["style"]),
                )
            else:
                f = Frame(
                    Pose.from_row(rec["pose"]),
                    np.array(rec["features"]),
                    np.array(rec["cam_points"]),
                    np.array(rec["gt_coords"]),
                )
                frames.setdefault((rec["scene_id"], rec["split"]), []).append((rec["index"], f))
    out = []
    for sid, scene in scenes.items():
        tr = frames.get((sid, "train"), [])
        te = frames.get((sid, "test"), [])
        out.append(
            SceneStream(
                scene,
                FrameSet.stack([f for _, f in tr], [i for i, _ in tr]),
                FrameSet.stack([f for _, f in te], [i for i, _ in te]),
            )
        )
    return out


def dataset_hash(streams: Sequence[SceneStream]) -> str:
    h = hashlib.sha256()
    for st in streams:
        s = st.scene
        h.update(str(s.scene_id).encode())
        for a in (s.lo, s.hi, s.landmarks, s.feature_codebook):
            h.update(np.ascontiguousarray(a, dtype=float).tobytes())
        for fs in (st.train, st.test):
            h.update(fs.indices.tobytes())
            for a in (fs.positions(), fs.quats(), fs.features, fs.cam_points, fs.gt_coords):
                h.update(np.ascontiguousarray(a, dtype=float).tobytes())
    return h.hexdigest()


# -- helpers used by the experiment harness --------------------------------------


def scene_box(index: int, size: Sequence[float], spacing: float) -> tuple[np.ndarray, np.ndarray]:
    lo = np.array([index * spacing, 0.0, 0.0])
    return lo, lo + np.asarray(size, dtype=float)


def consecutive_distances(traj: Trajectory, lam: float = 1.0) -> np.ndarray:
    """Hybrid distances between consecutive poses after per-trajectory
    position normalisation."""
    pos = np.array([p.position for p in traj.poses])
    q = np.array([p.orientation.as_array() for p in traj.poses])
    norm = PoseNormalizer.fit(pos)
    pn = norm.positions(pos)
    return hybrid_distance_array(pn[1:], q[1:], pn[:-1], q[:-1], lam)
