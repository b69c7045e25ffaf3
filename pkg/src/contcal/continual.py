"""Sequential multi-scene training, evaluation and forgetting metrics."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import ExperimentConfig
from .errors import (
    DegenerateConfigurationError,
    InvalidInputError,
    NoConsensusError,
    TrainingDivergenceError,
)
from .geometry import Pose, PoseNormalizer, pose_error, ransac_align, transform_to_pose
from .model import (
    AdamState,
    LossWeights,
    MlpParams,
    adam_step,
    clip_grad_norm,
    composite_loss_and_grad,
    init_params,
    predict,
)
from .sars import (
    ReplayBuffer,
    ReplaySample,
    SarsConfig,
    reservoir_insert,
    sample_replay_batch,
    try_insert,
)
from .scr_head import ClusterCenters, HeadOutput, ScaleBounds, predict_coordinate
from .seeding import rng_for, sub_seed
from .sim import (
    FeatureEncoder,
    Frame,
    FrameSet,
    SceneStream,
    build_cluster_centers,
    dataset_hash,
    generate_scene,
    generate_trajectory,
    make_stream,
    render_trajectory,
    scene_box,
)
from .spdd import DistillWeights

log = logging.getLogger(__name__)

REPLAY_METHODS = ("ours", "sars_only", "reservoir_replay")


# -- experiment assembly -----------------------------------------------------------


@dataclass
class Experiment:
    config: ExperimentConfig
    streams: list[SceneStream]
    centers: ClusterCenters
    bounds: ScaleBounds
    encoder: FeatureEncoder

    @property
    def dataset_hash(self) -> str:
        return dataset_hash(self.streams)


def build_streams(config: ExperimentConfig) -> tuple[list[SceneStream], FeatureEncoder]:
    """Scenes, trajectories and splits; a pure function of ``(config, seed)``."""
    sc = config.scenes
    seed = config.seed
    encoder = FeatureEncoder.create(
        sc.feature_dim,
        sc.code_dim,
        sc.n_freq,
        sc.freq_scale,
        sub_seed(seed, "encoder"),
        sc.n_view_freq,
        sc.view_freq_scale,
        sc.view_strength,
    )
    streams = []
    for i in range(sc.n_scenes):
        scene = generate_scene(
            i,
            scene_box(i, sc.box_size, sc.spacing),
            sc.landmarks,
            sub_seed(seed, "scene", i),
            sc.code_dim,
            sc.code_noise,
            sc.style_scale,
        )
        traj = generate_trajectory(
            scene,
            sc.frames_per_scene,
            sc.clustering,
            sub_seed(seed, "trajectory", i),
            orbit_fraction=sc.orbit_fraction,
            jitter_deg=sc.jitter_deg,
        )
        frames = render_trajectory(
            scene,
            traj,
            sc.points_per_frame,
            sc.noise_sigma,
            sub_seed(seed, "render", i),
            encoder,
            sc.half_angle_deg,
            sc.max_range,
        )
        streams.append(make_stream(scene, frames, sc.train_fraction, sub_seed(seed, "split", i)))
    return streams, encoder


def build_experiment(config: ExperimentConfig) -> Experiment:
    streams, encoder = build_streams(config)
    centers = build_cluster_centers([s.scene for s in streams], config.model.K)
    bounds = ScaleBounds(config.bounds.q_min, config.bounds.q_max)
    return Experiment(config, streams, centers, bounds, encoder)


# -- teacher -----------------------------------------------------------------------


@dataclass(frozen=True)
class TeacherSnapshot:
    """Read-only copy of a model used only for inference."""

    params: MlpParams

    def predict(self, features: np.ndarray) -> HeadOutput:
        return predict(self.params, features)


def freeze_teacher(student: MlpParams) -> TeacherSnapshot:
    if not student.is_finite():
        raise InvalidInputError("cannot freeze a non-finite model")
    p = student.copy()
    for a in p.blocks().values():
        a.setflags(write=False)
    return TeacherSnapshot(p)


# -- training ----------------------------------------------------------------------


def lr_at(config: ExperimentConfig, iteration: int, total: int) -> float:
    tc = config.train
    if tc.lr_schedule == "constant" or total <= 1:
        return tc.lr
    frac = iteration / (total - 1)
    lo = tc.lr * tc.lr_final_fraction
    return lo + 0.5 * (tc.lr - lo) * (1.0 + math.cos(math.pi * frac))


@dataclass
class ReplayStore:
    """Resolves buffer payload references ``(scene_id, train_row)`` to arrays."""

    streams: dict[int, SceneStream]

    def gather(self, samples: Sequence[ReplaySample]) -> tuple[np.ndarray, np.ndarray]:
        feats, coords = [], []
        for s in samples:
            scene_id, row = s.payload_ref
            fs = self.streams[scene_id].train
            feats.append(fs.features[row])
            coords.append(fs.gt_coords[row])
        F = np.concatenate(feats)
        X = np.concatenate(coords)
        return F, X


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)


def _batch(fs: FrameSet, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    F = fs.features[rows].reshape(-1, fs.features.shape[-1])
    X = fs.gt_coords[rows].reshape(-1, 3)
    return F, X


def train_scene(
    student: MlpParams,
    teacher: Optional[TeacherSnapshot],
    stream: SceneStream,
    buffer: Optional[ReplayBuffer],
    config: ExperimentConfig,
    centers: ClusterCenters,
    bounds: ScaleBounds,
    store: Optional[ReplayStore] = None,
    stage: int = 0,
    train_log: Optional[TrainLog] = None,
) -> MlpParams:
    """Optimise ``student`` on one scene; replay is used whenever the buffer
    is non-empty and the method rehearses."""
    method = config.method
    tc = config.train
    rng = rng_for(config.seed, "train", stage)
    state = AdamState.for_params(student, lr=tc.lr, weight_decay=tc.weight_decay)
    clamp = tc.pose_clamp_m
    replay = method in REPLAY_METHODS and buffer is not None and len(buffer) > 0
    distill = method == "ours" and replay and teacher is not None
    if method == "ours" and replay and teacher is None:
        raise InvalidInputError("distillation needs a teacher once the buffer is populated")
    dw = None
    if distill:
        d = config.distill
        dw = DistillWeights(d.alpha, d.beta, d.gamma, d.tau, d.active_size)
    replay_pose = tc.replay_pose_weight if (not distill or tc.distill_with_replay_pose) else 0.0
    weights = LossWeights(1.0, replay_pose, dw)
    n_replay = tc.replay_batch_frames or tc.batch_frames
    n = stream.n_train

    for it in range(tc.iterations_per_scene):
        rows = rng.integers(0, n, size=tc.batch_frames)
        F, X = _batch(stream.train, rows)
        RF = RX = T = None
        if replay:
            samples = sample_replay_batch(buffer, n_replay, rng)
            RF, RX = store.gather(samples)
            if not replay_pose:
                RX = None
            if distill:
                T = teacher.predict(RF)
        res = composite_loss_and_grad(
            student, centers, bounds, F, X, clamp, weights, RF, RX, T, config.model.head_mode
        )
        if not math.isfinite(res.loss):
            raise TrainingDivergenceError(f"non-finite loss at iteration {it}", it)
        clip_grad_norm(res.grads, tc.grad_clip)
        state.lr = lr_at(config, it, tc.iterations_per_scene)
        try:
            adam_step(student, res.grads, state)
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(str(exc), it) from exc
        if train_log is not None:
            train_log.losses.append(res.loss)
    return student


def make_buffer(config: ExperimentConfig) -> ReplayBuffer:
    s = config.sars
    # Reservoir sampling ignores spacing; a zero radius keeps the buffer
    # bookkeeping identical otherwise.
    radius = s.radius if config.method in ("ours", "sars_only") else 0.0
    return ReplayBuffer(SarsConfig(1, radius, s.lam, s.radius_scope))


def scene_normalizer(stream: SceneStream) -> PoseNormalizer:
    return PoseNormalizer.fit(stream.train.positions())


def update_buffer(
    buffer: ReplayBuffer,
    stream: SceneStream,
    config: ExperimentConfig,
    normalizer: PoseNormalizer,
    stream_offset: int,
    first_stage: bool,
) -> int:
    """Grow capacity by the scene's share and feed its training frames in
    trajectory order. Returns the number of samples offered."""
    n = stream.n_train
    extra = math.ceil(config.sars.capacity_fraction * n)
    if first_stage:
        buffer.grow(extra - buffer.capacity)
    else:
        buffer.grow(extra)
    sid = stream.scene_id
    buffer.register_scene(sid)
    rng = rng_for(config.seed, "reservoir", sid)
    for row in range(n):
        pose = normalizer(stream.train.poses[row])
        s = ReplaySample((sid, row), sid, pose, (sid, row))
        if config.method == "reservoir_replay":
            reservoir_insert(buffer, s, stream_offset + row, rng)
        else:
            try_insert(buffer, s)
    return n


# -- evaluation --------------------------------------------------------------------


@dataclass(frozen=True)
class RansacSettings:
    inlier_threshold: float
    iterations: int = 64


@dataclass
class SceneMetrics:
    median_t_err_cm: float
    median_r_err_deg: float
    accuracy: float
    best_accuracy_so_far: float
    n_frames: int
    n_failures: int

    def to_dict(self) -> dict:
        return {k: _json_float(v) if isinstance(v, float) else v for k, v in asdict(self).items()}


def _json_float(v: float):
    return v if math.isfinite(v) else None


def localize_frame(
    params: MlpParams,
    frame: Frame,
    centers: ClusterCenters,
    bounds: ScaleBounds,
    ransac: RansacSettings,
    rng_seed=0,
    mode: str = "blend",
) -> Optional[Pose]:
    """Camera pose from predicted scene coordinates; ``None`` when no
    consistent alignment exists."""
    coords = predict_coordinate(predict(params, frame.features), centers, bounds, mode)
    return _align(frame.cam_points, coords, ransac, rng_seed)


def _align(cam: np.ndarray, coords: np.ndarray, ransac: RansacSettings, rng_seed) -> Optional[Pose]:
    try:
        T, _ = ransac_align(cam, coords, ransac.inlier_threshold, ransac.iterations, rng_seed)
    except (NoConsensusError, DegenerateConfigurationError):
        return None
    return transform_to_pose(T)


def metrics_from_errors(
    t_err_m: np.ndarray, r_err_deg: np.ndarray, t_thresh_m: float, r_thresh_deg: float, best_so_far: float = 0.0
) -> SceneMetrics:
    """Failures are passed as ``inf`` and count as misses."""
    t = np.asarray(t_err_m, dtype=float)
    r = np.asarray(r_err_deg, dtype=float)
    if t.size == 0:
        raise InvalidInputError("no frames to evaluate")
    ok = (t < t_thresh_m) & (r < r_thresh_deg)
    acc = 100.0 * float(ok.mean())
    return SceneMetrics(
        float(np.median(t)) * 100.0,
        float(np.median(r)),
        acc,
        max(acc, best_so_far),
        int(t.size),
        int(np.sum(~np.isfinite(t))),
    )


def thresholds_for(stream: SceneStream, config: ExperimentConfig) -> tuple[float, float]:
    e = config.eval
    t = e.translation_threshold_m if e.translation_threshold_m is not None else e.translation_threshold_frac * stream.scene.diameter
    return t, e.rotation_threshold_deg


def evaluate_scene(
    params: MlpParams,
    stream: SceneStream,
    config: ExperimentConfig,
    centers: ClusterCenters,
    bounds: ScaleBounds,
    best_so_far: float = 0.0,
) -> SceneMetrics:
    test = stream.test
    if len(test) == 0:
        raise InvalidInputError("empty test split")
    n, P, Fd = test.features.shape
    coords = predict_coordinate(predict(params, test.features.reshape(-1, Fd)), centers, bounds, config.model.head_mode)
    coords = coords.reshape(n, P, 3)
    ransac = RansacSettings(config.eval.ransac_threshold_frac * stream.scene.diameter, config.eval.ransac_iterations)
    seeds = sub_seed(config.seed, "ransac", stream.scene_id).spawn(n)
    t_err = np.full(n, np.inf)
    r_err = np.full(n, np.inf)
    for i in range(n):
        est = _align(test.cam_points[i], coords[i], ransac, np.random.default_rng(seeds[i]))
        if est is not None:
            t_err[i], r_err[i] = pose_error(est, test.poses[i])
    t_th, r_th = thresholds_for(stream, config)
    return metrics_from_errors(t_err, r_err, t_th, r_th, best_so_far)


# -- forgetting ----------------------------------------------------------------------


def compute_tfr(
    accuracy: Sequence[Sequence[Optional[float]]], clamp: bool = True, include_last: bool = False
) -> tuple[float, bool]:
    """Mean drop from each scene's best accuracy to its final accuracy.

    ``accuracy[stage][scene]`` is ``None`` before the scene is learned.
    Returns ``(tfr, defined)``; with a single tracked stage the value is 0
    and ``defined`` is False.
    """
    n_stages = len(accuracy)
    if n_stages == 0:
        raise InvalidInputError("empty accuracy matrix")
    n_scenes = len(accuracy[-1])
    tracked = n_scenes if include_last else n_scenes - 1
    if n_stages < 2 or tracked < 1:
        return 0.0, False
    drops = []
    for j in range(tracked):
        hist = [accuracy[s][j] for s in range(n_stages) if j < len(accuracy[s]) and accuracy[s][j] is not None]
        first = next((s for s in range(n_stages) if j < len(accuracy[s]) and accuracy[s][j] is not None), None)
        if first is None or len(hist) != n_stages - first:
            raise InvalidInputError(f"scene {j} is missing evaluations after it was learned")
        d = max(hist) - hist[-1]
        drops.append(max(d, 0.0) if clamp else d)
    return float(np.mean(drops)), True


# -- report ------------------------------------------------------------------------


@dataclass
class ContinualReport:
    method: str
    seed: int
    config_hash: str
    dataset_hash: str
    scene_ids: list[int]
    matrix: list[list[Optional[SceneMetrics]]]
    final_average_accuracy: float
    tfr: float
    tfr_defined: bool
    buffer_sizes: list[int]
    config: dict
    wall_clock_s: float = 0.0

    def accuracy_matrix(self) -> list[list[Optional[float]]]:
        return [[None if m is None else m.accuracy for m in row] for row in self.matrix]

    def final_accuracies(self) -> list[float]:
        return [m.accuracy for m in self.matrix[-1]]

    def to_dict(self) -> dict:
        # Wall-clock time is left out so that reruns are byte-identical.
        return {
            "method": self.method,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "dataset_hash": self.dataset_hash,
            "scene_ids": self.scene_ids,
            "matrix": [[None if m is None else m.to_dict() for m in row] for row in self.matrix],
            "final_average_accuracy": self.final_average_accuracy,
            "tfr": self.tfr,
            "tfr_defined": self.tfr_defined,
            "buffer_sizes": self.buffer_sizes,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> ContinualReport:
        def metric(m):
            if m is None:
                return None
            vals = {k: (math.inf if v is None and k != "n_frames" else v) for k, v in m.items()}
            return SceneMetrics(**vals)

        return cls(
            doc["method"],
            doc["seed"],
            doc["config_hash"],
            doc["dataset_hash"],
            list(doc["scene_ids"]),
            [[metric(m) for m in row] for row in doc["matrix"]],
            doc["final_average_accuracy"],
            doc["tfr"],
            doc["tfr_defined"],
            list(doc["buffer_sizes"]),
            doc["config"],
        )

    def matrix_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", *(f"scene_{s}" for s in self.scene_ids)])
        for i, row in enumerate(self.accuracy_matrix()):
            w.writerow([i + 1, *("" if a is None else repr(a) for a in row)])
        return buf.getvalue()

    def file_stem(self) -> str:
        return f"{self.method}_seed{self.seed}_{self.config_hash[:12]}"

    def write(self, out_dir) -> tuple[str, str]:
        import os

        os.makedirs(out_dir, exist_ok=True)
        stem = os.path.join(out_dir, self.file_stem())
        with open(stem + ".report.json", "w") as fh:
            fh.write(self.to_json())
        with open(stem + ".matrix.csv", "w") as fh:
            fh.write(self.matrix_csv())
        return stem + ".report.json", stem + ".matrix.csv"


def _evaluate_stage(params, streams, exp, best, upto) -> list[Optional[SceneMetrics]]:
    row: list[Optional[SceneMetrics]] = []
    for j, st in enumerate(streams):
        if j > upto:
            row.append(None)
            continue
        m = evaluate_scene(params, st, exp.config, exp.centers, exp.bounds, best.get(j, 0.0))
        best[j] = m.best_accuracy_so_far
        row.append(m)
    return row


def run_continual(config: ExperimentConfig, experiment: Optional[Experiment] = None) -> ContinualReport:
    """Run one ``(method, seed)`` experiment end to end."""
    t0 = time.perf_counter()
    exp = experiment if experiment is not None else build_experiment(config)
    if experiment is not None:
        exp = Experiment(config, exp.streams, exp.centers, exp.bounds, exp.encoder)
    streams = exp.streams
    sc = config.scenes
    params = init_params(sc.feature_dim, config.model.hidden_dim, config.model.K, sub_seed(config.seed, "init"))
    store = ReplayStore({s.scene_id: s for s in streams})
    best: dict[int, float] = {}
    matrix: list[list[Optional[SceneMetrics]]] = []
    sizes: list[int] = []

    if config.method == "joint":
        params = _train_joint(params, streams, exp)
        matrix.append(_evaluate_stage(params, streams, exp, best, len(streams) - 1))
        sizes.append(0)
    else:
        buffer = make_buffer(config) if config.method in REPLAY_METHODS else None
        normalizers = _normalizers(streams, config)
        offset = 0
        for i, st in enumerate(streams):
            teacher = freeze_teacher(params) if i > 0 and config.method == "ours" else None
            params = train_scene(params, teacher, st, buffer, config, exp.centers, exp.bounds, store, stage=i)
            if buffer is not None:
                offset += update_buffer(buffer, st, config, normalizers[i], offset, first_stage=(i == 0))
            sizes.append(0 if buffer is None else len(buffer))
            matrix.append(_evaluate_stage(params, streams, exp, best, i))
            log.info(
                "%s seed=%d stage %d: %s",
                config.method,
                config.seed,
                i + 1,
                " ".join(f"{m.accuracy:.1f}" for m in matrix[-1] if m is not None),
            )

    acc = [[None if m is None else m.accuracy for m in row] for row in matrix]
    if config.method == "joint":
        tfr, defined = 0.0, False
    else:
        tfr, defined = compute_tfr(acc, clamp=config.eval.tfr_clamp)
    final = matrix[-1]
    return ContinualReport(
        config.method,
        config.seed,
        config.config_hash(),
        exp.dataset_hash,
        [s.scene_id for s in streams],
        matrix,
        float(np.mean([m.accuracy for m in final])),
        tfr,
        defined,
        sizes,
        config.model_dump(mode="json"),
        time.perf_counter() - t0,
    )


def _normalizers(streams: Sequence[SceneStream], config: ExperimentConfig) -> list[PoseNormalizer]:
    if config.sars.normalization == "scene":
        return [scene_normalizer(s) for s in streams]
    g = PoseNormalizer.fit(np.concatenate([s.train.positions() for s in streams]))
    return [g] * len(streams)


def _train_joint(params: MlpParams, streams: Sequence[SceneStream], exp: Experiment) -> MlpParams:
    config = exp.config
    tc = config.train
    rng = rng_for(config.seed, "train", "joint")
    state = AdamState.for_params(params, lr=tc.lr, weight_decay=tc.weight_decay)
    total = tc.iterations_per_scene * len(streams)
    clamp = tc.pose_clamp_m
    sizes = np.array([s.n_train for s in streams])
    owner = np.repeat(np.arange(len(streams)), sizes)
    start = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    weights = LossWeights()
    for it in range(total):
        picks = rng.integers(0, sizes.sum(), size=tc.batch_frames)
        F, X = [], []
        for p in picks:
            k = owner[p]
            fs = streams[k].train
            F.append(fs.features[p - start[k]])
            X.append(fs.gt_coords[p - start[k]])
        res = composite_loss_and_grad(
            params, exp.centers, exp.bounds, np.concatenate(F), np.concatenate(X), clamp, weights,
            mode=config.model.head_mode,
        )
        if not math.isfinite(res.loss):
            raise TrainingDivergenceError(f"non-finite loss at iteration {it}", it)
        clip_grad_norm(res.grads, tc.grad_clip)
        state.lr = lr_at(config, it, total)
        try:
            adam_step(params, res.grads, state)
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(str(exc), it) from exc
    return params
