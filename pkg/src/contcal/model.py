"""Two-layer perceptron regressor producing cluster-center head outputs.

Everything is plain numpy with hand-written backward passes so that the
whole training objective can be verified against finite differences.
"""

from __future__ import annotations

import copy
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError, InvalidInputError, TrainingDivergenceError
from .scr_head import ClusterCenters, HeadGrads, HeadOutput, ScaleBounds, head_backward, predict_coordinate
from .spdd import DistillWeights, spdd_loss_and_grad

BLOCKS = ("W1", "b1", "W2", "b2")
CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    K: int
    version: int = 0

    @property
    def feature_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[1]

    def blocks(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in BLOCKS}

    def copy(self) -> MlpParams:
        return copy.deepcopy(self)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(b)) for b in self.blocks().values())

    def save(self, path) -> None:
        """Structured-text checkpoint; floats are written with ``repr`` so a
        reload is bit-exact."""
        doc = {
            "format": "contcal-mlp",
            "version": CHECKPOINT_VERSION,
            "K": self.K,
            "blocks": {
                name: {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}
                for name, a in self.blocks().items()
            },
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path) -> MlpParams:
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("format") != "contcal-mlp" or doc.get("version") != CHECKPOINT_VERSION:
            raise InvalidInputError(f"unsupported checkpoint {doc.get('format')!r} v{doc.get('version')}")
        arrays = {
            name: np.array(b["data"], dtype=float).reshape(b["shape"]) for name, b in doc["blocks"].items()
        }
        return cls(K=doc["K"], **arrays)


Gradients = MlpParams


@dataclass
class ForwardCache:
    features: np.ndarray
    hidden: np.ndarray
    params_id: int
    version: int


@dataclass
class AdamState:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: MlpParams, **kwargs) -> AdamState:
        st = cls(**kwargs)
        st.m = {k: np.zeros_like(a) for k, a in params.blocks().items()}
        st.v = {k: np.zeros_like(a) for k, a in params.blocks().items()}
        return st


def init_params(feature_dim: int, hidden_dim: int, K: int, rng_seed: int | np.random.SeedSequence = 0) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    Zero raw-scale biases make every clamped scale start at exactly 1.
    """
    if min(feature_dim, hidden_dim, K) < 1:
        raise InvalidInputError("dimensions must be >= 1")
    rng = np.random.default_rng(rng_seed)
    a1 = 1.0 / np.sqrt(feature_dim)
    a2 = 1.0 / np.sqrt(hidden_dim)
    return MlpParams(
        W1=rng.uniform(-a1, a1, (feature_dim, hidden_dim)),
        b1=np.zeros(hidden_dim),
        W2=rng.uniform(-a2, a2, (hidden_dim, 5 * K)),
        b2=np.zeros(5 * K),
        K=K,
    )


def split_head(raw: np.ndarray, K: int) -> HeadOutput:
    lead = raw.shape[:-1]
    return HeadOutput(raw[..., :K], raw[..., K : 4 * K].reshape(lead + (K, 3)), raw[..., 4 * K :])


def forward(params: MlpParams, features: np.ndarray) -> tuple[HeadOutput, ForwardCache]:
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[1] != params.feature_dim:
        raise InvalidInputError(f"expected (B, {params.feature_dim}) features, got {features.shape}")
    h = np.tanh(features @ params.W1 + params.b1)
    out = split_head(h @ params.W2 + params.b2, params.K)
    return out, ForwardCache(features, h, id(params), params.version)


def predict(params: MlpParams, features: np.ndarray) -> HeadOutput:
    return forward(params, features)[0]


def backward(params: MlpParams, cache: ForwardCache, head_grads: HeadGrads) -> Gradients:
    """Parameter gradients given gradients w.r.t. the head outputs."""
    if cache.params_id != id(params) or cache.version != params.version:
        raise ContractViolationError("forward cache does not belong to the current parameters")
    B = cache.features.shape[0]
    G = np.concatenate(
        [head_grads.logits.reshape(B, -1), head_grads.offsets.reshape(B, -1), head_grads.raw_scales.reshape(B, -1)],
        axis=1,
    )
    dh = G @ params.W2.T
    da = dh * (1.0 - cache.hidden**2)
    return Gradients(
        W1=cache.features.T @ da,
        b1=da.sum(axis=0),
        W2=cache.hidden.T @ G,
        b2=G.sum(axis=0),
        K=params.K,
    )


def pose_loss(pred_coords: np.ndarray, gt_coords: np.ndarray, clamp: float) -> float:
    """Mean over points of ``min(||pred - gt||_1, clamp)``."""
    return pose_loss_and_grad(pred_coords, gt_coords, clamp)[0]


def pose_loss_and_grad(pred_coords: np.ndarray, gt_coords: np.ndarray, clamp: float) -> tuple[float, np.ndarray]:
    if not clamp > 0:
        raise InvalidInputError("clamp must be positive")
    d = np.asarray(pred_coords, dtype=float) - np.asarray(gt_coords, dtype=float)
    d = d.reshape(-1, 3)
    l1 = np.abs(d).sum(axis=1)
    n = len(d)
    loss = float(np.minimum(l1, clamp).mean()) if n else 0.0
    live = (l1 < clamp)[:, None]
    return loss, np.where(live, np.sign(d), 0.0) / max(n, 1)


def global_norm(grads: Gradients) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.blocks().values())))


def clip_grad_norm(grads: Gradients, max_norm: float) -> float:
    """Scale ``grads`` in place so their global norm is at most ``max_norm``;
    returns the pre-clip norm."""
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        s = max_norm / norm
        for name in BLOCKS:
            setattr(grads, name, getattr(grads, name) * s)
    return norm


def adam_step(params: MlpParams, grads: Gradients, state: AdamState) -> tuple[MlpParams, AdamState]:
    """One AdamW update (decoupled weight decay, bias-corrected moments).

    Updates ``params`` and ``state`` in place and returns both.
    """
    gblocks = grads.blocks()
    for name, g in gblocks.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient in block {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in gblocks.items():
        p = getattr(params, name)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * update
    params.version += 1
    return params, state


# -- composite objective ------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    pose_new: float = 1.0
    pose_replay: float = 1.0
    distill: DistillWeights | None = None


@dataclass
class StepResult:
    loss: float
    pose_new: float
    pose_replay: float
    distill: object
    grads: Gradients


def composite_loss_and_grad(
    params: MlpParams,
    centers: ClusterCenters,
    bounds: ScaleBounds,
    new_features: np.ndarray,
    new_coords: np.ndarray,
    pose_clamp: float,
    weights: LossWeights,
    replay_features: np.ndarray | None = None,
    replay_coords: np.ndarray | None = None,
    teacher_out: HeadOutput | None = None,
    mode: str = "blend",
) -> StepResult:
    """Pose loss on the new-scene batch plus, when a replay batch is given,
    a ground-truth pose term and/or distillation against ``teacher_out``.

    Both batches go through one forward pass; ``teacher_out`` must have been
    computed separately (it is a constant here).
    """
    nb = len(new_features)
    feats = new_features if replay_features is None else np.concatenate([new_features, replay_features])
    out, cache = forward(params, feats)
    coords = predict_coordinate(out, centers, bounds, mode)
    upstream = np.zeros_like(coords)

    l_new, g_new = pose_loss_and_grad(coords[:nb], new_coords, pose_clamp)
    upstream[:nb] = weights.pose_new * g_new
    total = weights.pose_new * l_new

    l_rep = 0.0
    distill = None
    extra = None
    if replay_features is not None and len(replay_features):
        if replay_coords is not None and weights.pose_replay:
            l_rep, g_rep = pose_loss_and_grad(coords[nb:], replay_coords, pose_clamp)
            upstream[nb:] = weights.pose_replay * g_rep
            total += weights.pose_replay * l_rep
        if teacher_out is not None and weights.distill is not None:
            distill, g_dist = spdd_loss_and_grad(teacher_out, out[nb:], centers, bounds, weights.distill, mode)
            total += distill.total
            extra = g_dist

    hg = head_backward(out, centers, bounds, upstream, mode)
    if extra is not None:
        hg.logits[nb:] += extra.logits
        hg.offsets[nb:] += extra.offsets
        hg.raw_scales[nb:] += extra.raw_scales
    grads = backward(params, cache, hg)
    return StepResult(total, l_new, l_rep, distill, grads)


# -- gradient check -------------------------------------------------------------


@dataclass(frozen=True)
class GradcheckConfig:
    feature_dim: int = 12
    hidden_dim: int = 16
    K: int = 8
    batch_new: int = 6
    batch_replay: int = 6
    eps: float = 1e-5
    threshold: float = 1e-4
    pose_clamp: float = 50.0
    tau: float = 2.0
    active_size: int = 5
    mode: str = "blend"
    zero_weights: bool = False
    corrupt: bool = False


COMPONENTS = ("pose", "prior", "metric", "out", "total")


def _component_weights(name: str, cfg: GradcheckConfig) -> LossWeights:
    z = 0.0 if cfg.zero_weights else 1.0

    def dw(a, b, g):
        return DistillWeights(alpha=a * z, beta_metric=b * z, gamma=g * z, tau=cfg.tau, active_size=cfg.active_size)

    if name == "pose":
        return LossWeights(pose_new=z, pose_replay=0.0, distill=None)
    if name == "prior":
        return LossWeights(0.0, 0.0, dw(1, 0, 0))
    if name == "metric":
        return LossWeights(0.0, 0.0, dw(0, 1, 0))
    if name == "out":
        return LossWeights(0.0, 0.0, dw(0, 0, 1))
    return LossWeights(z, z, dw(1, 1, 1))


def _gradcheck_instance(cfg: GradcheckConfig, seed: int):
    from .spdd import select_active_set
    from .scr_head import softmax_with_temperature, clamp_scale

    for attempt in range(100):
        rng = np.random.default_rng([seed, attempt])
        student = init_params(cfg.feature_dim, cfg.hidden_dim, cfg.K, rng.integers(2**32))
        teacher = init_params(cfg.feature_dim, cfg.hidden_dim, cfg.K, rng.integers(2**32))
        for p in (student, teacher):
            p.b1 = rng.normal(0, 0.3, p.b1.shape)
            p.b2 = rng.normal(0, 0.3, p.b2.shape)
        centers = ClusterCenters(rng.normal(0, 2.0, (cfg.K, 3)))
        bounds = ScaleBounds()
        xn = rng.normal(0, 1, (cfg.batch_new, cfg.feature_dim))
        xr = rng.normal(0, 1, (cfg.batch_replay, cfg.feature_dim))
        yn = rng.normal(0, 2, (cfg.batch_new, 3))
        yr = rng.normal(0, 2, (cfg.batch_replay, 3))
        t_out = predict(teacher, xr)
        # Stay clear of every non-differentiable point of the objective.
        s_all = predict(student, np.concatenate([xn, xr]))
        xs = predict_coordinate(s_all, centers, bounds, cfg.mode)
        l1n = np.abs(xs[: cfg.batch_new] - yn).sum(1)
        l1r = np.abs(xs[cfg.batch_new :] - yr).sum(1)
        d_coord = xs[cfg.batch_new :] - predict_coordinate(t_out, centers, bounds, cfg.mode)
        act = select_active_set(softmax_with_temperature(t_out.logits, cfg.tau), cfg.active_size)
        s_rep = s_all[cfg.batch_new :]
        ws = clamp_scale(np.take_along_axis(s_rep.raw_scales, act, -1), bounds)
        wt = clamp_scale(np.take_along_axis(t_out.raw_scales, act, -1), bounds)
        gap = np.take_along_axis(s_rep.offsets, act[..., None], -2) / ws[..., None] - np.take_along_axis(
            t_out.offsets, act[..., None], -2
        ) / wt[..., None]
        margins = [
            np.abs(np.concatenate([xs[: cfg.batch_new] - yn, xs[cfg.batch_new :] - yr])).min(),
            np.abs(np.concatenate([l1n, l1r]) - cfg.pose_clamp).min(),
            np.abs(d_coord).min(),
            np.abs(gap).min(),
            np.abs(clamp_scale(s_all.raw_scales, bounds) - 1.0 / bounds.q_min).min(),
        ]
        if min(margins) > 1e-3:
            return student, t_out, centers, bounds, xn, yn, xr, yr
    raise RuntimeError("could not draw a kink-free gradcheck instance")


def gradcheck(cfg: GradcheckConfig = GradcheckConfig(), rng_seed: int = 0) -> dict[str, dict[str, float]]:
    """Analytic vs central-difference gradients of every loss component.

    Returns ``{component: {block: relative_error}}`` where the relative error
    of a block is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``.
    With ``cfg.corrupt`` the analytic gradient of one ``W1`` entry is shifted
    by 1e-3 as a negative control.
    """
    params, t_out, centers, bounds, xn, yn, xr, yr = _gradcheck_instance(cfg, rng_seed)
    report: dict[str, dict[str, float]] = {}
    for comp in COMPONENTS:
        w = _component_weights(comp, cfg)

        def loss_at(p: MlpParams) -> StepResult:
            return composite_loss_and_grad(
                p, centers, bounds, xn, yn, cfg.pose_clamp, w, xr, yr, t_out, cfg.mode
            )

        analytic = loss_at(params).grads
        if cfg.corrupt:
            analytic.W1[0, 0] += 1e-3
        errs = {}
        for name in BLOCKS:
            a = getattr(analytic, name)
            base = getattr(params, name)
            num = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                p = params.copy()
                orig = base[idx]
                getattr(p, name)[idx] = orig + cfg.eps
                lp = loss_at(p).loss
                getattr(p, name)[idx] = orig - cfg.eps
                lm = loss_at(p).loss
                num[idx] = (lp - lm) / (2 * cfg.eps)
            scale = max(np.abs(a).max(), np.abs(num).max())
            errs[name] = float(np.abs(a - num).max() / scale) if scale > 0 else 0.0
        report[comp] = errs
    return report


def gradcheck_passes(report: dict[str, dict[str, float]], threshold: float = 1e-4) -> bool:
    return all(max(errs.values()) < threshold for errs in report.values())


def format_gradcheck(report: dict[str, dict[str, float]], threshold: float = 1e-4) -> str:
    buf = io.StringIO()
    buf.write(f"{'component':<10} {'worst block':<12} {'max rel err':>12}  status\n")
    for comp, errs in report.items():
        block = max(errs, key=errs.get)
        err = errs[block]
        buf.write(f"{comp:<10} {block:<12} {err:>12.3e}  {'PASS' if err < threshold else 'FAIL'}\n")
    return buf.getvalue()
