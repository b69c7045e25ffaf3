from __future__ import annotations

import glob
import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import VERDICTS

from contcal.cli import EXIT_OK, buffer_demo, main
from contcal.config import METHODS, ExperimentConfig, apply_overrides
from contcal.continual import build_experiment, run_continual
from contcal.geometry import Pose, Quaternion, kabsch_align, pose_to_transform, ransac_align
from contcal.model import COMPONENTS, GradcheckConfig, gradcheck
from contcal.sars import ReplayBuffer, ReplaySample, SarsConfig, dispersion_stats, select_dense_sample, try_insert
from contcal.scr_head import ClusterCenters, HeadOutput, ScaleBounds, softmax_with_temperature
from contcal.spdd import DistillWeights, prior_loss, select_active_set, spdd_loss, spdd_loss_and_grad

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.json"
DESK_SEEDS = range(5)


def verdict(n: int, ok: bool, detail: str) -> None:
    VERDICTS.append(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


def rotation_gap(Ra: np.ndarray, Rb: np.ndarray) -> float:
    # ||Ra - Rb||_F = 2 sqrt(2) sin(angle / 2); stable near zero, unlike arccos of the trace.
    return float(2 * np.arcsin(min(1.0, np.linalg.norm(Ra - Rb) / (2 * np.sqrt(2)))))


# -- 1. gradient oracle ---------------------------------------------------------------------------


def test_criterion_1_gradient_oracle():
    t = time.perf_counter()
    report = gradcheck(GradcheckConfig(K=8, hidden_dim=16, eps=1e-5), 0)
    elapsed = time.perf_counter() - t
    worst = max(max(e.values()) for e in report.values())
    ok = set(report) == set(COMPONENTS) and worst < 1e-4 and elapsed < 30
    verdict(1, ok, f"max rel err {worst:.2e} < 1e-4 over {len(report)} losses, {elapsed:.1f}s < 30s")


# -- 2. buffer invariants -------------------------------------------------------------------------


def _pairwise(buf: ReplayBuffer) -> np.ndarray:
    from contcal.geometry import hybrid_pose_distance

    n = len(buf)
    D = np.full((n, n), np.inf)
    for i in range(n):
        for j in range(i + 1, n):
            D[i, j] = D[j, i] = hybrid_pose_distance(buf.samples[i].pose, buf.samples[j].pose, buf.config.lam)
    return D


def _dense_oracle(buf: ReplayBuffer):
    D = _pairwise(buf)
    keys = []
    for i in range(len(buf)):
        row = np.sort(D[i])
        keys.append((row[0], row[1] if len(buf) > 2 else np.inf, buf.insertion_index[i]))
    return buf.samples[min(range(len(buf)), key=keys.__getitem__)].sample_id


def test_criterion_2_buffer_invariants():
    worst_gap, max_fill = np.inf, 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        cap, r = int(rng.integers(10, 60)), float(rng.uniform(0.05, 0.5))
        buf = ReplayBuffer(SarsConfig(cap, r, float(rng.uniform(0.2, 2.0))))
        buf.register_scene(0)
        for i in range(10_000):
            pose = Pose(rng.uniform(0, 1, 3), Quaternion.from_array(rng.normal(size=4)))
            try_insert(buf, ReplaySample(i, 0, pose, i))
            assert len(buf) <= cap
        max_fill = max(max_fill, len(buf) / cap)
        worst_gap = min(worst_gap, _pairwise(buf).min() - r)
    rng = np.random.default_rng(100)
    mismatches = 0
    for b in range(1000):
        n = int(rng.integers(2, 25))
        # Half the buffers sit on a lattice so ties on both distance keys are common.
        pts = rng.integers(0, 4, (n, 3)) / 3.0 if b % 2 else rng.uniform(0, 1, (n, 3))
        buf = ReplayBuffer(SarsConfig(100, 0.0, 1.0))
        buf.register_scene(0)
        for k, i in enumerate(rng.permutation(n)):
            buf._append(ReplaySample(int(i), 0, Pose(pts[i], Quaternion.identity()), k))
        mismatches += select_dense_sample(buf) != _dense_oracle(buf)
    ok = max_fill <= 1.0 and worst_gap >= 0 and mismatches == 0
    verdict(2, ok, f"10 seeds x 10k inserts: min spacing margin {worst_gap:.3g} >= 0; dense-sample oracle mismatches {mismatches}/1000")


# -- 3. distillation null / identity --------------------------------------------------------------


def test_criterion_3_distillation_identities():
    bounds = ScaleBounds()
    rng = np.random.default_rng(0)
    worst_null = worst_sum = worst_shift = 0.0
    for _ in range(200):
        B, K = int(rng.integers(1, 8)), int(rng.integers(2, 40))
        t = HeadOutput(rng.normal(0, 3, (B, K)), rng.normal(0, 1, (B, K, 3)), rng.normal(0, 2, (B, K)))
        s = HeadOutput(
            t.logits + rng.normal(0, 1, (B, K)), t.offsets + rng.normal(0, 1, (B, K, 3)), t.raw_scales + rng.normal(0, 1, (B, K))
        )
        c = ClusterCenters(rng.normal(0, 2, (K, 3)))
        w = DistillWeights(*rng.uniform(0, 3, 3), tau=float(rng.uniform(0.3, 5)), active_size=int(rng.integers(1, K + 1)))
        same = HeadOutput(t.logits.copy(), t.offsets.copy(), t.raw_scales.copy())
        null, _ = spdd_loss_and_grad(t, same, c, bounds, w)
        worst_null = max(worst_null, max(abs(v) for v in null.as_row()))
        l = spdd_loss(t, s, c, bounds, w)
        worst_sum = max(worst_sum, abs(l.total - (w.alpha * l.prior + w.beta_metric * l.metric + w.gamma * l.output)))
        a = select_active_set(softmax_with_temperature(t.logits[0], w.tau), w.active_size)
        shift = rng.uniform(-100, 100)
        base = prior_loss(t.logits[0], s.logits[0], a, w.tau)
        worst_shift = max(worst_shift, abs(prior_loss(t.logits[0] + shift, s.logits[0] + shift, a, w.tau) - base))
    ok = worst_null <= 1e-12 and worst_sum <= 1e-12 and worst_shift <= 1e-9
    verdict(3, ok, f"null {worst_null:.1e} <= 1e-12, weighted sum {worst_sum:.1e} <= 1e-12, shift {worst_shift:.1e} <= 1e-9")


# -- 4. pose solvers ------------------------------------------------------------------------------


def _random_transform(rng):
    return pose_to_transform(Pose(rng.uniform(-5, 5, 3), Quaternion.from_array(rng.normal(size=4))))


def test_criterion_4_pose_solvers():
    rng = np.random.default_rng(0)
    k_t = k_r = 0.0
    for _ in range(1000):
        T = _random_transform(rng)
        src = rng.normal(0, 1, (int(rng.integers(3, 40)), 3))
        est = kabsch_align(src, T.apply(src))
        k_t = max(k_t, float(np.linalg.norm(est.translation - T.translation)))
        k_r = max(k_r, rotation_gap(est.rotation, T.rotation))
    r_t = r_r = 0.0
    for trial in range(100):
        T = _random_transform(rng)
        src = rng.uniform(-2, 2, (60, 3))
        dst = T.apply(src)
        bad = rng.choice(60, 18, replace=False)
        dst[bad] = rng.uniform(-8, 8, (18, 3))
        est, _ = ransac_align(src, dst, 0.01, 128, rng_seed=trial)
        r_t = max(r_t, float(np.linalg.norm(est.translation - T.translation)))
        r_r = max(r_r, rotation_gap(est.rotation, T.rotation))
    ok = k_t <= 1e-9 and k_r <= 1e-9 and r_t <= 1e-6 and r_r <= 1e-6
    verdict(4, ok, f"kabsch {k_t:.1e} m / {k_r:.1e} rad <= 1e-9; ransac 30% outliers {r_t:.1e} m / {r_r:.1e} rad <= 1e-6")


# -- 5. dispersion --------------------------------------------------------------------------------


def test_criterion_5_dispersion():
    cfg = ExperimentConfig.model_validate(
        apply_overrides(ExperimentConfig().model_dump(mode="json"), ["scenes.clustering=0.9", "scenes.frames_per_scene=2000"])
    )
    t = time.perf_counter()
    ratios, spacing_ok = [], True
    for seed in range(20):
        sars, res = buffer_demo(cfg, seed)
        s_min, _ = dispersion_stats(sars)
        r_min, _ = dispersion_stats(res)
        spacing_ok &= s_min >= cfg.sars.radius
        ratios.append(s_min / r_min if r_min > 0 else np.inf)
    elapsed = time.perf_counter() - t
    med = float(np.median(ratios))
    ok = spacing_ok and med >= 2.0 and elapsed < 60
    verdict(5, ok, f"median min-spacing ratio sars/reservoir {med:.2f} >= 2 over 20 seeds, spacing >= r: {spacing_ok}, {elapsed:.1f}s < 60s")


# -- 6 / 7. desk-scale forgetting trend -----------------------------------------------------------


@pytest.fixture(scope="session")
def desk_runs():
    cfg = ExperimentConfig.model_validate(json.loads(DESK_CONFIG.read_text()))
    t = time.perf_counter()
    runs = {m: [] for m in METHODS if m != "joint"}
    for seed in DESK_SEEDS:
        c = cfg.with_(seed=seed)
        exp = build_experiment(c)
        for m in runs:
            runs[m].append(run_continual(c.with_(method=m), exp))
    return runs, time.perf_counter() - t


def _median(runs, f) -> float:
    return float(np.median([f(r) for r in runs]))


def test_criterion_6_forgetting_trend(desk_runs):
    runs, elapsed = desk_runs
    acc = {m: _median(r, lambda x: x.final_average_accuracy) for m, r in runs.items()}
    tfr = {m: _median(r, lambda x: x.tfr) for m, r in runs.items()}
    first = {m: _median(r, lambda x: x.final_accuracies()[0]) for m, r in runs.items()}
    checks = {
        "ours > sars_only": acc["ours"] > acc["sars_only"],
        "sars_only > reservoir": acc["sars_only"] > acc["reservoir_replay"],
        "reservoir > finetune": acc["reservoir_replay"] > acc["finetune"],
        "finetune scene-1 < 15": first["finetune"] < 15,
        "ours scene-1 > 60": first["ours"] > 60,
        "TFR(ours) < TFR(reservoir)/2": tfr["ours"] < 0.5 * tfr["reservoir_replay"],
        "runtime < 20 min": elapsed < 20 * 60,
    }
    failed = [k for k, v in checks.items() if not v]
    summary = " ".join(f"{m}={acc[m]:.1f}/tfr{tfr[m]:.1f}" for m in runs)
    detail = f"final acc/TFR medians {summary}; scene-1 ft={first['finetune']:.1f} ours={first['ours']:.1f}; {elapsed / 60:.1f} min"
    verdict(6, not failed, detail + (f"; failed: {', '.join(failed)}" if failed else ""))


def test_criterion_7_ablation_direction(desk_runs):
    runs, _ = desk_runs
    by_seed = lambda m: np.array([r.final_average_accuracy for r in runs[m]])
    d_spdd = float(np.median(by_seed("ours") - by_seed("sars_only")))
    d_sars = float(np.median(by_seed("sars_only") - by_seed("reservoir_replay")))
    verdict(7, d_spdd >= 0 and d_sars > 0, f"median delta ours-sars_only {d_spdd:+.2f} >= 0, sars_only-reservoir {d_sars:+.2f} > 0")


# -- 8. determinism -------------------------------------------------------------------------------


SMALL = {
    "scenes": {"n_scenes": 2, "landmarks": 120, "frames_per_scene": 80, "points_per_frame": 16},
    "model": {"hidden_dim": 16, "K": 8},
    "train": {"iterations_per_scene": 40, "batch_frames": 2},
    "eval": {"ransac_iterations": 8},
}


def _hashes(directory: Path) -> dict[str, str]:
    return {os.path.basename(p): hashlib.sha256(Path(p).read_bytes()).hexdigest() for p in sorted(glob.glob(str(directory / "*")))}


def _run_all_commands(root: Path, cfg: Path, capsys) -> tuple[dict[str, str], str]:
    out = root / "out"
    assert main(["run", "--config", str(cfg), "--method", "all", "--seed", "0", "1", "--out", str(out)]) == EXIT_OK
    reports = sorted(glob.glob(str(out / "*.report.json")))
    assert main(["report", *reports, "--csv", str(out / "table.csv")]) == EXIT_OK
    assert main(["buffer-demo", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    assert main(["gradcheck", "--seed", "4"]) == EXIT_OK
    return _hashes(out), capsys.readouterr().out


def test_criterion_8_determinism(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    a, out_a = _run_all_commands(tmp_path / "a", cfg, capsys)
    b, out_b = _run_all_commands(tmp_path / "b", cfg, capsys)
    same_stdout = out_a.replace(str(tmp_path / "a"), "") == out_b.replace(str(tmp_path / "b"), "")
    ok = a == b and len(a) > 0 and same_stdout
    verdict(8, ok, f"{len(a)} output files hash-identical across reruns: {a == b}; stdout identical: {same_stdout}")
