"""Command-line entry point: ``contcal run|gradcheck|buffer-demo|report``.

Exit codes: 0 success, 1 check failure, 2 usage or config error, 3 training
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Sequence

from pydantic import ValidationError

from .config import METHODS, ExperimentConfig, apply_overrides
from .errors import InsufficientSamplesError, TrainingDivergenceError

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3

ENV_OUT = "CONTCAL_OUT_DIR"
ENV_JOBS = "CONTCAL_JOBS"

log = logging.getLogger("contcal")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_errors(exc: ValidationError) -> str:
    lines = []
    for e in exc.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"  {path}: {e['msg']}")
    return "invalid config:\n" + "\n".join(lines)


def _load_config(path: str, overrides: Sequence[str]) -> ExperimentConfig:
    with open(path) as fh:
        doc = json.load(fh)
    return ExperimentConfig.model_validate(apply_overrides(doc, list(overrides)))


# -- run ---------------------------------------------------------------------


def _run_one(doc: dict, out_dir: str) -> tuple[str, str, float, float, bool]:
    from .continual import run_continual

    cfg = ExperimentConfig.model_validate(doc)
    rep = run_continual(cfg)
    rep.write(out_dir)
    return rep.file_stem(), cfg.method, rep.final_average_accuracy, rep.tfr, rep.tfr_defined


def _run_seed_serial(cfg: ExperimentConfig, methods: Sequence[str], out_dir: str):
    from .continual import build_experiment, run_continual

    exp = build_experiment(cfg)
    out = []
    for m in methods:
        rep = run_continual(cfg.with_(method=m), exp)
        rep.write(out_dir)
        out.append((rep.file_stem(), m, rep.final_average_accuracy, rep.tfr, rep.tfr_defined))
    return out


def cmd_run(args) -> int:
    try:
        cfg = _load_config(args.config, args.set)
    except ValidationError as exc:
        print(_config_errors(exc), file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    methods = list(METHODS) if args.method == "all" else [args.method or cfg.method]
    seeds = args.seed if args.seed else [cfg.seed]
    out_dir = args.out or os.environ.get(ENV_OUT) or "."
    jobs = args.jobs or int(os.environ.get(ENV_JOBS, "1"))
    results = []
    try:
        if jobs <= 1:
            for s in seeds:
                results.extend(_run_seed_serial(cfg.with_(seed=s), methods, out_dir))
        else:
            docs = [cfg.with_(seed=s, method=m).model_dump(mode="json") for s in seeds for m in methods]
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_run_one, docs, [out_dir] * len(docs)))
    except TrainingDivergenceError as exc:
        print(f"training diverged at iteration {exc.iteration}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    for stem, m, acc, tfr, defined in results:
        tfr_s = f"{tfr:.2f}" if defined else "n/a"
        print(f"{stem}: method={m} final_acc={acc:.2f} tfr={tfr_s}")
    return EXIT_OK


# -- gradcheck ------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    from .model import COMPONENTS, GradcheckConfig, format_gradcheck, gradcheck

    if not 1 <= args.k <= 16:
        print("--k must lie in [1, 16]", file=sys.stderr)
        return EXIT_USAGE
    cfg = GradcheckConfig(K=args.k, hidden_dim=args.hidden, active_size=min(5, args.k), corrupt=args.corrupt)
    report = gradcheck(cfg, args.seed)
    print(format_gradcheck(report, cfg.threshold), end="")
    bad = [(c, b, e) for c in COMPONENTS for b, e in report[c].items() if not e < cfg.threshold]
    if bad:
        c, b, e = max(bad, key=lambda x: x[2])
        print(f"gradcheck failed: component {c} block {b} rel err {e:.3e}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


# -- buffer demo ------------------------------------------------------------------


def buffer_demo(cfg: ExperimentConfig, seed: int):
    """Stream one clustered trajectory through SARS and reservoir buffers of
    equal capacity. Returns ``(sars_buffer, reservoir_buffer)``."""
    from .geometry import PoseNormalizer
    from .sars import ReplayBuffer, ReplaySample, SarsConfig, reservoir_insert, try_insert
    from .seeding import rng_for, sub_seed
    from .sim import generate_scene, generate_trajectory, scene_box

    sc = cfg.scenes
    scene = generate_scene(
        0, scene_box(0, sc.box_size, sc.spacing), sc.landmarks, sub_seed(seed, "scene", 0), sc.code_dim, sc.code_noise, sc.style_scale
    )
    traj = generate_trajectory(
        scene, sc.frames_per_scene, sc.clustering, sub_seed(seed, "trajectory", 0), sc.orbit_fraction, jitter_deg=sc.jitter_deg
    )
    norm = PoseNormalizer.fit([p.position for p in traj.poses])
    cap = math.ceil(cfg.sars.capacity_fraction * len(traj))
    sars = ReplayBuffer(SarsConfig(cap, cfg.sars.radius, cfg.sars.lam, cfg.sars.radius_scope))
    res = ReplayBuffer(SarsConfig(cap, 0.0, cfg.sars.lam, cfg.sars.radius_scope))
    for b in (sars, res):
        b.register_scene(0)
    rng = rng_for(seed, "reservoir", 0)
    for i, p in enumerate(traj.poses):
        s = ReplaySample(i, 0, norm(p), i)
        try_insert(sars, s)
        reservoir_insert(res, s, i, rng)
    return sars, res


def cmd_buffer_demo(args) -> int:
    from .sars import dispersion_stats

    try:
        cfg = _load_config(args.config, args.set)
    except ValidationError as exc:
        print(_config_errors(exc), file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    seed = cfg.seed if args.seed is None else args.seed
    sars, res = buffer_demo(cfg, seed)
    out_dir = args.out or os.environ.get(ENV_OUT) or "."
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "buffer.csv")
    with open(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "sample_id", "px", "py", "pz", "qw", "qx", "qy", "qz"])
        for name, buf in (("sars", sars), ("reservoir", res)):
            for s in buf.samples:
                w.writerow([name, s.sample_id, *(repr(v) for v in s.pose.to_row())])
    stats = {}
    for name, buf in (("sars", sars), ("reservoir", res)):
        try:
            stats[name] = dispersion_stats(buf)
        except InsufficientSamplesError:
            stats[name] = (float("nan"), float("nan"))
        print(f"{name:<10} size={len(buf):4d} min_pairwise={stats[name][0]:.4f} mean_nn={stats[name][1]:.4f}")
    r = stats["reservoir"][0]
    ratio = stats["sars"][0] / r if r > 0 else float("inf")
    print(f"min_pairwise ratio sars/reservoir = {ratio:.3f}")
    print(f"wrote {path}")
    return EXIT_OK


# -- report ---------------------------------------------------------------------


def _label(rep) -> str:
    return f"{rep.method}/s{rep.seed}"


def report_rows(reports) -> list[list[str]]:
    """Table rows: header, per-scene ``t / r / acc`` rows, final accuracy and
    (for two or more scenes) TFR."""
    scenes = reports[0].scene_ids
    rows = [["metric", *(_label(r) for r in reports)]]

    def fmt(v, spec):
        return "inf" if not math.isfinite(v) else format(v, spec)

    for j, sid in enumerate(scenes):
        for key, spec, title in (
            ("median_t_err_cm", ".2f", "t, cm"),
            ("median_r_err_deg", ".2f", "r, deg"),
            ("accuracy", ".1f", "Acc"),
        ):
            rows.append([f"scene {sid} {title}", *(fmt(getattr(r.matrix[-1][j], key), spec) for r in reports)])
    rows.append(["final avg Acc", *(f"{r.final_average_accuracy:.1f}" for r in reports)])
    if len(scenes) >= 2:
        rows.append(["TFR", *(f"{r.tfr:.2f}" if r.tfr_defined else "n/a" for r in reports)])
    return rows


def cmd_report(args) -> int:
    from .continual import ContinualReport

    reports = []
    for p in args.paths:
        try:
            with open(p) as fh:
                reports.append(ContinualReport.from_dict(json.load(fh)))
        except (OSError, ValueError, KeyError) as exc:
            print(f"cannot read report {p}: {exc}", file=sys.stderr)
            return EXIT_USAGE
    scene_sets = {tuple(r.scene_ids) for r in reports}
    if len(scene_sets) != 1:
        print(f"reports cover different scene sets: {sorted(scene_sets)}", file=sys.stderr)
        return EXIT_USAGE
    rows = report_rows(reports)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        print("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
    if args.csv:
        with open(args.csv, "w") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="contcal", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run continual experiments")
    r.add_argument("--config", required=True)
    r.add_argument("--method", choices=[*METHODS, "all"], help="defaults to the method in the config")
    r.add_argument("--seed", type=int, nargs="+")
    r.add_argument("--jobs", type=int, default=0)
    r.add_argument("--out")
    r.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gradcheck", help="finite-difference check of all loss gradients")
    g.add_argument("--k", type=int, default=8)
    g.add_argument("--hidden", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt", action="store_true", help="perturb one analytic gradient (negative control)")
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("buffer-demo", help="compare SARS and reservoir buffers on one trajectory")
    b.add_argument("--config", required=True)
    b.add_argument("--seed", type=int)
    b.add_argument("--out")
    b.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE")
    b.set_defaults(func=cmd_buffer_demo)

    rp = sub.add_parser("report", help="tabulate report files")
    rp.add_argument("paths", nargs="+")
    rp.add_argument("--csv")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
