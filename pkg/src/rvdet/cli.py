"""Command-line entry point: simulate, detect, eval, losscheck, bench.

Exit codes: 0 success, 1 validation failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .boxgeom import corners
from .errors import InvalidInputError
from .evalmetrics import (
    DEFAULT_BUCKETS,
    average_precision,
    calibration_curve,
    ks_uniform,
    corner_cdf_values,
    match_detections,
    pr_curve,
    range_bucketed_ap,
    write_report,
    write_xy,
)
from .lidarsim import GENERATORS, Scene, encode_targets, oracle_predictions, raycast_sweep, wall_scene
from .losses import check_loss_gradient, quadratic_self_test
from .mixture import read_predictions, write_predictions
from .nms import read_detections, write_detections
from .pipeline import PipelineConfig, detect
from .rangeview import SensorConfig, build_range_image, image_points, read_sweep, write_sweep

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

SWEEP_FILE = "sweep.bin"
SCENE_FILE = "scene.json"
TARGETS_FILE = "targets.npz"
DETECTIONS_FILE = "detections.bin"
PREDICTIONS_FILE = "predictions.bin"

GRADIENT_TOLERANCE = 1e-4
QUADRATIC_TOLERANCE = 1e-9
BENCH_BUDGET_MS = 50.0


class UsageError(Exception):
    pass


# -- configuration -------------------------------------------------------------


def load_config(args) -> PipelineConfig:
    """Defaults, then the config file, then explicit flags."""
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    over = {}
    if getattr(args, "sensor", None):
        over["sensor"] = SensorConfig.load(args.sensor)
    for flag, key in (("bin_size", "bin_size"), ("iterations", "iterations"), ("threshold", "class_threshold"),
                      ("nms_mode", "nms_mode"), ("fixed_threshold", "nms_fixed_threshold"),
                      ("backend", "backend"), ("seed", "seed")):
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    if getattr(args, "no_fusion", False):
        over["fusion"] = False
    noise = {}
    for flag in ("center_noise", "orientation_noise", "dimension_noise", "sigma_factor"):
        v = getattr(args, flag, None)
        if v is not None:
            noise[{"center_noise": "center", "orientation_noise": "orientation",
                   "dimension_noise": "dimension", "sigma_factor": "sigma_factor"}[flag]] = v
    if noise:
        over["noise"] = replace(cfg.noise, **noise)
    return replace(cfg, **over) if over else cfg


def _workers(args) -> int:
    w = getattr(args, "workers", None)
    return max(1, w if w else (os.cpu_count() or 1))


def _ordered_map(fn, items, workers: int):
    # results come back in input order regardless of completion order
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def _frame_dirs(paths) -> list:
    out = []
    for p in map(Path, paths):
        if (p / SWEEP_FILE).exists():
            out.append(p)
        elif p.is_dir():
            subs = sorted(d for d in p.iterdir() if (d / SWEEP_FILE).exists())
            if not subs:
                raise FileNotFoundError(f"no frames under {p}")
            out.extend(subs)
        else:
            raise FileNotFoundError(f"{p}: no such frame directory")
    return out


# -- simulate ------------------------------------------------------------------


def _make_scene(args, cfg: PipelineConfig, index: int) -> Scene:
    if args.scene:
        return Scene.load(args.scene, cfg.classes)
    name = args.generator
    if name == "empty":
        return Scene((), None, {"kind": "empty"})
    if name == "wall":
        return wall_scene(cfg.sensor)
    if name == "random":
        if args.seed is None:
            raise UsageError("--seed is required for the random generator")
        return GENERATORS["random"](args.seed + index, cfg.sensor, classes=cfg.classes)
    return GENERATORS[name]()


def cmd_simulate(args) -> int:
    cfg = load_config(args)
    if args.range_noise > 0 and args.seed is None:
        raise UsageError("--seed is required with --range-noise")
    out = Path(args.out)
    for i in range(args.frames):
        scene = _make_scene(args, cfg, i)
        frame_seed = None if args.seed is None else args.seed + i
        sweep = raycast_sweep(scene, cfg.sensor, args.range_noise, frame_seed)
        d = out / f"frame_{i:04d}"
        d.mkdir(parents=True, exist_ok=True)
        write_sweep(d / SWEEP_FILE, sweep)
        scene.save(d / SCENE_FILE, cfg.classes)
        tg = encode_targets(build_range_image(sweep, cfg.sensor), cfg.sensor, scene)
        np.savez(d / TARGETS_FILE, rows=tg.points.rows, cols=tg.points.cols, labels=tg.labels,
                 object_ids=tg.object_ids, boxes=tg.boxes)
        print(f"{d.name}: {len(scene.objects)} objects, {len(sweep)} returns")
    cfg.save(out / "config.json")
    return EXIT_OK


# -- detect --------------------------------------------------------------------


def _detect_frame(job):
    frame, cfg, index, predictions, emit = job
    sweep = read_sweep(frame / SWEEP_FILE)
    img = build_range_image(sweep, cfg.sensor)
    if predictions is not None:
        rows, cols, raw, C, K = read_predictions(predictions)
        pts = image_points(img, cfg.sensor)
        if C != cfg.C or list(K) != cfg.K:
            raise InvalidInputError(f"{predictions}: head layout C={C}, K={K} does not match the config")
        if not (np.array_equal(rows, pts.rows) and np.array_equal(cols, pts.cols)):
            raise InvalidInputError(f"{predictions}: cells do not match the sweep's occupied cells")
    else:
        scene = Scene.load(frame / SCENE_FILE, cfg.classes)
        tg = encode_targets(img, cfg.sensor, scene)
        pts = tg.points
        seed = 0 if cfg.seed is None else cfg.seed + index
        raw = oracle_predictions(tg, cfg.noise, cfg.C, cfg.K, seed)
        if emit:
            write_predictions(frame / PREDICTIONS_FILE, pts.rows, pts.cols, raw, cfg.C, cfg.K)
    res = detect(pts, raw, cfg)
    write_detections(frame / DETECTIONS_FILE, res.detections, index, cfg.class_names)
    return frame.name, len(pts), len(res.detections), res.timings


def cmd_detect(args) -> int:
    cfg = load_config(args)
    frames = _frame_dirs(args.frames)
    noisy = cfg.noise.center > 0 or cfg.noise.orientation > 0 or cfg.noise.dimension > 0
    if args.predictions is None and noisy and cfg.seed is None:
        raise UsageError("--seed is required for noisy oracle predictions")
    if args.predictions is not None and len(frames) != 1:
        raise UsageError("--predictions applies to a single frame")
    jobs = [(f, cfg, i, args.predictions, args.emit_predictions) for i, f in enumerate(frames)]
    for name, n, ndet, t in _ordered_map(_detect_frame, jobs, _workers(args)):
        stages = " ".join(f"{k}={1e3 * v:.2f}ms" for k, v in t.items())
        print(f"{name}: points={n} detections={ndet} {stages}")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------


def _eval_frame(job):
    frame, cfg = job
    scene = Scene.load(frame / SCENE_FILE, cfg.classes)
    _, _, dets = read_detections(frame / DETECTIONS_FILE)
    per_class = {}
    calib = ([], [], [])
    for c, info in enumerate(cfg.classes, start=1):
        gts = [corners(o.box) for o in scene.objects if o.class_id == c]
        mine = [d for d in dets if d.class_id == c]
        m = match_detections(mine, gts, info.iou_threshold)
        per_class[c] = m
        for i, g in enumerate(m.det_gt):
            if g >= 0:
                calib[0].append(mine[i].corners)
                calib[1].append(mine[i].sigma)
                calib[2].append(gts[g])
    return per_class, calib


def cmd_eval(args) -> int:
    cfg = load_config(args)
    frames = _frame_dirs(args.frames)
    results = _ordered_map(_eval_frame, [(f, cfg) for f in frames], _workers(args))
    metrics = {"frames": len(frames)}
    plot_dir = Path(args.emit_plot_data) if args.emit_plot_data else None
    if plot_dir:
        plot_dir.mkdir(parents=True, exist_ok=True)
    for c, info in enumerate(cfg.classes, start=1):
        matches = [r[0][c] for r in results]
        tag = f"{info.name}_iou{info.iou_threshold:g}"
        metrics[f"num_gt_{info.name}"] = sum(m.num_gt for m in matches)
        metrics[f"num_det_{info.name}"] = sum(len(m.tp) for m in matches)
        metrics[f"ap_{tag}"] = average_precision(matches, args.points)
        for (lo, hi), ap in range_bucketed_ap(matches, DEFAULT_BUCKETS, args.points).items():
            metrics[f"ap_{tag}_range_{lo:g}_{hi:g}"] = ap
        if plot_dir:
            num_gt = sum(m.num_gt for m in matches)
            scores = np.concatenate([m.scores for m in matches])
            tp = np.concatenate([m.tp for m in matches])
            if num_gt and scores.size:
                rec, prec = pr_curve(scores, tp, num_gt)
            else:
                rec, prec = np.zeros(0), np.zeros(0)
            write_xy(plot_dir / f"pr_{info.name}.txt", rec, prec, "recall precision")
    pc = [x for r in results for x in r[1][0]]
    ps = [x for r in results for x in r[1][1]]
    pg = [x for r in results for x in r[1][2]]
    curve = calibration_curve(np.array(pc).reshape(-1, 8), np.array(ps), np.array(pg).reshape(-1, 8))
    metrics["calibration_samples"] = curve.samples
    metrics["calibration_max_deviation"] = curve.max_deviation() if curve.samples else None
    metrics["calibration_ks"] = ks_uniform(corner_cdf_values(pc, ps, pg)) if curve.samples else None
    if plot_dir:
        write_xy(plot_dir / "calibration.txt", curve.expected, curve.observed, "expected observed")
    write_report(args.out, metrics)
    for k, v in metrics.items():
        print(f"{k} = {v}")
    return EXIT_OK


# -- losscheck -----------------------------------------------------------------


def cmd_losscheck(args) -> int:
    if args.seed is None:
        raise UsageError("--seed is required")
    quad = quadratic_self_test(args.seed)
    checked, kinks, worst = 0, 0, 0.0
    seed = args.seed
    # kink points are skipped until the requested number of smooth configurations is reached
    while checked < args.configs:
        r = check_loss_gradient(seed, fusion=not args.no_fusion)
        seed += 1
        if r.kink:
            kinks += 1
            continue
        checked += 1
        worst = max(worst, r.max_error)
    ok = worst < GRADIENT_TOLERANCE and quad < QUADRATIC_TOLERANCE
    lines = {
        "configs": checked,
        "kinks_excluded": kinks,
        "max_relative_error": worst,
        "quadratic_self_test": quad,
        "passed": int(ok),
    }
    if args.out:
        write_report(args.out, lines)
    for k, v in lines.items():
        print(f"{k} = {v}")
    return EXIT_OK if ok else EXIT_FAIL


# -- bench ---------------------------------------------------------------------


def bench_frame(cfg: PipelineConfig, width: int, seed: int = 0):
    """Fully occupied frame of the given column count with noisy oracle predictions."""
    sensor = replace(cfg.sensor, width=width, azimuth_resolution=0.0)
    scene = wall_scene(sensor)
    img = build_range_image(raycast_sweep(scene, sensor), sensor)
    tg = encode_targets(img, sensor, scene)
    noise = cfg.noise if cfg.noise.center > 0 else replace(cfg.noise, center=0.1)
    return tg.points, oracle_predictions(tg, noise, cfg.C, cfg.K, seed), replace(cfg, sensor=sensor)


def run_bench(cfg: PipelineConfig, widths, repeats: int) -> list:
    rows = []
    for w in widths:
        pts, raw, c = bench_frame(cfg, w)
        detect(pts, raw, c)  # warm-up
        totals = [detect(pts, raw, c).timings["total"] * 1e3 for _ in range(repeats)]
        med = float(np.median(totals))
        rows.append({"width": w, "points": len(pts), "median_ms": med, "min_ms": min(totals),
                     "max_ms": max(totals), "spread": (max(totals) - min(totals)) / med})
    return rows


def cmd_bench(args) -> int:
    cfg = load_config(args)
    widths = args.sizes or [128, 256, 512]
    rows = run_bench(cfg, widths, args.repeats)
    print(f"{'width':>6} {'points':>7} {'median_ms':>10} {'min_ms':>8} {'max_ms':>8} {'spread':>7}")
    for r in rows:
        print(f"{r['width']:>6} {r['points']:>7} {r['median_ms']:>10.2f} {r['min_ms']:>8.2f} "
              f"{r['max_ms']:>8.2f} {r['spread']:>7.1%}")
    metrics = {}
    for a, b in zip(rows, rows[1:]):
        # exponent of time vs point count between consecutive sizes; 2 would be quadratic
        e = math.log(b["median_ms"] / a["median_ms"]) / math.log(b["points"] / a["points"])
        metrics[f"scaling_exponent_{a['width']}_{b['width']}"] = e
        print(f"scaling exponent {a['width']}->{b['width']}: {e:.2f}")
    full = [r for r in rows if r["width"] == 512 and r["points"] == 512 * cfg.sensor.height]
    if full and full[0]["median_ms"] > BENCH_BUDGET_MS:
        print(f"warning: full frame took {full[0]['median_ms']:.1f} ms, budget {BENCH_BUDGET_MS:.0f} ms",
              file=sys.stderr)
    if args.out:
        for r in rows:
            for k in ("points", "median_ms", "min_ms", "max_ms", "spread"):
                metrics[f"w{r['width']}_{k}"] = r[k]
        write_report(args.out, metrics)
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------


def _pipeline_flags(p):
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--sensor", help="sensor config JSON (overrides the one in --config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="frame-parallel worker processes (default: logical cores)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rvdet", description="Range-view LiDAR detection toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="raycast scenes into sweeps plus targets")
    _pipeline_flags(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene", help="scene JSON")
    src.add_argument("--generator", choices=sorted([*GENERATORS, "empty", "wall"]))
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--range-noise", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("detect", help="run the post-network pipeline on frames")
    _pipeline_flags(p)
    p.add_argument("frames", nargs="+", help="frame directories or a simulate output directory")
    p.add_argument("--predictions", help="prediction file (default: oracle from the frame's scene)")
    p.add_argument("--emit-predictions", action="store_true", help="write the oracle's predictions per frame")
    p.add_argument("--no-fusion", action="store_true", help="skip mean shift and fusion")
    p.add_argument("--nms-mode", choices=["hard", "soft"])
    p.add_argument("--fixed-threshold", type=float, help="fixed IoU threshold instead of the adaptive one")
    p.add_argument("--threshold", type=float, help="class probability threshold (default 1/C)")
    p.add_argument("--bin-size", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--backend", choices=["dense", "sparse"])
    p.add_argument("--center-noise", type=float)
    p.add_argument("--orientation-noise", type=float)
    p.add_argument("--dimension-noise", type=float)
    p.add_argument("--sigma-factor", type=float)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="AP and calibration report")
    _pipeline_flags(p)
    p.add_argument("frames", nargs="+")
    p.add_argument("--out", required=True, help="metrics report path")
    p.add_argument("--points", type=int, default=41, help="recall points for interpolated AP")
    p.add_argument("--emit-plot-data", metavar="DIR", help="write PR and calibration curves")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("losscheck", aliases=["loss-check"], help="finite-difference gradient verification")
    p.add_argument("--seed", type=int)
    p.add_argument("--configs", type=int, default=100)
    p.add_argument("--no-fusion", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_losscheck)

    p = sub.add_parser("bench", help="pipeline timing on fully occupied frames")
    _pipeline_flags(p)
    p.add_argument("--sizes", type=int, nargs="+", help="image widths (default 128 256 512)")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidInputError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
