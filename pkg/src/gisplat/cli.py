"""Command-line interface: ``gisplat run | eval | sim``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import SlamConfig, config_dict, dump_config, load_config
from .dataset_io import export_tum, load_tum, read_trajectory, write_trajectory
from .errors import (
    DatasetParseError,
    GisplatError,
    InitFailed,
    InvalidArgument,
    MetricUnavailable,
    TrackingUnavailable,
    UnreadableDataset,
)
from .evaluation import ate_rmse, write_metrics
from .gmap import save_checkpoint
from .pipeline import run as run_pipeline
from .sim import SensorNoise, TrajectorySpec, default_intrinsics, make_room_scene, synthesize_sequence
from .splat_render import render, write_pgm16, write_ppm

log = logging.getLogger("gisplat")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_UNREADABLE = 2
EXIT_METRIC = 3

# sim spec keys beyond the trajectory fields, with their defaults
SIM_EXTRA = {
    "width": 96,
    "height": 72,
    "scene_seed": 0,
    "scene_gaussians": 1000,
    "gravity_on": True,
    "imu_accel_sigma": 0.0,
    "imu_gyro_sigma": 0.0,
    "noise_seed": 0,
}


def _apply_threads() -> None:
    raw = os.environ.get("GISPLAT_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        log.warning("ignoring non-integer GISPLAT_THREADS=%r", raw)
        return
    import numba

    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def parse_sim_spec(text: str, source: str = "<spec>") -> tuple[TrajectorySpec, dict]:
    """``key = value`` lines naming trajectory fields or one of ``SIM_EXTRA``."""
    traj_defaults = {f.name: getattr(TrajectorySpec(), f.name) for f in dataclasses.fields(TrajectorySpec)}
    traj, extra = {}, dict(SIM_EXTRA)
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise InvalidArgument(f"{source}:{lineno}: expected 'key = value'")
        key, value = (x.strip() for x in s.split("=", 1))
        if key in traj_defaults:
            traj[key] = config_mod._parse(value, traj_defaults[key], key)
        elif key in SIM_EXTRA:
            extra[key] = config_mod._parse(value, SIM_EXTRA[key], key)
        else:
            raise InvalidArgument(f"{source}:{lineno}: unknown key {key!r}")
    return TrajectorySpec(**traj), extra


def cmd_sim(args) -> int:
    try:
        spec, extra = parse_sim_spec(Path(args.spec).read_text(encoding="utf-8"), args.spec)
    except OSError as e:
        print(f"error: cannot read spec: {e}", file=sys.stderr)
        return EXIT_ERROR
    k = default_intrinsics(int(extra["width"]), int(extra["height"]))
    scene = make_room_scene(int(extra["scene_seed"]), n=int(extra["scene_gaussians"]))
    noise = SensorNoise(float(extra["imu_accel_sigma"]), float(extra["imu_gyro_sigma"]), bool(extra["gravity_on"]),
                        int(extra["noise_seed"]))
    seq = synthesize_sequence(scene, spec, k, noise)
    gt = list(zip(seq.times, seq.gt_poses))
    export_tum(args.out, seq.frames, k, gt, seq.imu)
    print(f"wrote {len(seq.frames)} frames and {len(seq.imu)} imu samples to {args.out}")
    return EXIT_OK


def _safe_ate(est, gt, mode):
    try:
        return ate_rmse(est, gt, mode)
    except MetricUnavailable as e:
        log.warning("ATE not available: %s", e)
        return "not-available"


def cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else SlamConfig()
    overrides = {}
    if args.mode:
        overrides["mode"] = args.mode
    if args.imu:
        overrides["imu_mode"] = args.imu
    cfg = dataclasses.replace(cfg, **overrides)

    seq = load_tum(args.dataset, load_depth=cfg.mode == "rgbd")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    render_dir = out_dir / "renders"
    if args.render_every > 0:
        render_dir.mkdir(exist_ok=True)
    k = seq.intrinsics
    init_pose = None
    if seq.gt is not None:
        # start from the first ground-truth pose so trajectories share a frame
        t0 = seq.frames[0].t
        ts = np.array([t for t, _ in seq.gt])
        j = int(np.argmin(np.abs(ts - t0)))
        if abs(ts[j] - t0) <= 0.02:
            init_pose = seq.gt[j][1]

    def on_frame(state, diag):
        if args.render_every > 0 and diag.index % args.render_every == 0:
            r = render(state.gmap, state.pose, k, cfg.background)
            write_ppm(render_dir / f"{diag.index:06d}.ppm", r.color)
            write_pgm16(render_dir / f"{diag.index:06d}.pgm", r.depth)
        log.info("frame %d: %s loss=%.5f gaussians=%d", diag.index, diag.decision, diag.loss, diag.n_gaussians)

    t_start = time.perf_counter()
    result = run_pipeline(seq.frames, cfg, k, init_pose, on_frame)
    elapsed = time.perf_counter() - t_start

    write_trajectory(out_dir / "trajectory.txt", result.trajectory)
    write_trajectory(out_dir / "keyframes.txt", result.keyframe_trajectory)
    save_checkpoint(result.gmap, out_dir / "map.gimap")
    mode = "similarity" if cfg.mode == "mono" else "rigid"
    psnrs, ssims = result.held_out_psnr(), result.held_out_ssim()
    metrics = {
        "ate_rmse_cm": _safe_ate(result.keyframe_trajectory, seq.gt, mode) if seq.gt else "not-available",
        "ate_rmse_all_frames_cm": _safe_ate(result.trajectory, seq.gt, mode) if seq.gt else "not-available",
        "psnr_db": float(np.mean(psnrs)) if psnrs else "not-available",
        "ssim": float(np.mean(ssims)) if ssims else "not-available",
        "frames_evaluated": len(psnrs),
        "frames_processed": len(result.trajectory),
        "keyframe_count": len(result.keyframe_ids),
        "gaussians": len(result.gmap),
        "runtime_s": elapsed,
        "alignment": mode,
        "config": config_dict(cfg),
    }
    write_metrics(out_dir / "metrics.json", metrics)
    ate = metrics["ate_rmse_cm"]
    print(f"ATE RMSE (keyframes): {ate:.2f} cm" if isinstance(ate, float) else "ATE RMSE: not-available")
    print(f"keyframes: {len(result.keyframe_ids)}  frames: {len(result.trajectory)}  time: {elapsed:.1f} s")
    return EXIT_OK


def cmd_eval(args) -> int:
    est = read_trajectory(args.est)
    gt = read_trajectory(args.gt)
    mode = "similarity" if args.align == "sim3" else args.align
    ate = ate_rmse(est, gt, mode)
    print(f"ATE RMSE: {ate:.2f} cm")
    write_metrics(args.out, {"ate_rmse_cm": ate, "alignment": args.align, "frames_evaluated": len(est),
                             "config": {"est": str(args.est), "gt": str(args.gt), "align": args.align}})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gisplat", description="Gaussian-splatting SLAM with inertial cues.")
    p.add_argument("--dump-config", action="store_true", help="print the default configuration and exit")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command")

    r = sub.add_parser("run", help="run SLAM on a TUM-RGBD style directory")
    r.add_argument("--dataset", required=True)
    r.add_argument("--mode", choices=config_mod.MODES)
    r.add_argument("--imu", choices=config_mod.IMU_MODES)
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--render-every", type=int, default=0, metavar="N",
                   help="write the rendered view of every N-th frame (0 disables)")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="ATE RMSE between two TUM trajectory files")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--align", choices=("rigid", "sim3"), default="rigid")
    e.add_argument("--out", default="metrics.json", help="metrics report path (default: ./metrics.json)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sim", help="write a synthetic sequence in TUM-RGBD layout")
    s.add_argument("--spec", required=True, help="key = value file of trajectory and sensor settings")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sim)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.dump_config:
        sys.stdout.write(dump_config())
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_ERROR
    _apply_threads()
    try:
        return args.func(args)
    except UnreadableDataset as e:
        print(f"unreadable-dataset: {e}", file=sys.stderr)
        return EXIT_UNREADABLE
    except MetricUnavailable as e:
        print(f"metric-unavailable: {e}", file=sys.stderr)
        return EXIT_METRIC
    except DatasetParseError as e:
        print(f"parse-error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except (InitFailed, TrackingUnavailable) as e:
        print(f"slam-failed: {e}", file=sys.stderr)
        return EXIT_ERROR
    except (InvalidArgument, GisplatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
