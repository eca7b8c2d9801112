"""Command-line entry point: simulate datasets, run the pipeline, evaluate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Set DSVIO_LOG=INFO (or DEBUG) for progress logging.
"""

import argparse
import concurrent.futures
import json
import logging
import os
import sys
import time

import numpy as np

from . import dataset_io, evaluate, simulate
from .config import (ConfigError, DsVioConfig, RunConfig, SimConfig,
                     load_config, to_jsonable)
from .dataset_io import DataError
from .pipeline import DsVioPipeline
from .state import StereoExtrinsics

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _apply_calibration(cfg, manifest):
    """Physical dataset facts (rig geometry, focal scale, gravity) come from
    the manifest; measurement-noise tuning stays with the run config."""
    calib = manifest.calibration
    if not calib:
        return cfg
    ext = StereoExtrinsics(
        q_CI=np.asarray(calib.get("q_CI", [1, 0, 0, 0]), dtype=float),
        p_IC=np.asarray(calib.get("p_IC", [0, 0, 0]), dtype=float),
        q_RL=np.asarray(calib.get("q_RL", [1, 0, 0, 0]), dtype=float),
        p_LR=np.asarray(calib.get("p_LR", [0.1, 0, 0]), dtype=float),
    )
    cfg.extrinsics = ext
    if "f_nominal" in calib:
        cfg.f_nominal = float(calib["f_nominal"])
    if "gravity" in calib:
        g = float(calib["gravity"])
        cfg.gravity = g
        cfg.gyro_noise.g = g
        cfg.imu_noise.g_vec = np.array([0.0, 0.0, -g])
    return cfg


def run_dataset(manifest, run_cfg, covariance_checks=False):
    """Replay a dataset through the pipeline.

    Returns (estimates, pipeline, wall_time_s).
    """
    samples = dataset_io.load_imu_csv(manifest.path(manifest.imu))
    frames = dataset_io.load_tracks(manifest.path(manifest.tracks))
    if not samples:
        raise DataError("dataset has no IMU samples")

    cfg = run_cfg.filter
    _apply_calibration(cfg, manifest)
    pipe = DsVioPipeline(cfg, covariance_checks=covariance_checks)

    start_index = 0
    if run_cfg.init == "groundtruth":
        if not manifest.groundtruth:
            raise DataError("groundtruth init requested but manifest has no "
                            "groundtruth file")
        gt = dataset_io.load_groundtruth_csv(manifest.path(manifest.groundtruth))
        t0 = samples[0].t
        j = int(np.argmin(np.abs(gt.t - t0)))
        pipe.initialize_at(
            t0, gt.q[j], p=gt.p[j],
            v=gt.v[j] if gt.v is not None else None,
            b_g=gt.b_g[j] if gt.b_g is not None else None,
            b_a=gt.b_a[j] if gt.b_a is not None else None)
        start_index = 1

    estimates = []

    def record(est):
        if est is None:
            return
        if estimates and abs(estimates[-1].t - est.t) < 1e-12:
            estimates[-1] = est
        else:
            estimates.append(est)

    t_start = time.perf_counter()
    i, j = start_index, 0
    while i < len(samples) or j < len(frames):
        take_imu = j >= len(frames) or (
            i < len(samples) and samples[i].t <= frames[j].t + 1e-12)
        if take_imu:
            record(pipe.process_imu(samples[i]))
            i += 1
        else:
            record(pipe.process_stereo(frames[j]))
            j += 1
    wall = time.perf_counter() - t_start
    return estimates, pipe, wall


def _metrics_against_groundtruth(manifest, estimates, align_mode="4dof"):
    gt = dataset_io.load_groundtruth_csv(manifest.path(manifest.groundtruth))
    est_t = np.array([e.t for e in estimates])
    est_p = np.array([e.p for e in estimates])
    est_q = np.array([e.q for e in estimates])
    sig_p = np.array([e.sigmas[6:9] for e in estimates])
    align_fn = evaluate.align_4dof if align_mode == "4dof" else evaluate.align_se3
    alignment = align_fn(est_t, est_p, gt.t, gt.p)
    ate = evaluate.ate_rmse(est_t, est_p, gt.t, gt.p, alignment)
    att = evaluate.attitude_rmse(est_t, est_q, gt.t, gt.q, alignment)
    _, nees_mean, skipped = evaluate.nees(est_t, est_p, sig_p, gt.t, gt.p,
                                          alignment)
    return {
        "ate_rmse_m": ate,
        "attitude_rmse_deg": float(np.degrees(att)),
        "nees_mean": nees_mean,
        "nees_skipped": skipped,
        "alignment": {"yaw_deg": float(np.degrees(alignment.yaw)),
                      "translation": [float(x) for x in alignment.translation],
                      "matched": alignment.matched},
    }


def _run_report(run_cfg, pipe, wall, metrics):
    s = pipe.stats
    label = ("dual-stage" if run_cfg.filter.stage1_coupling == "orientation_seed"
             else "single-stage")
    return {
        "variant": {
            "label": label,
            "stage1_coupling": run_cfg.filter.stage1_coupling,
            "gating": run_cfg.filter.gating,
            "keyframe_policy": run_cfg.filter.keyframe.mode,
        },
        "counters": {
            "imu_samples": s.imu_samples,
            "frames": s.frames,
            "frames_dropped": s.frames_dropped,
            "updates": s.updates,
            "features_closed": s.features_closed,
            "features_used": s.features_used,
            "gate_rejections": s.gate_rejections,
            "triangulation_failures": s.triangulation_failures,
            "gravity_updates": s.gravity_updates,
            "gravity_gated": s.gravity_gated,
            "max_nullspace_leak": s.max_nullspace_leak,
        },
        "wall_time_s": wall,
        "metrics": metrics,
    }


def cmd_simulate(args):
    cfg = load_config(args.config, SimConfig)
    summary = simulate.generate_scenario(cfg, args.out)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _single_run(manifest_path, run_cfg, align_mode):
    manifest = dataset_io.load_manifest(manifest_path)
    estimates, pipe, wall = run_dataset(manifest, run_cfg)
    metrics = None
    if manifest.groundtruth:
        metrics = _metrics_against_groundtruth(manifest, estimates, align_mode)
    return estimates, pipe, wall, metrics


def _mc_worker(payload):
    run_cfg, seed, workdir = payload
    sim_cfg = run_cfg.sim
    sim_cfg.seed = seed
    simulate.generate_scenario(sim_cfg, workdir)
    _, pipe, wall, metrics = _single_run(os.path.join(workdir, "manifest.json"),
                                         run_cfg, "4dof")
    metrics = metrics or {}
    metrics["seed"] = seed
    metrics["wall_time_s"] = wall
    return metrics


def cmd_run(args):
    run_cfg = (load_config(args.config, RunConfig) if args.config
               else RunConfig().validate())
    if args.stage1_coupling:
        run_cfg.filter.stage1_coupling = (
            "orientation_seed" if args.stage1_coupling == "on" else "off")
    if args.gating:
        run_cfg.filter.gating = args.gating == "on"
    if args.keyframe_policy:
        run_cfg.filter.keyframe.mode = args.keyframe_policy
    if args.init:
        run_cfg.init = args.init
    run_cfg.validate()
    os.makedirs(args.out, exist_ok=True)

    if args.runs > 1:
        if run_cfg.sim is None:
            raise ConfigError("--runs needs a 'sim' section in the run config")
        seeds = [args.seed + k for k in range(args.runs)]
        payloads = [(run_cfg, s, os.path.join(args.out, "run_%03d" % s))
                    for s in seeds]
        with concurrent.futures.ProcessPoolExecutor(
                max_workers=min(args.runs, os.cpu_count() or 1)) as ex:
            results = list(ex.map(_mc_worker, payloads))
        results.sort(key=lambda m: m["seed"])
        agg = {}
        for key in ("ate_rmse_m", "attitude_rmse_deg", "nees_mean"):
            vals = [m[key] for m in results if key in m]
            if vals:
                agg["mean_" + key] = float(np.mean(vals))
        report = {"runs": results, "aggregate": agg,
                  "variant": _run_report(run_cfg, DsVioPipeline(run_cfg.filter),
                                         0.0, None)["variant"]}
        with open(os.path.join(args.out, "report.json"), "w") as f:
            json.dump(to_jsonable(report), f, indent=2, sort_keys=True)
        print(json.dumps(to_jsonable(agg), indent=2, sort_keys=True))
        return EXIT_OK

    estimates, pipe, wall, metrics = _single_run(args.manifest, run_cfg,
                                                 "4dof")
    dataset_io.write_trajectory(os.path.join(args.out, "trajectory.csv"),
                                estimates)
    report = _run_report(run_cfg, pipe, wall, metrics)
    with open(os.path.join(args.out, "report.json"), "w") as f:
        json.dump(to_jsonable(report), f, indent=2, sort_keys=True)
    print(json.dumps(to_jsonable(report), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_eval(args):
    try:
        est = dataset_io.load_trajectory(args.est)
        est_sig = est.sigmas[:, 6:9]
    except DataError:
        gt_like = dataset_io.load_groundtruth_csv(args.est)
        est = gt_like
        est_sig = None
    gt = dataset_io.load_groundtruth_csv(args.gt)

    align_fn = evaluate.align_4dof if args.align == "4dof" else evaluate.align_se3
    try:
        alignment = align_fn(est.t, est.p, gt.t, gt.p)
    except ValueError as e:
        raise DataError("cannot align trajectories: %s" % e)
    out = {
        "ate_rmse_m": evaluate.ate_rmse(est.t, est.p, gt.t, gt.p, alignment),
        "attitude_rmse_deg": float(np.degrees(
            evaluate.attitude_rmse(est.t, est.q, gt.t, gt.q, alignment))),
        "alignment": {"yaw_deg": float(np.degrees(alignment.yaw)),
                      "translation": [float(x) for x in alignment.translation],
                      "matched": alignment.matched},
    }
    if est_sig is not None:
        _, nees_mean, skipped = evaluate.nees(est.t, est.p, est_sig,
                                              gt.t, gt.p, alignment)
        out["nees_mean"] = nees_mean
        out["nees_skipped"] = skipped
    print(json.dumps(out, indent=2, sort_keys=True))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(out, f, indent=2, sort_keys=True)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dsvio",
        description="Dual-stage EKF stereo visual-inertial odometry tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate a synthetic dataset")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--out", required=True)
    p_sim.set_defaults(func=cmd_simulate)

    p_run = sub.add_parser("run", help="replay a dataset through the filter")
    p_run.add_argument("--manifest")
    p_run.add_argument("--config")
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--stage1-coupling", choices=["on", "off"])
    p_run.add_argument("--gating", choices=["on", "off"])
    p_run.add_argument("--keyframe-policy", choices=["paper", "fifo"])
    p_run.add_argument("--init", choices=["static", "groundtruth"])
    p_run.add_argument("--runs", type=int, default=1)
    p_run.add_argument("--seed", type=int, default=0)
    p_run.set_defaults(func=cmd_run)

    p_eval = sub.add_parser("eval", help="compare trajectories")
    p_eval.add_argument("--est", required=True)
    p_eval.add_argument("--gt", required=True)
    p_eval.add_argument("--align", choices=["4dof", "se3"], default="4dof")
    p_eval.add_argument("--out")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get("DSVIO_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run" and args.runs <= 1 and not args.manifest:
            raise ConfigError("run needs --manifest (or --runs with a sim "
                              "config section)")
        return args.func(args)
    except ConfigError as e:
        print("config error: %s" % e, file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as e:
        print("data error: %s" % e, file=sys.stderr)
        return EXIT_DATA
    except (np.linalg.LinAlgError, FloatingPointError) as e:
        print("numerical failure: %s" % e, file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
