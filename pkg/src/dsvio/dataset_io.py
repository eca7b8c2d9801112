"""File formats: IMU / ground-truth CSVs, feature-track JSONL, trajectories.

Column orders (pinned by golden-file tests):

- imu.csv          timestamp [ns], w_x, w_y, w_z [rad/s], a_x, a_y, a_z [m/s^2]
- groundtruth.csv  timestamp [ns], p_x..z [m], q_w, q_x, q_y, q_z,
                   v_x..z [m/s], bw_x..z [rad/s], ba_x..z [m/s^2]
                   (velocity and bias columns optional on load, EuRoC layout)
- trajectory.csv   timestamp [ns], p_x..z, q_w..q_z, v_x..z,
                   sig_th_x..z [rad], sig_v_x..z [m/s], sig_p_x..z [m]
- tracks.jsonl     one JSON object per frame:
                   {"t": ns, "tracks": [[feature_id, u1, v1, u2, v2], ...],
                    "stats": {"mean_parallax": px, "tracked_count": n}}

Timestamps are integer nanoseconds on disk and float seconds in memory.
"""

import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from .state import FrameStats, ImuSample, StereoFrame, StereoObservation

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed or inconsistent dataset content."""


def _ns(t):
    return int(round(t * 1e9))


def _fmt(x):
    return repr(float(x))


def _parse_row(line, path, lineno, expected_min):
    parts = line.strip().split(",")
    try:
        values = [float(p) for p in parts]
    except ValueError:
        raise DataError("%s:%d: malformed row %r" % (path, lineno, line.strip()))
    if len(values) < expected_min:
        raise DataError("%s:%d: expected >=%d columns, got %d"
                        % (path, lineno, expected_min, len(values)))
    return values


def _is_header(line):
    s = line.strip()
    if not s or s.startswith("#"):
        return True
    return not s.split(",")[0].lstrip("-").replace(".", "", 1).isdigit()


# ---------------------------------------------------------------- IMU CSV

def write_imu_csv(path, samples):
    with open(path, "w") as f:
        f.write("#timestamp [ns],w_x [rad/s],w_y [rad/s],w_z [rad/s],"
                "a_x [m/s^2],a_y [m/s^2],a_z [m/s^2]\n")
        for s in samples:
            f.write("%d,%s\n" % (_ns(s.t), ",".join(
                _fmt(x) for x in (*s.w_m, *s.a_m))))


def load_imu_csv(path):
    """Load IMU samples; duplicate timestamps are dropped with a warning."""
    samples = []
    dropped = 0
    last_ns = None
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if _is_header(line) and lineno == 1:
                continue
            if not line.strip():
                continue
            values = _parse_row(line, path, lineno, 7)
            ns = int(round(values[0]))
            if last_ns is not None:
                if ns == last_ns:
                    dropped += 1
                    continue
                if ns < last_ns:
                    raise DataError("%s:%d: non-monotone timestamp" % (path, lineno))
            last_ns = ns
            samples.append(ImuSample(ns * 1e-9, np.array(values[1:4]),
                                     np.array(values[4:7])))
    if dropped:
        log.warning("%s: dropped %d duplicate timestamps", path, dropped)
    return samples


# ------------------------------------------------------------ ground truth

@dataclass
class GroundTruth:
    t: np.ndarray
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray | None = None
    b_g: np.ndarray | None = None
    b_a: np.ndarray | None = None

    @property
    def has_velocity(self):
        return self.v is not None


def write_groundtruth_csv(path, rows):
    """rows: iterable of (t, p, q, v, b_g, b_a)."""
    with open(path, "w") as f:
        f.write("#timestamp [ns],p_x [m],p_y [m],p_z [m],"
                "q_w,q_x,q_y,q_z,v_x [m/s],v_y [m/s],v_z [m/s],"
                "bw_x [rad/s],bw_y [rad/s],bw_z [rad/s],"
                "ba_x [m/s^2],ba_y [m/s^2],ba_z [m/s^2]\n")
        for t, p, q, v, b_g, b_a in rows:
            f.write("%d,%s\n" % (_ns(t), ",".join(
                _fmt(x) for x in (*p, *q, *v, *b_g, *b_a))))


def load_groundtruth_csv(path):
    t, p, q, v, bg, ba = [], [], [], [], [], []
    n_cols = None
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if _is_header(line) and lineno == 1:
                continue
            if not line.strip():
                continue
            values = _parse_row(line, path, lineno, 8)
            if n_cols is None:
                n_cols = len(values)
            elif len(values) != n_cols:
                raise DataError("%s:%d: inconsistent column count" % (path, lineno))
            t.append(int(round(values[0])) * 1e-9)
            p.append(values[1:4])
            q.append(values[4:8])
            if n_cols >= 11:
                v.append(values[8:11])
            if n_cols >= 14:
                bg.append(values[11:14])
            if n_cols >= 17:
                ba.append(values[14:17])
    return GroundTruth(
        np.array(t), np.array(p), np.array(q),
        np.array(v) if v else None,
        np.array(bg) if bg else None,
        np.array(ba) if ba else None,
    )


# ------------------------------------------------------------- trajectories

def write_trajectory(path, estimates):
    with open(path, "w") as f:
        f.write("#timestamp [ns],p_x [m],p_y [m],p_z [m],q_w,q_x,q_y,q_z,"
                "v_x [m/s],v_y [m/s],v_z [m/s],"
                "sig_th_x,sig_th_y,sig_th_z,sig_v_x,sig_v_y,sig_v_z,"
                "sig_p_x,sig_p_y,sig_p_z\n")
        for e in estimates:
            f.write("%d,%s\n" % (_ns(e.t), ",".join(
                _fmt(x) for x in (*e.p, *e.q, *e.v, *e.sigmas))))


@dataclass
class TrajectoryData:
    t: np.ndarray
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    sigmas: np.ndarray  # (n, 9): attitude, velocity, position 1-sigma


def load_trajectory(path):
    t, p, q, v, s = [], [], [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if _is_header(line) and lineno == 1:
                continue
            if not line.strip():
                continue
            values = _parse_row(line, path, lineno, 20)
            t.append(int(round(values[0])) * 1e-9)
            p.append(values[1:4])
            q.append(values[4:8])
            v.append(values[8:11])
            s.append(values[11:20])
    return TrajectoryData(np.array(t), np.array(p), np.array(q), np.array(v),
                          np.array(s))


# ------------------------------------------------------------ track frames

def write_tracks(path, frames):
    with open(path, "w") as f:
        for frame in frames:
            record = {
                "t": _ns(frame.t),
                "tracks": [[int(fid), o.u1, o.v1, o.u2, o.v2]
                           for fid, o in frame.tracks],
                "stats": {"mean_parallax": frame.stats.mean_parallax,
                          "tracked_count": frame.stats.tracked_count},
            }
            f.write(json.dumps(record) + "\n")


def load_tracks(path):
    frames = []
    last_ns = None
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError("%s:%d: invalid JSON: %s" % (path, lineno, e))
            try:
                ns = int(record["t"])
                raw = record["tracks"]
                stats = record.get("stats", {})
            except (KeyError, TypeError, ValueError) as e:
                raise DataError("%s:%d: malformed record: %s" % (path, lineno, e))
            seen = set()
            tracks = []
            for entry in raw:
                fid = int(entry[0])
                if fid in seen:
                    raise DataError("%s:%d: duplicate feature id %d"
                                    % (path, lineno, fid))
                seen.add(fid)
                tracks.append((fid, StereoObservation(*map(float, entry[1:5]))))
            if last_ns is not None and ns < last_ns:
                raise DataError("%s:%d: non-monotone timestamp" % (path, lineno))
            last_ns = ns
            frames.append(StereoFrame(
                ns * 1e-9, tracks,
                FrameStats(float(stats.get("mean_parallax", 0.0)),
                           int(stats.get("tracked_count", len(tracks))))))
    return frames


# ---------------------------------------------------------------- manifest

@dataclass
class DatasetManifest:
    root: str
    imu: str
    tracks: str
    groundtruth: str | None
    rates: dict
    calibration: dict

    def path(self, name):
        return os.path.join(self.root, name)


def save_manifest(path, manifest):
    data = {
        "imu": manifest.imu,
        "tracks": manifest.tracks,
        "groundtruth": manifest.groundtruth,
        "rates": manifest.rates,
        "calibration": manifest.calibration,
    }
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def load_manifest(path):
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise DataError("cannot read manifest %s: %s" % (path, e))
    except json.JSONDecodeError as e:
        raise DataError("invalid manifest JSON %s: %s" % (path, e))
    root = os.path.dirname(os.path.abspath(path))
    manifest = DatasetManifest(
        root=root,
        imu=data.get("imu", "imu.csv"),
        tracks=data.get("tracks", "tracks.jsonl"),
        groundtruth=data.get("groundtruth"),
        rates=data.get("rates", {}),
        calibration=data.get("calibration", {}),
    )
    for name in (manifest.imu, manifest.tracks):
        if not os.path.exists(manifest.path(name)):
            raise DataError("manifest references missing file: %s"
                            % manifest.path(name))
    if manifest.groundtruth and not os.path.exists(manifest.path(manifest.groundtruth)):
        raise DataError("manifest references missing file: %s"
                        % manifest.path(manifest.groundtruth))
    return manifest


def extrinsics_calibration(ext, f_nominal, sigma_px, gravity=9.81):
    return {
        "q_CI": [float(x) for x in ext.q_CI],
        "p_IC": [float(x) for x in ext.p_IC],
        "q_RL": [float(x) for x in ext.q_RL],
        "p_LR": [float(x) for x in ext.p_LR],
        "f_nominal": float(f_nominal),
        "sigma_px": float(sigma_px),
        "gravity": float(gravity),
    }


def write_dataset(out_dir, cfg, samples, frames, truth):
    """Write a complete simulated dataset directory and its manifest."""
    os.makedirs(out_dir, exist_ok=True)
    write_imu_csv(os.path.join(out_dir, "imu.csv"), samples)
    write_tracks(os.path.join(out_dir, "tracks.jsonl"), frames)
    write_groundtruth_csv(os.path.join(out_dir, "groundtruth.csv"), truth)
    manifest = DatasetManifest(
        root=str(out_dir),
        imu="imu.csv",
        tracks="tracks.jsonl",
        groundtruth="groundtruth.csv",
        rates={"imu_hz": cfg.imu_hz, "cam_hz": cfg.cam_hz},
        calibration=extrinsics_calibration(
            cfg.extrinsics, cfg.f_nominal, cfg.sigma_px,
            float(-cfg.noise.g_vec[2])),
    )
    save_manifest(os.path.join(out_dir, "manifest.json"), manifest)
    return out_dir
