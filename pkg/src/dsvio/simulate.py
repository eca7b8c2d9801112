"""Synthetic trajectories, landmark maps, and noisy IMU / stereo-track data.

Trajectories are analytic in closed form, so the simulated specific force
and body rates are exact. All randomness flows from the single seed in
SimConfig; regenerating with the same config yields identical files.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import dataset_io, quat
from .state import FrameStats, ImuSample, StereoFrame, StereoObservation


@dataclass
class BiasState:
    b_g: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class LandmarkMap:
    ids: np.ndarray
    positions: np.ndarray  # (n, 3)


class Trajectory:
    """Closed-form rigid-body motion. Yaw follows the velocity direction;
    roll and pitch stay level for moving kinds. A smooth time warp brings
    the body from rest, optionally after a stationary hover phase."""

    def __init__(self, spec):
        self.spec = spec
        self._center = np.asarray(spec.center, dtype=float)
        self._tilt_q = quat.from_rotvec(np.asarray(spec.tilt, dtype=float))

    def _warp(self, t):
        te = t - self.spec.hover
        if te <= 0.0:
            return 0.0, 0.0, 0.0
        r = self.spec.ramp
        if r <= 0.0:
            return te, 1.0, 0.0
        den = te + r
        return te * te / den, (te * te + 2.0 * r * te) / den**2, 2.0 * r * r / den**3

    def _path(self, s):
        """Position and its first two derivatives w.r.t. the warped time."""
        spec = self.spec
        if spec.kind == "static":
            z = np.zeros(3)
            return self._center.copy(), z, z.copy()
        if spec.kind == "circle":
            w = 2.0 * math.pi / spec.period
            c, sn = math.cos(w * s), math.sin(w * s)
            r = spec.radius
            f = self._center + r * np.array([c, sn, 0.0])
            d1 = r * w * np.array([-sn, c, 0.0])
            d2 = -r * w * w * np.array([c, sn, 0.0])
            return f, d1, d2
        if spec.kind == "figure_eight":
            w = 2.0 * math.pi / spec.period
            ax, ay, az = spec.amplitude
            th = w * s
            f = self._center + np.array([ax * math.sin(th),
                                         ay * math.sin(2 * th),
                                         az * math.sin(2 * th)])
            d1 = w * np.array([ax * math.cos(th),
                               2 * ay * math.cos(2 * th),
                               2 * az * math.cos(2 * th)])
            d2 = -w * w * np.array([ax * math.sin(th),
                                    4 * ay * math.sin(2 * th),
                                    4 * az * math.sin(2 * th)])
            return f, d1, d2
        if spec.kind == "sinusoid_3d":
            w = 2.0 * math.pi / spec.period
            az = spec.amplitude[2]
            c, sn = math.cos(w * s), math.sin(w * s)
            r = spec.radius
            f = self._center + np.array([r * c, r * sn, az * math.sin(3 * w * s)])
            d1 = np.array([-r * w * sn, r * w * c, 3 * az * w * math.cos(3 * w * s)])
            d2 = np.array([-r * w * w * c, -r * w * w * sn,
                           -9 * az * w * w * math.sin(3 * w * s)])
            return f, d1, d2
        raise ValueError("unknown trajectory kind %r" % spec.kind)

    def kinematics(self, t):
        """Return (p, v, a_global, q, w_body) at time t."""
        if self.spec.kind == "static":
            p, _, _ = self._path(0.0)
            return p, np.zeros(3), np.zeros(3), self._tilt_q.copy(), np.zeros(3)
        s, sd, sdd = self._warp(t)
        f, d1, d2 = self._path(s)
        v = d1 * sd
        a = d2 * sd * sd + d1 * sdd
        psi = math.atan2(d1[1], d1[0])
        h2 = d1[0] * d1[0] + d1[1] * d1[1]
        dpsi_ds = (d1[0] * d2[1] - d1[1] * d2[0]) / h2 if h2 > 1e-18 else 0.0
        q = quat.from_rotvec(np.array([0.0, 0.0, psi]))
        w_body = np.array([0.0, 0.0, dpsi_ds * sd])
        return f, v, a, q, w_body

    def pose(self, t):
        p, _, _, q, _ = self.kinematics(t)
        return q, p

    def path_length(self, duration, n=2000):
        ts = np.linspace(0.0, duration, n)
        pts = np.array([self.kinematics(t)[0] for t in ts])
        return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


def generate_landmarks(cfg, traj, rng):
    """Landmarks uniform over a shell around the trajectory."""
    n = cfg.num_landmarks
    anchors_t = rng.uniform(0.0, cfg.duration, size=n)
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = rng.uniform(cfg.shell_inner, cfg.shell_outer, size=n)
    positions = np.array([traj.kinematics(t)[0] for t in anchors_t])
    positions += dirs * radii[:, None]
    return LandmarkMap(np.arange(n), positions)


def sample_imu(traj, t, bias, cfg, rng):
    """One noisy IMU sample at t; advances the random-walk bias state."""
    _, _, a, q, w = traj.kinematics(t)
    C = quat.to_rotmat(q)
    f_body = C @ (a - cfg.noise.g_vec)
    rate = cfg.imu_hz
    dt = 1.0 / rate
    n_g = cfg.noise.sigma_g * math.sqrt(rate) * rng.standard_normal(3)
    n_a = cfg.noise.sigma_a * math.sqrt(rate) * rng.standard_normal(3)
    w_m = w + bias.b_g + n_g
    a_m = f_body + bias.b_a + n_a
    bias.b_g = bias.b_g + cfg.noise.sigma_wg * math.sqrt(dt) * rng.standard_normal(3)
    bias.b_a = bias.b_a + cfg.noise.sigma_wa * math.sqrt(dt) * rng.standard_normal(3)
    return ImuSample(t, w_m, a_m)


class TrackerState:
    """Oracle feature tracker: persistent ids while a landmark stays selected."""

    def __init__(self):
        self.active = {}       # landmark_id -> feature_id
        self.next_id = 0
        self.ref = None        # feature_id -> left (u, v) at the last keyframe


def _in_dropout(cfg, t):
    if cfg.dropout_duration > 0.0 and \
            cfg.dropout_start <= t < cfg.dropout_start + cfg.dropout_duration:
        return True
    if cfg.dropout_period <= 0.0 or cfg.dropout_fraction <= 0.0:
        return False
    phase = (t % cfg.dropout_period) / cfg.dropout_period
    return phase >= 1.0 - cfg.dropout_fraction


def sample_stereo(traj, lmap, t, ext, cfg, tracker, rng):
    """Project visible landmarks into both cameras and add pixel noise."""
    if _in_dropout(cfg, t):
        tracker.active = {}
        tracker.ref = {}
        return StereoFrame(t, [], FrameStats(0.0, 0))
    q_i, p_i = traj.pose(t)
    C_i = quat.to_rotmat(q_i)
    q_c = quat.multiply(ext.q_CI, q_i)
    p_c = p_i + C_i.T @ ext.p_IC
    C1 = quat.to_rotmat(q_c)
    C_rl = quat.to_rotmat(ext.q_RL)

    pc1 = (lmap.positions - p_c) @ C1.T
    pc2 = (pc1 - ext.p_LR) @ C_rl.T
    half_tan = math.tan(math.radians(cfg.fov_deg) / 2.0)

    def in_view(pc):
        z = pc[:, 2]
        ok = (z > cfg.min_depth) & (z < cfg.max_depth)
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(ok, pc[:, 0] / z, 0.0)
            v = np.where(ok, pc[:, 1] / z, 0.0)
        return ok & (np.abs(u) <= half_tan) & (np.abs(v) <= half_tan)

    visible = np.flatnonzero(in_view(pc1) & in_view(pc2))
    continuing = [lid for lid in visible if lid in tracker.active]
    fresh = [lid for lid in visible if lid not in tracker.active]
    selected = (continuing + fresh)[: cfg.max_tracked]

    new_active = {}
    tracks = []
    sigma = cfg.sigma_px_normalized
    for lid in selected:
        fid = tracker.active.get(lid)
        if fid is None:
            fid = tracker.next_id
            tracker.next_id += 1
        new_active[lid] = fid
        nz = sigma * rng.standard_normal(4)
        z1 = pc1[lid]
        z2 = pc2[lid]
        tracks.append((fid, StereoObservation(z1[0] / z1[2] + nz[0],
                                              z1[1] / z1[2] + nz[1],
                                              z2[0] / z2[2] + nz[2],
                                              z2[1] / z2[2] + nz[3])))
    tracker.active = new_active

    current = {fid: np.array([o.u1, o.v1]) for fid, o in tracks}
    if tracker.ref is None:
        parallax = 0.0
    else:
        shared = [fid for fid in current if fid in tracker.ref]
        if shared:
            parallax = cfg.f_nominal * float(np.mean(
                [np.linalg.norm(current[fid] - tracker.ref[fid]) for fid in shared]))
        else:
            parallax = float("inf")
    stats = FrameStats(mean_parallax=parallax if math.isfinite(parallax) else 1e6,
                       tracked_count=len(tracks))

    if (tracker.ref is None
            or stats.mean_parallax >= cfg.parallax_threshold
            or stats.tracked_count <= cfg.min_tracked_stat):
        tracker.ref = current
    return StereoFrame(t, tracks, stats)


def generate_scenario(cfg, out_dir):
    """Write imu.csv, tracks.jsonl, groundtruth.csv and a manifest.

    Returns a summary dict with row counts and tracking statistics.
    """
    cfg.validate()
    traj = Trajectory(cfg.trajectory)
    rng = np.random.default_rng(cfg.seed)
    lmap = generate_landmarks(cfg, traj, rng)
    bias = BiasState(np.asarray(cfg.gyro_bias0, dtype=float),
                     np.asarray(cfg.accel_bias0, dtype=float))
    tracker = TrackerState()

    dt = 1.0 / cfg.imu_hz
    n_steps = int(round(cfg.duration * cfg.imu_hz))
    cam_every = max(1, int(round(cfg.imu_hz / cfg.cam_hz)))

    samples = []
    frames = []
    truth = []
    for k in range(n_steps):
        t = k * dt
        p, v, _, q, _ = traj.kinematics(t)
        truth.append((t, p, q, v, bias.b_g.copy(), bias.b_a.copy()))
        samples.append(sample_imu(traj, t, bias, cfg, rng))
        if k % cam_every == 0:
            frames.append(sample_stereo(traj, lmap, t, cfg.extrinsics, cfg,
                                        tracker, rng))

    out = dataset_io.write_dataset(out_dir, cfg, samples, frames, truth)
    tracked = [f.stats.tracked_count for f in frames]
    return {
        "out_dir": str(out),
        "imu_rows": len(samples),
        "frames": len(frames),
        "mean_tracked": float(np.mean(tracked)) if tracked else 0.0,
        "min_tracked": int(np.min(tracked)) if tracked else 0,
        "path_length": traj.path_length(cfg.duration),
        "landmarks": int(cfg.num_landmarks),
    }
