"""Dual-stage pipeline: the per-sample gyro/gravity filter feeds attitude
and gyro bias into the sliding-window stereo filter's propagation.

Per IMU sample: stage 1 propagates with the gyro and corrects with the
accelerometer gravity direction; with coupling enabled its posterior
attitude and gyro bias become the stereo filter's nominal values for that
step (mean-only; the stereo filter keeps its own covariance dynamics).
After every stereo update the corrected attitude and bias are written back
to stage 1 so both filters track the same quantity.

Per stereo frame: classify the keyframe flag, marginalize if the window is
full, augment the camera pose, ingest tracks, and run one batched update
over all tracks that just closed with enough observations.
"""

import dataclasses
import logging

import numpy as np

from . import gyro_ekf, msckf, quat, vision
from .state import (POS, TH, V, EkfState, FeatureTrack, ImuState,
                    PoseEstimate)

log = logging.getLogger(__name__)

_EPS = 1e-12


@dataclasses.dataclass
class RunStats:
    imu_samples: int = 0
    frames: int = 0
    frames_dropped: int = 0
    updates: int = 0
    features_closed: int = 0
    features_used: int = 0
    gate_rejections: int = 0
    triangulation_failures: int = 0
    gravity_updates: int = 0
    gravity_gated: int = 0
    max_nullspace_leak: float = 0.0
    projection_rows_ok: bool = True


@dataclasses.dataclass
class HealthStats:
    events: int = 0
    max_asymmetry: float = 0.0
    min_eig_ratio: float = np.inf  # min eigenvalue / trace, worst over events


class DsVioPipeline:
    """Single consumer of a time-ordered IMU + stereo-frame event stream."""

    def __init__(self, config, covariance_checks=False):
        config.validate()
        self.config = config
        self.stats = RunStats()
        self.health = HealthStats()
        self._check_cov = covariance_checks
        self._coupling = config.stage1_coupling == "orientation_seed"
        # Reprojection acceptance tracks the configured measurement noise.
        self._tri_opts = dataclasses.replace(
            config.triangulation, sigma=config.sigma_px_normalized)

        self._gyro = None
        self._gyro_P = None
        self._ekf = None
        self._t = None
        self._initialized = False
        self._init_buffer = []
        self._last_imu = None
        self._last_frame_t = None
        self._pending = None
        self._tracks = {}

    # ------------------------------------------------------------- init

    def _initial_covariance(self, q0):
        s = self.config.init_sigmas
        u = quat.to_rotmat(q0) @ np.array([0.0, 0.0, 1.0])
        P = np.zeros((15, 15))
        P[TH, TH] = (s.theta_rp**2 * (np.eye(3) - np.outer(u, u))
                     + s.theta_yaw**2 * np.outer(u, u))
        P[3:6, 3:6] = s.b_g**2 * np.eye(3)
        P[V, V] = s.v**2 * np.eye(3)
        P[9:12, 9:12] = s.b_a**2 * np.eye(3)
        P[POS, POS] = s.p**2 * np.eye(3)
        return P

    def initialize_at(self, t, q, p=None, v=None, b_g=None, b_a=None):
        """Initialize both stages from known values (e.g. ground truth)."""
        q0 = quat.normalize(np.asarray(q, dtype=float))
        imu = ImuState(
            q=q0,
            b_g=np.zeros(3) if b_g is None else np.asarray(b_g, dtype=float),
            v=np.zeros(3) if v is None else np.asarray(v, dtype=float),
            b_a=np.zeros(3) if b_a is None else np.asarray(b_a, dtype=float),
            p=np.zeros(3) if p is None else np.asarray(p, dtype=float),
        )
        self._ekf = EkfState(imu, [], self._initial_covariance(q0))
        s = self.config.init_sigmas
        sq = max(s.theta_rp, s.theta_yaw) / 2.0
        self._gyro = gyro_ekf.GyroState(q0.copy(), imu.b_g.copy())
        # Rigid bias prior: stage 1 tracks attitude only; its bias follows
        # the stereo filter through the post-update write-back.
        self._gyro_P = gyro_ekf.initial_covariance(sq, 1e-6)
        self._t = float(t)
        self._initialized = True
        self._init_buffer = []

    def _initialize_static(self):
        samples = self._init_buffer
        mean_a = np.mean([s.a_m for s in samples], axis=0)
        mean_w = np.mean([s.w_m for s in samples], axis=0)
        a_unit = mean_a / np.linalg.norm(mean_a)
        c = np.cross(np.array([0.0, 0.0, 1.0]), a_unit)
        s_norm = np.linalg.norm(c)
        if s_norm > 1e-12:
            angle = np.arctan2(s_norm, a_unit[2])
            rotvec = -c / s_norm * angle
        else:
            rotvec = np.zeros(3)
        q0 = quat.from_rotvec(rotvec)
        self.initialize_at(samples[-1].t, q0, b_g=mean_w)
        log.info("static init at t=%.3f from %d samples", self._t, len(samples))

    # ------------------------------------------------------------ events

    def process_imu(self, sample):
        """Advance both stages by one IMU sample; returns the new estimate
        (None while the initialization window is still filling)."""
        t = float(sample.t)
        if self._t is not None and t <= self._t + _EPS:
            raise ValueError("out-of-order IMU sample at t=%r" % t)
        if not np.all(np.isfinite(sample.w_m)) or not np.all(np.isfinite(sample.a_m)):
            raise ValueError("non-finite IMU sample at t=%r" % t)

        if not self._initialized:
            self._init_buffer.append(sample)
            span = self._init_buffer[-1].t - self._init_buffer[0].t
            if span >= self.config.static_init_duration:
                self._initialize_static()
                self._last_imu = sample
            return None

        h = t - self._t
        cfg = self.config

        # Stage 1: gyro propagation plus gravity update. The gravity model
        # predicts the rest-frame specific force in a z-down world; the
        # z-up measurement is negated to bridge the convention.
        w_mid, _ = self._imu_at(sample, self._t + 0.5 * h)
        g1, P1 = gyro_ekf.gyro_propagate(self._gyro, self._gyro_P,
                                         w_mid, h, cfg.gyro_noise)
        g1, P1, accepted = gyro_ekf.gyro_update(g1, P1, -sample.a_m,
                                                cfg.gyro_noise)
        self._gyro, self._gyro_P = g1, P1
        if accepted:
            self.stats.gravity_updates += 1
        else:
            self.stats.gravity_gated += 1

        # Stage 2, split around a deferred frame if one falls inside the step.
        # Propagation holds the measurement interpolated at the midpoint of
        # each (sub-)interval; second-order accurate for smooth motion.
        if self._pending is not None and self._pending.t <= t + _EPS:
            frame = self._pending
            self._pending = None
            tf = float(frame.t)
            if tf > self._t + _EPS:
                w_i, a_i = self._imu_at(sample, 0.5 * (self._t + tf))
                self._propagate_stage2(w_i, a_i, tf - self._t, seed=False)
                self._t = tf
            self._handle_frame(frame)
            rem = t - self._t
            if rem > _EPS:
                w_i, a_i = self._imu_at(sample, 0.5 * (self._t + t))
                self._propagate_stage2(w_i, a_i, rem, seed=True)
            elif self._coupling:
                self._seed_stage2()
        else:
            w_i, a_i = self._imu_at(sample, 0.5 * (self._t + t))
            self._propagate_stage2(w_i, a_i, h, seed=True)

        self._t = t
        self._last_imu = sample
        self.stats.imu_samples += 1
        if self._check_cov:
            self._record_health()
        return self.current_estimate()

    def _imu_at(self, sample, t):
        """Measurement linearly interpolated between the previous and the
        incoming sample; falls back to the incoming values on the first step."""
        prev = self._last_imu
        if prev is None or sample.t <= prev.t:
            return sample.w_m, sample.a_m
        alpha = np.clip((t - prev.t) / (sample.t - prev.t), 0.0, 1.0)
        return ((1 - alpha) * prev.w_m + alpha * sample.w_m,
                (1 - alpha) * prev.a_m + alpha * sample.a_m)

    def _propagate_stage2(self, w_m, a_m, h, seed):
        use_seed = seed and self._coupling
        if use_seed:
            self._ekf.imu.b_g = self._gyro.b_g.copy()
        self._ekf = msckf.imu_propagate(
            self._ekf, w_m, a_m, h, self.config.imu_noise,
            q_new=self._gyro.q.copy() if use_seed else None)

    def _seed_stage2(self):
        self._ekf.imu.q = self._gyro.q.copy()
        self._ekf.imu.b_g = self._gyro.b_g.copy()

    def process_stereo(self, frame):
        """Ingest one stereo frame; may defer until IMU data covers its
        timestamp. Returns the current estimate (None before init)."""
        if not self._initialized:
            self.stats.frames_dropped += 1
            return None
        t = float(frame.t)
        if self._last_frame_t is not None and t <= self._last_frame_t + _EPS:
            raise ValueError("out-of-order stereo frame at t=%r" % t)
        if t < self._t - 1e-9:
            raise ValueError("stereo frame at t=%r is older than the filter "
                             "time %r" % (t, self._t))
        self._last_frame_t = t
        if t > self._t + _EPS:
            if self._pending is not None:
                raise ValueError("a stereo frame is already pending")
            self._pending = frame
            return self.current_estimate()
        self._handle_frame(frame)
        return self.current_estimate()

    # ------------------------------------------------------- frame logic

    def _handle_frame(self, frame):
        cfg = self.config
        self.stats.frames += 1
        st = self._ekf
        is_kf = msckf.classify_keyframe(frame.stats, cfg.keyframe)

        if len(st.window) >= cfg.window_size:
            st, _ = msckf.marginalize_poses(st, cfg.keyframe)
            if self._check_cov:
                self._record_health(st)
        st = msckf.augment_state(st, cfg.extrinsics, keyframe=is_kf,
                                 frame_stats=frame.stats,
                                 capacity=cfg.window_size)
        if self._check_cov:
            self._record_health(st)

        new_id = st.window[-1].state_id
        seen = set()
        for fid, obs in frame.tracks:
            track = self._tracks.get(fid)
            if track is None:
                track = FeatureTrack(fid)
                self._tracks[fid] = track
            track.obs[new_id] = obs
            seen.add(fid)

        closed = [fid for fid in self._tracks if fid not in seen]
        batch = []
        sigma = cfg.sigma_px_normalized
        for fid in closed:
            track = self._tracks.pop(fid)
            self.stats.features_closed += 1
            if len(track.obs) < cfg.min_track_length:
                continue
            live = [p for p in st.window if p.state_id in track.obs]
            if len(live) < 2:
                continue
            p_f, ok = vision.triangulate_feature(track, st.window,
                                                 cfg.extrinsics, self._tri_opts)
            if not ok:
                self.stats.triangulation_failures += 1
                continue
            try:
                H_X, H_f, r = msckf.measurement_jacobians(st, track, p_f,
                                                          cfg.extrinsics)
                H_o, r_o, leak = vision.nullspace_project(H_X, H_f, r)
            except (vision.CheiralityError, vision.NullspaceError):
                self.stats.triangulation_failures += 1
                continue
            self.stats.max_nullspace_leak = max(self.stats.max_nullspace_leak,
                                                leak)
            if H_o.shape[0] != 4 * len(live) - 3:
                self.stats.projection_rows_ok = False
            if cfg.gating and not msckf.chi_square_gate(
                    st, H_o, r_o, sigma, cfg.chi2_confidence):
                self.stats.gate_rejections += 1
                continue
            batch.append((H_o, r_o))

        if batch:
            st = msckf.msckf_update(st, batch, sigma)
            self.stats.updates += 1
            self.stats.features_used += len(batch)

        self._ekf = st
        if batch and self._coupling:
            # Write the vision-corrected attitude/bias back to stage 1 so
            # the next seed does not discard the update.
            self._gyro.q = st.imu.q.copy()
            self._gyro.b_g = st.imu.b_g.copy()
        if self._check_cov:
            self._record_health()

    # -------------------------------------------------------- inspection

    def current_estimate(self):
        if not self._initialized:
            raise RuntimeError("pipeline not initialized")
        st = self._ekf
        diag = np.sqrt(np.clip(np.diag(st.P), 0.0, None))
        sigmas = np.concatenate([diag[TH], diag[V], diag[POS]])
        return PoseEstimate(self._t, st.imu.q.copy(), st.imu.p.copy(),
                            st.imu.v.copy(), sigmas)

    @property
    def initialized(self):
        return self._initialized

    @property
    def ekf_state(self):
        return self._ekf

    @property
    def gyro_state(self):
        return self._gyro

    def _record_health(self, st=None):
        P = (st or self._ekf).P
        self.health.events += 1
        asym = float(np.abs(P - P.T).max())
        self.health.max_asymmetry = max(self.health.max_asymmetry, asym)
        eigs = np.linalg.eigvalsh(P)
        trace = float(np.trace(P))
        if trace > 0:
            self.health.min_eig_ratio = min(self.health.min_eig_ratio,
                                            float(eigs[0]) / trace)
