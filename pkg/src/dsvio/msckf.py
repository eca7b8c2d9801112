"""Second-stage sliding-window stereo EKF.

Error-state propagation with per-step camera-pose augmentation, feature
updates through nullspace projection, and keyframe-aware marginalization.
All operations are functional: they take an EkfState and return a new one.
"""

import numpy as np
from scipy.stats import chi2

from . import quat
from .state import (BA, BG, IMU_DIM, POS, POSE_DIM, TH, V, CameraPose,
                    EkfState)
from .vision import CheiralityError, projection_jacobian

_CHI2_CACHE = {}


def _symmetrize(P):
    return 0.5 * (P + P.T)


def error_state_matrices(imu, w_hat, a_hat):
    """Continuous-time error dynamics (F, G) at the given nominal state.

    Error ordering [dtheta, b_g, v, b_a, p]; noise ordering
    [n_g, n_wg, n_a, n_wa]. Bias rows are zero (random walks); the
    position row couples to velocity with +I.
    """
    C_T = quat.to_rotmat(imu.q).T
    F = np.zeros((IMU_DIM, IMU_DIM))
    F[TH, TH] = -quat.skew(w_hat)
    F[TH, BG] = -np.eye(3)
    F[V, TH] = -C_T @ quat.skew(a_hat)
    F[V, BA] = -C_T
    F[POS, V] = np.eye(3)

    G = np.zeros((IMU_DIM, 12))
    G[TH, 0:3] = -np.eye(3)
    G[BG, 3:6] = np.eye(3)
    G[V, 6:9] = -C_T
    G[BA, 9:12] = np.eye(3)
    return F, G


def imu_propagate(state, w_m, a_m, h, noise, q_new=None):
    """Propagate the full state and covariance with one IMU sample.

    q_new, when given, pins the end-of-step attitude (used by the
    dual-stage coupling); otherwise the attitude integrates the gyro
    measurement directly.
    """
    if not h > 0.0:
        raise ValueError("time step must be positive, got %r" % h)
    w_m = np.asarray(w_m, dtype=float)
    a_m = np.asarray(a_m, dtype=float)
    if not (np.all(np.isfinite(w_m)) and np.all(np.isfinite(a_m))):
        raise ValueError("non-finite IMU measurement")

    imu = state.imu
    w_hat = w_m - imu.b_g
    a_hat = a_m - imu.b_a
    C_old_T = quat.to_rotmat(imu.q).T
    if q_new is None:
        q_new = quat.integrate(imu.q, w_hat, h)
    C_new_T = quat.to_rotmat(q_new).T

    # Trapezoidal velocity/position integration over the step.
    acc0 = C_old_T @ a_hat + noise.g_vec
    acc1 = C_new_T @ a_hat + noise.g_vec
    v_new = imu.v + 0.5 * h * (acc0 + acc1)
    p_new = imu.p + 0.5 * h * (imu.v + v_new)

    F, G = error_state_matrices(imu, w_hat, a_hat)
    Fh = F * h
    Fh2 = Fh @ Fh
    Phi = np.eye(IMU_DIM) + Fh + 0.5 * Fh2 + Fh2 @ Fh / 6.0

    Qc = np.diag([noise.sigma_g**2] * 3 + [noise.sigma_wg**2] * 3 +
                 [noise.sigma_a**2] * 3 + [noise.sigma_wa**2] * 3)
    GQG = G @ Qc @ G.T
    Qd = 0.5 * h * (Phi @ GQG @ Phi.T + GQG)

    P = state.P.copy()
    P_II = Phi @ P[:IMU_DIM, :IMU_DIM] @ Phi.T + Qd
    P[:IMU_DIM, :IMU_DIM] = 0.5 * (P_II + P_II.T)
    if state.dim > IMU_DIM:
        P_IC = Phi @ P[:IMU_DIM, IMU_DIM:]
        P[:IMU_DIM, IMU_DIM:] = P_IC
        P[IMU_DIM:, :IMU_DIM] = P_IC.T

    new_imu = imu.copy()
    new_imu.q = q_new
    new_imu.v = v_new
    new_imu.p = p_new
    # Window poses are unaffected by propagation; share them.
    return EkfState(new_imu, state.window, P, state.next_state_id)


def augment_state(state, ext, keyframe=False, frame_stats=None, capacity=None):
    """Append the current camera pose to the window and grow the covariance."""
    if capacity is not None and len(state.window) >= capacity:
        raise ValueError("window full (%d poses); marginalize first"
                         % len(state.window))
    imu = state.imu
    C_I_T = quat.to_rotmat(imu.q).T
    q_c = quat.multiply(ext.q_CI, imu.q)
    p_c = imu.p + C_I_T @ ext.p_IC

    d = state.dim
    J = np.zeros((POSE_DIM, d))
    J[0:3, TH] = quat.to_rotmat(ext.q_CI)
    J[3:6, TH] = -C_I_T @ quat.skew(ext.p_IC)
    J[3:6, POS] = np.eye(3)

    PJt = state.P @ J.T
    P_new = np.empty((d + POSE_DIM, d + POSE_DIM))
    P_new[:d, :d] = state.P
    P_new[:d, d:] = PJt
    P_new[d:, :d] = PJt.T
    P_new[d:, d:] = J @ PJt
    P_new = _symmetrize(P_new)

    pose = CameraPose(state.next_state_id, q_c, p_c, keyframe, frame_stats)
    window = [c.copy() for c in state.window] + [pose]
    return EkfState(imu.copy(), window, P_new, state.next_state_id + 1)


def classify_keyframe(stats, policy):
    """Keyframe when parallax built up or tracking quality dropped."""
    return (stats.mean_parallax >= policy.parallax_threshold
            or stats.tracked_count <= policy.min_tracked)


def marginalize_poses(state, policy):
    """Drop one window pose: the oldest non-keyframe, else the oldest.

    In "fifo" mode the oldest pose goes unconditionally. Returns the new
    state and the removed state ids.
    """
    if not state.window:
        raise ValueError("cannot marginalize from an empty window")
    index = 0
    if policy.mode == "paper":
        for i, pose in enumerate(state.window):
            if not pose.keyframe:
                index = i
                break
    sl = state.pose_slice(index)
    keep = np.r_[0:sl.start, sl.stop:state.dim]
    P_new = state.P[np.ix_(keep, keep)].copy()
    window = [c.copy() for i, c in enumerate(state.window) if i != index]
    removed = [state.window[index].state_id]
    return EkfState(state.imu.copy(), window, P_new, state.next_state_id), removed


def measurement_jacobians(state, track, p_f, ext):
    """Stacked stereo-observation Jacobians for one triangulated feature.

    Returns (H_X, H_f, r) with 4 rows per live observing pose; H_X columns
    are nonzero only for the observing camera poses.
    """
    observing = [(i, pose) for i, pose in enumerate(state.window)
                 if pose.state_id in track.obs]
    m = len(observing)
    d = state.dim
    H_X = np.zeros((4 * m, d))
    H_f = np.zeros((4 * m, 3))
    r = np.zeros(4 * m)
    C_rl = quat.to_rotmat(ext.q_RL)

    for k, (idx, pose) in enumerate(observing):
        obs = track.obs[pose.state_id]
        C1 = quat.to_rotmat(pose.q)
        pc1 = C1 @ (p_f - pose.p)
        pc2 = C_rl @ (pc1 - ext.p_LR)
        if pc1[2] <= 0.0 or pc2[2] <= 0.0:
            raise CheiralityError("triangulated point behind camera")
        J1 = projection_jacobian(pc1)
        J2 = projection_jacobian(pc2) @ C_rl
        dpc1_dx = np.hstack([quat.skew(pc1), -C1])
        rows = slice(4 * k, 4 * k + 4)
        H_X[rows, state.pose_slice(idx)] = np.vstack([J1 @ dpc1_dx,
                                                      J2 @ dpc1_dx])
        H_f[rows] = np.vstack([J1 @ C1, J2 @ C1])
        z_hat = np.array([pc1[0] / pc1[2], pc1[1] / pc1[2],
                          pc2[0] / pc2[2], pc2[1] / pc2[2]])
        r[rows] = obs.as_array() - z_hat
    return H_X, H_f, r


def chi_square_gate(state, H_o, r_o, sigma, confidence=0.95):
    """Mahalanobis test of a projected residual block against chi-square."""
    dof = len(r_o)
    key = (dof, confidence)
    if key not in _CHI2_CACHE:
        _CHI2_CACHE[key] = chi2.ppf(confidence, dof)
    S = H_o @ state.P @ H_o.T + sigma**2 * np.eye(dof)
    try:
        gamma = float(r_o @ np.linalg.solve(S, r_o))
    except np.linalg.LinAlgError:
        return False
    return gamma < _CHI2_CACHE[key]


def inject_error(state, dx):
    """Apply an error-state correction: multiplicative for attitudes."""
    new = state.copy()
    new.imu.q = quat.multiply(quat.small_angle(dx[TH]), state.imu.q)
    new.imu.b_g = state.imu.b_g + dx[BG]
    new.imu.v = state.imu.v + dx[V]
    new.imu.b_a = state.imu.b_a + dx[BA]
    new.imu.p = state.imu.p + dx[POS]
    for i, pose in enumerate(new.window):
        sl = state.pose_slice(i)
        pose.q = quat.multiply(quat.small_angle(dx[sl][0:3]), pose.q)
        pose.p = pose.p + dx[sl][3:6]
    return new


def msckf_update(state, batch, sigma_px):
    """EKF update from gated, nullspace-projected residual blocks.

    Stacks the blocks, compresses rows with a thin QR when overdetermined,
    and applies a Joseph-form covariance update. An empty batch leaves the
    state unchanged.
    """
    if not batch:
        return state
    H = np.vstack([b[0] for b in batch])
    r = np.concatenate([b[1] for b in batch])
    d = state.dim
    if H.shape[0] > d:
        Q, R = np.linalg.qr(H)
        H = R
        r = Q.T @ r

    P = state.P
    S = H @ P @ H.T + sigma_px**2 * np.eye(H.shape[0])
    K = np.linalg.solve(S, H @ P).T
    dx = K @ r

    IKH = np.eye(d) - K @ H
    P_new = IKH @ P @ IKH.T + sigma_px**2 * (K @ K.T)
    new = inject_error(state, dx)
    new.P = _symmetrize(P_new)
    return new
