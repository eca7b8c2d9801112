"""First-stage EKF: gyroscope propagation corrected by accelerometer gravity.

State is the 7-vector [q0, q1, q2, q3, bg_x, bg_y, bg_z] (unit attitude
quaternion plus gyro bias) with a full 7x7 covariance in the same ordering.
The gravity update observes roll and pitch only; rotation about the gravity
direction stays unobserved.

The measurement model predicts the specific force of a body at rest as
``to_rotmat(q) @ [0, 0, -g]``, i.e. a z-down world. Callers living in a
z-up world (gravity vector (0, 0, -g)) must negate the accelerometer
sample before passing it to :func:`gyro_update`.
"""

from dataclasses import dataclass, field

import numpy as np

from . import quat


@dataclass
class GyroState:
    """Attitude quaternion (global to body) and gyro bias [rad/s]."""

    q: np.ndarray = field(default_factory=lambda: quat.IDENTITY.copy())
    b_g: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def copy(self):
        return GyroState(self.q.copy(), self.b_g.copy())


@dataclass
class GyroNoiseParams:
    """Stage-1 noise configuration.

    sigma_q and sigma_b are per-step process noise standard deviations on
    the quaternion components and the bias; sigma_a is the accelerometer
    measurement noise std [m/s^2]; accel_gate is the relative band around g
    inside which gravity updates are accepted.
    """

    sigma_q: float = 1e-5
    sigma_b: float = 1e-6
    sigma_a: float = 0.05
    g: float = 9.81
    accel_gate: float = 0.1
    # Innovation gate in combined sigmas; rejects gravity updates whose
    # residual direction is inconsistent with the predicted uncertainty
    # (sustained lateral acceleration passes the norm gate but not this).
    innovation_gate: float = 5.0


def initial_covariance(sigma_q0=1e-2, sigma_b0=1e-2):
    return np.diag([sigma_q0**2] * 4 + [sigma_b0**2] * 3)


def gyro_process_jacobian(state, w_hat, h):
    """7x7 Jacobian of the discrete propagation map at (q, b_g).

    Block layout [[d q'/d q, d q'/d b_g], [0, I3]]; the bias block is
    identity (random-walk bias). Entries are the exact partials of the
    first-order quaternion advance below and are pinned by the
    finite-difference tests.
    """
    q0, q1, q2, q3 = state.q
    t = 0.5 * h
    H = np.zeros((7, 7))
    H[:4, :4] = np.eye(4) + t * quat.omega_matrix(w_hat)
    H[:4, 4:] = t * np.array(
        [
            [q1, q2, q3],
            [-q0, q3, -q2],
            [-q3, -q0, q1],
            [q2, -q1, -q0],
        ]
    )
    H[4:, 4:] = np.eye(3)
    return H


def gyro_propagate(state, P, w_m, h, noise):
    """Propagate state and covariance with one gyro sample over h seconds."""
    if not h > 0.0:
        raise ValueError("time step must be positive, got %r" % h)
    w_m = np.asarray(w_m, dtype=float)
    if not np.all(np.isfinite(w_m)):
        raise ValueError("non-finite gyro measurement")
    w_hat = w_m - state.b_g
    H = gyro_process_jacobian(state, w_hat, h)
    q_new = quat.normalize(H[:4, :4] @ state.q)
    Q = np.diag([noise.sigma_q**2] * 4 + [noise.sigma_b**2] * 3)
    P_new = H @ P @ H.T + Q
    P_new = 0.5 * (P_new + P_new.T)
    return GyroState(q_new, state.b_g.copy()), P_new


def predict_accel(state, g):
    """Specific force of a body at rest, in body coordinates (z-down world)."""
    return quat.to_rotmat(state.q) @ np.array([0.0, 0.0, -g])


def accel_measurement_jacobian(state, g):
    """3x7 Jacobian of predict_accel w.r.t. the gyro state (bias columns zero)."""
    q0, q1, q2, q3 = state.q
    H = np.zeros((3, 7))
    H[:, :4] = 2.0 * g * np.array(
        [
            [q2, -q3, q0, -q1],
            [-q1, -q0, -q3, -q2],
            [-q0, q1, q2, -q3],
        ]
    )
    return H


def gyro_update(state, P, a_m, noise):
    """Gravity-direction EKF update from one accelerometer sample.

    Samples whose magnitude deviates from g by more than accel_gate
    (relative) are rejected; returns (state, P, accepted).
    """
    a_m = np.asarray(a_m, dtype=float)
    if not np.all(np.isfinite(a_m)):
        return state, P, False
    if abs(np.linalg.norm(a_m) - noise.g) / noise.g > noise.accel_gate:
        return state, P, False

    z_hat = predict_accel(state, noise.g)
    H = accel_measurement_jacobian(state, noise.g)
    r = a_m - z_hat
    S = H @ P @ H.T + noise.sigma_a**2 * np.eye(3)
    if noise.innovation_gate > 0.0:
        gamma = float(r @ np.linalg.solve(S, r))
        if gamma > noise.innovation_gate**2 * 3.0:
            return state, P, False
    K = np.linalg.solve(S, H @ P).T
    dx = K @ r

    # The gravity direction is invariant under rotation about itself, so the
    # mean correction must not rotate about it; remove that component (it
    # otherwise accumulates as a rectified yaw walk over many updates).
    dq = dx[:4]
    u_b = z_hat / np.linalg.norm(z_hat)
    t_yaw = 0.5 * quat.omega_matrix(u_b) @ state.q
    t_yaw = t_yaw / np.linalg.norm(t_yaw)
    dq = dq - (t_yaw @ dq) * t_yaw

    q_new = quat.normalize(state.q + dq)
    b_new = state.b_g + dx[4:]

    IKH = np.eye(7) - K @ H
    P_new = IKH @ P @ IKH.T + noise.sigma_a**2 * (K @ K.T)
    P_new = 0.5 * (P_new + P_new.T)
    return GyroState(q_new, b_new), P_new, True
