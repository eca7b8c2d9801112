"""Trajectory alignment, ATE RMSE, and NEES consistency metrics.

Alignment defaults to 4-DoF (yaw about gravity plus translation): those
are the directions visual-inertial odometry cannot observe, so removing a
full SE(3) fit would hide attitude error. SE(3) alignment is available for
cross-checking.
"""

from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2


@dataclass
class AlignmentResult:
    rotation: np.ndarray   # 3x3, applied to estimate positions
    translation: np.ndarray
    yaw: float             # rad, zero for se3 mode off-axis content
    matched: int

    def apply(self, p):
        return p @ self.rotation.T + self.translation


def associate(t_est, t_gt, max_dt=0.005):
    """Nearest-neighbor timestamp pairing within max_dt seconds."""
    t_est = np.asarray(t_est)
    t_gt = np.asarray(t_gt)
    idx = np.searchsorted(t_gt, t_est)
    pairs = []
    for i, j in enumerate(idx):
        best = None
        for cand in (j - 1, j):
            if 0 <= cand < len(t_gt):
                dt = abs(t_est[i] - t_gt[cand])
                if dt <= max_dt and (best is None or dt < best[1]):
                    best = (cand, dt)
        if best is not None:
            pairs.append((i, best[0]))
    return pairs


def _matched(est_p, gt_p, pairs):
    ei = np.array([i for i, _ in pairs])
    gi = np.array([j for _, j in pairs])
    return est_p[ei], gt_p[gi]


def align_4dof(est_t, est_p, gt_t, gt_p, max_dt=0.005):
    """Least-squares yaw + translation taking the estimate onto the truth."""
    pairs = associate(est_t, gt_t, max_dt)
    if len(pairs) < 2:
        raise ValueError("need at least 2 matched pose pairs, got %d" % len(pairs))
    e, g = _matched(np.asarray(est_p), np.asarray(gt_p), pairs)
    ec = e - e.mean(axis=0)
    gc = g - g.mean(axis=0)
    num = np.sum(ec[:, 0] * gc[:, 1] - ec[:, 1] * gc[:, 0])
    den = np.sum(ec[:, 0] * gc[:, 0] + ec[:, 1] * gc[:, 1])
    yaw = float(np.arctan2(num, den))
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    t = g.mean(axis=0) - R @ e.mean(axis=0)
    return AlignmentResult(R, t, yaw, len(pairs))


def align_se3(est_t, est_p, gt_t, gt_p, max_dt=0.005):
    """Rotation + translation (no scale) via the orthogonal Procrustes fit."""
    pairs = associate(est_t, gt_t, max_dt)
    if len(pairs) < 3:
        raise ValueError("need at least 3 matched pose pairs, got %d" % len(pairs))
    e, g = _matched(np.asarray(est_p), np.asarray(gt_p), pairs)
    ec = e - e.mean(axis=0)
    gc = g - g.mean(axis=0)
    H = ec.T @ gc
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    t = g.mean(axis=0) - R @ e.mean(axis=0)
    yaw = float(np.arctan2(R[1, 0], R[0, 0]))
    return AlignmentResult(R, t, yaw, len(pairs))


def ate_rmse(est_t, est_p, gt_t, gt_p, alignment, max_dt=0.005):
    """Root-mean-square position error over matched pairs after alignment."""
    pairs = associate(est_t, gt_t, max_dt)
    e, g = _matched(np.asarray(est_p), np.asarray(gt_p), pairs)
    res = alignment.apply(e) - g
    return float(np.sqrt(np.mean(np.sum(res**2, axis=1))))


def nees(est_t, est_p, sig_p, gt_t, gt_p, alignment=None, max_dt=0.005):
    """Per-step position NEES e^T P^-1 e using diagonal covariances.

    Steps with singular covariance are skipped and counted. Returns
    (nees_series, mean, skipped).
    """
    pairs = associate(est_t, gt_t, max_dt)
    est_p = np.asarray(est_p)
    gt_p = np.asarray(gt_p)
    sig_p = np.asarray(sig_p)
    values = []
    skipped = 0
    for i, j in pairs:
        p = est_p[i] if alignment is None else alignment.apply(est_p[i])
        e = p - gt_p[j]
        var = sig_p[i] ** 2
        if np.any(var <= 0.0) or not np.all(np.isfinite(var)):
            skipped += 1
            continue
        values.append(float(np.sum(e * e / var)))
    series = np.array(values)
    mean = float(series.mean()) if len(series) else float("nan")
    return series, mean, skipped


def nees_band(n_runs, dof=3, confidence=0.95):
    """Acceptance interval for the mean NEES of n_runs consistent runs."""
    lo = (1.0 - confidence) / 2.0
    hi = 1.0 - lo
    total = dof * n_runs
    return (chi2.ppf(lo, total) / n_runs, chi2.ppf(hi, total) / n_runs)


def attitude_rmse(est_t, est_q, gt_t, gt_q, alignment=None, max_dt=0.005):
    """RMS rotation angle between matched attitude pairs, in radians.

    When an alignment is given, its yaw is applied to the estimate first so
    the unobservable heading gauge does not count as attitude error.
    """
    from . import quat

    pairs = associate(est_t, gt_t, max_dt)
    if alignment is not None:
        q_gauge = quat.from_rotvec(np.array([0.0, 0.0, alignment.yaw]))
        est_q = [quat.multiply(q, q_gauge) for q in est_q]
    angles = [quat.angle_between(est_q[i], gt_q[j]) for i, j in pairs]
    return float(np.sqrt(np.mean(np.square(angles))))
