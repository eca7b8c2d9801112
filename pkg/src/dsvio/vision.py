"""Stereo feature geometry: projection, triangulation, nullspace projection."""

from dataclasses import dataclass

import numpy as np


from . import quat
from .state import StereoObservation


class CheiralityError(ValueError):
    """A point projected behind a camera."""


class NullspaceError(ValueError):
    """Feature Jacobian is rank deficient; the feature must be dropped."""


@dataclass
class TriangulationOptions:
    max_iters: int = 10
    step_tol: float = 1e-8
    min_depth: float = 0.1     # anchor-frame depth bounds [m]
    max_depth: float = 100.0
    sigma: float = 1.5 / 460.0  # expected residual scale, normalized coords
    max_residual_sigmas: float = 3.0


def right_camera_pose(q_c, p_c, ext):
    """Global pose of the right camera derived from the left pose."""
    q_r = quat.multiply(ext.q_RL, q_c)
    p_r = p_c + quat.to_rotmat(q_c).T @ ext.p_LR
    return q_r, p_r


def projection_jacobian(pc):
    """2x3 Jacobian of (X/Z, Y/Z) w.r.t. the camera-frame point."""
    x, y, z = pc
    return np.array([[1.0 / z, 0.0, -x / z**2], [0.0, 1.0 / z, -y / z**2]])


def stereo_predict(pose, ext, p_f):
    """Project a global point into both cameras of a stereo pose.

    Raises CheiralityError if the point is not in front of both cameras.
    """
    C1 = quat.to_rotmat(pose.q)
    pc1 = C1 @ (np.asarray(p_f, dtype=float) - pose.p)
    C_rl = quat.to_rotmat(ext.q_RL)
    pc2 = C_rl @ (pc1 - ext.p_LR)
    if pc1[2] <= 0.0 or pc2[2] <= 0.0:
        raise CheiralityError(
            "point behind camera (depths %.3f / %.3f)" % (pc1[2], pc2[2]))
    return StereoObservation(pc1[0] / pc1[2], pc1[1] / pc1[2],
                             pc2[0] / pc2[2], pc2[1] / pc2[2])


def _observing_cameras(track, poses, ext):
    """Per-camera (C, p, z) tuples for all live observations, left then right."""
    cams = []
    C_rl = quat.to_rotmat(ext.q_RL)
    for pose in poses:
        obs = track.obs.get(pose.state_id)
        if obs is None:
            continue
        C1 = quat.to_rotmat(pose.q)
        p1 = pose.p
        C2 = C_rl @ C1
        p2 = p1 + C1.T @ ext.p_LR
        cams.append((C1, p1, np.array([obs.u1, obs.v1])))
        cams.append((C2, p2, np.array([obs.u2, obs.v2])))
    return cams


def _initial_guess(cams):
    """Midpoint of the first stereo ray pair, in the anchor (left) frame."""
    C0, p0, uv0 = cams[0]
    C1, p1, uv1 = cams[1]
    d0 = np.array([uv0[0], uv0[1], 1.0])
    # Second camera expressed in the anchor frame.
    R = C1 @ C0.T
    o1 = C0 @ (p1 - p0)
    d1 = R.T @ np.array([uv1[0], uv1[1], 1.0])
    # Closest points between rays (0 + s*d0) and (o1 + t*d1).
    a = d0 @ d0
    b = d0 @ d1
    c = d1 @ d1
    d = d0 @ o1
    e = d1 @ o1
    den = a * c - b * b
    if abs(den) < 1e-12:
        return d0 * 5.0
    s = (c * d - b * e) / den
    t = (b * d - a * e) / den
    return 0.5 * (s * d0 + (o1 + t * d1))


def triangulate_feature(track, poses, ext, options=None):
    """Estimate the global feature position from all live observations.

    Gauss-Newton on an inverse-depth parameterization anchored at the first
    observing left camera. Returns (p_f, ok); ok is False when geometry or
    convergence gates fail.
    """
    opts = options or TriangulationOptions()
    observing = [p for p in poses if p.state_id in track.obs]
    if len(observing) < 2:
        return np.zeros(3), False

    cams = _observing_cameras(track, observing, ext)
    C0, p0, _ = cams[0]
    guess = _initial_guess(cams)
    if guess[2] <= 0.0:
        return np.zeros(3), False
    theta = np.array([guess[0] / guess[2], guess[1] / guess[2], 1.0 / guess[2]])

    # Anchor-relative transforms, stacked over cameras.
    R = np.stack([C @ C0.T for C, _, _ in cams])          # (n, 3, 3)
    tvec = np.stack([C @ (p0 - p) for C, p, _ in cams])   # (n, 3)
    uv = np.stack([z for _, _, z in cams])                # (n, 2)

    def predict(th):
        return R[:, :, 0] * th[0] + R[:, :, 1] * th[1] + R[:, :, 2] + th[2] * tvec

    converged = False
    for _ in range(opts.max_iters):
        hs = predict(theta)
        z = hs[:, 2]
        if np.any(z <= 1e-9):
            return np.zeros(3), False
        res = hs[:, :2] / z[:, None] - uv
        # d(proj)/d(theta) through h: columns are R[:,0], R[:,1], tvec.
        Jh = np.stack([R[:, :, 0], R[:, :, 1], tvec], axis=2)
        inv_z = 1.0 / z
        Pj = np.zeros((len(cams), 2, 3))
        Pj[:, 0, 0] = inv_z
        Pj[:, 1, 1] = inv_z
        Pj[:, 0, 2] = -hs[:, 0] * inv_z**2
        Pj[:, 1, 2] = -hs[:, 1] * inv_z**2
        J = np.einsum("nij,njk->nik", Pj, Jh)
        JtJ = np.einsum("nik,nil->kl", J, J)
        Jtr = np.einsum("nik,ni->k", J, res)
        try:
            step = np.linalg.solve(JtJ, Jtr)
        except np.linalg.LinAlgError:
            return np.zeros(3), False
        theta = theta - step
        if np.linalg.norm(step) < opts.step_tol:
            converged = True
            break

    if not converged or theta[2] <= 0.0:
        return np.zeros(3), False
    depth = 1.0 / theta[2]
    if depth <= opts.min_depth or depth > opts.max_depth:
        return np.zeros(3), False

    p_f = C0.T @ (np.array([theta[0], theta[1], 1.0]) * depth) + p0

    hs = predict(theta)
    if np.any(hs[:, 2] <= 0.0):
        return np.zeros(3), False
    res = hs[:, :2] / hs[:, 2:] - uv
    mean_residual = float(np.mean(np.linalg.norm(res, axis=1)))
    if mean_residual > opts.max_residual_sigmas * opts.sigma:
        return p_f, False
    return p_f, True


def nullspace_project(H_X, H_f, r):
    """Project residuals onto the left nullspace of the feature Jacobian.

    Returns (H_o, r_o, leak) where leak = max|A^T H_f| measures how exactly
    the feature-position dependence was removed. Raises NullspaceError when
    H_f has rank < 3.
    """
    H_f = np.asarray(H_f, dtype=float)
    rows = H_f.shape[0]
    Q, R = np.linalg.qr(H_f, mode="complete")
    diag = np.abs(np.diag(R[:3, :3]))
    if rows < 4 or diag.min() < 1e-10 * max(diag.max(), 1e-300):
        raise NullspaceError("feature Jacobian rank deficient")
    A = Q[:, 3:]
    H_o = A.T @ H_X
    r_o = A.T @ r
    leak = float(np.abs(A.T @ H_f).max())
    return H_o, r_o, leak
