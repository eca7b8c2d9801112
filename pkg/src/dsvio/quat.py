"""Quaternion and small-matrix kernels shared by both filter stages.

Conventions used throughout the package:

- Quaternions are length-4 numpy arrays in scalar-first order
  ``[q0, q1, q2, q3]`` and encode the rotation taking global-frame vectors
  into the body frame: ``v_body = to_rotmat(q) @ v_global``.
- ``multiply(a, b)`` composes rotations so that
  ``to_rotmat(multiply(a, b)) == to_rotmat(a) @ to_rotmat(b)``.
- Attitude error vectors ``dtheta`` are small body-frame rotations applied
  on the left: ``q_true = multiply(small_angle(dtheta), q_est)``, i.e.
  ``C_true ~= (I - skew(dtheta)) @ C_est``.
- Angular rates are body-frame rad/s.
"""

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def normalize(q):
    """Return q scaled to unit norm."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalize quaternion with norm %r" % n)
    return q / n


def skew(v):
    """Cross-product matrix: skew(v) @ u == cross(v, u)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def omega_matrix(w):
    """4x4 quaternion-rate matrix: qdot = 0.5 * omega_matrix(w) @ q.

    Laid out for scalar-first components: first row (0, -w^T), first
    column (0, w), lower-right 3x3 block -skew(w). Antisymmetric.
    """
    x, y, z = w
    return np.array(
        [
            [0.0, -x, -y, -z],
            [x, 0.0, z, -y],
            [y, -z, 0.0, x],
            [z, y, -x, 0.0],
        ]
    )


def to_rotmat(q):
    """Rotation matrix mapping global-frame vectors to the body frame."""
    q0, q1, q2, q3 = q
    return np.array(
        [
            [
                q0 * q0 + q1 * q1 - q2 * q2 - q3 * q3,
                2.0 * (q1 * q2 + q0 * q3),
                2.0 * (q1 * q3 - q0 * q2),
            ],
            [
                2.0 * (q1 * q2 - q0 * q3),
                q0 * q0 - q1 * q1 + q2 * q2 - q3 * q3,
                2.0 * (q2 * q3 + q0 * q1),
            ],
            [
                2.0 * (q1 * q3 + q0 * q2),
                2.0 * (q2 * q3 - q0 * q1),
                q0 * q0 - q1 * q1 - q2 * q2 + q3 * q3,
            ],
        ]
    )


def multiply(a, b):
    """Compose rotations: to_rotmat(multiply(a, b)) = to_rotmat(a) @ to_rotmat(b).

    Result is renormalized.
    """
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    out = np.array(
        [
            bw * aw - bx * ax - by * ay - bz * az,
            bw * ax + bx * aw + by * az - bz * ay,
            bw * ay - bx * az + by * aw + bz * ax,
            bw * az + bx * ay - by * ax + bz * aw,
        ]
    )
    return normalize(out)


def conjugate(q):
    """Inverse rotation for a unit quaternion."""
    return np.array([q[0], -q[1], -q[2], -q[3]])


def small_angle(dtheta):
    """Unit quaternion for a small rotation vector (first-order, renormalized).

    to_rotmat(small_angle(d)) ~= I - skew(d) for small |d|.
    """
    return normalize(np.array([1.0, 0.5 * dtheta[0], 0.5 * dtheta[1], 0.5 * dtheta[2]]))


def from_rotvec(v):
    """Exact unit quaternion for a rotation vector (exp map).

    to_rotmat(from_rotvec(v)) is the transpose of the active Rodrigues
    rotation about v, matching the global-to-body convention.
    """
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return small_angle(v)
    axis = v / angle
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) * axis))


def integrate(q, w, h):
    """Advance attitude by a constant body rate w over h seconds (exact)."""
    return multiply(from_rotvec(np.asarray(w, dtype=float) * h), q)


def error_vector(q, q_ref):
    """Small rotation d with q ~= multiply(small_angle(d), q_ref)."""
    dq = multiply(q, conjugate(q_ref))
    if dq[0] < 0.0:
        dq = -dq
    return 2.0 * dq[1:] / dq[0]


def angle_between(a, b):
    """Rotation angle in radians between two unit quaternions."""
    d = abs(float(np.dot(a, b)))
    return 2.0 * np.arccos(min(d, 1.0))
