import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsvio import quat

RNG = np.random.default_rng(2024)


def random_unit(rng):
    return quat.normalize(rng.normal(size=4))


unit_quats = st.builds(
    lambda seed: random_unit(np.random.default_rng(seed)), st.integers(0, 2**32 - 1))
vectors = st.builds(
    lambda seed: np.random.default_rng(seed).uniform(-10, 10, size=3),
    st.integers(0, 2**32 - 1))


def rodrigues(v):
    """Active rotation matrix about v (test-side oracle)."""
    angle = np.linalg.norm(v)
    if angle < 1e-15:
        return np.eye(3)
    k = v / angle
    K = quat.skew(k)
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


class TestSkew:
    def test_zero(self):
        assert np.array_equal(quat.skew([0, 0, 0]), np.zeros((3, 3)))

    def test_direct_substitution(self):
        expected = np.array([[0, -3, 2], [3, 0, -1], [-2, 1, 0]], dtype=float)
        assert np.array_equal(quat.skew([1, 2, 3]), expected)

    @given(vectors)
    @settings(max_examples=50)
    def test_annihilates_own_vector(self, v):
        assert np.allclose(quat.skew(v) @ v, 0.0, atol=1e-12)

    @given(vectors)
    @settings(max_examples=50)
    def test_antisymmetric(self, v):
        S = quat.skew(v)
        assert np.array_equal(S, -S.T)


class TestOmegaMatrix:
    def test_zero(self):
        assert np.array_equal(quat.omega_matrix([0, 0, 0]), np.zeros((4, 4)))

    def test_block_structure(self):
        # Scalar-first layout: first row (0, -w), first column (0, w),
        # lower-right block -skew(w).
        w = np.array([0.0, 0.0, 1.0])
        O = quat.omega_matrix(w)
        assert np.array_equal(O[0, 1:], -w)
        assert np.array_equal(O[1:, 0], w)
        assert np.array_equal(O[1:, 1:], -quat.skew(w))

    @given(vectors)
    @settings(max_examples=50)
    def test_antisymmetric(self, w):
        O = quat.omega_matrix(w)
        assert np.allclose(O + O.T, 0.0)

    @given(unit_quats, vectors)
    @settings(max_examples=50)
    def test_generates_body_rate_kinematics(self, q, w):
        # d/dt C(q) = -skew(w) C(q) when qdot = 0.5 * Omega(w) q.
        eps = 1e-7
        qdot = 0.5 * quat.omega_matrix(w) @ q
        C0 = quat.to_rotmat(q)
        C1 = quat.to_rotmat(quat.normalize(q + eps * qdot))
        Cdot = (C1 - C0) / eps
        assert np.allclose(Cdot, -quat.skew(w) @ C0, atol=1e-5)


class TestToRotmat:
    def test_identity(self):
        assert np.allclose(quat.to_rotmat(quat.IDENTITY), np.eye(3))

    def test_entries_pinned(self):
        # All nine entries against the component expansion.
        q0, q1, q2, q3 = random_unit(np.random.default_rng(7))
        R = quat.to_rotmat([q0, q1, q2, q3])
        expected = np.array([
            [q0**2 + q1**2 - q2**2 - q3**2, 2 * (q1 * q2 + q0 * q3), 2 * (q1 * q3 - q0 * q2)],
            [2 * (q1 * q2 - q0 * q3), q0**2 - q1**2 + q2**2 - q3**2, 2 * (q2 * q3 + q0 * q1)],
            [2 * (q1 * q3 + q0 * q2), 2 * (q2 * q3 - q0 * q1), q0**2 - q1**2 - q2**2 + q3**2],
        ])
        assert np.allclose(R, expected, atol=1e-15)

    def test_z_quarter_turn(self):
        q = np.array([np.sqrt(0.5), 0.0, 0.0, np.sqrt(0.5)])
        R = quat.to_rotmat(q)
        assert np.allclose(R, rodrigues(np.array([0, 0, np.pi / 2])).T, atol=1e-12)
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)

    @given(unit_quats)
    @settings(max_examples=100)
    def test_proper_rotation(self, q):
        R = quat.to_rotmat(q)
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-10)


class TestMultiply:
    def test_identity(self):
        q = random_unit(np.random.default_rng(3))
        assert np.allclose(quat.multiply(quat.IDENTITY, q), q)

    def test_inverse(self):
        q = random_unit(np.random.default_rng(4))
        r = quat.multiply(q, quat.conjugate(q))
        if r[0] < 0:
            r = -r
        assert np.allclose(r, quat.IDENTITY, atol=1e-12)

    @given(unit_quats, unit_quats)
    @settings(max_examples=100)
    def test_rotation_matrix_homomorphism(self, a, b):
        lhs = quat.to_rotmat(quat.multiply(a, b))
        rhs = quat.to_rotmat(a) @ quat.to_rotmat(b)
        assert np.allclose(lhs, rhs, atol=1e-10)

    @given(unit_quats, unit_quats, unit_quats)
    @settings(max_examples=50)
    def test_associative(self, a, b, c):
        lhs = quat.multiply(quat.multiply(a, b), c)
        rhs = quat.multiply(a, quat.multiply(b, c))
        assert min(np.abs(lhs - rhs).max(), np.abs(lhs + rhs).max()) < 1e-12

    @given(unit_quats, unit_quats)
    @settings(max_examples=100)
    def test_unit_norm(self, a, b):
        assert np.linalg.norm(quat.multiply(a, b)) == pytest.approx(1.0, abs=1e-9)


class TestSmallAngle:
    def test_zero(self):
        assert np.allclose(quat.small_angle([0, 0, 0]), quat.IDENTITY)

    def test_first_order(self):
        q = quat.small_angle([1e-6, 0, 0])
        assert q[0] == pytest.approx(1.0, abs=1e-9)
        assert q[1] == pytest.approx(5e-7, rel=1e-6)

    def test_second_order_consistency(self):
        # rotmat(small_angle(d)) - (I - skew(d)) shrinks quadratically.
        rng = np.random.default_rng(11)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        errs = []
        for scale in (1e-2, 1e-3, 1e-4):
            v = d * scale
            err = np.abs(quat.to_rotmat(quat.small_angle(v))
                         - (np.eye(3) - quat.skew(v))).max()
            errs.append(err)
        assert errs[1] < errs[0] * 1e-1
        assert errs[2] < errs[1] * 1e-1
        assert errs[0] == pytest.approx(0.5 * 1e-4, rel=0.5)


class TestRotvecAndIntegrate:
    def test_matches_rodrigues_transpose(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            v = rng.normal(size=3)
            assert np.allclose(quat.to_rotmat(quat.from_rotvec(v)),
                               rodrigues(v).T, atol=1e-12)

    def test_integrate_constant_rate(self):
        w = np.array([0.3, -0.2, 0.5])
        q = quat.IDENTITY.copy()
        for _ in range(100):
            q = quat.integrate(q, w, 0.01)
        assert np.allclose(quat.to_rotmat(q), rodrigues(w).T, atol=1e-12)

    def test_error_vector_roundtrip(self):
        rng = np.random.default_rng(6)
        q_ref = random_unit(rng)
        d = rng.normal(size=3) * 1e-4
        q = quat.multiply(quat.small_angle(d), q_ref)
        assert np.allclose(quat.error_vector(q, q_ref), d, atol=1e-10)

    def test_angle_between(self):
        q = quat.from_rotvec([0, 0, 0.3])
        assert quat.angle_between(q, quat.IDENTITY) == pytest.approx(0.3, abs=1e-12)
        assert quat.angle_between(q, -q) == pytest.approx(0.0, abs=1e-6)
