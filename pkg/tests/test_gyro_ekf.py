import numpy as np
import pytest

from dsvio import quat
from dsvio.gyro_ekf import (GyroNoiseParams, GyroState,
                            accel_measurement_jacobian, gyro_process_jacobian,
                            gyro_propagate, gyro_update, initial_covariance,
                            predict_accel)


def random_state(rng, bias_scale=0.01):
    return GyroState(quat.normalize(rng.normal(size=4)),
                     rng.normal(size=3) * bias_scale)


def propagation_map(x, w_m, h):
    """Raw discrete map the process Jacobian linearizes (pre-normalization)."""
    q, b = x[:4], x[4:]
    q_new = (np.eye(4) + 0.5 * h * quat.omega_matrix(w_m - b)) @ q
    return np.concatenate([q_new, b])


class TestProcessJacobian:
    def test_zero_rate_blocks(self):
        rng = np.random.default_rng(0)
        s = random_state(rng)
        H = gyro_process_jacobian(s, np.zeros(3), 0.01)
        assert np.allclose(H[:4, :4], np.eye(4))
        assert np.array_equal(H[4:, 4:], np.eye(3))
        assert np.array_equal(H[4:, :4], np.zeros((3, 4)))
        # q-to-bias block scales with the quaternion components.
        q0, q1, q2, q3 = s.q
        expected = 0.005 * np.array([[q1, q2, q3], [-q0, q3, -q2],
                                     [-q3, -q0, q1], [q2, -q1, -q0]])
        assert np.allclose(H[:4, 4:], expected, atol=1e-15)

    def test_bias_block_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            s = random_state(rng)
            H = gyro_process_jacobian(s, rng.normal(size=3), 0.005)
            assert np.array_equal(H[4:, 4:], np.eye(3))

    def test_finite_difference(self):
        rng = np.random.default_rng(2)
        eps = 1e-6
        for _ in range(100):
            s = random_state(rng)
            w_m = rng.normal(size=3)
            h = 0.01
            H = gyro_process_jacobian(s, w_m - s.b_g, h)
            x0 = np.concatenate([s.q, s.b_g])
            Hn = np.zeros((7, 7))
            for i in range(7):
                d = np.zeros(7)
                d[i] = eps
                Hn[:, i] = (propagation_map(x0 + d, w_m, h)
                            - propagation_map(x0 - d, w_m, h)) / (2 * eps)
            scale = max(1.0, np.abs(Hn).max())
            assert np.abs(H - Hn).max() / scale < 1e-5


class TestPropagate:
    def test_zero_effective_rate(self):
        rng = np.random.default_rng(3)
        s = random_state(rng)
        P = initial_covariance()
        s2, _ = gyro_propagate(s, P, s.b_g, 0.25, GyroNoiseParams())
        assert np.allclose(s2.q, s.q, atol=1e-15)
        assert np.array_equal(s2.b_g, s.b_g)

    def test_pinned_quarter_turn(self):
        s = GyroState()
        P = initial_covariance()
        s2, _ = gyro_propagate(s, P, np.array([0.0, 0.0, np.pi / 2]), 1.0,
                               GyroNoiseParams())
        # Unnormalized advance is (1, 0, 0, pi/4).
        expected = quat.normalize([1.0, 0.0, 0.0, np.pi / 4])
        assert np.allclose(s2.q, expected, atol=1e-12)
        assert s2.q[0] == pytest.approx(0.7864, abs=1e-4)
        assert s2.q[3] == pytest.approx(0.6176, abs=1e-4)

    def test_subdivision_approaches_exact_rotation(self):
        # The first-order advance converges to the exact exponential as the
        # step is subdivided.
        w = np.array([0.3, -0.4, 0.8])
        exact = quat.from_rotvec(w)
        noise = GyroNoiseParams(sigma_q=0.0, sigma_b=0.0)
        errs = []
        for n in (4, 16, 64):
            s = GyroState()
            P = initial_covariance()
            for _ in range(n):
                s, P = gyro_propagate(s, P, w, 1.0 / n, noise)
            errs.append(quat.angle_between(s.q, exact))
        assert errs[1] < errs[0] / 8
        assert errs[2] < errs[1] / 8

    def test_trace_grows_with_noise(self):
        P = np.diag(np.full(7, 1e-6))
        s = GyroState()
        _, P2 = gyro_propagate(s, P, np.zeros(3), 0.005, GyroNoiseParams())
        assert np.trace(P2) > np.trace(P)

    def test_rejects_bad_input(self):
        s = GyroState()
        P = initial_covariance()
        with pytest.raises(ValueError):
            gyro_propagate(s, P, np.zeros(3), 0.0, GyroNoiseParams())
        with pytest.raises(ValueError):
            gyro_propagate(s, P, np.array([np.nan, 0, 0]), 0.01,
                           GyroNoiseParams())


class TestAccelModel:
    def test_identity_attitude(self):
        z = predict_accel(GyroState(), 9.81)
        assert np.allclose(z, [0.0, 0.0, -9.81], atol=1e-15)

    def test_upside_down(self):
        s = GyroState(np.array([0.0, 1.0, 0.0, 0.0]), np.zeros(3))
        assert np.allclose(predict_accel(s, 9.81), [0.0, 0.0, 9.81], atol=1e-12)

    def test_magnitude_preserved(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            s = random_state(rng)
            assert np.linalg.norm(predict_accel(s, 9.81)) == pytest.approx(
                9.81, abs=1e-10)

    def test_jacobian_identity_attitude(self):
        H = accel_measurement_jacobian(GyroState(), 9.81)
        expected = np.zeros((3, 7))
        expected[0, 2] = 19.62
        expected[1, 1] = -19.62
        expected[2, 0] = -19.62
        assert np.allclose(H, expected, atol=1e-12)

    def test_jacobian_bias_columns_zero(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            H = accel_measurement_jacobian(random_state(rng), 9.81)
            assert np.array_equal(H[:, 4:], np.zeros((3, 3)))

    def test_jacobian_finite_difference(self):
        # Entries are the exact partials of predict_accel; pinned here by a
        # central-difference oracle over the quaternion components.
        rng = np.random.default_rng(6)
        eps = 1e-6
        for _ in range(100):
            s = random_state(rng)
            H = accel_measurement_jacobian(s, 9.81)
            Hn = np.zeros((3, 7))
            for i in range(4):
                qp, qm = s.q.copy(), s.q.copy()
                qp[i] += eps
                qm[i] -= eps
                Hn[:, i] = (predict_accel(GyroState(qp, s.b_g), 9.81)
                            - predict_accel(GyroState(qm, s.b_g), 9.81)) / (2 * eps)
            assert np.abs(H - Hn).max() / np.abs(Hn).max() < 1e-5


class TestUpdate:
    def test_zero_innovation_keeps_mean(self):
        rng = np.random.default_rng(7)
        s = random_state(rng, bias_scale=0.0)
        P = initial_covariance()
        noise = GyroNoiseParams()
        a_m = predict_accel(s, noise.g)
        s2, P2, accepted = gyro_update(s, P, a_m, noise)
        assert accepted
        assert np.allclose(s2.q, s.q, atol=1e-12)
        assert np.allclose(s2.b_g, s.b_g, atol=1e-15)
        assert np.trace(P2) < np.trace(P)

    def test_norm_gate(self):
        s = GyroState()
        P = initial_covariance()
        noise = GyroNoiseParams(accel_gate=0.1)
        a_m = predict_accel(s, 2 * noise.g)
        s2, P2, accepted = gyro_update(s, P, a_m, noise)
        assert not accepted
        assert np.array_equal(s2.q, s.q)
        assert np.array_equal(P2, P)

    def test_non_finite_gated(self):
        s = GyroState()
        P = initial_covariance()
        _, _, accepted = gyro_update(s, P, np.array([np.nan, 0, 9.81]),
                                     GyroNoiseParams())
        assert not accepted

    def test_trace_contracts_when_accepted(self):
        rng = np.random.default_rng(8)
        noise = GyroNoiseParams(innovation_gate=0.0)
        for _ in range(50):
            s = random_state(rng)
            A = rng.normal(size=(7, 7)) * 1e-2
            P = A @ A.T + 1e-6 * np.eye(7)
            a_m = predict_accel(s, noise.g) + rng.normal(size=3) * 0.01
            _, P2, accepted = gyro_update(s, P, a_m, noise)
            assert accepted
            assert np.trace(P2) <= np.trace(P) + 1e-12

    def test_static_convergence_monte_carlo(self):
        # Tilted 5 deg about x, accel noise 0.05; roll/pitch error after 500
        # updates must drop below 0.5 deg.
        rng = np.random.default_rng(9)
        noise = GyroNoiseParams(sigma_q=1e-5, sigma_b=1e-6, sigma_a=0.05)
        q_true = quat.from_rotvec([np.radians(5.0), 0.0, 0.0])
        errs = []
        for _ in range(5):
            s = GyroState()
            P = initial_covariance(5e-2, 1e-3)
            for _ in range(500):
                s, P = gyro_propagate(s, P, np.zeros(3), 0.005, noise)
                a_m = (quat.to_rotmat(q_true) @ np.array([0, 0, -noise.g])
                       + rng.normal(size=3) * noise.sigma_a)
                s, P, _ = gyro_update(s, P, a_m, noise)
            errs.append(np.degrees(quat.angle_between(s.q, q_true)))
        assert np.mean(errs) < 0.5

    def test_yaw_variance_never_decreases(self):
        # The accelerometer observes roll/pitch only. With a prior whose yaw
        # uncertainty is uncorrelated with the rest, variance along the
        # rotation-about-gravity direction must not shrink.
        rng = np.random.default_rng(10)
        noise = GyroNoiseParams(innovation_gate=0.0)

        def angle_tangent(q, u):
            # d(q)/d(angle) for a small body-frame rotation about u.
            return 0.5 * quat.omega_matrix(u) @ q

        for _ in range(25):
            s = random_state(rng)
            u3 = quat.to_rotmat(s.q) @ np.array([0.0, 0.0, 1.0])
            u1 = np.cross(u3, [1.0, 0.0, 0.0])
            u1 /= np.linalg.norm(u1)
            u2 = np.cross(u3, u1)
            T = np.column_stack([angle_tangent(s.q, u) for u in (u1, u2, u3)])
            sig = rng.uniform(0.005, 0.05, size=3)
            P = np.zeros((7, 7))
            P[:4, :4] = T @ np.diag(sig**2) @ T.T + 1e-12 * np.eye(4)
            P[4:, 4:] = np.diag(rng.uniform(1e-6, 1e-4, size=3))
            t_yaw = angle_tangent(s.q, u3)
            J = np.concatenate([t_yaw, np.zeros(3)])
            a_m = predict_accel(s, noise.g) + rng.normal(size=3) * 0.02
            before = J @ P @ J
            _, P2, accepted = gyro_update(s, P, a_m, noise)
            assert accepted
            assert J @ P2 @ J >= before * (1 - 1e-6)


class TestCovarianceHealth:
    def test_long_random_cycle(self):
        rng = np.random.default_rng(11)
        noise = GyroNoiseParams(sigma_a=0.1, innovation_gate=0.0)
        s = random_state(rng)
        P = initial_covariance()
        n = 100_000
        for k in range(n):
            s, P = gyro_propagate(s, P, rng.normal(size=3) * 0.5, 0.005, noise)
            if k % 3 == 0:
                a_m = predict_accel(s, noise.g) + rng.normal(size=3) * 0.1
                s, P, _ = gyro_update(s, P, a_m, noise)
            assert abs(np.linalg.norm(s.q) - 1.0) < 1e-9
            if k % 1000 == 0:
                assert np.abs(P - P.T).max() < 1e-9 * max(1.0, np.trace(P))
                assert np.linalg.eigvalsh(P)[0] >= -1e-9 * np.trace(P)
        assert np.linalg.eigvalsh(P)[0] >= -1e-9 * np.trace(P)

    def test_noise_free_fixed_point(self):
        s = GyroState(quat.from_rotvec([0.2, -0.1, 0.4]), np.zeros(3))
        P = initial_covariance()
        noise = GyroNoiseParams(sigma_q=0.0, sigma_b=0.0, innovation_gate=0.0)
        a_m = predict_accel(s, noise.g)
        for _ in range(100):
            s2, P = gyro_propagate(s, P, np.zeros(3), 0.005, noise)
            s2, P, _ = gyro_update(s2, P, a_m, noise)
            assert quat.angle_between(s2.q, s.q) < 1e-12
            s = s2
