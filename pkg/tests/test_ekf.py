import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capslam.ekf import (
    EkfState,
    NoiseConfig,
    initial_state,
    predict,
    process_noise,
    read_tum,
    run_filter,
    transition,
    update,
    update_position,
    write_tum,
)
from capslam.errors import NonMonotonicTimestamps, NonPositiveDt, SingularInnovationCovariance, ValidationError
from capslam.geometry import PoseSE3, se3_exp

# pinned by the standalone linear-KF Monte-Carlo oracle (seed 0, 500 steps)
PINNED_RATIO = 0.43768498073515727


def _state(p=(0, 0, 0), v=(0, 0, 0), P=None):
    P = np.eye(9) if P is None else P
    return EkfState(p, v, [0, 0, 0, 1.0], P)


def linear_fixture(seed=0, n=500, dt=0.1, sigma=0.05):
    rng = np.random.default_rng(seed)
    t = np.arange(n) * dt
    truth = np.array([0.2, -0.1, 0.3]) + t[:, None] * np.array([1.0, 0.5, -0.2])
    return t, truth, truth + sigma * rng.standard_normal((n, 3))


def textbook_kf(t, meas, sa, sp, v0):
    """Plain 6-state (p, v) Kalman filter, standard covariance update."""
    x = np.concatenate([meas[0], np.zeros(3)])
    P = np.diag([sp**2] * 3 + [v0**2] * 3)
    H = np.hstack([np.eye(3), np.zeros((3, 3))])
    out = [x[:3].copy()]
    for k in range(1, len(t)):
        dt = t[k] - t[k - 1]
        F = np.block([[np.eye(3), dt * np.eye(3)], [np.zeros((3, 3)), np.eye(3)]])
        Q = sa**2 * np.block([[dt**3 / 3 * np.eye(3), dt**2 / 2 * np.eye(3)],
                              [dt**2 / 2 * np.eye(3), dt * np.eye(3)]])
        x, P = F @ x, F @ P @ F.T + Q
        K = P @ H.T @ np.linalg.inv(H @ P @ H.T + sp**2 * np.eye(3))
        x = x + K @ (meas[k] - H @ x)
        P = (np.eye(6) - K @ H) @ P
        out.append(x[:3].copy())
    return np.array(out)


def rms(e):
    return np.sqrt(np.mean(np.sum(e**2, axis=1)))


def run_linear(noise, seed=0):
    t, truth, meas = linear_fixture(seed)
    poses = [PoseSE3(np.eye(3), m) for m in meas]
    res = run_filter(t, poses, noise)
    return t, truth, meas, np.array([s.position for s in res.states])


ORACLE_NOISE = NoiseConfig(sigma_accel=0.05, sigma_position=0.05, initial_velocity_std=1.0)


class TestPredict:
    def test_stationary(self):
        s = predict(_state(p=(1, 2, 3)), 0.7, NoiseConfig())
        np.testing.assert_array_equal(s.position, [1, 2, 3])

    def test_substitution(self):
        s = predict(_state(v=(1, 0, 0)), 0.5, NoiseConfig())
        np.testing.assert_allclose(s.position, [0.5, 0, 0])
        assert s.timestamp == 0.5

    @pytest.mark.parametrize("dt", [0.0, -0.1])
    def test_bad_dt(self, dt):
        with pytest.raises(NonPositiveDt):
            predict(_state(), dt, NoiseConfig())

    def test_process_noise_is_psd(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            A = rng.normal(size=(9, 9))
            P = A @ A.T
            dt = rng.uniform(0.01, 1.0)
            after = predict(_state(P=P), dt, NoiseConfig()).covariance
            F = transition(dt)
            assert np.linalg.eigvalsh(after - F @ P @ F.T).min() >= -1e-10

    def test_trace_grows_on_uncorrelated_states(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            P = np.diag(rng.uniform(1e-4, 2.0, 9))
            before = np.trace(P)
            assert np.trace(predict(_state(P=P), rng.uniform(0.01, 1.0), NoiseConfig()).covariance) >= before

    def test_trace_grows_on_reachable_states(self):
        rng = np.random.default_rng(2)
        noise = NoiseConfig()
        for _ in range(25):
            s = initial_state(PoseSE3.identity(), noise)
            for _ in range(40):
                p = predict(s, rng.uniform(0.01, 1.0), noise)
                assert np.trace(p.covariance) >= np.trace(s.covariance)
                s, _ = update(p, se3_exp(rng.normal(scale=0.1, size=6)))

    def test_trace_can_drop_with_negative_pv_correlation(self):
        # documented limit: tr(F P F^T) = tr P + 2 dt tr(P_pv) + dt^2 tr(P_vv)
        P = np.eye(9)
        P[0:3, 3:6] = P[3:6, 0:3] = -0.9 * np.eye(3)
        after = predict(_state(P=P), 0.1, NoiseConfig(sigma_accel=0.01, sigma_gyro=0.01)).covariance
        assert np.trace(after) < np.trace(P)


class TestUpdate:
    def test_zero_innovation(self):
        s = predict(initial_state(se3_exp([0.1, 0.2, 0.3, 0.1, 0.0, -0.2]), NoiseConfig()), 0.1, NoiseConfig())
        new, stats = update(s, s.pose)
        np.testing.assert_allclose(new.position, s.position, atol=1e-15)
        np.testing.assert_allclose(new.orientation, s.orientation, atol=1e-12)
        assert np.trace(new.covariance) < np.trace(s.covariance)
        assert stats.nis == pytest.approx(0.0, abs=1e-20)

    def test_scalar_reduction(self):
        P = np.eye(9)
        new, _ = update_position(_state(P=P), [2.0, 0, 0], np.eye(3))
        assert new.position[0] == pytest.approx(1.0, abs=1e-15)
        assert new.covariance[0, 0] == pytest.approx(0.5, abs=1e-15)

    def test_perfect_measurement(self):
        s = _state(p=(1, 1, 1))
        meas = se3_exp([0.3, -0.2, 0.5, 0.05, 0.0, 0.02])
        new, _ = update(s, meas, np.zeros((6, 6)))
        np.testing.assert_allclose(new.position, meas.translation, atol=1e-9)
        new, _ = update_position(s, [0.5, 0.5, 0.5], np.zeros((3, 3)))
        np.testing.assert_allclose(new.position, 0.5, atol=1e-9)

    def test_singular(self):
        P = np.zeros((9, 9))
        with pytest.raises(SingularInnovationCovariance):
            update(_state(P=P), PoseSE3.identity(), np.zeros((6, 6)))

    def test_bad_meas_cov(self):
        with pytest.raises(ValidationError):
            update(_state(), PoseSE3.identity(), np.eye(3))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_trace_non_increasing_and_psd(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(9, 9))
        s = _state(P=A @ A.T + 1e-3 * np.eye(9))
        new, _ = update(s, se3_exp(rng.normal(size=6)))
        assert np.trace(new.covariance) <= np.trace(s.covariance) + 1e-12
        assert np.linalg.eigvalsh(new.covariance).min() >= -1e-10


class TestRunFilter:
    def test_empty(self):
        assert len(run_filter([], [])) == 0

    def test_constant_measurements(self):
        pose = se3_exp([0.1, 0.2, 0.3, 0.01, 0.02, 0.03])
        res = run_filter(np.arange(30) * 0.1, [pose] * 30)
        traces = [np.trace(s.covariance) for s in res.states]
        for s in res.states:
            np.testing.assert_allclose(s.position, pose.translation, atol=1e-12)
            np.testing.assert_allclose(s.rotation, pose.rotation, atol=1e-12)
        assert np.all(np.diff(traces) <= 1e-15)  # rounding only

    def test_non_monotonic(self):
        with pytest.raises(NonMonotonicTimestamps):
            run_filter([0.0, 0.2, 0.1], [PoseSE3.identity()] * 3)
        with pytest.raises(NonMonotonicTimestamps):
            run_filter([0.0, 0.0], [PoseSE3.identity()] * 2)

    def test_linear_equivalence(self):
        t, _, meas, ours = run_linear(ORACLE_NOISE)
        ref = textbook_kf(t, meas, 0.05, 0.05, 1.0)
        assert np.abs(ours - ref).max() < 1e-9

    def test_pinned_ratio(self):
        _, truth, meas, ours = run_linear(ORACLE_NOISE)
        ratio = rms(ours - truth) / rms(meas - truth)
        assert ratio == pytest.approx(PINNED_RATIO, abs=1e-9)
        assert ratio <= 0.7

    def test_covariance_psd_throughout(self):
        rng = np.random.default_rng(3)
        poses = [se3_exp(rng.normal(scale=0.2, size=6)) for _ in range(200)]
        for s in run_filter(np.cumsum(rng.uniform(0.01, 0.5, 200)), poses).states:
            assert np.linalg.eigvalsh(s.covariance).min() >= -1e-10

    def test_quaternion_drift(self):
        noise = NoiseConfig()
        s = initial_state(se3_exp([0, 0, 0, 0.3, -0.2, 0.1]), noise)
        meas = se3_exp([0, 0, 0, 0.31, -0.19, 0.1])
        for _ in range(100_000):
            s, _ = update(s, meas)
        assert abs(np.linalg.norm(s.orientation) - 1.0) < 1e-9


def test_process_noise_shape():
    Q = process_noise(0.2, NoiseConfig())
    assert Q.shape == (9, 9) and np.allclose(Q, Q.T)


def test_tum_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    poses = [se3_exp(rng.normal(size=6)) for _ in range(5)]
    ts = np.arange(5) * 0.1
    path = tmp_path / "traj.txt"
    write_tum(path, ts, poses)
    assert len(path.read_text().splitlines()[0].split()) == 8
    t2, p2 = read_tum(path)
    np.testing.assert_allclose(t2, ts)
    for a, b in zip(poses, p2):
        np.testing.assert_allclose(a.translation, b.translation, atol=1e-6)
        np.testing.assert_allclose(a.rotation, b.rotation, atol=1e-5)
