"""Error-state EKF smoothing a stream of camera poses.

Nominal state: position p, velocity v, orientation quaternion q (x, y, z, w,
body-to-world).  The 9-dim error state is (dp, dv, dtheta) with the rotation
error applied on the left: R_true = exp(dtheta) R.  The process model is
constant velocity driven by white acceleration noise; orientation is a random
walk driven by white angular-rate noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NonMonotonicTimestamps, NonPositiveDt, SingularInnovationCovariance, ValidationError
from .geometry import PoseSE3, quat_to_rotation, rotation_to_quat, so3_exp, so3_log

QUAT_TOL = 1e-9


@dataclass(frozen=True)
class NoiseConfig:
    sigma_accel: float = 0.5    # m/s^2/sqrt(Hz)
    sigma_gyro: float = 0.1     # rad/s/sqrt(Hz)
    sigma_position: float = 0.05  # m
    sigma_rotation: float = 0.02  # rad
    initial_velocity_std: float = 1.0  # m/s, prior on the first state

    def __post_init__(self):
        for name in ("sigma_accel", "sigma_gyro", "sigma_position", "sigma_rotation", "initial_velocity_std"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")

    def measurement_covariance(self) -> np.ndarray:
        return np.diag([self.sigma_position**2] * 3 + [self.sigma_rotation**2] * 3)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseConfig":
        return cls(**{k: float(d[k]) for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class EkfState:
    position: np.ndarray
    velocity: np.ndarray
    orientation: np.ndarray  # (x, y, z, w)
    covariance: np.ndarray   # 9x9 over (dp, dv, dtheta)
    timestamp: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64).reshape(3)
        v = np.asarray(self.velocity, dtype=np.float64).reshape(3)
        q = np.asarray(self.orientation, dtype=np.float64).reshape(4)
        P = np.asarray(self.covariance, dtype=np.float64)
        if abs(np.sqrt(q @ q) - 1.0) > QUAT_TOL:
            raise ValidationError("orientation quaternion must have unit norm")
        if P.shape != (9, 9) or not np.isfinite(P).all():
            raise ValidationError("covariance must be a finite 9x9 matrix")
        if np.abs(P - P.T).max() > 1e-12:
            raise ValidationError("covariance must be symmetric")
        for name, val in (("position", p), ("velocity", v), ("orientation", q), ("covariance", P)):
            val = val.copy()
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotation(self.orientation)

    @property
    def pose(self) -> PoseSE3:
        return PoseSE3(self.rotation, self.position)

    @classmethod
    def from_pose(cls, pose: PoseSE3, covariance, velocity=(0.0, 0.0, 0.0), timestamp: float = 0.0) -> "EkfState":
        return cls(pose.translation, velocity, rotation_to_quat(pose.rotation), covariance, timestamp)


@dataclass
class InnovationStats:
    innovation: np.ndarray
    covariance: np.ndarray
    nis: float  # normalised innovation squared


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


_I9 = np.eye(9)
_I3 = np.eye(3)


def transition(dt: float) -> np.ndarray:
    F = _I9.copy()
    F[0:3, 3:6] = dt * _I3
    return F


def process_noise(dt: float, noise: NoiseConfig) -> np.ndarray:
    """Discretised white-acceleration and white-rate noise over ``dt``."""
    qa, qg = noise.sigma_accel**2, noise.sigma_gyro**2
    Q = np.zeros((9, 9))
    Q[0:3, 0:3] = qa * dt**3 / 3.0 * _I3
    Q[0:3, 3:6] = Q[3:6, 0:3] = qa * dt**2 / 2.0 * _I3
    Q[3:6, 3:6] = qa * dt * _I3
    Q[6:9, 6:9] = qg * dt * _I3
    return Q


def predict(state: EkfState, dt: float, noise: NoiseConfig) -> EkfState:
    if not dt > 0:
        raise NonPositiveDt(f"dt must be positive, got {dt}")
    F = transition(dt)
    P = _symmetrize(F @ state.covariance @ F.T + process_noise(dt, noise))
    return EkfState(state.position + state.velocity * dt, state.velocity, state.orientation, P,
                    state.timestamp + dt)


def _correct(state: EkfState, H: np.ndarray, y: np.ndarray, R: np.ndarray):
    P = state.covariance
    S = _symmetrize(H @ P @ H.T + R)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise SingularInnovationCovariance("innovation covariance is not positive definite") from None
    if np.min(np.diag(L)) ** 2 <= 1e-14 * np.max(np.diag(S)):
        raise SingularInnovationCovariance("innovation covariance is numerically singular")
    K = np.linalg.solve(S, H @ P).T  # P H^T S^-1, using the symmetry of P and S
    dx = K @ y
    IKH = _I9 - K @ H
    P_new = _symmetrize(IKH @ P @ IKH.T + K @ R @ K.T)
    R_new = so3_exp(dx[6:9]) @ state.rotation
    q = rotation_to_quat(R_new)
    new = EkfState(state.position + dx[0:3], state.velocity + dx[3:6], q / np.linalg.norm(q), P_new,
                   state.timestamp)
    nis = float(y @ np.linalg.solve(S, y))
    return new, InnovationStats(y, S, nis)


_H_POSE = np.zeros((6, 9))
_H_POSE[0:3, 0:3] = np.eye(3)
_H_POSE[3:6, 6:9] = np.eye(3)
_H_POS = np.zeros((3, 9))
_H_POS[0:3, 0:3] = np.eye(3)


def update(state: EkfState, measurement: PoseSE3, meas_cov=None, noise: NoiseConfig | None = None):
    """Fuse a pose measurement; returns ``(state, InnovationStats)``.

    ``meas_cov`` is 6x6 over (position, rotation); when omitted it is built
    from ``noise``.
    """
    noise = noise or NoiseConfig()
    R = noise.measurement_covariance() if meas_cov is None else np.asarray(meas_cov, dtype=np.float64)
    if R.shape != (6, 6) or np.abs(R - R.T).max() > 1e-12:
        raise ValidationError("meas_cov must be a symmetric 6x6 matrix")
    y = np.concatenate([measurement.translation - state.position,
                        so3_log(measurement.rotation @ state.rotation.T)])
    return _correct(state, _H_POSE, y, R)


def update_position(state: EkfState, position, meas_cov=None, noise: NoiseConfig | None = None):
    """Position-only measurement update (3x3 ``meas_cov``)."""
    noise = noise or NoiseConfig()
    R = noise.sigma_position**2 * np.eye(3) if meas_cov is None else np.asarray(meas_cov, dtype=np.float64)
    if R.shape != (3, 3) or np.abs(R - R.T).max() > 1e-12:
        raise ValidationError("meas_cov must be a symmetric 3x3 matrix")
    y = np.asarray(position, dtype=np.float64).reshape(3) - state.position
    return _correct(state, _H_POS, y, R)


def initial_state(pose: PoseSE3, noise: NoiseConfig, timestamp: float = 0.0) -> EkfState:
    P = np.diag([noise.sigma_position**2] * 3 + [noise.initial_velocity_std**2] * 3
                + [noise.sigma_rotation**2] * 3)
    return EkfState.from_pose(pose, P, timestamp=timestamp)


@dataclass
class FilterResult:
    states: list = field(default_factory=list)
    innovations: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)


def run_filter(timestamps, measurements, noise: NoiseConfig | None = None, meas_covs=None,
               initial: EkfState | None = None) -> FilterResult:
    """Interleave predict/update over a pose stream; one state per measurement.

    Without ``initial`` the filter starts at the first measurement.
    """
    noise = noise or NoiseConfig()
    ts = [float(t) for t in timestamps]
    if len(ts) != len(measurements):
        raise ValidationError("timestamps and measurements differ in length")
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise NonMonotonicTimestamps("timestamps must be strictly increasing")
    out = FilterResult()
    state = initial
    for i, (t, z) in enumerate(zip(ts, measurements)):
        cov = None if meas_covs is None else meas_covs[i]
        if state is None:
            state = initial_state(z, noise, t)
            out.states.append(state)
            out.innovations.append(None)
            continue
        if t > state.timestamp:
            state = predict(state, t - state.timestamp, noise)
        elif t < state.timestamp:
            raise NonMonotonicTimestamps("measurement precedes the filter state")
        state, stats = update(state, z, cov, noise)
        out.states.append(state)
        out.innovations.append(stats)
    return out


def write_tum(path, timestamps, poses) -> None:
    """``timestamp tx ty tz qx qy qz qw`` per line with 6 decimals."""
    lines = []
    for t, p in zip(timestamps, poses):
        pose = p.pose if isinstance(p, EkfState) else p
        q = rotation_to_quat(pose.rotation)
        vals = [float(t), *pose.translation, *q]
        lines.append(" ".join(f"{x:.6f}" for x in vals))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_tum(path) -> tuple[np.ndarray, list[PoseSE3]]:
    times, poses = [], []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = line.replace(",", " ").split()
        if len(vals) != 8:
            raise ValidationError(f"{path}:{ln}: expected 8 fields, got {len(vals)}")
        t, tx, ty, tz, qx, qy, qz, qw = map(float, vals)
        times.append(t)
        poses.append(PoseSE3(quat_to_rotation([qx, qy, qz, qw]), [tx, ty, tz]))
    return np.array(times), poses
