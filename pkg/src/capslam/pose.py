"""Direct keyframe-based pose estimation.

The estimated pose ``C`` maps keyframe-camera points into the current
frame's camera, ``X_frame = R X_kf + t``.  Photometric residuals over the
keyframe's high-gradient pixels are normalised by a per-pixel standard
deviation and robustified with the Huber norm; the resulting energy is
minimised by iteratively reweighted Gauss-Newton with Levenberg-Marquardt
damping, using left-multiplicative twist updates ``C <- exp(delta) C``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import Diverged, EmptyKeyframeSet, NonPositiveDelta, NoValidPixels, ValidationError
from .geometry import (
    CameraIntrinsics,
    DepthMap,
    ImageBuffer,
    PoseSE3,
    UncertaintyMap,
    bilinear_sample,
    downsample,
    image_gradients,
    se3_compose,
    se3_exp,
    se3_inverse,
)

GRADIENT_THRESHOLD = 0.03


def huber(x, delta: float = 1.345):
    """Huber penalty: x^2/2 inside ``delta``, linear with matching slope outside."""
    if not delta > 0:
        raise NonPositiveDelta("huber delta must be positive")
    a = np.abs(np.asarray(x, dtype=np.float64))
    out = np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def huber_weight(x, delta: float):
    """IRLS weight rho'(x)/x."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def high_gradient_pixels(image: np.ndarray, valid: np.ndarray | None = None,
                         threshold: float = GRADIENT_THRESHOLD, border: int = 1) -> np.ndarray:
    """``(u, v)`` integer pixels with central-difference gradient magnitude above ``threshold``."""
    gx, gy = image_gradients(image)
    mag = np.hypot(gx, gy)
    sel = mag > threshold
    if valid is not None:
        sel &= valid
    if border > 0:
        sel[:border, :] = sel[-border:, :] = False
        sel[:, :border] = sel[:, -border:] = False
    v, u = np.nonzero(sel)
    return np.stack([u, v], axis=1)


@dataclass(eq=False)
class Keyframe:
    """Reference frame: image, depth D_k, disparity-domain uncertainty and world pose."""

    id: int
    image: ImageBuffer
    depth: DepthMap
    uncertainty: UncertaintyMap
    pose_world: PoseSE3
    high_gradient_pixels: np.ndarray
    _pyramid: dict = field(default_factory=dict, repr=False)

    @classmethod
    def create(cls, id: int, image: ImageBuffer, depth: DepthMap,
               uncertainty: UncertaintyMap | None = None, pose_world: PoseSE3 | None = None,
               grad_threshold: float = GRADIENT_THRESHOLD) -> "Keyframe":
        if depth.shape != image.shape:
            raise ValidationError("keyframe depth and image dimensions differ")
        if uncertainty is None:
            uncertainty = UncertaintyMap(np.zeros(image.shape))
        if uncertainty.shape != image.shape:
            raise ValidationError("keyframe uncertainty and image dimensions differ")
        pix = high_gradient_pixels(image.data, depth.valid, grad_threshold)
        return cls(id, image, depth, uncertainty, pose_world or PoseSE3.identity(), pix)

    @property
    def usable(self) -> bool:
        return len(self.high_gradient_pixels) > 0

    def with_depth(self, depth: DepthMap, uncertainty: UncertaintyMap,
                   grad_threshold: float = GRADIENT_THRESHOLD) -> "Keyframe":
        return Keyframe.create(self.id, self.image, depth, uncertainty, self.pose_world, grad_threshold)

    def level(self, k: int, intrinsics: CameraIntrinsics, grad_threshold: float):
        """(keyframe, intrinsics) at pyramid level ``k`` (0 = full resolution)."""
        if k == 0:
            return self, intrinsics
        key = (k, grad_threshold)
        if key not in self._pyramid:
            img, depth, unc, intr = self.image.data, self.depth, self.uncertainty.values, intrinsics
            for _ in range(k):
                img = downsample(img)
                depth = downsample_depth(depth)
                unc = downsample(unc)
                intr = intr.scaled(0.5)
            kf = Keyframe.create(self.id, ImageBuffer.clipped(img), depth, UncertaintyMap(unc),
                                 self.pose_world, grad_threshold)
            self._pyramid[key] = (kf, intr)
        return self._pyramid[key]


def downsample_depth(d: DepthMap) -> DepthMap:
    h, w = (d.shape[0] // 2) * 2, (d.shape[1] // 2) * 2
    vals = d.values[:h, :w]
    m = d.valid[:h, :w].astype(np.float64)
    s = sum(vals[i::2, j::2] * m[i::2, j::2] for i in (0, 1) for j in (0, 1))
    n = sum(m[i::2, j::2] for i in (0, 1) for j in (0, 1))
    ok = n > 0
    return DepthMap(np.where(ok, s / np.maximum(n, 1), 0.0), ok)


@dataclass
class PoseConfig:
    sigma_i: float = 0.02
    huber_delta: float = 1.345
    max_iterations: int = 50
    step_tol: float = 1e-8
    rel_decrease_tol: float = 1e-9
    lambda_init: float = 1e-4
    max_retries: int = 5
    lambda_up: float = 100.0
    lambda_down: float = 10.0
    stall_tol: float = 1e-2
    stall_step: float = 1e-2
    pyramid_levels: int = 1
    grad_threshold: float = GRADIENT_THRESHOLD
    debug_csv: str | None = None


@dataclass
class Residuals:
    r: np.ndarray
    sigma: np.ndarray
    jacobian: np.ndarray | None
    valid: np.ndarray  # mask over the keyframe's high-gradient pixels

    @property
    def count(self) -> int:
        return int(self.r.size)


def residuals(frame: ImageBuffer, keyframe: Keyframe, pose: PoseSE3, intrinsics: CameraIntrinsics,
              sigma_i: float = 0.02, with_jacobian: bool = False,
              frame_gradients: tuple | None = None) -> Residuals:
    """Photometric residuals I_frame(pi(C X_u)) - I_kf(u) and their standard deviations."""
    if frame.shape != keyframe.image.shape:
        raise ValidationError("frame and keyframe dimensions differ")
    pix = keyframe.high_gradient_pixels
    if len(pix) == 0:
        raise NoValidPixels("keyframe has no high-gradient pixels")
    u, v = pix[:, 0], pix[:, 1]
    d = keyframe.depth.values[v, u]
    ray = np.stack([(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy,
                    np.ones(len(u))], axis=1)
    X = ray * d[:, None]
    Xf = X @ pose.rotation.T + pose.translation
    Z = Xf[:, 2]
    front = Z > 1e-6
    Zs = np.where(front, Z, 1.0)
    uf = intrinsics.fx * Xf[:, 0] / Zs + intrinsics.cx
    vf = intrinsics.fy * Xf[:, 1] / Zs + intrinsics.cy
    H, W = frame.shape
    valid = front & (uf >= 0) & (uf <= W - 1) & (vf >= 0) & (vf <= H - 1)
    if not np.any(valid):
        raise NoValidPixels("no keyframe pixel projects into the frame")
    uf, vf, Xf, Zs = uf[valid], vf[valid], Xf[valid], Zs[valid]
    If, _ = bilinear_sample(frame.data, uf, vf)
    r = If - keyframe.image.data[v[valid], u[valid]]
    gx_img, gy_img = frame_gradients if frame_gradients is not None else image_gradients(frame.data)
    gx, _ = bilinear_sample(gx_img, uf, vf)
    gy, _ = bilinear_sample(gy_img, uf, vf)
    # d(pi)/dX rows, contracted with the image gradient
    invz = 1.0 / Zs
    gJ = np.stack([gx * intrinsics.fx * invz,
                   gy * intrinsics.fy * invz,
                   -(gx * intrinsics.fx * Xf[:, 0] + gy * intrinsics.fy * Xf[:, 1]) * invz * invz], axis=1)
    dr_dd = np.einsum("ij,ij->i", gJ, ray[valid] @ pose.rotation.T)
    # uncertainty lives in the disparity (inverse-depth) domain; propagate to depth variance
    dv = d[valid]
    scale = intrinsics.fx * intrinsics.baseline if intrinsics.baseline else 1.0
    var_d = keyframe.uncertainty.values[v[valid], u[valid]] * (dv * dv / scale) ** 2
    sigma = np.sqrt(sigma_i**2 + dr_dd**2 * var_d)
    J = None
    if with_jacobian:
        # left perturbation: dXf = rho + omega x Xf
        J = np.concatenate([gJ, np.cross(Xf, gJ)], axis=1)
    return Residuals(r, sigma, J, valid)


def energy(res: Residuals, delta: float) -> float:
    return float(np.sum(huber(res.r / res.sigma, delta)))


def _paired_energies(a: Residuals, b: Residuals, delta: float) -> tuple[float, float]:
    """Energies of two residual sets restricted to pixels valid in both.

    Pixels entering or leaving the frame would otherwise make the energy jump
    between candidate poses.
    """
    common = a.valid & b.valid

    def part(res):
        keep = common[res.valid]
        return float(np.sum(huber(res.r[keep] / res.sigma[keep], delta)))

    return part(a), part(b)


@dataclass
class PoseEstimate:
    pose: PoseSE3
    covariance: np.ndarray
    final_energy: float
    iterations_used: int
    converged: bool
    valid_pixels: int = 0
    valid_ratio: float = 1.0
    trace: list = field(default_factory=list)


def _normal_equations(res: Residuals, delta: float):
    e = res.r / res.sigma
    w = huber_weight(e, delta) / res.sigma**2
    J = res.jacobian
    Hm = (J * w[:, None]).T @ J
    g = (J * w[:, None]).T @ res.r
    return Hm, g


def _damped(Hm: np.ndarray, lam: float) -> np.ndarray:
    return Hm + lam * np.diag(np.maximum(np.diag(Hm), 1e-12))


def _solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(A, b, rcond=None)[0]


def _estimate_level(frame, keyframe, initial, intrinsics, cfg: PoseConfig, trace, level):
    grads = image_gradients(frame.data)
    delta = cfg.huber_delta
    pose = initial
    res = residuals(frame, keyframe, pose, intrinsics, cfg.sigma_i, True, grads)
    E = energy(res, delta)
    lam = cfg.lambda_init
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        Hm, g = _normal_equations(res, delta)
        retries = 0
        while True:
            step = -_solve(_damped(Hm, lam), g)
            step_norm = float(np.linalg.norm(step))
            if step_norm < cfg.step_tol:
                converged = True
                break
            cand = se3_compose(se3_exp(step), pose)
            try:
                cres = residuals(frame, keyframe, cand, intrinsics, cfg.sigma_i, True, grads)
                E_new = energy(cres, delta)
            except NoValidPixels:
                cres, E_new = None, np.inf
            if cres is not None:
                E_cur, E_cmp = _paired_energies(res, cres, delta)
            else:
                E_cur, E_cmp = E, np.inf
            if E_cmp < E_cur:
                rel = (E_cur - E_cmp) / max(E_cur, 1e-300)
                pose, res, E = cand, cres, E_new
                lam = max(lam / cfg.lambda_down, 1e-12)
                if rel < cfg.rel_decrease_tol:
                    converged = True
                break
            lam *= cfg.lambda_up
            retries += 1
            if retries >= cfg.max_retries:
                # stalled: near a stationary point the undamped model predicts little
                # gain, or only a step below the resolution of the linearisation
                gn = _solve(_damped(Hm, 0.0), g)
                predicted = 0.5 * float(g @ gn)
                if predicted <= cfg.stall_tol * max(E, 1e-300) or np.linalg.norm(gn) <= cfg.stall_step:
                    converged = True
                    break
                if level > 0:
                    # coarse levels only seed the finer ones; hand over what we have
                    break
                raise Diverged(f"energy rose for {retries} consecutive damped retries")
        trace.append({"level": level, "iter": it, "energy": E, "step_norm": step_norm,
                      "lambda": lam, "valid_pixels": res.count})
        if converged or retries >= cfg.max_retries:
            break
    return pose, res, E, it, converged, lam


def estimate_pose(frame: ImageBuffer, keyframe: Keyframe, initial: PoseSE3 | None,
                  intrinsics: CameraIntrinsics, config: PoseConfig | None = None) -> PoseEstimate:
    """Minimise the robust photometric energy over the frame-from-keyframe pose."""
    cfg = config or PoseConfig()
    if not keyframe.usable:
        raise NoValidPixels("keyframe has no high-gradient pixels")
    pose = initial or PoseSE3.identity()
    trace: list = []
    total_iters = 0
    for level in range(max(cfg.pyramid_levels, 1) - 1, -1, -1):
        kf_l, intr_l = keyframe.level(level, intrinsics, cfg.grad_threshold)
        if not kf_l.usable:
            continue
        frame_l = frame.data
        for _ in range(level):
            frame_l = downsample(frame_l)
        pose, res, E, iters, converged, lam = _estimate_level(
            ImageBuffer.clipped(frame_l), kf_l, pose, intr_l, cfg, trace, level)
        total_iters += iters
    Hm, _ = _normal_equations(res, cfg.huber_delta)
    cov = np.linalg.pinv(_damped(Hm, lam))
    cov = 0.5 * (cov + cov.T)
    if cfg.debug_csv:
        with open(cfg.debug_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "energy", "step_norm", "lambda", "valid_pixels"])
            for row in trace:
                w.writerow([row["iter"], repr(row["energy"]), repr(row["step_norm"]),
                            repr(row["lambda"]), row["valid_pixels"]])
    # ratio measured at the finest level that ran
    ratio = res.count / max(len(res.valid), 1)
    return PoseEstimate(pose, cov, E, total_iters, converged, res.count, ratio, trace)


def select_reference_keyframe(keyframes, current_pose_guess: PoseSE3, lambda_rot: float = 0.5) -> Keyframe:
    """Keyframe nearest to the guess by ``|t_rel| + lambda_rot * angle(R_rel)``; ties go to the lower id."""
    if not keyframes:
        raise EmptyKeyframeSet("no keyframes to select from")

    def score(kf):
        rel = se3_compose(se3_inverse(kf.pose_world), current_pose_guess)
        return (float(np.linalg.norm(rel.translation)) + lambda_rot * rel.rotation_angle(), kf.id)

    return min(keyframes, key=score)


@dataclass
class SpawnConfig:
    max_translation: float = 0.15
    max_rotation_deg: float = 10.0
    min_valid_ratio: float = 0.6


@dataclass
class SpawnDecision:
    spawn: bool
    reason: str = ""


def keyframe_spawn_policy(estimate: PoseEstimate, reference: Keyframe | None = None,
                          config: SpawnConfig | None = None) -> SpawnDecision:
    cfg = config or SpawnConfig()
    t = float(np.linalg.norm(estimate.pose.translation))
    rot = np.rad2deg(estimate.pose.rotation_angle())
    if t > cfg.max_translation:
        return SpawnDecision(True, f"translation {t:.3f} m")
    if rot > cfg.max_rotation_deg:
        return SpawnDecision(True, f"rotation {rot:.2f} deg")
    if estimate.valid_ratio < cfg.min_valid_ratio:
        return SpawnDecision(True, f"valid-pixel ratio {estimate.valid_ratio:.2f}")
    return SpawnDecision(False)
