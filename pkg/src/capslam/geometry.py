"""Camera models, SE(3) algebra, image sampling and warping.

Conventions
-----------
* Pixel coordinates are ``(u, v)`` = (column, row), pixel centres at integers.
* Twists are ordered ``(rho, omega)``: translational part first, rotational
  part second.
* A relative pose used for warping maps points from the *target* camera frame
  into the *source* camera frame, ``X_src = R @ X_tgt + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BehindCamera,
    DimensionMismatch,
    InvalidImage,
    NonPositiveDepth,
    NonPositiveDisparity,
    ValidationError,
)

MIN_DISPARITY = 1e-3
REORTHONORMALIZE_EVERY = 64
_ORTHO_TOL = 1e-9


# --------------------------------------------------------------------------
# value types
# --------------------------------------------------------------------------


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """Single-channel intensity raster, row-major, values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim != 2 or data.size == 0:
            raise InvalidImage(f"image must be a non-empty 2-D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidImage("image contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise InvalidImage("image intensities must lie in [0, 1]")
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @classmethod
    def clipped(cls, data) -> "ImageBuffer":
        return cls(np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float | None = None

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if self.baseline is not None and not self.baseline > 0:
            raise ValidationError("baseline must be positive when present")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, sx: float, sy: float | None = None) -> "CameraIntrinsics":
        """Intrinsics for an image resized by ``sx`` (and ``sy``) with pixel centres preserved."""
        sy = sx if sy is None else sy
        return CameraIntrinsics(
            self.fx * sx,
            self.fy * sy,
            (self.cx + 0.5) * sx - 0.5,
            (self.cy + 0.5) * sy - 0.5,
            self.baseline,
        )

    def to_dict(self) -> dict:
        d = {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}
        if self.baseline is not None:
            d["baseline"] = self.baseline
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   None if d.get("baseline") is None else float(d["baseline"]))


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid transform ``x -> R x + t``.

    ``compositions`` counts products since the rotation was last projected
    back onto SO(3); see :func:`se3_compose`.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    compositions: int = 0

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValidationError("pose needs a 3x3 rotation and a 3-vector translation")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValidationError("pose contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() >= _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValidationError("rotation is not orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T, orthonormalize: bool = True) -> "PoseSE3":
        T = np.asarray(T, dtype=np.float64)
        R = T[:3, :3]
        if orthonormalize:
            R = nearest_rotation(R)
        return cls(R, T[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        """Transform points of shape ``(..., 3)``."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        return se3_compose(self, other)

    def inverse(self) -> "PoseSE3":
        return se3_inverse(self)

    def rotation_angle(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True, eq=False)
class DisparityMap:
    values: np.ndarray
    d_max: float

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 2:
            raise ValidationError("disparity map must be 2-D")
        if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > self.d_max:
            raise ValidationError("disparities must be finite and within [0, d_max]")
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel depth in metres with an explicit validity mask.

    Invalid pixels hold 0 in ``values``; never read them without the mask.
    """

    values: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValidationError("depth map must be 2-D")
        if self.valid is None:
            m = np.isfinite(v) & (v > 0)
        else:
            m = np.array(self.valid, dtype=bool)
            if m.shape != v.shape:
                raise DimensionMismatch("validity mask shape differs from depth shape")
            good = v[m]
            if not (np.all(np.isfinite(good)) and np.all(good > 0)):
                raise ValidationError("valid depths must be finite and positive")
        v = np.where(m, v, 0.0)
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "valid", _frozen(m, dtype=bool))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class UncertaintyMap:
    """Per-pixel non-negative variance proxy."""

    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 2 or not np.all(np.isfinite(v)) or v.min() < 0:
            raise ValidationError("uncertainty must be a finite, non-negative 2-D map")
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


# --------------------------------------------------------------------------
# disparity <-> depth
# --------------------------------------------------------------------------


def _stereo_factor(intrinsics: CameraIntrinsics) -> float:
    if intrinsics.baseline is None:
        raise ValidationError("stereo baseline required for disparity/depth conversion")
    return intrinsics.baseline * intrinsics.fx


def disparity_to_depth(d, intrinsics: CameraIntrinsics, min_disparity: float = MIN_DISPARITY):
    """Depth ``z * fx / d`` for scalar or array disparity ``d`` (pixels)."""
    d_arr = np.asarray(d, dtype=np.float64)
    if np.any(~(d_arr > min_disparity)):
        raise NonPositiveDisparity(f"disparity must exceed {min_disparity} px")
    out = _stereo_factor(intrinsics) / d_arr
    return float(out) if out.ndim == 0 else out


def depth_to_disparity(depth, intrinsics: CameraIntrinsics):
    z_arr = np.asarray(depth, dtype=np.float64)
    if np.any(~(z_arr > 0)):
        raise NonPositiveDepth("depth must be positive")
    out = _stereo_factor(intrinsics) / z_arr
    return float(out) if out.ndim == 0 else out


def disparity_map_to_depth(disp: DisparityMap, intrinsics: CameraIntrinsics,
                           min_disparity: float = MIN_DISPARITY) -> DepthMap:
    """Convert a whole map; pixels at or below ``min_disparity`` become invalid."""
    d = disp.values
    ok = d > min_disparity
    z = np.zeros_like(d)
    z[ok] = _stereo_factor(intrinsics) / d[ok]
    return DepthMap(z, ok)


def depth_map_to_disparity(depth: DepthMap, intrinsics: CameraIntrinsics) -> np.ndarray:
    out = np.zeros(depth.shape)
    out[depth.valid] = _stereo_factor(intrinsics) / depth.values[depth.valid]
    return out


# --------------------------------------------------------------------------
# pinhole projection
# --------------------------------------------------------------------------


def project(point, intrinsics: CameraIntrinsics) -> np.ndarray:
    X = np.asarray(point, dtype=np.float64)
    if X.shape[-1] != 3:
        raise ValidationError("points must have 3 coordinates")
    if np.any(~(X[..., 2] > 0)):
        raise BehindCamera("point depth must be positive")
    u = intrinsics.fx * X[..., 0] / X[..., 2] + intrinsics.cx
    v = intrinsics.fy * X[..., 1] / X[..., 2] + intrinsics.cy
    return np.stack([u, v], axis=-1)


def unproject(pixel, depth, intrinsics: CameraIntrinsics) -> np.ndarray:
    px = np.asarray(pixel, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    x = (px[..., 0] - intrinsics.cx) / intrinsics.fx * z
    y = (px[..., 1] - intrinsics.cy) / intrinsics.fy * z
    return np.stack([x, y, np.broadcast_to(z, x.shape)], axis=-1)


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """``(u, v)`` coordinate arrays of shape ``(height, width)``."""
    v, u = np.mgrid[0:height, 0:width]
    return u.astype(np.float64), v.astype(np.float64)


# --------------------------------------------------------------------------
# SE(3)
# --------------------------------------------------------------------------


def hat(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def vee(W) -> np.ndarray:
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


def nearest_rotation(M) -> np.ndarray:
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] = -U[:, -1]
        R = U @ Vt
    return R


def _so3_coeffs(theta: float) -> tuple[float, float, float]:
    """A = sin(t)/t, B = (1-cos t)/t^2, C = (t - sin t)/t^3 with series near 0."""
    if theta < 1e-4:
        t2 = theta * theta
        return 1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, 1.0 / 6.0 - t2 / 120.0
    s, c = np.sin(theta), np.cos(theta)
    return s / theta, (1.0 - c) / theta**2, (theta - s) / theta**3


def so3_exp(omega) -> np.ndarray:
    w = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    A, B, _ = _so3_coeffs(theta)
    W = hat(w)
    return np.eye(3) + A * W + B * (W @ W)


def so3_log(R) -> np.ndarray:
    """Rotation vector of ``R``.

    Near ``theta = pi`` the antisymmetric part vanishes, so the axis is read
    from the symmetric part of ``R``.  At exactly ``pi`` the sign is chosen so
    the largest axis component is positive.
    """
    R = np.asarray(R, dtype=np.float64)
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    skew = vee(R - R.T)
    theta = float(np.arctan2(np.linalg.norm(skew) / 2.0, c))
    if theta < 1e-6:
        return skew / 2.0 * (1.0 + theta**2 / 6.0)
    if np.pi - theta > 1e-4:
        return theta / (2.0 * np.sin(theta)) * skew
    # symmetric part is c I + (1 - c) a a^T, free of the sin term
    S = ((R + R.T) / 2.0 - c * np.eye(3)) / (1.0 - c)
    k = int(np.argmax(np.diag(S)))
    axis = S[:, k] / np.sqrt(max(S[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if skew @ axis < 0 or (np.linalg.norm(skew) < 1e-15 and axis[np.argmax(np.abs(axis))] < 0):
        axis = -axis
    return theta * axis


def _left_jacobian(omega) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    _, B, C = _so3_coeffs(theta)
    W = hat(omega)
    return np.eye(3) + B * W + C * (W @ W)


def _left_jacobian_inv(omega) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    W = hat(omega)
    if theta < 1e-4:
        k = 1.0 / 12.0 + theta**2 / 720.0
    else:
        k = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta**2
    return np.eye(3) - 0.5 * W + k * (W @ W)


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix from a quaternion stored as (x, y, z, w)."""
    x, y, z, w = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotation_to_quat(R) -> np.ndarray:
    """Unit quaternion (x, y, z, w) with w >= 0 (Shepperd's branch selection)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        w = 0.5 * np.sqrt(max(1.0 + tr, 0.0))
        s = 0.25 / w
        q = np.array([(R[2, 1] - R[1, 2]) * s, (R[0, 2] - R[2, 0]) * s, (R[1, 0] - R[0, 1]) * s, w])
    else:
        i = k - 1
        j, m = (i + 1) % 3, (i + 2) % 3
        r = 0.5 * np.sqrt(max(1.0 + R[i, i] - R[j, j] - R[m, m], 0.0))
        s = 0.25 / r
        q = np.zeros(4)
        q[i] = r
        q[j] = (R[j, i] + R[i, j]) * s
        q[m] = (R[m, i] + R[i, m]) * s
        q[3] = (R[m, j] - R[j, m]) * s
    q /= np.linalg.norm(q)
    return -q if q[3] < 0 else q


def se3_exp(twist) -> PoseSE3:
    xi = np.asarray(twist, dtype=np.float64).reshape(6)
    rho, omega = xi[:3], xi[3:]
    return PoseSE3(so3_exp(omega), _left_jacobian(omega) @ rho)


def se3_log(pose: PoseSE3) -> np.ndarray:
    omega = so3_log(pose.rotation)
    rho = _left_jacobian_inv(omega) @ pose.translation
    return np.concatenate([rho, omega])


def se3_compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """``a * b``: apply ``b`` first, then ``a``."""
    R = a.rotation @ b.rotation
    n = max(a.compositions, b.compositions) + 1
    if n >= REORTHONORMALIZE_EVERY:
        R, n = nearest_rotation(R), 0
    return PoseSE3(R, a.rotation @ b.translation + a.translation, n)


def se3_inverse(a: PoseSE3) -> PoseSE3:
    Rt = a.rotation.T
    return PoseSE3(Rt, -Rt @ a.translation, a.compositions)


def pose_distance(a: PoseSE3, b: PoseSE3) -> tuple[float, float]:
    """Translation (m) and rotation angle (rad) of ``a^-1 b``."""
    rel = se3_compose(se3_inverse(a), b)
    return float(np.linalg.norm(rel.translation)), rel.rotation_angle()


# --------------------------------------------------------------------------
# sampling and warping
# --------------------------------------------------------------------------


def bilinear_sample(image: np.ndarray, x, y, border: float = 0.5):
    """Bilinearly sample ``image`` at float coordinates.

    Coordinates are clamped to the image so border reads repeat the edge.
    Returns ``(values, valid)`` where ``valid`` is False for samples more than
    ``border`` px outside the pixel-centre extent.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    finite = np.isfinite(x) & np.isfinite(y)
    valid = finite & (x >= -border) & (x <= w - 1 + border) & (y >= -border) & (y <= h - 1 + border)
    xc = np.clip(np.where(finite, x, 0.0), 0.0, w - 1.0)
    yc = np.clip(np.where(finite, y, 0.0), 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = xc - x0
    ay = yc - y0
    top = img[y0, x0] * (1 - ax) + img[y0, x1] * ax
    bot = img[y1, x0] * (1 - ax) + img[y1, x1] * ax
    return top * (1 - ay) + bot * ay, valid


def image_gradients(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradients ``(gx, gy)``; one-sided at the border."""
    img = np.asarray(image, dtype=np.float64)
    gy, gx = np.gradient(img)
    return gx, gy


def warp_image(source: ImageBuffer, target_depth: DepthMap, relative_pose: PoseSE3,
               intrinsics: CameraIntrinsics) -> tuple[ImageBuffer, np.ndarray]:
    """Synthesise the target view from ``source``.

    Every valid target pixel is lifted with its depth, moved into the source
    camera by ``relative_pose`` and bilinearly sampled there.  Returns the
    warped image (0 at invalid pixels) and the validity mask.
    """
    if source.shape != target_depth.shape:
        raise DimensionMismatch(f"source {source.shape} vs depth {target_depth.shape}")
    h, w = source.shape
    u, v = pixel_grid(h, w)
    z = np.where(target_depth.valid, target_depth.values, 1.0)
    X = unproject(np.stack([u, v], axis=-1), z, intrinsics)
    Xs = relative_pose.apply(X)
    front = Xs[..., 2] > 1e-9
    zs = np.where(front, Xs[..., 2], 1.0)
    us = intrinsics.fx * Xs[..., 0] / zs + intrinsics.cx
    vs = intrinsics.fy * Xs[..., 1] / zs + intrinsics.cy
    vals, inb = bilinear_sample(source.data, us, vs)
    valid = target_depth.valid & front & inb
    out = np.where(valid, vals, 0.0)
    return ImageBuffer.clipped(out), valid


def downsample(a: np.ndarray) -> np.ndarray:
    """2x2 box average (odd trailing row/column dropped)."""
    h, w = (a.shape[0] // 2) * 2, (a.shape[1] // 2) * 2
    a = a[:h, :w]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


def resize_image(data: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize preserving pixel-centre alignment."""
    data = np.asarray(data, dtype=np.float64)
    h, w = data.shape
    if (h, w) == (height, width):
        return data.copy()
    u, v = pixel_grid(height, width)
    x = (u + 0.5) * (w / width) - 0.5
    y = (v + 0.5) * (h / height) - 0.5
    out, _ = bilinear_sample(data, x, y, border=np.inf)
    return out
