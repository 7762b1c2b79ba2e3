"""Sparse pyramidal Lucas-Kanade optical flow.

Points are tracked coarse to fine over a binomial (Gaussian) pyramid.  On every level
the 2x2 normal equations of the windowed brightness-constancy residual are
solved iteratively.  Points whose normalised structure tensor has a minimum
eigenvalue below ``tau_eig`` are flagged invalid (aperture problem).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DimensionMismatch, ValidationError
from .geometry import CameraIntrinsics, ImageBuffer, PoseSE3, bilinear_sample, image_gradients, so3_exp
from .keypoints import KeypointList


@dataclass(frozen=True)
class FlowConfig:
    window: int = 7
    pyramid_levels: int = 3
    iterations: int = 10
    tau_eig: float = 1e-4
    step_tol: float = 1e-3
    max_residual: float = 0.02  # RMS intensity error over the final window
    max_flow: float | None = None  # defaults to the search-range bound

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValidationError("window must be odd and at least 3")
        if self.pyramid_levels < 1 or self.iterations < 1:
            raise ValidationError("pyramid_levels and iterations must be positive")

    @property
    def search_bound(self) -> float:
        bound = float(2 ** self.pyramid_levels * self.window)
        return bound if self.max_flow is None else min(bound, float(self.max_flow))


@dataclass(frozen=True)
class FlowField:
    """Flow vectors (du, dv) at (u, v); invalid entries carry zero flow."""

    points: np.ndarray
    flow: np.ndarray
    valid: np.ndarray

    def __len__(self) -> int:
        return len(self.valid)

    @property
    def valid_flow(self) -> np.ndarray:
        return self.flow[self.valid]

    def rows(self):
        for (u, v), (du, dv), ok in zip(self.points, self.flow, self.valid):
            yield float(u), float(v), float(du), float(dv), bool(ok)


def _as_points(points) -> np.ndarray:
    if isinstance(points, KeypointList):
        return points.points
    return np.asarray(points, dtype=np.float64).reshape(-1, 2)


_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    """Gaussian pyramid: binomial blur then keep every second pixel."""
    pyr = [img]
    for _ in range(levels - 1):
        if min(pyr[-1].shape) < 8:
            break
        sm = correlate1d(correlate1d(pyr[-1], _BINOMIAL, axis=0, mode="nearest"),
                         _BINOMIAL, axis=1, mode="nearest")
        pyr.append(sm[::2, ::2])
    return pyr


def lucas_kanade(prev, next, points, window: int = 7, pyramid_levels: int = 3,
                 config: FlowConfig | None = None) -> FlowField:
    """Track ``points`` from ``prev`` to ``next``."""
    cfg = config or FlowConfig(window=window, pyramid_levels=pyramid_levels)
    a = prev.data if isinstance(prev, ImageBuffer) else np.asarray(prev, dtype=np.float64)
    b = next.data if isinstance(next, ImageBuffer) else np.asarray(next, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"prev {a.shape} vs next {b.shape}")
    pts = _as_points(points)
    n = len(pts)
    if n == 0:
        return FlowField(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0, dtype=bool))

    pa, pb = _pyramid(a, cfg.pyramid_levels), _pyramid(b, cfg.pyramid_levels)
    half = cfg.window // 2
    dv, du = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    du, dv = du.ravel(), dv.ravel()
    area = float(du.size)

    guess = np.zeros((n, 2))
    ok = np.ones(n, dtype=bool)
    for level in range(len(pa) - 1, -1, -1):
        A, B = pa[level], pb[level]
        gx_img, gy_img = image_gradients(A)
        p = pts / 2.0 ** level
        x = p[:, 0:1] + du
        y = p[:, 1:2] + dv
        T, _ = bilinear_sample(A, x, y)
        gx, _ = bilinear_sample(gx_img, x, y)
        gy, _ = bilinear_sample(gy_img, x, y)
        gxx, gxy, gyy = (gx * gx).sum(1), (gx * gy).sum(1), (gy * gy).sum(1)
        det = gxx * gyy - gxy * gxy
        lam_min = 0.5 * (gxx + gyy) - np.sqrt(0.25 * (gxx - gyy) ** 2 + gxy ** 2)
        if level == 0:
            ok &= lam_min / area >= cfg.tau_eig
        solvable = det > 1e-18 * np.maximum(gxx + gyy, 1e-300) ** 2
        Hl, Wl = A.shape
        # coarse levels only refine points whose window fits; clamped borders mislead the solve
        fits = (p[:, 0] - half >= 0) & (p[:, 0] + half <= Wl - 1) & (p[:, 1] - half >= 0) & (p[:, 1] + half <= Hl - 1)
        nu = np.zeros((n, 2))
        active = solvable & (fits | (level == 0))
        err0 = None
        for _ in range(cfg.iterations):
            if not np.any(active):
                break
            J, _ = bilinear_sample(B, x + (guess[:, 0:1] + nu[:, 0:1]), y + (guess[:, 1:2] + nu[:, 1:2]))
            e = T - J
            if err0 is None:
                err0 = (e * e).sum(1)
            bx, by = (e * gx).sum(1), (e * gy).sum(1)
            with np.errstate(divide="ignore", invalid="ignore"):
                step = np.stack([(gyy * bx - gxy * by) / det, (gxx * by - gxy * bx) / det], axis=1)
            step[~active] = 0.0
            nu += step
            active &= np.hypot(step[:, 0], step[:, 1]) >= cfg.step_tol
        if err0 is not None:
            J, _ = bilinear_sample(B, x + (guess[:, 0:1] + nu[:, 0:1]), y + (guess[:, 1:2] + nu[:, 1:2]))
            worse = ((T - J) ** 2).sum(1) > err0
            nu[worse] = 0.0
        if level > 0:
            guess = 2.0 * (guess + nu)
        else:
            guess = guess + nu
        ok &= solvable
    flow = guess
    H, W = a.shape
    J, _ = bilinear_sample(b, x + flow[:, 0:1], y + flow[:, 1:2])
    residual = np.sqrt(np.mean((T - J) ** 2, axis=1))
    ok &= residual <= cfg.max_residual
    end = pts + flow
    ok &= np.all(np.isfinite(flow), axis=1)
    ok &= np.hypot(flow[:, 0], flow[:, 1]) <= cfg.search_bound
    # the tracked window must lie inside the next image
    ok &= (end[:, 0] >= half) & (end[:, 0] <= W - 1 - half) & (end[:, 1] >= half) & (end[:, 1] <= H - 1 - half)
    flow = np.where(ok[:, None], flow, 0.0)
    return FlowField(pts.copy(), flow, ok)


def dominant_motion(flow: FlowField, inlier_radius: float = 3.0) -> tuple[np.ndarray, int]:
    """Componentwise median of the valid flow and the count within ``inlier_radius`` of it."""
    f = flow.valid_flow
    if len(f) == 0:
        return np.zeros(2), 0
    med = np.median(f, axis=0)
    inliers = int(np.sum(np.hypot(f[:, 0] - med[0], f[:, 1] - med[1]) <= inlier_radius))
    return med, inliers


def rotation_prior(median_flow, intrinsics: CameraIntrinsics) -> PoseSE3:
    """Small-angle rotation explaining a uniform image motion (du, dv).

    A rotation theta about the camera y axis moves the image by fx * theta in
    u; about x it moves by -fy * theta in v.
    """
    du, dv = float(median_flow[0]), float(median_flow[1])
    return PoseSE3(so3_exp([-dv / intrinsics.fy, du / intrinsics.fx, 0.0]), np.zeros(3))
