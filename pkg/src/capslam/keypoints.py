"""Corner scoring by windowed shift SSD, and corner detection.

Two scoring forms are exposed.  The direct form evaluates the windowed sum of
squared differences S(x, y) for the 8 compass unit shifts and keeps the
minimum.  The fast form is the Shi-Tomasi minimum eigenvalue of the
structure tensor, which is the small-shift limit of the same minimum over
the full unit circle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d, maximum_filter

from .errors import ImageTooSmall, ValidationError, WindowOutOfBounds
from .geometry import ImageBuffer, bilinear_sample, image_gradients

WINDOW_SIGMA = 1.5
_S = np.sqrt(0.5)
COMPASS_SHIFTS = np.array([(1, 0), (_S, _S), (0, 1), (-_S, _S),
                           (-1, 0), (-_S, -_S), (0, -1), (_S, -_S)], dtype=np.float64)


def _pixels(image) -> np.ndarray:
    if isinstance(image, ImageBuffer):
        return image.data
    return np.asarray(image, dtype=np.float64)


def window_radius(sigma: float) -> int:
    """Half-width of the Gaussian window, truncated at 3 sigma."""
    if not sigma > 0:
        raise ValidationError("window_sigma must be positive")
    return int(np.floor(3.0 * sigma + 1e-9))


def gaussian_window_1d(sigma: float) -> np.ndarray:
    r = window_radius(sigma)
    x = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def gaussian_window(sigma: float) -> np.ndarray:
    w = gaussian_window_1d(sigma)
    return np.outer(w, w)


@dataclass(frozen=True)
class CornerScoreMap:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValidationError("corner scores must be a finite, non-negative 2-D array")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class KeypointList:
    """Keypoints sorted by descending score; ``points`` holds (u, v) rows."""

    points: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(p) != len(s):
            raise ValidationError("points and scores differ in length")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "scores", s)

    @classmethod
    def empty(cls) -> "KeypointList":
        return cls(np.zeros((0, 2)), np.zeros(0))

    def __len__(self) -> int:
        return len(self.scores)

    def __iter__(self):
        for (u, v), s in zip(self.points, self.scores):
            yield float(u), float(v), float(s)


def ssd_shift_score(image, center, shift, window_sigma: float = WINDOW_SIGMA) -> float:
    """Gaussian-weighted sum of (I(u+x, v+y) - I(u, v))^2 around ``center``."""
    img = _pixels(image)
    H, W = img.shape
    cu, cv = int(center[0]), int(center[1])
    x, y = float(shift[0]), float(shift[1])
    r = window_radius(window_sigma)
    lo_u, hi_u = cu - r + min(0, int(np.floor(x))), cu + r + max(0, int(np.ceil(x)))
    lo_v, hi_v = cv - r + min(0, int(np.floor(y))), cv + r + max(0, int(np.ceil(y)))
    if lo_u < 0 or lo_v < 0 or hi_u > W - 1 or hi_v > H - 1:
        raise WindowOutOfBounds(f"window at {(cu, cv)} with shift {(x, y)} leaves the image")
    dv, du = np.mgrid[-r:r + 1, -r:r + 1]
    uu, vv = (cu + du).astype(np.float64), (cv + dv).astype(np.float64)
    shifted, _ = bilinear_sample(img, uu + x, vv + y)
    diff = shifted - img[cv + dv, cu + du]
    return float(np.sum(gaussian_window(window_sigma) * diff * diff))


def _window_sum(a: np.ndarray, sigma: float) -> np.ndarray:
    w = gaussian_window_1d(sigma)
    out = correlate1d(a, w, axis=0, mode="constant")
    return correlate1d(out, w, axis=1, mode="constant")


def _valid_region(shape, sigma: float) -> np.ndarray:
    """Pixels whose window and unit shifts stay inside the image."""
    m = window_radius(sigma) + 1
    mask = np.zeros(shape, dtype=bool)
    mask[m:shape[0] - m, m:shape[1] - m] = True
    return mask


def corner_response(image, window_sigma: float = WINDOW_SIGMA, form: str = "fast") -> CornerScoreMap:
    """Per-pixel corner score; zero outside the region where the window fits."""
    img = _pixels(image)
    m = window_radius(window_sigma) + 1
    if img.ndim != 2 or min(img.shape) < 2 * m + 1:
        raise ImageTooSmall(f"image {img.shape} smaller than the {2 * m + 1}px scoring window")
    valid = _valid_region(img.shape, window_sigma)
    if form == "direct":
        H, W = img.shape
        v, u = np.mgrid[0:H, 0:W].astype(np.float64)
        score = np.full(img.shape, np.inf)
        for x, y in COMPASS_SHIFTS:
            shifted, _ = bilinear_sample(img, u + x, v + y)
            score = np.minimum(score, _window_sum((shifted - img) ** 2, window_sigma))
    elif form == "fast":
        gx, gy = image_gradients(img)
        a = _window_sum(gx * gx, window_sigma)
        b = _window_sum(gx * gy, window_sigma)
        c = _window_sum(gy * gy, window_sigma)
        score = 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b * b)
    else:
        raise ValidationError(f"unknown form {form!r}; use 'fast' or 'direct'")
    return CornerScoreMap(np.where(valid, np.maximum(score, 0.0), 0.0))


def detect_corners(score_map: CornerScoreMap, threshold: float, nms_radius: float = 3.0,
                   max_points: int | None = None) -> KeypointList:
    """Local maxima above ``threshold``, greedily thinned so no two are closer than ``nms_radius``."""
    if not threshold > 0:
        raise ValidationError("threshold must be positive")
    if not nms_radius >= 1:
        raise ValidationError("nms_radius must be at least 1")
    s = score_map.values if isinstance(score_map, CornerScoreMap) else np.asarray(score_map, float)
    k = 2 * int(np.ceil(nms_radius)) + 1
    peaks = (s > threshold) & (s >= maximum_filter(s, size=k, mode="constant", cval=0.0))
    v, u = np.nonzero(peaks)
    vals = s[v, u]
    # descending score, ties broken by row then column for determinism
    order = np.lexsort((u, v, -vals))
    kept: list[int] = []
    for i in order:
        if all((u[i] - u[j]) ** 2 + (v[i] - v[j]) ** 2 >= nms_radius ** 2 for j in kept):
            kept.append(i)
            if max_points is not None and len(kept) >= max_points:
                break
    if not kept:
        return KeypointList.empty()
    idx = np.array(kept)
    return KeypointList(np.stack([u[idx], v[idx]], axis=1).astype(np.float64), vals[idx])


def detect_keypoints(image, window_sigma: float = WINDOW_SIGMA, rel_threshold: float = 0.05,
                     nms_radius: float = 3.0, max_points: int | None = None) -> KeypointList:
    """Fast-form scores, thresholded at ``rel_threshold`` times the peak score."""
    scores = corner_response(image, window_sigma)
    peak = float(scores.values.max())
    if peak <= 0:
        return KeypointList.empty()
    return detect_corners(scores, rel_threshold * peak, nms_radius, max_points)
