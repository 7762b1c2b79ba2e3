"""Depth accuracy and absolute trajectory error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InsufficientOverlap, NoValidPixels, ValidationError
from .geometry import DepthMap, PoseSE3

DEFAULT_TAU = 0.10
ASSOCIATION_WINDOW = 0.02  # s


def depth_hits(pred: DepthMap, gt: DepthMap, tau: float = DEFAULT_TAU) -> tuple[int, int]:
    """(correct, counted) pixels; a pixel counts when valid in both maps."""
    if not tau > 0:
        raise ValidationError("tau must be positive")
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    both = pred.valid & gt.valid
    rel = np.abs(pred.values[both] - gt.values[both]) / gt.values[both]
    return int(np.count_nonzero(rel < tau)), int(np.count_nonzero(both))


def percent_correct_depth(pred: DepthMap, gt: DepthMap, tau: float = DEFAULT_TAU) -> float:
    """Percentage of jointly valid pixels with |pred - gt| / gt < tau."""
    good, total = depth_hits(pred, gt, tau)
    if total == 0:
        raise NoValidPixels("no pixel is valid in both depth maps")
    return 100.0 * good / total


def pooled_percent_correct(pairs, tau: float = DEFAULT_TAU) -> float:
    """Percent correct over all pixels of several (pred, gt) pairs."""
    good = total = 0
    for pred, gt in pairs:
        g, t = depth_hits(pred, gt, tau)
        good, total = good + g, total + t
    if total == 0:
        raise NoValidPixels("no pixel is valid in both depth maps")
    return 100.0 * good / total


def associate(times_a, times_b, max_dt: float = ASSOCIATION_WINDOW) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp matching, closest pairs first, one-to-one."""
    a, b = np.asarray(times_a, dtype=np.float64), np.asarray(times_b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        return []
    diff = np.abs(a[:, None] - b[None, :])
    ia, ib = np.nonzero(diff <= max_dt)
    order = np.lexsort((ib, ia, diff[ia, ib]))
    used_a, used_b, pairs = set(), set(), []
    for k in order:
        i, j = int(ia[k]), int(ib[k])
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            pairs.append((i, j))
    return sorted(pairs)


def rigid_align(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form (R, t) minimising sum |R src_i + t - dst_i|^2 (Kabsch)."""
    src, dst = np.asarray(src, dtype=np.float64), np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(C)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    return R, mu_d - R @ mu_s


@dataclass
class TrajectoryError:
    rmse: float
    pairs: int
    rotation: np.ndarray
    translation: np.ndarray
    residuals: np.ndarray


def _positions(traj) -> np.ndarray:
    return np.array([p.translation if isinstance(p, PoseSE3) else np.asarray(p, float) for p in traj]).reshape(-1, 3)


def absolute_trajectory_error(est_times, est_poses, gt_times, gt_poses,
                              max_dt: float = ASSOCIATION_WINDOW) -> TrajectoryError:
    pairs = associate(est_times, gt_times, max_dt)
    if len(pairs) < 2:
        raise InsufficientOverlap(f"only {len(pairs)} timestamp pairs within {max_dt} s")
    E, G = _positions(est_poses), _positions(gt_poses)
    src = E[[i for i, _ in pairs]]
    dst = G[[j for _, j in pairs]]
    R, t = rigid_align(src, dst)
    res = np.linalg.norm(src @ R.T + t - dst, axis=1)
    return TrajectoryError(float(np.sqrt(np.mean(res**2))), len(pairs), R, t, res)


def ate_rmse(est_times, est_poses, gt_times, gt_poses, max_dt: float = ASSOCIATION_WINDOW) -> float:
    """Position RMSE after rigid alignment of the associated poses (metres)."""
    return absolute_trajectory_error(est_times, est_poses, gt_times, gt_poses, max_dt).rmse


def trajectory_length(poses) -> float:
    P = _positions(poses)
    return float(np.sum(np.linalg.norm(np.diff(P, axis=0), axis=1))) if len(P) > 1 else 0.0
