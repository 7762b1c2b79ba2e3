"""Keyframe graph, uncertainty-weighted depth fusion and point-cloud export.

Uncertainty maps live in the disparity domain, which is inverse depth up to
the constant f * B.  Fusion therefore averages inverse depth with weights
1 / uncertainty, and the fused uncertainty is the harmonic combination.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, EmptyMap, ValidationError
from .geometry import CameraIntrinsics, DepthMap, PoseSE3, UncertaintyMap
from .pose import Keyframe


def _check_pair(depth: DepthMap, unc: UncertaintyMap):
    if depth.shape != unc.shape:
        raise DimensionMismatch(f"depth {depth.shape} vs uncertainty {unc.shape}")


def fuse_depth(existing: tuple[DepthMap, UncertaintyMap], incoming: tuple[DepthMap, UncertaintyMap],
               space: str = "inverse") -> tuple[DepthMap, UncertaintyMap]:
    """Per-pixel inverse-variance fusion of two depth estimates.

    ``space="inverse"`` averages 1/d (default); ``space="depth"`` averages d
    directly.  Pixels valid in only one input are copied through.
    """
    (d1, u1), (d2, u2) = existing, incoming
    _check_pair(d1, u1)
    _check_pair(d2, u2)
    if d1.shape != d2.shape:
        raise DimensionMismatch(f"existing {d1.shape} vs incoming {d2.shape}")
    if space not in ("inverse", "depth"):
        raise ValidationError("space must be 'inverse' or 'depth'")
    both = d1.valid & d2.valid
    s1, s2 = u1.values, u2.values
    with np.errstate(divide="ignore", invalid="ignore"):
        w1, w2 = 1.0 / s1, 1.0 / s2
        if space == "inverse":
            x1 = np.where(d1.valid, 1.0 / np.where(d1.valid, d1.values, 1.0), 0.0)
            x2 = np.where(d2.valid, 1.0 / np.where(d2.valid, d2.values, 1.0), 0.0)
        else:
            x1, x2 = d1.values, d2.values
        fused_x = (x1 * w1 + x2 * w2) / (w1 + w2)
        fused_s = 1.0 / (w1 + w2)
    # a zero variance is a perfect measurement and wins outright
    exact1, exact2 = both & (s1 == 0), both & (s2 == 0) & (s1 != 0)
    fused_x = np.where(exact1, x1, np.where(exact2, x2, fused_x))
    fused_s = np.where(exact1 | exact2, 0.0, fused_s)
    with np.errstate(divide="ignore", invalid="ignore"):
        fused_d = 1.0 / fused_x if space == "inverse" else fused_x
        depth = np.where(both, fused_d, np.where(d1.valid, d1.values, d2.values))
    unc = np.where(both, fused_s, np.where(d1.valid, s1, np.where(d2.valid, s2, np.maximum(s1, s2))))
    valid = d1.valid | d2.valid
    return DepthMap(np.where(valid, depth, 0.0), valid), UncertaintyMap(unc)


@dataclass
class KeyframeGraph:
    """Keyframes by id with one reference link per non-root keyframe."""

    keyframes: dict = field(default_factory=dict)
    parent: dict = field(default_factory=dict)   # child id -> reference id
    root: int | None = None

    def add(self, keyframe: Keyframe, reference: int | None = None) -> None:
        if keyframe.id in self.keyframes:
            raise ValidationError(f"keyframe id {keyframe.id} already present")
        if self.root is None:
            if reference is not None:
                raise ValidationError("the first keyframe is the root and has no reference")
            self.root = keyframe.id
        else:
            if reference is None or reference not in self.keyframes:
                raise ValidationError("non-root keyframes need an existing reference keyframe")
            self.parent[keyframe.id] = reference
        self.keyframes[keyframe.id] = keyframe

    def replace(self, keyframe: Keyframe) -> None:
        """Swap in an updated keyframe (e.g. after depth fusion) under the same id."""
        if keyframe.id not in self.keyframes:
            raise ValidationError(f"unknown keyframe id {keyframe.id}")
        self.keyframes[keyframe.id] = keyframe

    def children(self, kid: int) -> list[int]:
        return sorted(c for c, p in self.parent.items() if p == kid)

    def __len__(self) -> int:
        return len(self.keyframes)

    def __iter__(self):
        return iter(self.keyframes[k] for k in sorted(self.keyframes))

    @property
    def poses(self) -> dict:
        return {k: kf.pose_world for k, kf in self.keyframes.items()}

    def edges(self) -> list[tuple[int, int]]:
        return sorted((p, c) for c, p in self.parent.items())


def keyframe_points(keyframe: Keyframe, intrinsics: CameraIntrinsics, stride: int = 1):
    """World points and intensities for the valid depth pixels on a ``stride`` grid."""
    if stride < 1:
        raise ValidationError("stride must be at least 1")
    H, W = keyframe.depth.shape
    v, u = np.mgrid[0:H:stride, 0:W:stride]
    d = keyframe.depth.values[v, u]
    ok = keyframe.depth.valid[v, u]
    u, v, d = u[ok].astype(np.float64), v[ok].astype(np.float64), d[ok]
    X = np.stack([(u - intrinsics.cx) / intrinsics.fx * d, (v - intrinsics.cy) / intrinsics.fy * d, d], axis=1)
    world = keyframe.pose_world.apply(X) if len(X) else X
    return world, keyframe.image.data[v.astype(int), u.astype(int)]


def export_pointcloud(graph: KeyframeGraph, intrinsics: CameraIntrinsics, path, stride: int = 1) -> int:
    """Write an ASCII PLY with x y z intensity; returns the point count."""
    if len(graph) == 0:
        raise EmptyMap("the map has no keyframes")
    pts, vals = [], []
    for kf in graph:
        X, i = keyframe_points(kf, intrinsics, stride)
        pts.append(X)
        vals.append(i)
    P = np.concatenate(pts) if pts else np.zeros((0, 3))
    I = np.concatenate(vals) if vals else np.zeros(0)
    header = ["ply", "format ascii 1.0", "comment capslam global map", f"element vertex {len(P)}",
              "property float x", "property float y", "property float z", "property float intensity",
              "end_header"]
    body = [f"{x:.6f} {y:.6f} {z:.6f} {i:.6f}" for (x, y, z), i in zip(P, I)]
    Path(path).write_text("\n".join(header + body) + "\n")
    return len(P)


def read_ply(path) -> tuple[np.ndarray, np.ndarray, int]:
    """Parse an ASCII PLY written by :func:`export_pointcloud`: (xyz, intensity, declared count)."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "ply":
        raise ValidationError(f"{path}: not a PLY file")
    declared, i = None, 1
    while lines[i] != "end_header":
        if lines[i].startswith("element vertex"):
            declared = int(lines[i].split()[2])
        i += 1
    rows = [ln.split() for ln in lines[i + 1:] if ln.strip()]
    data = np.array(rows, dtype=np.float64).reshape(-1, 4)
    return data[:, :3], data[:, 3], int(declared)
