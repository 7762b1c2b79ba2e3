"""On-disk sequence layout, loading and synthetic-sequence export.

A sequence directory holds::

    times.txt          one line per frame: "<id> <timestamp> [exposure]" or "<timestamp>"
    intrinsics.json    {"fx", "fy", "cx", "cy", optional "baseline", "width", "height"}
    images/            left (or monocular) images named <id>.png or <id>.pgm
    images_right/      optional right stereo images
    depth/             optional 16-bit depth PNGs (counts per metre in metadata, default 5000)
    groundtruth.txt    optional TUM trajectory: t tx ty tz qx qy qz qw

Exposure values in times.txt are accepted and ignored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ekf import read_tum, write_tum
from .errors import (
    MissingImageFile,
    MissingIntrinsics,
    MissingTimestamps,
    NonMonotonicTimestamps,
    ValidationError,
)
from .geometry import CameraIntrinsics, DepthMap, ImageBuffer, PoseSE3
from .imageio import read_depth_png, read_image, write_depth_png, write_image

IMAGE_SUFFIXES = (".png", ".pgm", ".pnm")


@dataclass(frozen=True)
class Frame:
    index: int
    name: str
    timestamp: float
    image_path: Path
    right_path: Path | None = None
    depth_path: Path | None = None


@dataclass
class Sequence:
    root: Path
    frames: list[Frame]
    intrinsics: CameraIntrinsics
    width: int | None = None
    height: int | None = None
    groundtruth: tuple[np.ndarray, list[PoseSE3]] | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])

    @property
    def has_depth(self) -> bool:
        return bool(self.frames) and all(f.depth_path is not None for f in self.frames)

    @property
    def has_stereo(self) -> bool:
        return bool(self.frames) and all(f.right_path is not None for f in self.frames)

    def image(self, i: int) -> ImageBuffer:
        return read_image(self.frames[i].image_path)

    def right_image(self, i: int) -> ImageBuffer:
        p = self.frames[i].right_path
        if p is None:
            raise MissingImageFile(f"{self.root}: frame {self.frames[i].name} has no right image")
        return read_image(p)

    def depth(self, i: int) -> DepthMap:
        p = self.frames[i].depth_path
        if p is None:
            raise MissingImageFile(f"{self.root}: frame {self.frames[i].name} has no depth map")
        return read_depth_png(p)

    def stereo_pairs(self):
        from .capsnet import StereoPair

        return [StereoPair(self.image(i), self.right_image(i), self.intrinsics) for i in range(len(self))]


def _find_image(folder: Path, name: str) -> Path | None:
    for suffix in IMAGE_SUFFIXES:
        p = folder / f"{name}{suffix}"
        if p.exists():
            return p
    return None


def _parse_times(path: Path, image_dir: Path) -> list[tuple[str, float]]:
    rows = []
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if len(parts) == 1:
                rows.append((None, float(parts[0])))
            else:
                rows.append((parts[0], float(parts[1])))
        except ValueError:
            raise MissingTimestamps(f"{path}:{ln}: cannot parse timestamp") from None
    if not rows:
        raise MissingTimestamps(f"{path}: no timestamps")
    if any(name is None for name, _ in rows):
        # bare timestamps pair with the images in sorted filename order
        images = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if len(images) < len(rows):
            raise MissingImageFile(f"{image_dir}: {len(rows)} timestamps but {len(images)} images")
        rows = [(img.stem, t) for img, (_, t) in zip(images, rows)]
    return rows


def load_sequence(directory) -> Sequence:
    root = Path(directory)
    intr_path, times_path, image_dir = root / "intrinsics.json", root / "times.txt", root / "images"
    if not intr_path.exists():
        raise MissingIntrinsics(f"{intr_path}: missing")
    if not times_path.exists():
        raise MissingTimestamps(f"{times_path}: missing")
    if not image_dir.is_dir():
        raise MissingImageFile(f"{image_dir}: missing image directory")
    try:
        meta = json.loads(intr_path.read_text())
        intr = CameraIntrinsics.from_dict(meta)
    except (ValueError, KeyError, TypeError) as exc:
        raise MissingIntrinsics(f"{intr_path}: {exc}") from None
    rows = _parse_times(times_path, image_dir)
    times = [t for _, t in rows]
    for a, b in zip(times, times[1:]):
        if not b > a:
            raise NonMonotonicTimestamps(f"{times_path}: timestamp {b} does not follow {a}")
    right_dir, depth_dir = root / "images_right", root / "depth"
    frames = []
    for i, (name, t) in enumerate(rows):
        img = _find_image(image_dir, name)
        if img is None:
            raise MissingImageFile(f"{image_dir / name}.png: missing")
        right = _find_image(right_dir, name) if right_dir.is_dir() else None
        if right_dir.is_dir() and right is None:
            raise MissingImageFile(f"{right_dir / name}.png: missing")
        depth = depth_dir / f"{name}.png" if depth_dir.is_dir() else None
        if depth is not None and not depth.exists():
            raise MissingImageFile(f"{depth}: missing")
        frames.append(Frame(i, name, t, img, right, depth))
    gt = None
    gt_path = root / "groundtruth.txt"
    if gt_path.exists():
        gt = read_tum(gt_path)
    return Sequence(root, frames, intr, meta.get("width"), meta.get("height"), gt,
                    {k: v for k, v in meta.items() if k not in ("fx", "fy", "cx", "cy", "baseline")})


def write_sequence(directory, images, timestamps, intrinsics: CameraIntrinsics, right_images=None,
                   depths=None, poses=None, extra_meta: dict | None = None) -> Path:
    """Write frames in the layout :func:`load_sequence` reads."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    names = [f"{i:05d}" for i in range(len(images))]
    for name, img in zip(names, images):
        write_image(root / "images" / f"{name}.png", img, bits=16)
    if right_images is not None:
        (root / "images_right").mkdir(exist_ok=True)
        for name, img in zip(names, right_images):
            write_image(root / "images_right" / f"{name}.png", img, bits=16)
    if depths is not None:
        (root / "depth").mkdir(exist_ok=True)
        for name, d in zip(names, depths):
            write_depth_png(root / "depth" / f"{name}.png", d)
    (root / "times.txt").write_text("".join(f"{n} {t:.6f}\n" for n, t in zip(names, timestamps)))
    h, w = np.asarray(images[0].data if isinstance(images[0], ImageBuffer) else images[0]).shape
    meta = {**intrinsics.to_dict(), "width": int(w), "height": int(h), **(extra_meta or {})}
    (root / "intrinsics.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if poses is not None:
        write_tum(root / "groundtruth.txt", timestamps, poses)
    return root


def write_synthetic(seq, directory) -> Path:
    """Export a :class:`~capslam.synth.SyntheticSequence` with ground truth."""
    if not seq.frames:
        raise ValidationError("synthetic sequence has no frames")
    extra = {"synth_config": seq.config.to_dict(), "seed": seq.seed}
    return write_sequence(directory, [f.left for f in seq.frames], [f.timestamp for f in seq.frames],
                          seq.intrinsics, [f.right for f in seq.frames], [f.depth for f in seq.frames],
                          [f.pose for f in seq.frames], extra)
