"""Grayscale image and depth-map file I/O.

PNG (8/16 bit) goes through Pillow; plain PGM (P2 ASCII, P5 binary) is parsed
here so the maxval is honoured exactly.  Depth PNGs are 16-bit with a scale
factor in counts per metre (default 5000), recorded in a ``depth_scale`` text
chunk; zero counts mark invalid pixels.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin

from .errors import InvalidImage
from .geometry import DepthMap, ImageBuffer

DEPTH_SCALE = 5000.0


def _read_pgm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    magic = raw[:2]
    if magic not in (b"P2", b"P5"):
        raise InvalidImage(f"{path}: not a PGM file")
    # header tokens: magic, width, height, maxval (comments allowed)
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(raw[start:pos]))
    width, height, maxval = tokens
    if not 0 < maxval < 65536:
        raise InvalidImage(f"{path}: bad maxval {maxval}")
    if magic == b"P2":
        vals = np.array(raw[pos:].split(), dtype=np.int64)
    else:
        pos += 1  # single whitespace after maxval
        dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        vals = np.frombuffer(raw, dtype=dt, count=width * height, offset=pos).astype(np.int64)
    if vals.size < width * height:
        raise InvalidImage(f"{path}: truncated pixel data")
    return vals[: width * height].reshape(height, width) / float(maxval)


def _write_pgm(path: Path, data: np.ndarray, bits: int, binary: bool = True) -> None:
    maxval = 255 if bits == 8 else 65535
    q = np.round(np.clip(data, 0, 1) * maxval).astype(np.int64)
    h, w = q.shape
    if binary:
        dt = ">u2" if bits == 16 else "u1"
        path.write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + q.astype(dt).tobytes())
    else:
        body = "\n".join(" ".join(str(x) for x in row) for row in q)
        path.write_text(f"P2\n{w} {h}\n{maxval}\n{body}\n")


def _pil_to_array(im: Image.Image) -> tuple[np.ndarray, float]:
    if im.mode in ("I;16", "I;16B", "I;16L"):
        return np.asarray(im, dtype=np.float64), 65535.0
    if im.mode == "I":
        arr = np.asarray(im, dtype=np.float64)
        return arr, 65535.0 if arr.max(initial=0) > 255 else 255.0
    if im.mode != "L":
        im = im.convert("L")
    return np.asarray(im, dtype=np.float64), 255.0


def read_image(path) -> ImageBuffer:
    """Load an image as grayscale intensities in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise InvalidImage(f"{path}: no such file")
    if path.suffix.lower() in (".pgm", ".pnm"):
        return ImageBuffer(_read_pgm(path))
    with Image.open(path) as im:
        arr, scale = _pil_to_array(im)
    return ImageBuffer(arr / scale)


def write_image(path, image, bits: int = 8) -> None:
    path = Path(path)
    data = image.data if isinstance(image, ImageBuffer) else np.asarray(image, dtype=np.float64)
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    if path.suffix.lower() in (".pgm", ".pnm"):
        _write_pgm(path, data, bits)
        return
    maxval = 255 if bits == 8 else 65535
    q = np.round(np.clip(data, 0, 1) * maxval)
    im = Image.fromarray(q.astype(np.uint8 if bits == 8 else np.uint16))
    im.save(path)


def write_depth_png(path, depth: DepthMap, scale: float = DEPTH_SCALE) -> None:
    counts = np.round(depth.values * scale)
    if np.any(counts[depth.valid] > 65535):
        raise InvalidImage(f"depth exceeds the 16-bit range at scale {scale}")
    counts = np.where(depth.valid, np.maximum(counts, 1), 0).astype(np.uint16)
    info = PngImagePlugin.PngInfo()
    info.add_text("depth_scale", repr(float(scale)))
    info.add_text("depth_unit", "counts per metre; 0 = invalid")
    Image.fromarray(counts).save(Path(path), pnginfo=info)


def read_depth_png(path, scale: float | None = None) -> DepthMap:
    """Read a 16-bit depth PNG; ``scale`` defaults to the file's metadata or 5000."""
    path = Path(path)
    if not path.exists():
        raise InvalidImage(f"{path}: no such file")
    with Image.open(path) as im:
        if scale is None:
            scale = float(im.info.get("depth_scale", DEPTH_SCALE))
        counts = np.asarray(im, dtype=np.float64)
    if counts.ndim != 2:
        raise InvalidImage(f"{path}: depth PNG must be single channel")
    valid = counts > 0
    return DepthMap(np.where(valid, counts / scale, 0.0), valid)
