"""Ray-cast synthetic stereo sequences with exact depth and poses.

Scenes are sets of textured rectangles.  Camera rays are built with unit
z-component, so the ray parameter at a hit *is* the camera-frame depth.
World frame follows the camera convention at the start pose: x right,
y down, z forward.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import CameraIntrinsics, DepthMap, ImageBuffer, PoseSE3, so3_exp

SCENES = ("fronto-plane", "box-room", "textured-corridor")


@dataclass(frozen=True)
class SynthSceneConfig:
    scene: str = "fronto-plane"
    width: int = 64
    height: int = 64
    fx: float | None = None
    fy: float | None = None
    cx: float | None = None
    cy: float | None = None
    baseline: float = 0.1
    frames: int = 1
    fps: float = 30.0
    # trajectory: p(t) = v t + sway * sin(2 pi sway_freq t) on x; yaw(t) = yaw_amp sin(2 pi yaw_freq t)
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    sway_amplitude: float = 0.0
    sway_frequency: float = 0.5
    yaw_amplitude_deg: float = 0.0
    yaw_frequency: float = 0.3
    start_position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # scene geometry
    plane_depth: float = 1.0
    room_size: tuple[float, float, float] = (4.0, 3.0, 6.0)
    corridor_width: float = 1.6
    corridor_height: float = 1.4
    corridor_length: float = 5.0
    # texture: sinusoid frequencies in cycles per metre
    texture_seed: int = 0
    texture_components: int = 6
    texture_freq: tuple[float, float] = (1.0, 4.0)
    supersample: int = 3

    def __post_init__(self):
        if self.scene not in SCENES:
            raise ValidationError(f"scene must be one of {SCENES}")
        if self.width <= 0 or self.height <= 0 or self.frames <= 0:
            raise ValidationError("image dims and frame count must be positive")
        if not self.baseline > 0:
            raise ValidationError("baseline must be positive")
        for name in ("velocity", "start_position", "room_size", "texture_freq"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))

    @property
    def intrinsics(self) -> CameraIntrinsics:
        fx = self.fx if self.fx is not None else 0.8 * self.width
        fy = self.fy if self.fy is not None else fx
        cx = self.cx if self.cx is not None else (self.width - 1) / 2.0
        cy = self.cy if self.cy is not None else (self.height - 1) / 2.0
        return CameraIntrinsics(fx, fy, cx, cy, self.baseline)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSceneConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass
class Rect:
    origin: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    size: tuple[float, float]
    texture: "Texture"

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.e1, self.e2)


@dataclass
class Texture:
    freqs: np.ndarray  # (K, 2) cycles per metre
    phases: np.ndarray
    amps: np.ndarray
    offset: float = 0.5

    @classmethod
    def random(cls, rng: np.random.Generator, k: int, f_lo: float, f_hi: float) -> "Texture":
        mag = rng.uniform(f_lo, f_hi, size=k)
        ang = rng.uniform(0, np.pi, size=k)
        freqs = np.stack([mag * np.cos(ang), mag * np.sin(ang)], axis=1)
        amps = rng.uniform(0.5, 1.0, size=k)
        amps *= 0.4 / amps.sum()
        return cls(freqs, rng.uniform(0, 2 * np.pi, size=k), amps, rng.uniform(0.45, 0.55))

    def __call__(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        arg = 2 * np.pi * (s[..., None] * self.freqs[:, 0] + t[..., None] * self.freqs[:, 1]) + self.phases
        return self.offset + (self.amps * np.sin(arg)).sum(axis=-1)


def _rect(origin, e1, e2, size, tex) -> Rect:
    return Rect(np.asarray(origin, float), np.asarray(e1, float), np.asarray(e2, float), size, tex)


def build_scene(cfg: SynthSceneConfig, rng: np.random.Generator) -> list[Rect]:
    tex = lambda: Texture.random(rng, cfg.texture_components, *cfg.texture_freq)  # noqa: E731
    if cfg.scene == "fronto-plane":
        Z, big = cfg.plane_depth, 1e3
        return [_rect((-big, -big, Z), (1, 0, 0), (0, 1, 0), (2 * big, 2 * big), tex())]
    if cfg.scene == "box-room":
        sx, sy, sz = (s / 2 for s in cfg.room_size)
        return [
            _rect((-sx, -sy, sz), (1, 0, 0), (0, 1, 0), (2 * sx, 2 * sy), tex()),    # far
            _rect((-sx, -sy, -sz), (1, 0, 0), (0, 1, 0), (2 * sx, 2 * sy), tex()),   # back
            _rect((-sx, -sy, -sz), (0, 0, 1), (0, 1, 0), (2 * sz, 2 * sy), tex()),   # left
            _rect((sx, -sy, -sz), (0, 0, 1), (0, 1, 0), (2 * sz, 2 * sy), tex()),    # right
            _rect((-sx, -sy, -sz), (1, 0, 0), (0, 0, 1), (2 * sx, 2 * sz), tex()),   # ceiling
            _rect((-sx, sy, -sz), (1, 0, 0), (0, 0, 1), (2 * sx, 2 * sz), tex()),    # floor
        ]
    w, h, L = cfg.corridor_width / 2, cfg.corridor_height / 2, cfg.corridor_length
    z0 = -1.0
    return [
        _rect((-w, -h, z0), (0, 0, 1), (0, 1, 0), (L - z0, 2 * h), tex()),   # left wall
        _rect((w, -h, z0), (0, 0, 1), (0, 1, 0), (L - z0, 2 * h), tex()),    # right wall
        _rect((-w, -h, z0), (1, 0, 0), (0, 0, 1), (2 * w, L - z0), tex()),   # ceiling
        _rect((-w, h, z0), (1, 0, 0), (0, 0, 1), (2 * w, L - z0), tex()),    # floor
        _rect((-w, -h, L), (1, 0, 0), (0, 1, 0), (2 * w, 2 * h), tex()),     # end wall
    ]


def trajectory(cfg: SynthSceneConfig) -> tuple[np.ndarray, list[PoseSE3]]:
    """Timestamps and camera-to-world poses."""
    t = np.arange(cfg.frames) / cfg.fps
    poses = []
    for ti in t:
        p = np.array(cfg.start_position) + np.array(cfg.velocity) * ti
        p[0] += cfg.sway_amplitude * np.sin(2 * np.pi * cfg.sway_frequency * ti)
        yaw = np.deg2rad(cfg.yaw_amplitude_deg) * np.sin(2 * np.pi * cfg.yaw_frequency * ti)
        poses.append(PoseSE3(so3_exp([0.0, yaw, 0.0]), p))
    return t, poses


def cast(scene: list[Rect], origin: np.ndarray, dirs: np.ndarray):
    """Nearest hit per ray; ``dirs`` (..., 3) with unit camera z.  Returns (t, intensity, hit)."""
    best = np.full(dirs.shape[:-1], np.inf)
    val = np.zeros(dirs.shape[:-1])
    for r in scene:
        n = r.normal
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((r.origin - origin) @ n) / denom
        ok = np.isfinite(t) & (t > 1e-9)
        p = origin + np.where(ok, t, 0.0)[..., None] * dirs
        rel = p - r.origin
        s, q = rel @ r.e1, rel @ r.e2
        eps = 1e-9
        ok &= (s >= -eps) & (s <= r.size[0] + eps) & (q >= -eps) & (q <= r.size[1] + eps)
        closer = ok & (t < best)
        best = np.where(closer, t, best)
        val = np.where(closer, r.texture(s, q), val)
    return best, val, np.isfinite(best)


def render(scene: list[Rect], pose: PoseSE3, intr: CameraIntrinsics, height: int, width: int,
           supersample: int = 1) -> tuple[np.ndarray, DepthMap]:
    """Intensity (supersampled box filter) and exact pixel-centre depth."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    R, c = pose.rotation, pose.translation

    def rays(uu, vv):
        d = np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], axis=-1)
        return d @ R.T

    depth_t, _, hit = cast(scene, c, rays(u, v))
    # world-direction z is not the camera z once rotated; depth is the ray parameter
    # because the camera-frame direction has unit z.
    n = max(1, int(supersample))
    offs = (np.arange(n) + 0.5) / n - 0.5
    acc = np.zeros((height, width))
    for dy in offs:
        for dx in offs:
            _, val, h2 = cast(scene, c, rays(u + dx, v + dy))
            acc += np.where(h2, val, 0.0)
    img = np.clip(acc / (n * n), 0.0, 1.0)
    return img, DepthMap(np.where(hit, depth_t, 0.0), hit)


@dataclass
class SynthFrame:
    timestamp: float
    left: ImageBuffer
    right: ImageBuffer
    depth: DepthMap
    pose: PoseSE3  # camera-to-world of the left camera


@dataclass
class SyntheticSequence:
    config: SynthSceneConfig
    intrinsics: CameraIntrinsics
    frames: list[SynthFrame] = field(default_factory=list)
    seed: int = 0


def generate_synthetic(config: SynthSceneConfig, seed: int = 0) -> SyntheticSequence:
    rng = np.random.default_rng([int(seed), int(config.texture_seed)])
    scene = build_scene(config, rng)
    intr = config.intrinsics
    times, poses = trajectory(config)
    offset = PoseSE3(np.eye(3), [config.baseline, 0.0, 0.0])
    frames = []
    for t, pose in zip(times, poses):
        left, depth = render(scene, pose, intr, config.height, config.width, config.supersample)
        right, _ = render(scene, pose.compose(offset), intr, config.height, config.width,
                          config.supersample)
        frames.append(SynthFrame(float(t), ImageBuffer(left), ImageBuffer(right), depth, pose))
    return SyntheticSequence(config, intr, frames, int(seed))


def fronto_plane_pairs(n: int = 8, size: int = 16, seed: int = 0, disparity_range=(1.2, 3.6),
                       baseline: float = 0.1, texture_freq=(2.0, 5.0)):
    """``n`` fronto-parallel stereo pairs with disparities spread over ``disparity_range``.

    Returns ``(pairs, disparities)``; each pair's ground-truth disparity is
    ``baseline * fx / Z`` everywhere.
    """
    from .capsnet import StereoPair

    fx = float(size)
    disps = np.linspace(*disparity_range, n)
    pairs = []
    for i, d in enumerate(disps):
        cfg = SynthSceneConfig(scene="fronto-plane", width=size, height=size, fx=fx,
                               baseline=baseline, plane_depth=baseline * fx / d,
                               texture_seed=i, texture_freq=tuple(texture_freq))
        seq = generate_synthetic(cfg, seed)
        f = seq.frames[0]
        pairs.append(StereoPair(f.left, f.right, seq.intrinsics))
    return pairs, disps
