import numpy as np
import pytest

from capslam.geometry import CameraIntrinsics


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def intr():
    return CameraIntrinsics(100.0, 100.0, 64.0, 64.0, 0.5)


def smooth_texture(h, w, seed=0, freqs=(0.02, 0.1), k=12):
    """Sum of random sinusoids in [0.1, 0.9]; frequencies in cycles per pixel."""
    r = np.random.default_rng(seed)
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w))
    for _ in range(k):
        f = r.uniform(*freqs)
        a = r.uniform(0, np.pi)
        ph = r.uniform(0, 2 * np.pi)
        img += np.sin(2 * np.pi * f * (u * np.cos(a) + v * np.sin(a)) + ph)
    img = (img - img.min()) / (img.max() - img.min())
    return 0.1 + 0.8 * img


def shifted_texture(h, w, shift, seed=0, freqs=(0.02, 0.1), k=12):
    """Analytic texture and the same texture translated by ``shift`` = (du, dv) px."""
    r = np.random.default_rng(seed)
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    comps = [(r.uniform(*freqs), r.uniform(0, np.pi), r.uniform(0, 2 * np.pi)) for _ in range(k)]

    def render(du, dv):
        img = np.zeros((h, w))
        for f, a, ph in comps:
            img += np.sin(2 * np.pi * f * ((u - du) * np.cos(a) + (v - dv) * np.sin(a)) + ph)
        return img

    a, b = render(0.0, 0.0), render(*shift)
    lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
    return 0.1 + 0.8 * (a - lo) / (hi - lo), 0.1 + 0.8 * (b - lo) / (hi - lo)


def plane_pair(motion, seed=0, size=64, fx=None, depth=1.0, freq=(2.0, 6.0), components=16, supersample=3):
    """Keyframe and frame images of a textured fronto-parallel plane.

    ``motion`` is the second camera's pose in the first camera's frame; the
    pose that aligns the keyframe to the frame is its inverse.
    """
    from capslam.geometry import ImageBuffer, PoseSE3
    from capslam.pose import Keyframe
    from capslam.synth import SynthSceneConfig, build_scene, render

    cfg = SynthSceneConfig(scene="fronto-plane", width=size, height=size, fx=fx, plane_depth=depth,
                           texture_freq=freq, texture_components=components, texture_seed=seed)
    scene = build_scene(cfg, np.random.default_rng([0, seed]))
    intr = cfg.intrinsics
    img0, dep0 = render(scene, PoseSE3.identity(), intr, size, size, supersample)
    img1, _ = render(scene, motion, intr, size, size, supersample)
    return Keyframe.create(0, ImageBuffer(img0), dep0), ImageBuffer(img1), intr


def motion_1deg(translation=0.01):
    """1 degree about a generic axis plus ``translation`` metres along a generic direction."""
    from capslam.geometry import PoseSE3, so3_exp

    axis = np.array([0.3, 1.0, 0.2])
    direction = np.array([0.6, -0.5, 0.62])
    R = so3_exp(np.deg2rad(1.0) * axis / np.linalg.norm(axis))
    return PoseSE3(R, translation * direction / np.linalg.norm(direction))


def pose_errors(estimate, truth):
    """(translation error m, rotation error deg) between two poses."""
    from capslam.geometry import se3_compose, se3_inverse

    d = se3_compose(estimate, se3_inverse(truth))
    return float(np.linalg.norm(estimate.translation - truth.translation)), float(np.rad2deg(d.rotation_angle()))


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    lines = [test_acceptance.RESULTS[k] for k in sorted(test_acceptance.RESULTS)]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
