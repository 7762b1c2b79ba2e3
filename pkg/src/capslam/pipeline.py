"""End-to-end monocular tracking: depth prediction, keyframes, pose, filtering, map.

Per frame the network predicts left/right disparity, which becomes a depth
map and a left-right uncertainty map.  Sparse flow from the previous frame
seeds a rotation guess; the frame is then aligned directly against the
nearest keyframe.  Keyframes spawn when motion or overlap demands it, and
the tracked poses are smoothed by the error-state filter.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ekf
from .capsnet import CapsNetParams, predict_disparity, uncertainty_from_lr
from .errors import (
    ConfigurationError,
    Diverged,
    InsufficientOverlap,
    NoValidPixels,
    SingularInnovationCovariance,
    TrackingLost,
)
from .flow import FlowConfig, dominant_motion, lucas_kanade, rotation_prior
from .geometry import (
    CameraIntrinsics,
    DepthMap,
    ImageBuffer,
    PoseSE3,
    UncertaintyMap,
    bilinear_sample,
    disparity_map_to_depth,
    resize_image,
    se3_compose,
    se3_inverse,
)
from .imageio import DEPTH_SCALE, write_depth_png
from .keypoints import detect_keypoints
from .mapping import KeyframeGraph, export_pointcloud, fuse_depth
from .metrics import DEFAULT_TAU, absolute_trajectory_error, depth_hits, trajectory_length
from .pose import Keyframe, PoseConfig, SpawnConfig, estimate_pose, keyframe_spawn_policy, select_reference_keyframe

MAX_PNG_DEPTH = 65535 / DEPTH_SCALE


@dataclass
class SlamConfig:
    pose: PoseConfig = field(default_factory=PoseConfig)
    spawn: SpawnConfig = field(default_factory=SpawnConfig)
    noise: ekf.NoiseConfig = field(default_factory=lambda: ekf.NoiseConfig(
        sigma_accel=2.0, sigma_gyro=0.5, sigma_position=0.01, sigma_rotation=0.01, initial_velocity_std=1.0))
    flow: FlowConfig = field(default_factory=FlowConfig)
    use_flow_prior: bool = True
    min_flow_tracks: int = 5
    max_keypoints: int = 100
    lambda_rot: float = 0.5
    fuse_keyframe_depth: bool = True
    resize: bool = False
    tau: float = DEFAULT_TAU
    ply_stride: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "SlamConfig":
        d = dict(d)
        sub = {"pose": PoseConfig, "spawn": SpawnConfig, "flow": FlowConfig}
        kw = {}
        for k, typ in sub.items():
            if k in d:
                kw[k] = typ(**d.pop(k))
        if "noise" in d:
            kw["noise"] = ekf.NoiseConfig.from_dict(d.pop("noise"))
        kw.update({k: v for k, v in d.items() if k in cls.__dataclass_fields__})
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FrameRecord:
    index: int
    timestamp: float
    raw_pose: PoseSE3
    filtered_pose: PoseSE3
    keyframe_id: int
    spawned: bool
    tracking_lost: bool = False
    iterations: int = 0
    depth: DepthMap | None = None
    uncertainty: UncertaintyMap | None = None


@dataclass
class SlamResult:
    records: list[FrameRecord]
    graph: KeyframeGraph
    intrinsics: CameraIntrinsics
    failures: list[TrackingLost]
    report: dict

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([r.timestamp for r in self.records])

    @property
    def poses(self) -> list[PoseSE3]:
        return [r.filtered_pose for r in self.records]

    @property
    def raw_poses(self) -> list[PoseSE3]:
        return [r.raw_pose for r in self.records]


def _resize_depth(d: DepthMap, shape) -> DepthMap:
    """Nearest-neighbour resize; depth is not interpolated across edges."""
    h, w = shape
    H, W = d.shape
    rows = np.minimum(((np.arange(h) + 0.5) * H / h).astype(int), H - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * W / w).astype(int), W - 1)
    return DepthMap(d.values[np.ix_(rows, cols)], d.valid[np.ix_(rows, cols)])


def transfer_depth(frame_depth: DepthMap, frame_unc: UncertaintyMap, keyframe: Keyframe,
                   pose: PoseSE3, intrinsics: CameraIntrinsics) -> tuple[DepthMap, UncertaintyMap]:
    """Express a frame's depth in the keyframe's pixel grid.

    ``pose`` maps keyframe coordinates into the frame.  Each keyframe pixel
    with a depth is projected into the frame, the frame's inverse depth is
    sampled there and the point is mapped back; its keyframe z is the
    transferred depth.
    """
    kd = keyframe.depth
    H, W = kd.shape
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    z = np.where(kd.valid, kd.values, 1.0)
    rays = np.stack([(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, np.ones_like(u)], -1)
    Xf = (rays * z[..., None]) @ pose.rotation.T + pose.translation
    zf = Xf[..., 2]
    front = kd.valid & (zf > 1e-6)
    zs = np.where(front, zf, 1.0)
    uf = intrinsics.fx * Xf[..., 0] / zs + intrinsics.cx
    vf = intrinsics.fy * Xf[..., 1] / zs + intrinsics.cy
    inv = np.where(frame_depth.valid, 1.0 / np.where(frame_depth.valid, frame_depth.values, 1.0), 0.0)
    inv_s, inside = bilinear_sample(inv, uf, vf)
    ok_s, _ = bilinear_sample(frame_depth.valid.astype(np.float64), uf, vf)
    unc_s, _ = bilinear_sample(frame_unc.values, uf, vf)
    ok = front & inside & (ok_s > 0.999) & (inv_s > 0)
    # slide along the keyframe ray until the frame depth matches: s (R r)_z + t_z = d_f
    d_f = np.where(ok, 1.0 / np.where(ok, inv_s, 1.0), 0.0)
    a = (rays @ pose.rotation.T)[..., 2]
    ok &= a > 1e-6
    zk = np.where(ok, (d_f - pose.translation[2]) / np.where(ok, a, 1.0), 0.0)
    ok &= zk > 0
    return DepthMap(np.where(ok, zk, 0.0), ok), UncertaintyMap(np.where(ok, unc_s, np.maximum(unc_s, 1.0)))


class _Predictor:
    """Network depth for sequence frames, resized to the network input when allowed."""

    def __init__(self, sequence, params: CapsNetParams, config: SlamConfig):
        self.sequence, self.params = sequence, params
        net = params.config
        self.shape = (net.height, net.width)
        first = sequence.image(0)
        intr = sequence.intrinsics
        if intr.baseline is None:
            raise ConfigurationError("intrinsics need a stereo baseline to turn disparity into depth")
        self.source_shape = first.shape
        if first.shape != self.shape:
            if not config.resize:
                raise ConfigurationError(
                    f"images are {first.shape[1]}x{first.shape[0]} but the network expects "
                    f"{net.width}x{net.height}; pass resize to rescale")
            sy, sx = self.shape[0] / first.shape[0], self.shape[1] / first.shape[1]
            intr = intr.scaled(sx, sy)
        self.intrinsics = intr

    def image(self, i: int) -> ImageBuffer:
        img = self.sequence.image(i)
        if img.shape != self.source_shape:
            raise ConfigurationError(f"frame {i} is {img.shape}, expected {self.source_shape}")
        if img.shape != self.shape:
            img = ImageBuffer.clipped(resize_image(img.data, *self.shape))
        return img

    def depth(self, img: ImageBuffer) -> tuple[DepthMap, UncertaintyMap]:
        dl, dr = predict_disparity(img, self.params)
        return disparity_map_to_depth(dl, self.intrinsics), uncertainty_from_lr(dl, dr)

    def groundtruth_depth(self, i: int) -> DepthMap:
        d = self.sequence.depth(i)
        return d if d.shape == self.shape else _resize_depth(d, self.shape)


def _flow_prior(prev: ImageBuffer, cur: ImageBuffer, intr: CameraIntrinsics, cfg: SlamConfig) -> PoseSE3:
    if not cfg.use_flow_prior:
        return PoseSE3.identity()
    kps = detect_keypoints(prev.data, max_points=cfg.max_keypoints)
    if len(kps) < cfg.min_flow_tracks:
        return PoseSE3.identity()
    field_ = lucas_kanade(prev, cur, kps.points, config=cfg.flow)
    med, inliers = dominant_motion(field_)
    if inliers < cfg.min_flow_tracks:
        return PoseSE3.identity()
    return rotation_prior(med, intr)


def run_slam(sequence, params: CapsNetParams, config: SlamConfig | None = None, out_dir=None,
             figures: bool = True, progress=None) -> SlamResult:
    """Track a sequence; when ``out_dir`` is given, write trajectories, map, depth and report there."""
    cfg = config or SlamConfig()
    if len(sequence) == 0:
        raise ConfigurationError("sequence has no frames")
    pred = _Predictor(sequence, params, cfg)
    intr = pred.intrinsics
    graph = KeyframeGraph()
    records: list[FrameRecord] = []
    failures: list[TrackingLost] = []
    times = sequence.timestamps
    state = None
    prev_img = prev_world = None
    next_id = 0

    for i in range(len(sequence)):
        img = pred.image(i)
        depth, unc = pred.depth(img)
        spawned, lost, iters = False, False, 0
        if i == 0:
            world = PoseSE3.identity()
            kf = Keyframe.create(next_id, img, depth, unc, world, cfg.pose.grad_threshold)
            graph.add(kf)
            next_id += 1
            spawned = True
        else:
            R_flow = _flow_prior(prev_img, img, intr, cfg)
            guess_world = se3_compose(prev_world, se3_inverse(R_flow))
            kf = select_reference_keyframe(list(graph), guess_world, cfg.lambda_rot)
            C0 = se3_compose(se3_inverse(guess_world), kf.pose_world)
            try:
                est = estimate_pose(img, kf, C0, intr, cfg.pose)
                if not np.all(np.isfinite(est.pose.matrix)):
                    raise Diverged("non-finite pose")
                C, iters = est.pose, est.iterations_used
                world = se3_compose(kf.pose_world, se3_inverse(C))
                decision = keyframe_spawn_policy(est, kf, cfg.spawn)
            except (Diverged, NoValidPixels) as exc:
                failures.append(TrackingLost(i, str(exc)))
                lost = True
                world = guess_world
                decision = None
            if lost or decision.spawn:
                new = Keyframe.create(next_id, img, depth, unc, world, cfg.pose.grad_threshold)
                graph.add(new, kf.id)
                next_id += 1
                kf, spawned = new, True
                C = PoseSE3.identity()
            elif cfg.fuse_keyframe_depth:
                td, tu = transfer_depth(depth, unc, kf, C, intr)
                fd, fu = fuse_depth((kf.depth, kf.uncertainty), (td, tu))
                kf = kf.with_depth(fd, fu, cfg.pose.grad_threshold)
                graph.replace(kf)
        # smoothing
        t = float(times[i])
        try:
            if state is None:
                state = ekf.initial_state(world, cfg.noise, t)
            else:
                state = ekf.predict(state, t - state.timestamp, cfg.noise)
                state, _ = ekf.update(state, world, None, cfg.noise)
        except SingularInnovationCovariance:
            state = ekf.initial_state(world, cfg.noise, t)
        records.append(FrameRecord(i, t, world, state.pose, kf.id, spawned, lost, iters, depth, unc))
        prev_img, prev_world = img, world
        if progress is not None:
            progress(i, records[-1])

    report = _report(sequence, pred, records, graph, failures, cfg)
    result = SlamResult(records, graph, intr, failures, report)
    if out_dir is not None:
        write_outputs(result, sequence, pred, out_dir, cfg, figures)
    return result


def _report(sequence, pred: _Predictor, records, graph, failures, cfg: SlamConfig) -> dict:
    report = {
        "frames": len(records),
        "keyframes": len(graph),
        "tracking_failures": len(failures),
        "failed_frames": [f.frame_id for f in failures],
        "tau": cfg.tau,
    }
    if sequence.has_depth and len(records) > 1:
        good = total = 0
        per_frame = []
        for r in records:
            g, n = depth_hits(r.depth, pred.groundtruth_depth(r.index), cfg.tau)
            good, total = good + g, total + n
            per_frame.append(100.0 * g / n if n else 0.0)
        if total:
            report["percent_correct_depth"] = 100.0 * good / total
            report["percent_correct_depth_per_frame"] = per_frame
    if sequence.groundtruth is not None and len(records) > 1:
        gt_t, gt_p = sequence.groundtruth
        t = [r.timestamp for r in records]
        try:
            filt = absolute_trajectory_error(t, [r.filtered_pose for r in records], gt_t, gt_p)
            raw = absolute_trajectory_error(t, [r.raw_pose for r in records], gt_t, gt_p)
        except InsufficientOverlap:
            pass
        else:
            length = trajectory_length(gt_p)
            report.update({
                "ate_rmse": filt.rmse,
                "ate_rmse_raw": raw.rmse,
                "ate_pairs": filt.pairs,
                "trajectory_length": length,
                "ate_ratio": filt.rmse / length if length > 0 else None,
            })
    return report


def png_safe_depth(d: DepthMap) -> DepthMap:
    ok = d.valid & (d.values < MAX_PNG_DEPTH)
    return DepthMap(np.where(ok, d.values, 0.0), ok)


def write_outputs(result: SlamResult, sequence, pred: _Predictor, out_dir, cfg: SlamConfig,
                  figures: bool = True) -> Path:
    out = Path(out_dir)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    recs = result.records
    t = result.timestamps
    ekf.write_tum(out / "trajectory.txt", t, result.poses)
    ekf.write_tum(out / "trajectory_raw.txt", t, result.raw_poses)
    spawned = [r for r in recs if r.spawned]
    ekf.write_tum(out / "keyframes.txt", [r.timestamp for r in spawned], [r.raw_pose for r in spawned])
    export_pointcloud(result.graph, result.intrinsics, out / "map.ply", cfg.ply_stride)
    for r in recs:
        write_depth_png(out / "depth" / f"{sequence.frames[r.index].name}.png", png_safe_depth(r.depth))
    (out / "report.json").write_text(json.dumps(result.report, indent=2, sort_keys=True) + "\n")
    if figures:
        from . import plotting

        est = np.array([p.translation for p in result.poses])
        raw = np.array([p.translation for p in result.raw_poses])
        gt = None
        if sequence.groundtruth is not None and len(recs) > 1:
            gt_t, gt_p = sequence.groundtruth
            try:
                err = absolute_trajectory_error(t, result.poses, gt_t, gt_p)
                # show ground truth in the estimate's frame
                gt = (np.array([p.translation for p in gt_p]) - err.translation) @ err.rotation
            except InsufficientOverlap:
                gt = None
        plotting.plot_trajectory(out / "trajectory.png", est, gt, raw,
                                 np.array([r.raw_pose.translation for r in spawned]))
        mid = recs[len(recs) // 2]
        gt_depth = pred.groundtruth_depth(mid.index) if sequence.has_depth else None
        plotting.plot_depth_preview(out / "depth_preview.png", pred.image(mid.index).data, mid.depth,
                                    gt_depth, mid.uncertainty.values, title=f"frame {mid.index}")
        if "percent_correct_depth_per_frame" in result.report:
            plotting.plot_depth_accuracy(out / "depth_accuracy.png",
                                         result.report["percent_correct_depth_per_frame"], cfg.tau)
    return out
