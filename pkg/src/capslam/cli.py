"""Command-line entry point: ``capslam <subcommand> ...``.

Exit codes: 0 success, 1 validation error (bad input, missing files, bad
configuration), 2 runtime failure (divergence, non-finite loss, ...).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .errors import CapslamError, NoValidPixels, RuntimeFailure, ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _read_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{p}: no such file")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{p}: invalid JSON ({exc})") from None


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .dataset import write_synthetic
    from .synth import SynthSceneConfig, generate_synthetic

    cfg = SynthSceneConfig.from_dict(_read_json(args.config)) if args.config else SynthSceneConfig()
    seq = generate_synthetic(cfg, args.seed)
    write_synthetic(seq, args.out)
    print(f"wrote {len(seq.frames)} frames to {args.out}")
    return EXIT_OK


def _train_setup(args):
    from .capsnet import LossWeights, NetworkConfig, TrainConfig, load_train_config
    from .dataset import load_sequence

    if args.config:
        tcfg, weights, net, init_seed = load_train_config(args.config)
        raw = _read_json(args.config)
    else:
        tcfg, weights, net, init_seed, raw = TrainConfig(), LossWeights(), None, 42, {}
    pairs, intr = [], None
    for d in args.data:
        seq = load_sequence(d)
        if not seq.has_stereo:
            raise ValidationError(f"{d}: training needs right images (images_right/)")
        pairs += seq.stereo_pairs()
        intr = intr or seq.intrinsics
    if not pairs:
        raise ValidationError("no training pairs")
    if net is None:
        h, w = pairs[0].left.shape
        net = NetworkConfig(height=h, width=w)
    if "steps" in raw:
        # whole epochs covering roughly the requested number of optimiser steps
        bs = max(1, min(tcfg.batch_size, len(pairs)))
        epochs = max(1, int(raw["steps"]) * bs // len(pairs))
        tcfg = TrainConfig(**{**tcfg.__dict__, "epochs": epochs})
    return pairs, intr, tcfg, weights, net, init_seed


def cmd_train(args) -> int:
    from .capsnet import init_params, train, write_history_csv
    from .errors import NonFiniteLoss
    from .plotting import plot_loss_curve

    pairs, intr, tcfg, weights, net, init_seed = _train_setup(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    params = init_params(net, seed=init_seed)
    extra = {"intrinsics": intr.to_dict() if intr else None}

    def progress(step, vals):
        if args.verbose and step % 50 == 0:
            print(f"step {step}: loss {vals['loss']:.5f}", file=sys.stderr)

    history_path = out.with_name(out.stem + "_history.csv")
    try:
        result = train(pairs, params, weights, tcfg, progress=progress)
    except NonFiniteLoss as exc:
        exc.params.save(out, {**extra, "aborted": True})
        write_history_csv(history_path, exc.history)
        raise
    result.params.save(out, {**extra, "steps": len(result.history)})
    write_history_csv(history_path, result.history)
    plot_loss_curve(out.with_name(out.stem + "_loss.png"), result.history)
    last = result.history[-1]["loss"] if result.history else float("nan")
    print(f"trained {len(result.history)} steps on {len(pairs)} pairs; final loss {last:.5f}; wrote {out}")
    return EXIT_OK


def _checkpoint_intrinsics(path):
    from . import autodiff as ad
    from .geometry import CameraIntrinsics

    _, meta = ad.load_checkpoint(path)
    d = meta.get("intrinsics")
    return CameraIntrinsics.from_dict(d) if d else None


def cmd_predict_depth(args) -> int:
    from .capsnet import CapsNetParams, predict_disparity, uncertainty_from_lr
    from .geometry import CameraIntrinsics, disparity_map_to_depth
    from .imageio import read_image, write_depth_png
    from .pipeline import png_safe_depth

    params = CapsNetParams.load(args.ckpt)
    intr = (CameraIntrinsics.from_dict(_read_json(args.intrinsics)) if args.intrinsics
            else _checkpoint_intrinsics(args.ckpt))
    if intr is None or intr.baseline is None:
        raise ValidationError("need intrinsics with a baseline (--intrinsics or from the checkpoint)")
    img = read_image(args.image)
    dl, dr = predict_disparity(img, params)
    depth = disparity_map_to_depth(dl, intr)
    write_depth_png(args.out, png_safe_depth(depth))
    if args.uncertainty_out:
        np.save(args.uncertainty_out, uncertainty_from_lr(dl, dr).values)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_run_slam(args) -> int:
    from .capsnet import CapsNetParams
    from .dataset import load_sequence
    from .pipeline import SlamConfig, run_slam

    cfg = SlamConfig.from_dict(_read_json(args.config)) if args.config else SlamConfig()
    if args.resize:
        cfg.resize = True
    if args.tau is not None:
        cfg.tau = args.tau
    seq = load_sequence(args.data)
    params = CapsNetParams.load(args.ckpt)
    result = run_slam(seq, params, cfg, out_dir=args.out, figures=not args.no_figures)
    summary = {k: v for k, v in result.report.items() if not k.endswith("_per_frame")}
    print(_dump(summary))
    return EXIT_OK


def _depth_dir(path: Path) -> Path:
    return path / "depth" if (path / "depth").is_dir() else path


def cmd_eval(args) -> int:
    from .ekf import read_tum
    from .imageio import read_depth_png
    from .metrics import absolute_trajectory_error, depth_hits, trajectory_length

    pred_root, gt_root = Path(args.pred), Path(args.gt)
    for p in (pred_root, gt_root):
        if not p.is_dir():
            raise ValidationError(f"{p}: not a directory")
    pred_dir, gt_dir = _depth_dir(pred_root), _depth_dir(gt_root)
    names = sorted(p.stem for p in pred_dir.glob("*.png") if (gt_dir / p.name).exists())
    report: dict = {"tau": args.tau, "frames": len(names)}
    per_frame = []
    if names:
        good = total = 0
        for n in names:
            g, t = depth_hits(read_depth_png(pred_dir / f"{n}.png"), read_depth_png(gt_dir / f"{n}.png"), args.tau)
            good, total = good + g, total + t
            per_frame.append(100.0 * g / t if t else 0.0)
        if total == 0:
            raise NoValidPixels("no pixel is valid in both prediction and ground truth")
        report["percent_correct_depth"] = 100.0 * good / total
    traj, gt_traj = pred_root / "trajectory.txt", gt_root / "groundtruth.txt"
    ate = None
    if traj.exists() and gt_traj.exists():
        et, ep = read_tum(traj)
        gt, gp = read_tum(gt_traj)
        ate = absolute_trajectory_error(et, ep, gt, gp)
        length = trajectory_length(gp)
        report.update({"ate_rmse": ate.rmse, "ate_pairs": ate.pairs, "trajectory_length": length,
                       "ate_ratio": ate.rmse / length if length > 0 else None})
    if not names and ate is None:
        raise ValidationError("nothing to evaluate: no matching depth PNGs and no trajectory pair")
    print(_dump(report))
    if args.out:
        from . import plotting

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(_dump({**report, "per_frame": per_frame, "names": names}) + "\n")
        if per_frame:
            plotting.plot_depth_accuracy(out / "depth_accuracy.png", per_frame, args.tau)
        if ate is not None:
            P = np.array([p.translation for p in ep]) @ ate.rotation.T + ate.translation
            G = np.array([p.translation for p in gp])
            plotting.plot_trajectory(out / "trajectory.png", P, G, title="aligned trajectory (top view)")
    return EXIT_OK


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_flow(args) -> int:
    from .flow import FlowConfig, lucas_kanade
    from .imageio import read_image
    from .keypoints import detect_keypoints

    prev, nxt = read_image(args.prev), read_image(args.next)
    if args.points:
        pts = np.loadtxt(args.points, delimiter=",", skiprows=1, ndmin=2)[:, :2]
    else:
        pts = detect_keypoints(prev.data, max_points=args.max_points).points
    cfg = FlowConfig(window=args.window, pyramid_levels=args.levels)
    field_ = lucas_kanade(prev, nxt, pts, config=cfg)
    _write_csv(args.out, ["u", "v", "du", "dv", "valid"],
               [[f"{u:.4f}", f"{v:.4f}", f"{du:.4f}", f"{dv:.4f}", int(ok)] for u, v, du, dv, ok in field_.rows()])
    print(f"tracked {int(field_.valid.sum())}/{len(field_)} points; wrote {args.out}")
    return EXIT_OK


def cmd_keypoints(args) -> int:
    from .imageio import read_image
    from .keypoints import WINDOW_SIGMA, corner_response, detect_corners

    img = read_image(args.input)
    scores = corner_response(img.data, args.sigma or WINDOW_SIGMA, form=args.form)
    peak = float(scores.values.max())
    rows = []
    if peak > 0:
        kps = detect_corners(scores, args.threshold * peak, args.nms_radius, args.max_points)
        rows = [[int(u), int(v), f"{s:.6g}"] for u, v, s in kps]
    _write_csv(args.out, ["u", "v", "score"], rows)
    print(f"{len(rows)} keypoints; wrote {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="capslam", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic stereo sequence with ground truth")
    s.add_argument("--config", help="JSON scene configuration")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train the depth network on stereo sequences")
    s.add_argument("--data", action="append", required=True, help="sequence directory (repeatable)")
    s.add_argument("--config", help="JSON training configuration")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict-depth", help="predict a 16-bit depth PNG for one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--intrinsics", help="intrinsics JSON (default: stored in the checkpoint)")
    s.add_argument("--uncertainty-out", help="optional .npy for the left-right uncertainty")
    s.set_defaults(func=cmd_predict_depth)

    s = sub.add_parser("run-slam", help="track a sequence and build the map")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON pipeline configuration")
    s.add_argument("--resize", action="store_true", help="rescale images to the network input")
    s.add_argument("--tau", type=float, default=None)
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_run_slam)

    s = sub.add_parser("eval", help="score predicted depth (and trajectory) against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--tau", type=float, default=0.1)
    s.add_argument("--out", help="directory for eval.json and figures")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("flow", help="sparse pyramidal Lucas-Kanade flow")
    s.add_argument("--prev", required=True)
    s.add_argument("--next", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--points", help="CSV with u,v header; default: corners of --prev")
    s.add_argument("--window", type=int, default=7)
    s.add_argument("--levels", type=int, default=3)
    s.add_argument("--max-points", type=int, default=200)
    s.set_defaults(func=cmd_flow)

    s = sub.add_parser("keypoints", help="corner detection")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--sigma", type=float, default=None)
    s.add_argument("--threshold", type=float, default=0.05, help="fraction of the peak score")
    s.add_argument("--nms-radius", type=float, default=3.0)
    s.add_argument("--max-points", type=int, default=None)
    s.add_argument("--form", choices=("fast", "direct"), default="fast")
    s.set_defaults(func=cmd_keypoints)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except RuntimeFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValidationError, CapslamError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
