"""Report figures rendered to PNG with the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import DepthMap  # noqa: E402

# fixed metadata keeps repeated renders byte-stable
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_trajectory(path, estimated: np.ndarray, groundtruth: np.ndarray | None = None,
                    raw: np.ndarray | None = None, keyframes: np.ndarray | None = None,
                    title: str = "trajectory (top view)") -> Path:
    """Top view (x right, z forward) of camera positions, each an (N, 3) array."""
    fig, ax = plt.subplots(figsize=(5, 5))
    if groundtruth is not None and len(groundtruth):
        ax.plot(groundtruth[:, 0], groundtruth[:, 2], "k--", lw=1.2, label="ground truth")
    if raw is not None and len(raw):
        ax.plot(raw[:, 0], raw[:, 2], color="tab:orange", lw=0.8, alpha=0.7, label="tracked")
    ax.plot(estimated[:, 0], estimated[:, 2], color="tab:blue", lw=1.5, label="filtered")
    if keyframes is not None and len(keyframes):
        ax.plot(keyframes[:, 0], keyframes[:, 2], "o", ms=4, mfc="none", color="tab:red", label="keyframes")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("z [m]")
    ax.set_title(title)
    ax.set_aspect("equal", adjustable="datalim")
    ax.grid(alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def _depth_image(depth: DepthMap, vmin: float, vmax: float) -> np.ma.MaskedArray:
    return np.ma.masked_where(~depth.valid, depth.values)


def plot_depth_preview(path, image: np.ndarray, predicted: DepthMap, groundtruth: DepthMap | None = None,
                       uncertainty: np.ndarray | None = None, title: str = "") -> Path:
    """Image, predicted depth and optional ground truth / uncertainty; darker is deeper."""
    panels = 2 + (groundtruth is not None) + (uncertainty is not None)
    fig, axes = plt.subplots(1, panels, figsize=(3.2 * panels, 3.0))
    axes[0].imshow(image, cmap="gray", vmin=0, vmax=1)
    axes[0].set_title("image")
    vals = predicted.values[predicted.valid]
    if groundtruth is not None and groundtruth.valid.any():
        vals = np.concatenate([vals, groundtruth.values[groundtruth.valid]])
    vmin, vmax = (float(np.min(vals)), float(np.max(vals))) if vals.size else (0.0, 1.0)
    cmap = plt.get_cmap("magma_r").copy()
    cmap.set_bad("white")
    im = axes[1].imshow(_depth_image(predicted, vmin, vmax), cmap=cmap, vmin=vmin, vmax=vmax)
    axes[1].set_title("predicted depth")
    k = 2
    if groundtruth is not None:
        axes[k].imshow(_depth_image(groundtruth, vmin, vmax), cmap=cmap, vmin=vmin, vmax=vmax)
        axes[k].set_title("ground truth")
        k += 1
    fig.colorbar(im, ax=axes[1:k], shrink=0.8, label="depth [m]")
    if uncertainty is not None:
        u = axes[k].imshow(uncertainty, cmap="viridis")
        axes[k].set_title("LR inconsistency [px]")
        fig.colorbar(u, ax=axes[k], shrink=0.8)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_loss_curve(path, history: list[dict], window: int = 10) -> Path:
    """Total loss (raw and trailing mean) and the individual terms against step."""
    from .capsnet import smoothed

    steps = np.array([h["step"] for h in history])
    fig, (a0, a1) = plt.subplots(1, 2, figsize=(9, 3.5))
    loss = np.array([h["loss"] for h in history])
    a0.plot(steps, loss, color="0.7", lw=0.8, label="loss")
    a0.plot(steps, smoothed(loss, window), color="tab:blue", lw=1.5, label=f"mean of last {window}")
    a0.set_xlabel("step")
    a0.set_title("total loss")
    a0.legend(fontsize=8)
    for key, color in (("l_ap", "tab:green"), ("l_ds", "tab:orange"), ("l_lr", "tab:red"), ("zeta", "tab:purple")):
        vals = np.array([h[key] for h in history])
        if np.any(vals > 0):
            a1.semilogy(steps, np.maximum(vals, 1e-12), color=color, lw=1.0, label=key)
    a1.set_xlabel("step")
    a1.set_title("loss terms")
    a1.legend(fontsize=8)
    for ax in (a0, a1):
        ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_depth_accuracy(path, per_frame: list[float], tau: float) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(np.arange(len(per_frame)), per_frame, "-o", ms=2.5)
    ax.set_ylim(0, 100)
    ax.set_xlabel("frame")
    ax.set_ylabel(f"% correct depth (tau={tau:g})")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)
