"""Capsule-network disparity prediction with unsupervised stereo training.

Architecture (sizes configurable through :class:`NetworkConfig`)::

    image (1xHxW)
      -> conv 3x3 stride 2, relu                    (c1 x H/2 x W/2)
      -> conv 3x3 stride 2, relu                    (c2 x H/4 x W/4)
      -> linear + squash                            primary capsules (8 x 8-d)
      -> routing by agreement, 3 iterations         parent capsules (16 x 8-d)
      -> linear to coarse logits  +  1x1 skip conv  (2 x H/4 x W/4)
      -> fixed bilinear x4 upsampling               (2 x H x W)
      -> d_max * sigmoid                            left / right disparity

The network sees only the left image; the two output channels are the left
and right disparity fields used by the reconstruction, smoothness and
left-right consistency losses.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionMismatch, NonFiniteLoss, NonFiniteValue, ValidationError
from .geometry import CameraIntrinsics, DisparityMap, ImageBuffer, UncertaintyMap, bilinear_sample

SSIM_ALPHA = 0.85
UNCERTAINTY_FLOOR = 1e-3
INPUT_STD_FLOOR = 0.02


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CapsuleLayerSpec:
    num_capsules_in: int = 8
    dim_in: int = 8
    num_capsules_out: int = 16
    dim_out: int = 8
    routing_iterations: int = 3

    def __post_init__(self):
        sizes = (self.num_capsules_in, self.dim_in, self.num_capsules_out, self.dim_out)
        if min(sizes) < 1 or self.routing_iterations < 1:
            raise ValidationError("capsule sizes and routing iterations must be positive")


@dataclass(frozen=True)
class NetworkConfig:
    height: int = 16
    width: int = 16
    enc_channels: tuple[int, int] = (8, 16)
    capsules: CapsuleLayerSpec = field(default_factory=CapsuleLayerSpec)
    d_max: float | None = None

    def __post_init__(self):
        if self.height % 4 or self.width % 4 or self.height < 4 or self.width < 4:
            raise ValidationError("network input dims must be positive multiples of 4")
        object.__setattr__(self, "enc_channels", tuple(int(c) for c in self.enc_channels))
        if isinstance(self.capsules, dict):
            object.__setattr__(self, "capsules", CapsuleLayerSpec(**self.capsules))
        if self.d_max is None:
            object.__setattr__(self, "d_max", 0.3 * self.width)

    @property
    def coarse_shape(self) -> tuple[int, int]:
        return self.height // 4, self.width // 4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_channels"] = list(self.enc_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        if "capsules" in d and isinstance(d["capsules"], dict):
            d["capsules"] = CapsuleLayerSpec(**d["capsules"])
        if "enc_channels" in d:
            d["enc_channels"] = tuple(d["enc_channels"])
        return cls(**d)


@dataclass(frozen=True)
class LossWeights:
    """Weights of the stereo training objective.

    The regulariser is ``zeta_constant + zeta_coef * sum ||p||^2``;
    ``zeta_coef = 0`` leaves a literal additive constant.
    """

    alpha_ap: float = 1.0
    alpha_ds: float = 0.1
    alpha_lr: float = 1.0
    zeta_coef: float = 1e-4
    zeta_constant: float = 0.0
    # average the reconstruction and consistency terms only over pixels whose
    # sample lands inside the other view
    mask_out_of_view: bool = False

    def __post_init__(self):
        vals = (self.alpha_ap, self.alpha_ds, self.alpha_lr, self.zeta_coef, self.zeta_constant)
        if min(vals) < 0:
            raise ValidationError("loss weights must be non-negative")

    def require_signal(self):
        if max(self.alpha_ap, self.alpha_ds, self.alpha_lr) <= 0:
            raise ValidationError("at least one alpha must be positive to train")


@dataclass(frozen=True, eq=False)
class StereoPair:
    left: ImageBuffer
    right: ImageBuffer
    intrinsics: CameraIntrinsics | None = None

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise DimensionMismatch("stereo images must have equal dimensions")


@dataclass(eq=False)
class CapsNetParams:
    config: NetworkConfig
    arrays: dict[str, np.ndarray]

    def copy(self) -> "CapsNetParams":
        return CapsNetParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"network": self.config.to_dict()}
        meta.update(extra or {})
        ad.save_checkpoint(path, self.arrays, meta)

    @classmethod
    def load(cls, path) -> "CapsNetParams":
        arrays, meta = ad.load_checkpoint(path)
        if "network" not in meta:
            raise ValidationError(f"{path}: checkpoint lacks network configuration")
        params = cls(NetworkConfig.from_dict(meta["network"]), arrays)
        _check_shapes(params)
        return params


def param_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    c1, c2 = cfg.enc_channels
    h, w = cfg.coarse_shape
    caps = cfg.capsules
    return {
        "enc1.w": (c1, 1, 3, 3),
        "enc1.b": (c1,),
        "enc2.w": (c2, c1, 3, 3),
        "enc2.b": (c2,),
        "primary.w": (c2 * h * w, caps.num_capsules_in * caps.dim_in),
        "primary.b": (caps.num_capsules_in * caps.dim_in,),
        "route.W": (caps.num_capsules_in, caps.num_capsules_out, caps.dim_out, caps.dim_in),
        "dec.w": (caps.num_capsules_out * caps.dim_out, 2 * h * w),
        "dec.b": (2 * h * w,),
        "skip.w": (2, c2, 1, 1),
        "skip.b": (2,),
    }


def _fan_in(name: str, shape) -> int:
    if name.endswith(".b"):
        return max(1, shape[0])
    if name == "route.W":
        return shape[-1]
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


def init_gains(cfg: NetworkConfig) -> dict[str, float]:
    """Multipliers on the +-1/sqrt(fan_in) bound, per weight.

    relu convs get sqrt(6) (variance preserving); the primary projection and
    routing weights sqrt(3) (unit-variance outputs).  See also
    :func:`route_scale`.
    """
    return {
        "enc1.w": np.sqrt(6.0),
        "enc2.w": np.sqrt(6.0),
        "primary.w": np.sqrt(3.0),
        "route.W": np.sqrt(3.0),
        "dec.w": 1.0,
        "skip.w": 1.0,
    }


def route_scale(cfg: NetworkConfig) -> float:
    """Fixed factor on the prediction vectors u_hat.

    Under uniform couplings a parent's input is a 1/n_out-weighted sum of
    n_in predictions, so its norm starts near sqrt(n_in)/n_out times theirs;
    squashing that drives the capsule path to ~1e-6.  The factor restores
    order-one parent norms without inflating the weights themselves.
    """
    caps = cfg.capsules
    return np.sqrt(3.0) * caps.num_capsules_out / np.sqrt(caps.num_capsules_in)


def init_params(cfg: NetworkConfig | None = None, seed: int = 42) -> CapsNetParams:
    """Uniform in +-gain/sqrt(fan_in), drawn in sorted-name order from ``seed``.

    Biases use their weight's fan-in with unit gain.
    """
    cfg = cfg or NetworkConfig()
    rng = np.random.default_rng(seed)
    shapes = param_shapes(cfg)
    gains = init_gains(cfg)
    arrays = {}
    for name in sorted(shapes):
        if name.endswith(".b"):
            w = name[:-2] + ".w"
            arrays[name] = ad.init_uniform(rng, shapes[name], _fan_in(w, shapes[w]))
        else:
            arrays[name] = gains[name] * ad.init_uniform(rng, shapes[name], _fan_in(name, shapes[name]))
    return CapsNetParams(cfg, arrays)


def _check_shapes(params: CapsNetParams):
    expected = param_shapes(params.config)
    if set(expected) != set(params.arrays):
        raise ValidationError("parameter names do not match the network configuration")
    for k, s in expected.items():
        if params.arrays[k].shape != s:
            raise ValidationError(f"parameter {k!r} has shape {params.arrays[k].shape}, expected {s}")
        if not np.all(np.isfinite(params.arrays[k])):
            raise ValidationError(f"parameter {k!r} is not finite")


# --------------------------------------------------------------------------
# capsules
# --------------------------------------------------------------------------


def squash(v, axis: int = -1):
    """Scale ``v`` to norm ``|v|^2 / (1 + |v|^2)`` keeping its direction.

    Accepts arrays or tensors; tensors get the analytic Jacobian, which is
    taken as zero at the origin (the map is second order there).
    """
    if not isinstance(v, Tensor):
        arr = np.asarray(v, dtype=np.float64)
        n = np.linalg.norm(arr, axis=axis, keepdims=True)
        return arr * (n / (1.0 + n * n))
    x = v.data
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    scale = n / (1.0 + n * n)
    out = x * scale

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        # d/ds [s n/(1+n^2)] = scale*I + s s^T (1-n^2) / ((1+n^2)^2 n)
        k = np.where(n > 0, (1.0 - n * n) / ((1.0 + n * n) ** 2 * safe), 0.0)
        return (g * scale + x * k * (g * x).sum(axis=axis, keepdims=True),)

    return ad.record_op(out, (v,), bw, "squash")


@dataclass
class RoutingResult:
    outputs: object  # parent capsule vectors v_j
    couplings: object  # c_ij used for the final outputs
    history: list = field(default_factory=list)  # c_ij per iteration (arrays)


def dynamic_routing(predictions, iterations: int = 3) -> RoutingResult:
    """Routing by agreement.

    ``predictions`` holds u_hat[j|i] with shape (..., n_in, n_out, dim).
    Logits start at zero; each iteration takes a softmax over parents,
    forms weighted sums, squashes them, then raises each logit by the
    agreement u_hat[j|i] . v_j.
    """
    if iterations < 1:
        raise ValidationError("routing needs at least one iteration")
    is_tensor = isinstance(predictions, Tensor)
    u = predictions if is_tensor else np.asarray(predictions, dtype=np.float64)
    shape = u.shape
    logits_shape = shape[:-1]
    history = []
    if is_tensor:
        b = Tensor(np.zeros(logits_shape))
        for it in range(iterations):
            c = ad.softmax(b, axis=-1)
            history.append(c.data.copy())
            s = ad.tsum(ad.reshape(c, logits_shape + (1,)) * u, axis=-3)
            v = squash(s)
            if it < iterations - 1:
                agree = ad.tsum(u * ad.reshape(v, v.shape[:-2] + (1,) + v.shape[-2:]), axis=-1)
                b = b + agree
        return RoutingResult(v, c, history)

    b = np.zeros(logits_shape)
    for it in range(iterations):
        e = np.exp(b - b.max(axis=-1, keepdims=True))
        c = e / e.sum(axis=-1, keepdims=True)
        history.append(c.copy())
        s = (c[..., None] * u).sum(axis=-3)
        v = squash(s)
        b = b + (u * v[..., None, :, :]).sum(axis=-1)
    return RoutingResult(v, c, history)


# --------------------------------------------------------------------------
# forward pass
# --------------------------------------------------------------------------


def _upsample_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Rows interpolate ``n_in`` samples onto ``n_out`` centre-aligned samples."""
    M = np.zeros((n_out, n_in))
    for i in range(n_out):
        x = (i + 0.5) * n_in / n_out - 0.5
        x = min(max(x, 0.0), n_in - 1.0)
        x0 = min(int(np.floor(x)), max(n_in - 2, 0))
        a = x - x0
        M[i, x0] += 1 - a
        if n_in > 1:
            M[i, x0 + 1] += a
    return M


def forward(params: dict, cfg: NetworkConfig, images) -> tuple[Tensor, Tensor]:
    """Batched disparity prediction; ``images`` is (N, H, W) in [0, 1].

    ``params`` maps names to arrays or tensors (tensors when training).
    Returns left and right disparity tensors, each (N, H, W).
    """
    x = ad.as_tensor(images)
    if x.ndim != 3 or x.shape[1:] != (cfg.height, cfg.width):
        raise DimensionMismatch(f"network expects (N, {cfg.height}, {cfg.width}) input, got {x.shape}")
    P = {k: ad.as_tensor(v) for k, v in params.items()}
    N = x.shape[0]
    caps = cfg.capsules
    h, w = cfg.coarse_shape

    # per-image standardisation; the statistics are treated as constants
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    sd = x.data.std(axis=(1, 2), keepdims=True) + INPUT_STD_FLOOR
    x = ad.reshape((x - mu) / sd, (N, 1, cfg.height, cfg.width))
    f1 = ad.relu(ad.conv2d(x, P["enc1.w"], P["enc1.b"], stride=2, padding=1))
    f2 = ad.relu(ad.conv2d(f1, P["enc2.w"], P["enc2.b"], stride=2, padding=1))

    prim = ad.reshape(f2, (N, -1)) @ P["primary.w"] + P["primary.b"]
    u = squash(ad.reshape(prim, (N, caps.num_capsules_in, caps.dim_in)))
    u_hat = (P["route.W"] * route_scale(cfg)) @ ad.reshape(u, (N, caps.num_capsules_in, 1, caps.dim_in, 1))
    u_hat = ad.reshape(u_hat, (N, caps.num_capsules_in, caps.num_capsules_out, caps.dim_out))
    routed = dynamic_routing(u_hat, caps.routing_iterations).outputs

    coarse = ad.reshape(ad.reshape(routed, (N, -1)) @ P["dec.w"] + P["dec.b"], (N, 2, h, w))
    coarse = coarse + ad.conv2d(f2, P["skip.w"], P["skip.b"])
    Uy = Tensor(_upsample_matrix(cfg.height, h))
    UxT = Tensor(_upsample_matrix(cfg.width, w).T)
    fine = Uy @ coarse @ UxT
    disp = ad.sigmoid(fine) * cfg.d_max
    return disp[:, 0], disp[:, 1]


def predict_disparity(image: ImageBuffer, params: CapsNetParams) -> tuple[DisparityMap, DisparityMap]:
    cfg = params.config
    if image.shape != (cfg.height, cfg.width):
        raise DimensionMismatch(f"image {image.shape} does not match network input {(cfg.height, cfg.width)}")
    dl, dr = forward(params.arrays, cfg, image.data[None])
    return DisparityMap(dl.data[0], cfg.d_max), DisparityMap(dr.data[0], cfg.d_max)


# --------------------------------------------------------------------------
# reconstruction and losses
# --------------------------------------------------------------------------


def _as_batch(x) -> Tensor:
    """ImageBuffer / DisparityMap / array / tensor -> tensor of shape (N, H, W)."""
    if isinstance(x, ImageBuffer):
        x = x.data
    elif isinstance(x, DisparityMap):
        x = x.values
    t = ad.as_tensor(x)
    if t.ndim == 2:
        t = ad.reshape(t, (1,) + t.shape)
    return t


def _sign(direction: str) -> float:
    if direction == "left":
        return -1.0
    if direction == "right":
        return 1.0
    raise ValidationError("direction must be 'left' or 'right'")


def reconstruct_tensor(opposite, disparity, direction: str) -> tuple[Tensor, np.ndarray]:
    """Differentiable horizontal resampling of ``opposite`` by ``disparity``.

    ``direction='left'`` rebuilds the left view, sampling ``opposite`` at
    ``u - d``; ``'right'`` samples at ``u + d``.  Returns (N,H,W) values and a
    mask that is False where a sample fell more than 0.5 px outside.
    """
    img, d = _as_batch(opposite), _as_batch(disparity)
    if img.shape != d.shape:
        raise DimensionMismatch(f"image {img.shape} vs disparity {d.shape}")
    N, H, W = img.shape
    u = np.broadcast_to(np.arange(W, dtype=np.float64), (N, H, W))
    v = Tensor(np.broadcast_to(np.arange(H, dtype=np.float64)[:, None], (N, H, W)).copy())
    x = Tensor(u.copy()) + d * _sign(direction)
    out = ad.bilinear_sample_diff(ad.reshape(img, (N, 1, H, W)), x, v)
    mask = (x.data >= -0.5) & (x.data <= W - 0.5)
    return ad.reshape(out, (N, H, W)), mask


def reconstruct(opposite: ImageBuffer, disparity: DisparityMap, direction: str):
    """Rebuild one view from the other; returns ``(ImageBuffer, validity mask)``."""
    out, mask = reconstruct_tensor(opposite, disparity, direction)
    return ImageBuffer.clipped(out.data[0]), mask[0]


def _edge_pad(x: Tensor) -> Tensor:
    N, C, H, W = x.shape
    iy = np.clip(np.arange(-1, H + 1), 0, H - 1)
    ix = np.clip(np.arange(-1, W + 1), 0, W - 1)
    return ad.getitem(x, (slice(None), slice(None), iy[:, None], ix[None, :]))


def _pool3(x: Tensor) -> Tensor:
    N, H, W = x.shape
    k = Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0))
    out = ad.conv2d(_edge_pad(ad.reshape(x, (N, 1, H, W))), k)
    return ad.reshape(out, (N, H, W))


def ssim_map(a, b) -> Tensor:
    """3x3 SSIM with edge padding, per pixel."""
    a, b = _as_batch(a), _as_batch(b)
    C1, C2 = 0.01**2, 0.03**2
    mu_a, mu_b = _pool3(a), _pool3(b)
    var_a = _pool3(a * a) - mu_a * mu_a
    var_b = _pool3(b * b) - mu_b * mu_b
    cov = _pool3(a * b) - mu_a * mu_b
    num = (mu_a * mu_b * 2.0 + C1) * (cov * 2.0 + C2)
    den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2)
    return num / den


def _masked_mean(x: Tensor, mask) -> Tensor:
    if mask is None:
        return ad.mean(x)
    m = np.asarray(mask, dtype=np.float64)
    return ad.tsum(x * m) / max(m.sum(), 1.0)


def loss_appearance(image, recon, alpha: float = SSIM_ALPHA, mask=None) -> Tensor:
    """mean(alpha * (1 - SSIM) / 2 + (1 - alpha) * |I - I_hat|), optionally over ``mask``."""
    I, R = _as_batch(image), _as_batch(recon)
    if I.shape != R.shape:
        raise DimensionMismatch(f"image {I.shape} vs reconstruction {R.shape}")
    per_pixel = (1.0 - ssim_map(I, R)) * (alpha / 2.0) + ad.abs(I - R) * (1.0 - alpha)
    return _masked_mean(per_pixel, mask)


def loss_smoothness(disparity, image) -> Tensor:
    """Edge-aware smoothness: mean |dx d| e^-|dx I| + mean |dy d| e^-|dy I|."""
    d, I = _as_batch(disparity), _as_batch(image)
    if d.shape != I.shape:
        raise DimensionMismatch(f"disparity {d.shape} vs image {I.shape}")
    dx = d[:, :, 1:] - d[:, :, :-1]
    dy = d[:, 1:, :] - d[:, :-1, :]
    wx = np.exp(-np.abs(np.diff(I.data, axis=2)))
    wy = np.exp(-np.abs(np.diff(I.data, axis=1)))
    return ad.mean(ad.abs(dx) * wx) + ad.mean(ad.abs(dy) * wy)


def _lr_term(primary, other, direction: str, masked: bool) -> Tensor:
    warped, mask = reconstruct_tensor(other, primary, direction)
    return _masked_mean(ad.abs(primary - warped), mask if masked else None)


def loss_lr(disp_left, disp_right, masked: bool = False) -> Tensor:
    """Left-right consistency of the left field: mean |d_l(u) - d_r(u - d_l(u))|."""
    dl, dr = _as_batch(disp_left), _as_batch(disp_right)
    if dl.shape != dr.shape:
        raise DimensionMismatch(f"left {dl.shape} vs right {dr.shape}")
    return _lr_term(dl, dr, "left", masked)


def loss_lr_right(disp_left, disp_right, masked: bool = False) -> Tensor:
    """Mirror term for the right field: mean |d_r(u) - d_l(u + d_r(u))|."""
    dl, dr = _as_batch(disp_left), _as_batch(disp_right)
    if dl.shape != dr.shape:
        raise DimensionMismatch(f"left {dl.shape} vs right {dr.shape}")
    return _lr_term(dr, dl, "right", masked)


def regularizer(params: dict) -> Tensor:
    total = Tensor(0.0)
    for name in sorted(params):
        total = total + ad.tsum(ad.square(ad.as_tensor(params[name])))
    return total


def stereo_losses(params: dict, cfg: NetworkConfig, left, right, weights: LossWeights) -> dict:
    """All terms of the training objective for a batch; values are tensors."""
    left, right = _as_batch(left), _as_batch(right)
    if left.shape != right.shape:
        raise DimensionMismatch("stereo batch halves differ in shape")
    dl, dr = forward(params, cfg, left)
    masked = weights.mask_out_of_view
    rec_l, mask_l = reconstruct_tensor(right, dl, "left")
    rec_r, mask_r = reconstruct_tensor(left, dr, "right")
    l_ap = (loss_appearance(left, rec_l, mask=mask_l if masked else None)
            + loss_appearance(right, rec_r, mask=mask_r if masked else None))
    l_ds = loss_smoothness(dl, left) + loss_smoothness(dr, right)
    l_lr = loss_lr(dl, dr, masked) + loss_lr_right(dl, dr, masked)
    zeta = Tensor(weights.zeta_constant)
    if weights.zeta_coef:
        zeta = zeta + regularizer(params) * weights.zeta_coef
    total = l_ap * weights.alpha_ap + l_ds * weights.alpha_ds + l_lr * weights.alpha_lr + zeta
    return {"loss": total, "l_ap": l_ap, "l_ds": l_ds, "l_lr": l_lr, "zeta": zeta,
            "disp_left": dl, "disp_right": dr}


def loss_total(pair, params: CapsNetParams, weights: LossWeights | None = None) -> float:
    """Scalar objective for one :class:`StereoPair` (or a list of pairs, batched)."""
    weights = weights or LossWeights()
    pairs = pair if isinstance(pair, (list, tuple)) else [pair]
    left = np.stack([p.left.data for p in pairs])
    right = np.stack([p.right.data for p in pairs])
    val = stereo_losses(params.arrays, params.config, left, right, weights)["loss"].item()
    if not np.isfinite(val):
        raise NonFiniteLoss("training objective is not finite")
    return val


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass
class TrainResult:
    params: CapsNetParams
    history: list[dict]


HISTORY_FIELDS = ("step", "loss", "l_ap", "l_ds", "l_lr", "zeta")


def value_and_grad(params: CapsNetParams, left: np.ndarray, right: np.ndarray, weights: LossWeights):
    """Objective terms (floats) and gradients (arrays by parameter name)."""
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.arrays.items()}
    with ad.Tape() as tape:
        terms = stereo_losses(tensors, params.config, left, right, weights)
    ad.backward(tape, terms["loss"])
    grads = {k: t.grad for k, t in tensors.items()}
    vals = {k: terms[k].item() for k in ("loss", "l_ap", "l_ds", "l_lr", "zeta")}
    return vals, grads


def train(dataset: list[StereoPair], params: CapsNetParams, weights: LossWeights | None = None,
          config: TrainConfig | None = None, checkpoint_path=None, progress=None) -> TrainResult:
    """Adam on the stereo objective; deterministic given ``config.seed``.

    Each epoch visits the pairs in a seeded permutation, in minibatches of
    ``batch_size``; one optimiser step per minibatch.  When
    ``checkpoint_path`` is given the parameters are written there every
    ``checkpoint_every`` epochs.  A non-finite loss aborts training; the last
    good parameters stay on disk and travel on the exception.
    """
    weights = weights or LossWeights()
    config = config or TrainConfig()
    if not dataset:
        raise ValidationError("training needs at least one stereo pair")
    weights.require_signal()
    cfg = params.config
    for p in dataset:
        if p.left.shape != (cfg.height, cfg.width):
            raise DimensionMismatch(f"pair {p.left.shape} does not match network input")
    lefts = np.stack([p.left.data for p in dataset])
    rights = np.stack([p.right.data for p in dataset])
    rng = np.random.default_rng(config.seed)
    hp = ad.AdamConfig(config.lr, config.beta1, config.beta2, config.eps)
    state = ad.AdamState()
    current = params.copy()
    history: list[dict] = []
    step = 0
    bs = max(1, min(config.batch_size, len(dataset)))
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), bs):
            idx = np.sort(order[start:start + bs])
            try:
                vals, grads = value_and_grad(current, lefts[idx], rights[idx], weights)
            except NonFiniteValue as exc:
                vals, exc_msg = None, str(exc)
            if vals is None or not all(np.isfinite(v) for v in vals.values()):
                if checkpoint_path is not None:
                    current.save(checkpoint_path, {"step": step})
                err = NonFiniteLoss(f"non-finite loss at step {step}")
                err.params = current
                err.history = history
                raise err
            history.append({"step": step, **vals})
            current = CapsNetParams(cfg, ad.sgd_adam_step(current.arrays, grads, state, hp))
            step += 1
            if progress is not None:
                progress(step, vals)
        if checkpoint_path is not None and ((epoch + 1) % config.checkpoint_every == 0
                                            or epoch == config.epochs - 1):
            current.save(checkpoint_path, {"step": step})
    return TrainResult(current, history)


def smoothed(values, window: int = 10) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def write_history_csv(path, history: list[dict]) -> None:
    lines = [",".join(HISTORY_FIELDS)]
    for row in history:
        lines.append(",".join(str(row["step"]) if k == "step" else repr(float(row[k]))
                              for k in HISTORY_FIELDS))
    Path(path).write_text("\n".join(lines) + "\n")


def load_train_config(path) -> tuple[TrainConfig, LossWeights, NetworkConfig | None, int]:
    """Parse the JSON training config: optimiser fields, ``weights``, ``network``, ``init_seed``."""
    d = json.loads(Path(path).read_text())
    weights = LossWeights(**d.get("weights", {}))
    net = NetworkConfig.from_dict(d["network"]) if "network" in d else None
    return TrainConfig.from_dict(d), weights, net, int(d.get("init_seed", 42))


# --------------------------------------------------------------------------
# uncertainty
# --------------------------------------------------------------------------


def uncertainty_from_lr(disp_left: DisparityMap, disp_right: DisparityMap,
                        floor: float = UNCERTAINTY_FLOOR) -> UncertaintyMap:
    """Per-pixel |d_l(u,v) - d_r(u - d_l(u,v), v)|, clamped below by ``floor`` (px)."""
    dl = disp_left.values if isinstance(disp_left, DisparityMap) else np.asarray(disp_left, float)
    dr = disp_right.values if isinstance(disp_right, DisparityMap) else np.asarray(disp_right, float)
    if dl.shape != dr.shape:
        raise DimensionMismatch(f"left {dl.shape} vs right {dr.shape}")
    H, W = dl.shape
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    warped, _ = bilinear_sample(dr, u - dl, v)
    return UncertaintyMap(np.maximum(np.abs(dl - warped), floor))
