"""Small reverse-mode differentiation engine over dense float64 arrays.

Operations record themselves on the active :class:`Tape` whenever one of
their inputs requires a gradient::

    with Tape() as tape:
        y = (x * x).sum()
    grads = backward(tape, y)

Entries are appended in execution order, which is already a topological
order, so the backward pass is a single reverse sweep.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CheckpointError, NonFiniteValue, NonScalarLoss, ShapeMismatch

_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


@dataclass
class TapeEntry:
    output: Tensor
    inputs: tuple
    backward_fn: object
    op: str


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.entries)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(value, inputs, backward_fn, op: str = "custom") -> Tensor:
    """Wrap ``value`` as the output of an op over ``inputs``.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    Public so that layers can define fused primitives with exact gradients.
    """
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NonFiniteValue(f"non-finite value produced by {op}")
    out = Tensor(value)
    if _ACTIVE_TAPES and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPES[-1].entries.append(TapeEntry(out, tuple(inputs), backward_fn, op))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from the scalar ``loss``.

    Gradients are added into ``.grad`` of every requires-grad leaf seen on the
    tape (zero for leaves the loss does not depend on) and also returned as a
    ``{leaf: gradient}`` mapping.
    """
    if loss.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    produced = {id(e.output) for e in tape.entries}
    leaves: dict[int, Tensor] = {}
    for e in tape.entries:
        for t in e.inputs:
            if isinstance(t, Tensor) and t.requires_grad and id(t) not in produced:
                leaves.setdefault(id(t), t)
    if loss.requires_grad and id(loss) not in produced:
        leaves.setdefault(id(loss), loss)

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for e in reversed(tape.entries):
        g = grads.pop(id(e.output), None)
        if g is None:
            continue
        in_grads = e.backward_fn(g)
        for t, gi in zip(e.inputs, in_grads):
            if gi is None or not (isinstance(t, Tensor) and t.requires_grad):
                continue
            gi = np.asarray(gi, dtype=np.float64)
            if gi.shape != t.shape:
                raise ShapeMismatch(f"{e.op}: gradient shape {gi.shape} != input shape {t.shape}")
            if id(t) in grads:
                grads[id(t)] = grads[id(t)] + gi
            else:
                grads[id(t)] = gi

    result = {}
    for k, leaf in leaves.items():
        g = grads.get(k, np.zeros(leaf.shape))
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result


# --------------------------------------------------------------------------
# elementwise / broadcasting
# --------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return record_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return record_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return record_op(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                     "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return record_op(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return record_op(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "power")


def square(a) -> Tensor:
    a = as_tensor(a)
    return record_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return record_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return record_op(out, (a,), lambda g: (g / a.data,), "log")


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return record_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return record_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    return record_op(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),), "relu")


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    return record_op(a.data.sum(axis=axis, keepdims=keepdims), (a,),
                     lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)),), "sum")


sum = tsum  # noqa: A001


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / max(np.asarray(out).size, 1)
    return record_op(out, (a,),
                     lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / n,), "mean")


def norm(a, axis=None, keepdims=False) -> Tensor:
    """Euclidean norm; the (sub)gradient at the origin is taken as zero."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=keepdims))

    def bw(g):
        o = np.array(_expand_reduced(out, a.shape, axis, keepdims))
        gg = np.array(_expand_reduced(g, a.shape, axis, keepdims))
        safe = np.where(o > 0, o, 1.0)
        return (np.where(o > 0, gg * a.data / safe, 0.0),)

    return record_op(out, (a,), bw, "norm")


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return record_op(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
                     "softmax")


# --------------------------------------------------------------------------
# shape manipulation
# --------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}") from None
    return record_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return record_op(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return record_op(a.data[index], (a,), bw, "getitem")


def concat(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return record_op(np.concatenate([t.data for t in ts], axis=axis), ts,
                     lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return record_op(np.stack([t.data for t in ts], axis=axis), ts,
                     lambda g: tuple(np.moveaxis(g, axis, 0)), "stack")


# --------------------------------------------------------------------------
# linear algebra / convolution
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} @ {b.shape}") from None

    def bw(g):
        A, B = a.data, b.data
        A2 = A[None, :] if A.ndim == 1 else A
        B2 = B[:, None] if B.ndim == 1 else B
        G = g
        if A.ndim == 1:
            G = np.expand_dims(G, -2)
        if B.ndim == 1:
            G = np.expand_dims(G, -1)
        ga = np.matmul(G, np.swapaxes(B2, -1, -2))
        gb = np.matmul(np.swapaxes(A2, -1, -2), G)
        if A.ndim == 1:
            ga = ga[..., 0, :]
        if B.ndim == 1:
            gb = gb[..., :, 0]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record_op(out, (a, b), bw, "matmul")


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with ``w`` (O,C,kh,kw), zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    p, s = padding, stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    Hp, Wp = xp.shape[2:]
    if Hp < kh or Wp < kw:
        raise ShapeMismatch("conv2d: kernel larger than padded input")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    Ho, Wo = win.shape[2:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    out = (cols @ wmat.T).reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, O, 1, 1)
        inputs.append(b)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ wmat).reshape(N, Ho, Wo, C, kh, kw)
        gxp = np.zeros((N, C, Hp, Wp))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + H, p:p + W]
        res = [gx, gw]
        if b is not None:
            res.append(g.sum(axis=(0, 2, 3)))
        return tuple(res)

    return record_op(out, inputs, bw, "conv2d")


def bilinear_sample_diff(image, x, y) -> Tensor:
    """Differentiable bilinear sampling of ``image`` (N,C,H,W) at ``x``, ``y`` (N,Ho,Wo).

    Coordinates are clamped to the pixel-centre extent (edge repeat).  The
    coordinate gradient is the one-sided slope of the interpolant and is zero
    where a coordinate was clamped; it is discontinuous on integer grid lines.
    """
    image, x, y = as_tensor(image), as_tensor(x), as_tensor(y)
    if image.ndim != 4 or x.shape != y.shape or x.ndim != 3 or x.shape[0] != image.shape[0]:
        raise ShapeMismatch(f"bilinear_sample_diff: image {image.shape}, coords {x.shape}/{y.shape}")
    N, C, H, W = image.shape
    xc = np.clip(x.data, 0.0, W - 1.0)
    yc = np.clip(y.data, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(xc).astype(np.intp), max(W - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.intp), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    ax = (xc - x0)[:, None]
    ay = (yc - y0)[:, None]
    n = np.arange(N)[:, None, None]
    img = image.data
    # gathered corners, shape (N, C, Ho, Wo)
    I00 = img[n, :, y0, x0].transpose(0, 3, 1, 2)
    I01 = img[n, :, y0, x1].transpose(0, 3, 1, 2)
    I10 = img[n, :, y1, x0].transpose(0, 3, 1, 2)
    I11 = img[n, :, y1, x1].transpose(0, 3, 1, 2)
    top = I00 * (1 - ax) + I01 * ax
    bot = I10 * (1 - ax) + I11 * ax
    out = top * (1 - ay) + bot * ay
    inside_x = (x.data > 0.0) & (x.data < W - 1.0)
    inside_y = (y.data > 0.0) & (y.data < H - 1.0)

    def bw(g):
        gimg = None
        if image.requires_grad:
            gimg = np.zeros_like(img)
            gt = g.transpose(0, 2, 3, 1)  # (N, Ho, Wo, C)
            axt, ayt = ax[:, 0, ..., None], ay[:, 0, ..., None]
            np.add.at(gimg.transpose(0, 2, 3, 1), (n, y0, x0), gt * (1 - axt) * (1 - ayt))
            np.add.at(gimg.transpose(0, 2, 3, 1), (n, y0, x1), gt * axt * (1 - ayt))
            np.add.at(gimg.transpose(0, 2, 3, 1), (n, y1, x0), gt * (1 - axt) * ayt)
            np.add.at(gimg.transpose(0, 2, 3, 1), (n, y1, x1), gt * axt * ayt)
        gx = ((g * ((I01 - I00) * (1 - ay) + (I11 - I10) * ay)).sum(axis=1) * inside_x
              if x.requires_grad else None)
        gy = ((g * (bot - top)).sum(axis=1) * inside_y if y.requires_grad else None)
        return gimg, gx, gy

    return record_op(out, (image, x, y), bw, "bilinear_sample")


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def sgd_adam_step(params: dict, grads: dict, state: AdamState, hp: AdamConfig | None = None) -> dict:
    """One Adam update with bias correction; returns new parameter arrays.

    ``state`` is advanced in place.  Parameters are visited in sorted-name
    order so results never depend on dict insertion order.
    """
    hp = hp or AdamConfig()
    state.step += 1
    t = state.step
    out = {}
    for name in sorted(params):
        p = np.asarray(params[name], dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = hp.beta1 * state.m.get(name, np.zeros_like(p)) + (1 - hp.beta1) * g
        v = hp.beta2 * state.v.get(name, np.zeros_like(p)) + (1 - hp.beta2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1 - hp.beta1 ** t)
        vhat = v / (1 - hp.beta2 ** t)
        out[name] = p - hp.lr * mhat / (np.sqrt(vhat) + hp.eps)
    return out


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradientCheck:
    max_rel_error: float
    analytic: list
    numeric: list


def gradient_check(fn, inputs, h: float = 1e-5, entries: int | None = None, seed: int = 0,
                   floor: float = 1e-6, mask=None) -> GradientCheck:
    """Compare tape gradients of the scalar ``fn(*tensors)`` with central differences.

    ``inputs`` are arrays; each becomes a requires-grad tensor.  With
    ``entries`` set, that many randomly chosen elements per input are
    checked, otherwise all of them.  ``mask`` (one boolean array or None per
    input) restricts the checked elements.  The relative error of an element
    is ``|a - n| / max(|a|, |n|, floor)``.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*tensors)
    grads = backward(tape, out)
    rng = np.random.default_rng(seed)
    worst, ana, num = 0.0, [], []
    for k, (a, t) in enumerate(zip(arrays, tensors)):
        allowed = np.arange(a.size)
        if mask is not None and mask[k] is not None:
            allowed = allowed[np.asarray(mask[k]).reshape(-1)]
        if entries is not None and entries < len(allowed):
            allowed = np.sort(rng.choice(allowed, entries, replace=False))
        g = grads[t].reshape(-1)
        flat = a.reshape(-1)
        ga, gn = [], []
        for i in allowed:
            old = flat[i]
            flat[i] = old + h
            fp = fn(*[Tensor(x) for x in arrays]).item()
            flat[i] = old - h
            fm = fn(*[Tensor(x) for x in arrays]).item()
            flat[i] = old
            n = (fp - fm) / (2 * h)
            gi = float(g[i])
            ga.append(gi)
            gn.append(n)
            # module-level abs is the tensor op, hence np.abs
            worst = max(worst, float(np.abs(gi - n)) / max(float(np.abs(gi)), float(np.abs(n)), floor))
        ana.append(np.array(ga))
        num.append(np.array(gn))
    return GradientCheck(worst, ana, num)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_FORMAT = "capslam-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict, metadata: dict | None = None) -> None:
    """JSON container; each array stored as base64 little-endian float64 bytes."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "byte_order": "little",
        "dtype": "float64",
        "metadata": metadata or {},
        "params": {
            name: {
                "shape": list(np.shape(params[name])),
                "data": base64.b64encode(np.ascontiguousarray(params[name], dtype="<f8").tobytes()).decode(),
            }
            for name in sorted(params)
        },
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_checkpoint(path) -> tuple[dict, dict]:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format/version")
    params = {}
    for name, entry in payload["params"].items():
        arr = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f8").astype(np.float64)
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"{path}: parameter {name!r} has wrong element count")
        params[name] = arr.reshape(shape)
    return params, payload.get("metadata", {})
