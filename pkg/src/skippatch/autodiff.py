"""Minimal reverse-mode differentiation over float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape`. Outside a
tape they run as plain array math, which is what inference and finite-difference
evaluation use.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BCE_CLAMP = 1e-12
NORM_EPS = 1e-5

_ACTIVE: list["Tape"] = []


class ShapeError(ValueError):
    pass


class Tensor:
    """An array value that may carry a gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_wrap(other), Tensor(-1.0)))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, Tensor(-1.0)))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name, inputs, output, backward):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside record onto it. A tape can be
    differentiated once: a second :meth:`backward` raises ``RuntimeError``.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, name, inputs, output, backward) -> None:
        if self.consumed:
            raise RuntimeError("tape already differentiated; open a new Tape")
        output._tape = self
        self.nodes.append(_Node(name, inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise RuntimeError("backward called twice on the same tape")
        self.consumed = True

        touched: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad:
                    t.grad = None
                    touched[id(t)] = t
            node.output.grad = None
        loss.grad = np.ones_like(loss.data)

        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = node.backward(g)
            for t, gi in zip(node.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=np.float64).reshape(t.shape)
                t.grad = gi if t.grad is None else t.grad + gi
        for t in touched.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


def backward(loss: Tensor) -> None:
    """Differentiate ``loss`` through the tape that produced it."""
    if loss._tape is None:
        raise RuntimeError("loss was not produced on an active tape")
    loss._tape.backward(loss)


def make_op(name: str, value: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``value`` as the result of an op; records onto the active tape if any input needs a gradient."""
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{name} produced non-finite values")
    out = Tensor(value)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].record(name, tuple(inputs), out, backward_fn)
    return out


def _to4d(x: Tensor, what: str) -> np.ndarray:
    if x.ndim == 4:
        return x.data
    if x.ndim == 3:
        return x.data[None]
    raise ShapeError(f"{what}: expected C×H×W or N×C×H×W, got shape {x.shape}")


def _shape_out(x: Tensor, out4: np.ndarray) -> np.ndarray:
    return out4 if x.ndim == 4 else out4[0]


# --- convolution ---------------------------------------------------------

def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N,C,Hp,Wp) -> (N*ho*wo, C*k*k) patch matrix."""
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    v = v[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    n, c = xp.shape[:2]
    return v.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def _scatter(cols: np.ndarray, n: int, c: int, hf: int, wf: int,
             k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: accumulate patches back into an (N,C,hf,wf) map."""
    cols = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, hf, wf))
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


def _check_conv_args(k: int, stride: int, pad: Sequence[int]) -> None:
    if k < 1:
        raise ShapeError(f"kernel size must be >= 1, got {k}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if any(p < 0 for p in pad):
        raise ShapeError(f"padding must be non-negative, got {tuple(pad)}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           pad: int | Sequence[int] = 0) -> Tensor:
    """Cross-correlation with zero padding ``pad = (left, right, top, bottom)``.

    ``w`` is ``C_out × C_in × k × k``; an int ``pad`` pads all four sides.
    """
    if isinstance(pad, int):
        pad = (pad, pad, pad, pad)
    left, right, top, bottom = pad
    x4 = _to4d(x, "conv2d input")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d kernel must be C_out×C_in×k×k, got {w.shape}")
    co, ci, k, _ = w.shape
    _check_conv_args(k, stride, pad)
    n, c, h, wd = x4.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects C_in={ci}")
    if h + top + bottom < k:
        raise ShapeError(f"conv2d: padded height {h + top + bottom} smaller than kernel {k}")
    if wd + left + right < k:
        raise ShapeError(f"conv2d: padded width {wd + left + right} smaller than kernel {k}")
    if b is not None and b.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({co},)")

    ho = (h + top + bottom - k) // stride + 1
    wo = (wd + left + right - k) // stride + 1
    xp = np.pad(x4, ((0, 0), (0, 0), (top, bottom), (left, right)))
    cols = _windows(xp, k, stride, ho, wo)
    wmat = w.data.reshape(co, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        g4 = g if x.ndim == 4 else g[None]
        gm = g4.transpose(0, 2, 3, 1).reshape(-1, co)
        gw = (gm.T @ cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            full = _scatter(gm @ wmat, n, c, h + top + bottom, wd + left + right, k, stride, ho, wo)
            gx = full[:, :, top : top + h, left : left + wd]
            gx = gx if x.ndim == 4 else gx[0]
        gb = g4.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return make_op("conv2d", _shape_out(x, out), inputs, bw)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     pad: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` with respect to its input; ``w`` is ``C_in × C_out × k × k``."""
    x4 = _to4d(x, "conv_transpose2d input")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv_transpose2d kernel must be C_in×C_out×k×k, got {w.shape}")
    ci, co, k, _ = w.shape
    _check_conv_args(k, stride, (pad,))
    n, c, h, wd = x4.shape
    if c != ci:
        raise ShapeError(f"conv_transpose2d: input has {c} channels, kernel expects C_in={ci}")
    hf, wf = (h - 1) * stride + k, (wd - 1) * stride + k
    ho, wo = hf - 2 * pad, wf - 2 * pad
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: output extent {ho}×{wo} is not positive")
    if b is not None and b.shape != (co,):
        raise ShapeError(f"conv_transpose2d: bias shape {b.shape} != ({co},)")

    xm = x4.transpose(0, 2, 3, 1).reshape(-1, ci)
    wmat = w.data.reshape(ci, -1)
    full = _scatter(xm @ wmat, n, co, hf, wf, k, stride, h, wd)
    out = full[:, :, pad : pad + ho, pad : pad + wo]
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        g4 = g if x.ndim == 4 else g[None]
        gcols = _windows(np.pad(g4, ((0, 0), (0, 0), (pad, pad), (pad, pad))), k, stride, h, wd)
        gw = (xm.T @ gcols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gx = (gcols @ wmat.T).reshape(n, h, wd, ci).transpose(0, 3, 1, 2)
            gx = gx if x.ndim == 4 else gx[0]
        gb = g4.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return make_op("conv_transpose2d", _shape_out(x, out), inputs, bw)


# --- normalization and activations ---------------------------------------

def instance_norm(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Per-sample, per-channel standardization without affine parameters."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x4 = _to4d(x, "instance_norm input")
    mean = x4.mean(axis=(2, 3), keepdims=True)
    xc = x4 - mean
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=(2, 3), keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        g4 = g if x.ndim == 4 else g[None]
        gx = inv * (g4 - g4.mean(axis=(2, 3), keepdims=True)
                    - xhat * (g4 * xhat).mean(axis=(2, 3), keepdims=True))
        return (gx if x.ndim == 4 else gx[0],)

    return make_op("instance_norm", _shape_out(x, xhat), (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    slope = np.where(x.data > 0, 1.0, alpha)
    return make_op("leaky_relu", x.data * slope, (x,), lambda g: (g * slope,))


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_op("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def pointwise(x: Tensor, kind: str, alpha: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "none":
        return x
    raise ValueError(f"unknown pointwise kind {kind!r}")


def channel_softmax(x: Tensor) -> Tensor:
    """Softmax over the channel axis, independently per pixel."""
    axis = x.ndim - 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"channel_softmax: expected C×H×W or N×C×H×W, got {x.shape}")
    if x.shape[axis] < 2:
        raise ShapeError(f"channel_softmax needs at least 2 channels, got {x.shape[axis]}")
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_op("channel_softmax", s, (x,), bw)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat_channels needs at least one input")
    nd = tensors[0].ndim
    axis = nd - 3
    ref = tensors[0].shape
    for i, t in enumerate(tensors):
        if t.ndim != nd or t.shape[:axis] != ref[:axis] or t.shape[axis + 1:] != ref[axis + 1:]:
            raise ShapeError(f"concat_channels: input {i} has shape {t.shape}, incompatible with {ref}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return make_op("concat_channels", np.concatenate([t.data for t in tensors], axis=axis),
                   tuple(tensors), bw)


# --- elementwise helpers and losses --------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    return make_op("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return make_op("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def sum_all(x: Tensor) -> Tensor:
    return make_op("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return make_op("mean", np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),))


def bce_loss(prob: Tensor, target) -> Tensor:
    """Mean binary cross entropy; probabilities are clamped to [1e-12, 1 - 1e-12]."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != prob.shape:
        raise ShapeError(f"bce_loss: prob shape {prob.shape} != target shape {t.shape}")
    p = np.clip(prob.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = -np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    inside = (prob.data >= BCE_CLAMP) & (prob.data <= 1.0 - BCE_CLAMP)

    def bw(g):
        return (float(g) * inside * (p - t) / (p * (1.0 - p)) / p.size,)

    return make_op("bce_loss", np.array(loss), (prob,), bw)


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss: shape {a.shape} != {b.shape}")
    d = a.data - b.data
    sgn = np.sign(d) / d.size

    def bw(g):
        return float(g) * sgn, -float(g) * sgn

    return make_op("l1_loss", np.array(np.abs(d).mean()), (a, b), bw)


# --- finite-difference oracle --------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-6,
               coords: Sequence[int] | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a tensor to a scalar tensor. ``coords`` restricts the check to
    the given flat indices (all coordinates by default). Relative error uses
    ``max(|analytic|, |numeric|, 1e-8)`` as the denominator.
    """
    if not 1e-8 <= h <= 1e-4:
        raise ValueError(f"step h must lie in [1e-8, 1e-4], got {h}")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(x)
    if y.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {y.shape}")
    tape.backward(y)
    analytic = (x.grad if x.grad is not None else np.zeros_like(base)).reshape(-1)

    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        xp = flat.copy()
        xp[i] += h
        fp = f(Tensor(xp.reshape(base.shape))).item()
        xp[i] -= 2 * h
        fm = f(Tensor(xp.reshape(base.shape))).item()
        num = (fp - fm) / (2 * h)
        a = analytic[i]
        err = abs(a - num) / max(abs(a), abs(num), 1e-8)
        worst = max(worst, err)
    return worst
