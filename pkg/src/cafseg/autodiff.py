"""Minimal reverse-mode autodiff over float64 numpy arrays.

The graph is rebuilt on every forward pass (define-by-run). Each non-leaf
tensor stores its parents and a closure mapping the output gradient to one
gradient per parent. Leaf tensors that require grad accumulate into ``.grad``
across calls to :func:`backward`; call :meth:`Parameter.zero_grad` to reset.

Spatial ops accept an optional leading batch axis, i.e. ``[C, W, H]`` or
``[B, C, W, H]``.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A named trainable leaf tensor."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad = node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


_SIGMOID_LO = np.finfo(DTYPE).tiny
_SIGMOID_HI = 1.0 - np.finfo(DTYPE).epsneg


def sigmoid(x: Tensor) -> Tensor:
    # clipped so the result stays strictly inside (0, 1) where float64 saturates
    out = np.clip(0.5 * (1.0 + np.tanh(0.5 * x.data)), _SIGMOID_LO, _SIGMOID_HI)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor, min_value: float = 0.0) -> Tensor:
    """Natural log; with ``min_value > 0`` the input is clamped first (no
    gradient flows through clamped entries)."""
    if min_value > 0:
        xc = np.maximum(x.data, min_value)
        live = x.data >= min_value
        return _make(np.log(xc), (x,), lambda g: (g * live / xc,))
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (0.5 * g / out,))


# ------------------------------------------------------------------- shaping


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw)


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def global_avg_pool(m: Tensor) -> Tensor:
    """Spatial mean: ``[..., C, W, H] -> [..., C]``."""
    return mean(m, axis=(-2, -1))


def channel_avg(m: Tensor) -> Tensor:
    """Channel mean: ``[..., C, W, H] -> [..., W, H]``."""
    return mean(m, axis=-3)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw)


# ------------------------------------------------------------ linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; 1-D operands are promoted as in ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), _drop(b.shape, -2))
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner axis mismatch, a has {a.shape[-1]} columns, b has {b.shape[-2]} rows"
        )

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), bw)


def _drop(shape, axis):
    shape = list(shape)
    del shape[axis]
    return tuple(shape)


def _check_spatial(x: Tensor, c_in: int, op: str) -> None:
    if x.ndim not in (3, 4):
        raise DimensionError(f"{op}: input rank must be 3 or 4, got shape {x.shape}")
    if x.shape[-3] != c_in:
        raise DimensionError(
            f"{op}: channel axis mismatch, input has {x.shape[-3]} channels, weight expects {c_in}"
        )


def _check_bias(bias: Tensor | None, c_out: int, op: str) -> None:
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"{op}: bias axis mismatch, expected ({c_out},), got {bias.shape}")


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """out[o, w, h] = bias[o] + sum_k weight[o, k] * x[k, w, h]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2:
        raise DimensionError(f"conv1x1: weight must be [C_out, C_in], got {weight.shape}")
    c_out, c_in = weight.shape
    _check_spatial(x, c_in, "conv1x1")
    _check_bias(bias, c_out, "conv1x1")
    out = np.einsum("ok,...kwh->...owh", weight.data, x.data, optimize=True)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def bw(g):
        gx = np.einsum("ok,...owh->...kwh", weight.data, g, optimize=True)
        gw = np.einsum("...owh,...kwh->ok", g, x.data, optimize=True)
        gb = g.sum(axis=tuple(i for i in range(g.ndim) if i != g.ndim - 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, bw)


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor | None = None, pad: int = 1) -> Tensor:
    """3x3 cross-correlation with zero padding 1 (spatial size preserved)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise DimensionError(f"conv3x3: weight must be [C_out, C_in, 3, 3], got {weight.shape}")
    if pad != 1:
        raise DimensionError("conv3x3: only pad=1 is supported")
    c_out, c_in = weight.shape[:2]
    _check_spatial(x, c_in, "conv3x3")
    _check_bias(bias, c_out, "conv3x3")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    n, _, wd, ht = xd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # cols: [B, W, H, C_in*9] ordered (c, i, j) to match weight.reshape
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # [B, C, W, H, 3, 3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, wd, ht, c_in * 9)
    wmat = weight.data.reshape(c_out, c_in * 9)
    out = (cols @ wmat.T).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[:, None, None]
    out = np.ascontiguousarray(out)
    if not batched:
        out = out[0]

    def bw(g):
        gb4 = g if batched else g[None]
        gt = gb4.transpose(0, 2, 3, 1)  # [B, W, H, C_out]
        gw = (gt.reshape(-1, c_out).T @ cols.reshape(-1, c_in * 9)).reshape(weight.shape)
        dcols = (gt @ wmat).reshape(n, wd, ht, c_in, 3, 3)
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                gxp[:, :, i : i + wd, j : j + ht] += dcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, 1:-1, 1:-1]
        if not batched:
            gx = gx[0]
        if bias is not None:
            return gx, gw, gb4.sum(axis=(0, 2, 3))
        return gx, gw

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, bw)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 over the last two axes (even sizes)."""
    *lead, w, h = x.shape
    if w % 2 or h % 2:
        raise DimensionError(f"avg_pool2: spatial size must be even, got {(w, h)}")
    r = x.data.reshape(*lead, w // 2, 2, h // 2, 2)
    out = r.mean(axis=(-3, -1))

    def bw(g):
        gg = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25
        return (gg,)

    return _make(out, (x,), bw)


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-centred linear interpolation operator of shape [n_out, n_in]."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        t = src - lo
        m[o, lo] += 1.0 - t
        m[o, hi] += t
    return m


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of the last two axes to ``size``."""
    mw = _bilinear_matrix(x.shape[-2], size[0])
    mh = _bilinear_matrix(x.shape[-1], size[1])
    out = np.einsum("ow,...wh,ph->...op", mw, x.data, mh, optimize=True)

    def bw(g):
        return (np.einsum("ow,...op,ph->...wh", mw, g, mh, optimize=True),)

    return _make(out, (x,), bw)


# ------------------------------------------------------------- verification


def finite_diff_grad(f: Callable[[], object], p: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. ``p.data``.

    ``p.data`` is perturbed in place and restored afterwards.
    """
    def value():
        with no_grad():
            r = f()
        return float(r.data) if isinstance(r, Tensor) else float(r)

    grad = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = value()
        flat[i] = orig - eps
        fm = value()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)
