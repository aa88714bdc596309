"""Dense float64 tensors with reverse-mode differentiation.

Every op records its parents and a closure that maps the output gradient to
input gradients. ``Tensor.backward`` walks the recorded graph once in reverse
topological order. Graphs are built eagerly and thrown away after each pass.

Storage is numpy; the differentiation rules below are written out by hand.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "NonFiniteError",
    "Tensor",
    "tensor",
    "matmul",
    "conv2d",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "relu",
    "concat",
    "huber",
    "upsample_nearest",
    "topological_order",
    "grad_check",
    "grad_check_params",
]

LN_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    # make ndarray <op> Tensor fall through to the reflected Tensor methods
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by '{op}'")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- construction -----------------------------------------------------

    @staticmethod
    def _make(data, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        if any(p.requires_grad for p in parents):
            return Tensor(data, True, tuple(parents), backward, op)
        return Tensor(data, op=op)

    @property
    def shape(self) -> tuple:
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
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data, op="detach")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- backward ---------------------------------------------------------

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._make(self.data + other.data, (self, other),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        other = _as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._make(self.data - other.data, (self, other),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "sub")

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        x, y = self.data, other.data

        def back(g):
            return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

        return Tensor._make(x * y, (self, other), back, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        x, y = self.data, other.data

        def back(g):
            return _unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)

        with np.errstate(all="ignore"):
            out = x / y
        return Tensor._make(out, (self, other), back, "div")

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __pow__(self, exponent: float):
        x = self.data
        with np.errstate(all="ignore"):
            out = x ** exponent
        return Tensor._make(out, (self,),
                            lambda g: (g * exponent * x ** (exponent - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        x_shape = self.shape

        def back(g):
            out = np.zeros(x_shape)
            np.add.at(out, index, g)
            return (out,)

        return Tensor._make(self.data[index], (self,), back, "index")

    # -- elementwise ------------------------------------------------------

    def exp(self):
        with np.errstate(all="ignore"):
            y = np.exp(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y,), "exp")

    def log(self):
        x = self.data
        with np.errstate(all="ignore"):
            y = np.log(x)
        return Tensor._make(y, (self,), lambda g: (g / x,), "log")

    def sqrt(self):
        with np.errstate(all="ignore"):
            y = np.sqrt(self.data)
        return Tensor._make(y, (self,), lambda g: (g * 0.5 / y,), "sqrt")

    def tanh(self):
        y = np.tanh(self.data)
        return Tensor._make(y, (self,), lambda g: (g * (1.0 - y * y),), "tanh")

    def abs(self):
        x = self.data
        return Tensor._make(np.abs(x), (self,), lambda g: (g * np.sign(x),), "abs")

    # -- reductions and shape ---------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,),
                            lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,),
                            lambda g: (g.transpose(inverse),), "transpose")

    def broadcast_to(self, shape):
        old = self.shape
        return Tensor._make(np.broadcast_to(self.data, shape).copy(), (self,),
                            lambda g: (_unbroadcast(g, old),), "broadcast")


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Leaf tensor holding a private float64 copy of ``data``."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with gradient ancestry, parents first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
    return order


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(ga, x.shape), _unbroadcast(gb, y.shape)

    return Tensor._make(x @ y, (a, b), back, "matmul")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis),
                        tensors, back, "concat")


# -- activations and normalization -------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def back(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), back, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``.

    The variance is floored by ``eps`` so a constant vector maps to ``bias``.
    """
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return (gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape))

    return Tensor._make(out, (x, gain, bias), back, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = _as_tensor(x)
    v = x.data
    cdf = 0.5 * (1.0 + erf(v / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * v * v) / np.sqrt(2.0 * np.pi)
    return Tensor._make(v * cdf, (x,), lambda g: (g * (cdf + v * pdf),), "gelu")


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    on = x.data > 0
    return Tensor._make(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,), "relu")


def huber(x: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty of a residual."""
    x = _as_tensor(x)
    v = x.data
    a = np.abs(v)
    out = np.where(a <= delta, 0.5 * v * v, delta * (a - 0.5 * delta))
    return Tensor._make(out, (x,), lambda g: (g * np.clip(v, -delta, delta),), "huber")


# -- convolution -------------------------------------------------------------

def _pad_index(n: int, pad: int, mode: str) -> np.ndarray:
    idx = np.arange(n)
    if mode == "reflect":
        if pad >= n:
            raise ValueError(f"reflect padding {pad} needs a side longer than {pad}")
        return np.pad(idx, pad, mode="reflect")
    if mode == "zero":
        return np.pad(idx, pad, mode="constant", constant_values=-1)
    raise ValueError(f"unknown padding mode {mode!r}")


def _pad2d(x: np.ndarray, ph: int, pw: int, mode: str):
    """Pad the last two axes; returns the padded array and the index maps."""
    ih = _pad_index(x.shape[-2], ph, mode)
    iw = _pad_index(x.shape[-1], pw, mode)
    padded = x[..., np.clip(ih, 0, None)[:, None], np.clip(iw, 0, None)[None, :]]
    if mode == "zero":
        padded = padded * ((ih >= 0)[:, None] & (iw >= 0)[None, :])
    return padded, ih, iw


def _unpad2d(g: np.ndarray, ih: np.ndarray, iw: np.ndarray, shape: tuple) -> np.ndarray:
    keep_h, keep_w = ih >= 0, iw >= 0
    g = g[..., keep_h, :][..., keep_w]
    out = np.zeros(shape)
    index = (slice(None),) * (g.ndim - 2) + (ih[keep_h][:, None], iw[keep_w][None, :])
    np.add.at(out, index, g)
    return out


def conv2d(image, kernel, padding: str = "reflect", bias=None) -> Tensor:
    """Stride-1 same-size cross-correlation.

    ``image`` is (C, H, W) or (B, C, H, W). A 2-D ``kernel`` (kh, kw) is applied
    to every channel independently; a 4-D kernel (C_out, C_in, kh, kw) mixes
    channels. ``bias`` (C_out,) is only accepted with 4-D kernels.
    """
    image, kernel = _as_tensor(image), _as_tensor(kernel)
    kh, kw = kernel.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {kh}x{kw}")
    unbatched = image.ndim == 3
    x = image.data[None] if unbatched else image.data
    if x.ndim != 4:
        raise ValueError(f"conv2d expects (C,H,W) or (B,C,H,W), got {image.shape}")
    w = kernel.data
    depthwise = w.ndim == 2
    if not depthwise and (w.ndim != 4 or w.shape[1] != x.shape[1]):
        raise ValueError(f"kernel {w.shape} incompatible with input {image.shape}")
    H, W = x.shape[-2:]
    xp, ih, iw = _pad2d(x, kh // 2, kw // 2, padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(-2, -1))
    if depthwise:
        out = np.einsum("bchwij,ij->bchw", win, w)
    else:
        out = np.einsum("bchwij,ocij->bohw", win, w, optimize=True)
    parents = [image, kernel]
    if bias is not None:
        if depthwise:
            raise ValueError("bias requires a 4-D kernel")
        bias = _as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def back(g):
        gb = g[None] if unbatched else g
        gxp = np.zeros(xp.shape)
        if depthwise:
            gw = np.einsum("bchwij,bchw->ij", win, gb)
            for i in range(kh):
                for j in range(kw):
                    gxp[..., i:i + H, j:j + W] += gb * w[i, j]
        else:
            gw = np.einsum("bchwij,bohw->ocij", win, gb, optimize=True)
            for i in range(kh):
                for j in range(kw):
                    gxp[..., i:i + H, j:j + W] += np.einsum("bohw,oc->bchw", gb, w[:, :, i, j])
        gx = _unpad2d(gxp, ih, iw, x.shape)
        grads = [gx[0] if unbatched else gx, gw]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return Tensor._make(out[0] if unbatched else out, parents, back, "conv2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat each pixel of the last two axes ``factor`` times per side."""
    x = _as_tensor(x)
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    h, w = x.shape[-2:]

    def back(g):
        g = g.reshape(*g.shape[:-2], h, factor, w, factor)
        return (g.sum(axis=(-3, -1)),)

    return Tensor._make(out, (x,), back, "upsample")


# -- gradient checking -------------------------------------------------------

def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    return out.item()


def grad_check(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Worst componentwise relative error between backprop and central differences."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = fn(x)
    _scalar(out)
    out.backward()
    analytic = np.zeros_like(base) if x.grad is None else x.grad
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        hi = _scalar(fn(Tensor(base.copy())))
        flat[k] = orig - eps
        lo = _scalar(fn(Tensor(base.copy())))
        flat[k] = orig
        numeric.reshape(-1)[k] = (hi - lo) / (2 * eps)
    return _relative_error(analytic, numeric)


def grad_check_params(fn: Callable[[dict], Tensor], params: dict, eps: float = 1e-5,
                      max_per_param: int | None = None, seed: int = 0) -> float:
    """Like :func:`grad_check` over a dict of named arrays.

    ``fn`` receives a dict of Tensors. With ``max_per_param`` set, only that many
    seeded-random components of each array are differenced.
    """
    rng = np.random.default_rng(seed)
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in base.items()}
    out = fn(leaves)
    _scalar(out)
    out.backward()
    worst = 0.0
    for name, arr in base.items():
        grad = leaves[name].grad
        grad = np.zeros_like(arr) if grad is None else grad
        flat = arr.reshape(-1)
        picks = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            picks = np.sort(rng.choice(flat.size, max_per_param, replace=False))
        numeric = np.empty(picks.size)
        for n, k in enumerate(picks):
            orig = flat[k]
            flat[k] = orig + eps
            hi = _scalar(fn({kk: Tensor(vv) for kk, vv in base.items()}))
            flat[k] = orig - eps
            lo = _scalar(fn({kk: Tensor(vv) for kk, vv in base.items()}))
            flat[k] = orig
            numeric[n] = (hi - lo) / (2 * eps)
        worst = max(worst, _relative_error(grad.reshape(-1)[picks], numeric))
    return worst
