"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable op stamps its output with a monotonically increasing
id. ``Tape.trace`` collects the ops reachable from a scalar loss and orders
them by that id, so the backward pass visits each op exactly once in
reverse recording order. No global tape is kept alive between passes: the
graph is owned by the tensors and is freed with them.
"""
from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_op_ids = itertools.count()

# set False to skip the per-op finiteness check (benchmarks only)
CHECK_FINITE = True
# stride-1 convolutions with at least this many kernel taps go through the FFT
FFT_MIN_KERNEL_AREA = 36


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class Tensor:
    """n-dimensional float64 array with an optional gradient record."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._id = next(_op_ids)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ---------------------------------------------------
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
        return scale(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """Trainable leaf tensor; ``requires_grad`` may be toggled off while frozen."""

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._id = next(_op_ids)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- tape ------------------------------------------------------------------
class Tape:
    """Recorded ops reachable from one output, in recording order."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "Tape":
        seen = set()
        nodes = []
        stack = [output]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda t: t._id)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def run(self, output: Tensor, seed: Optional[np.ndarray] = None) -> dict:
        """Propagate ``seed`` back through the tape; returns {id(tensor): grad}."""
        grads = {id(output): np.ones_like(output.data) if seed is None else seed}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return grads


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.trace(loss)
    grads = tape.run(loss)
    for node in tape.nodes:
        if node.is_leaf:
            g = grads.get(id(node))
            if g is None:
                continue
            if CHECK_FINITE and not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient")
            node.grad = g.copy() if node.grad is None else node.grad + g


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list:
    """Gradients of a scalar ``loss`` w.r.t. ``wrt`` without touching ``.grad``."""
    if loss.size != 1:
        raise ValueError(f"grad needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return [np.zeros_like(t.data) for t in wrt]
    grads = Tape.trace(loss).run(loss)
    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


# -- elementwise -----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), back)


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    exponent = float(exponent)
    return _make(x.data ** exponent, (x,),
                 lambda g: (g * exponent * x.data ** (exponent - 1.0),))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,))


def relu(x) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# -- shape -----------------------------------------------------------------
def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def take(x, index) -> Tensor:
    x = as_tensor(x)

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(x.data[index]), (x,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


# -- reductions --------------------------------------------------------------
def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# -- linear algebra ----------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), back)


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation, NCHW input, OIHW kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise DimensionError(f"kernel {kernel.shape} larger than padded input {(n, c, hp, wp)}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if stride == 1 and kh * kw >= FFT_MIN_KERNEL_AREA:
        out, back = _conv_fft(x, kernel, xp, ho, wo, padding)
        return _make(out, (x, kernel), back)
    # im2col: one row per output position, columns ordered (c, kh, kw)
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(o, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def back(g):
        gk = gx = None
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        if kernel.requires_grad:
            gk = (g2.T @ cols).reshape(o, c, kh, kw)
        if x.requires_grad:
            dcols = (g2 @ kmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk

    return _make(out, (x, kernel), back)


def _conv_fft(x: Tensor, kernel: Tensor, xp: np.ndarray, ho: int, wo: int, padding: int):
    # correlation theorem on the padded grid; no wrap-around because every
    # valid output and every input gradient fits inside (hp, wp)
    n, c, h, w = x.shape
    o = kernel.shape[0]
    kh, kw = kernel.shape[2:]
    hp, wp = xp.shape[2:]
    xf = np.fft.rfft2(xp).reshape(n, c, -1).transpose(2, 0, 1)  # f, n, c
    kf = np.fft.rfft2(kernel.data, s=(hp, wp)).reshape(o, c, -1).transpose(2, 1, 0)  # f, c, o
    full = np.matmul(xf, kf.conj()).transpose(1, 2, 0).reshape(n, o, hp, -1)
    out = np.ascontiguousarray(np.fft.irfft2(full, s=(hp, wp))[:, :, :ho, :wo])

    def back(g):
        gf = np.fft.rfft2(g, s=(hp, wp)).reshape(n, o, -1).transpose(2, 0, 1)  # f, n, o
        gx = gk = None
        if x.requires_grad:
            gxf = np.matmul(gf, kf.transpose(0, 2, 1)).transpose(1, 2, 0).reshape(n, c, hp, -1)
            gx = np.fft.irfft2(gxf, s=(hp, wp))[:, :, padding:padding + h, padding:padding + w]
            gx = np.ascontiguousarray(gx)
        if kernel.requires_grad:
            gkf = np.matmul(gf.conj().transpose(0, 2, 1), xf).transpose(1, 2, 0).reshape(o, c, hp, -1)
            gk = np.ascontiguousarray(np.fft.irfft2(gkf, s=(hp, wp))[:, :, :kh, :kw])
        return gx, gk

    return out, back


def max_pool2d(x, size: int = 2) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"max_pool2d: spatial extent {(h, w)} not divisible by {size}")
    blocks = x.data.reshape(n, c, h // size, size, w // size, size).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // size, w // size, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // size, w // size, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return _make(out, (x,), back)


# -- classification heads ----------------------------------------------------
def softmax(logits) -> Tensor:
    logits = as_tensor(logits)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (logits,), back)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of softmax(logits) against integer labels.

    ``reduction`` is "mean" (default), "sum" or "none" (per-sample vector).
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or labels.shape[0] != logits.shape[0]:
        raise DimensionError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    num_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise IndexError(f"label out of range 0..{num_classes - 1}: {labels.min()}..{labels.max()}")
    rows = np.arange(labels.shape[0])
    logp = log_softmax(logits.data)
    per_sample = -logp[rows, labels]
    n = labels.shape[0]

    if reduction == "none":
        value, weight = per_sample, None
    elif reduction == "sum":
        value, weight = np.asarray(per_sample.sum()), 1.0
    elif reduction == "mean":
        value, weight = np.asarray(per_sample.sum() / n), 1.0 / n
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def back(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        if weight is None:
            return (d * g[:, None],)
        return (d * (g * weight),)

    return _make(value, (logits,), back)
