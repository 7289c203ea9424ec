"""Dense float64 tensors with reverse-mode automatic differentiation.

Forward values live in contiguous numpy arrays. Each op records its parents
and a closure mapping the output gradient to parent gradients; ``backward``
walks the graph in reverse topological order. Gradients accumulate into leaf
``.grad`` buffers until the caller zeroes them.
"""

from __future__ import annotations

import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DimensionError",
    "Tensor",
    "Parameter",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "matmul",
    "conv2d",
    "conv_transpose2d",
    "softmax",
    "layer_norm",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "maximum",
    "minimum",
    "concat",
    "stack",
    "where",
    "GradCheckReport",
    "grad_check",
]

DTYPE = np.float64
# debug builds assert finiteness after every op
CHECK_FINITE = os.environ.get("STEPTRACK_DEBUG", "") not in ("", "0")


class DimensionError(ValueError):
    """Operand extents are incompatible with the requested op."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor | None, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -------------------------------------------------------------- autograd
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or parent is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # ------------------------------------------------------------- operators
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return transpose(self, None)


class Parameter(Tensor):
    """Trainable leaf; ``name`` is filled in by the owning module."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p is not None and p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        # parents that did not need gradients when the op ran stay out of the graph,
        # even if their flag is switched back on before backward()
        out._parents = tuple(p if p.requires_grad else None for p in parents)
        out._backward = backward
    if CHECK_FINITE and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError("non-finite output from finite inputs")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ------------------------------------------------------------ elementwise ops
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / b.data**2, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data / b.data, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    a = _as_tensor(a)
    return _result(
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    pick_a = a.data >= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _result(np.where(pick_a, a.data, b.data), (a, b), backward)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    pick_a = a.data <= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _result(np.where(pick_a, a.data, b.data), (a, b), backward)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def backward(g):
        return _unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)

    return _result(np.where(mask, a.data, b.data), (a, b), backward)


# --------------------------------------------------------- reductions/shapes
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(a.data[index]), (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


# ----------------------------------------------------------------- matmul
def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast as in ``np.matmul``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(np.matmul(a.data, b.data), (a, b), backward)


# ------------------------------------------------------------- convolution
def _out_extent(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0:
        raise DimensionError(f"kernel {k} does not fit padded extent {size + 2 * pad}")
    if span % stride:
        raise DimensionError(
            f"non-integral output extent: ({size}+2*{pad}-{k})/{stride} + 1"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """(N,C,H,W) -> (N, C*kh*kw, Ho*Wo) patch matrix."""
    n, c, h, w = x.shape
    ho, wo = _out_extent(h, kh, stride, pad), _out_extent(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(dcols: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add patches back to (N,C,H,W)."""
    n, c, h, w = shape
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
    if pad:
        out = np.ascontiguousarray(out[:, :, pad : pad + h, pad : pad + w])
    return out


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected C×H×W or N×C×H×W input, got {x.shape}")
    return x, False


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (C×H×W or N×C×H×W) with ``w`` (O×C×kh×kw)."""
    x, w = _as_tensor(x), _as_tensor(w)
    xb, squeeze = _batched(x)
    n, c, h, wd = xb.shape
    o, wc, kh, kw = w.shape
    if wc != c:
        raise DimensionError(f"conv2d channel mismatch: input {c}, kernel {wc}")
    cols, ho, wo = _im2col(xb.data, kh, kw, stride, pad)
    w2 = w.data.reshape(o, -1)
    out = np.matmul(w2, cols).reshape(n, o, ho, wo)

    def backward(g):
        g3 = g.reshape(n, o, ho * wo)
        gx = _col2im(np.matmul(w2.T, g3), xb.shape, kh, kw, stride, pad, ho, wo) if xb.requires_grad else None
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        return gx, gw

    y = _result(out, (xb, w), backward)
    return reshape(y, y.shape[1:]) if squeeze else y


def conv_transpose2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of ``conv2d`` w.r.t. its input.

    ``x`` is O×H×W (or batched), ``w`` is the O×C×kh×kw kernel of the conv being
    transposed; output extent is (H-1)*stride - 2*pad + kh.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    xb, squeeze = _batched(x)
    n, o, h, wd = xb.shape
    wo_, c, kh, kw = w.shape
    if wo_ != o:
        raise DimensionError(f"conv_transpose2d channel mismatch: input {o}, kernel {wo_}")
    hout = (h - 1) * stride - 2 * pad + kh
    wout = (wd - 1) * stride - 2 * pad + kw
    if hout <= 0 or wout <= 0:
        raise DimensionError(f"conv_transpose2d output extent {hout}x{wout} is empty")
    x3 = xb.data.reshape(n, o, h * wd)
    w2 = w.data.reshape(o, -1)
    out = _col2im(np.matmul(w2.T, x3), (n, c, hout, wout), kh, kw, stride, pad, h, wd)

    def backward(g):
        cols, _, _ = _im2col(g, kh, kw, stride, pad)
        gx = np.matmul(w2, cols).reshape(xb.shape) if xb.requires_grad else None
        gw = np.matmul(x3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        return gx, gw

    y = _result(out, (xb, w), backward)
    return reshape(y, y.shape[1:]) if squeeze else y


# ------------------------------------------------------- normalisation etc.
def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    out = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def backward(g):
        gx = g * out
        gx -= out * gx.sum(axis=axis, keepdims=True)
        return (gx,)

    return _result(out, (x,), backward)


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalise to zero mean / unit variance along ``axis``, then apply gain and bias.

    ``gain`` and ``bias`` must broadcast against ``x``.
    """
    x = _as_tensor(x)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        return (inv * (g - g.mean(axis=axis, keepdims=True) - xhat * (g * xhat).mean(axis=axis, keepdims=True)),)

    out = _result(xhat, (x,), backward)
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


# --------------------------------------------------------- gradient checking
@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_input: list[float] = field(default_factory=list)
    checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    analytic: Sequence[np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` with central differences.

    The error for one input is ``max|a - n| / max(max|a|, max|n|)`` over the
    checked coordinates; the report holds the worst input. ``max_coords``
    samples that many coordinates per input (all of them when None).
    ``analytic`` overrides the backward pass, which is how a corrupted
    gradient is fed in as a negative control.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in inputs:
        # perturbations below go through a flat view, which needs contiguous storage
        t.data = np.ascontiguousarray(t.data)

    if analytic is None:
        saved = [(t.requires_grad, t.grad) for t in inputs]
        for t in inputs:
            t.requires_grad = True
            t.grad = None
        f(*inputs).backward()
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]
        for t, (rg, g) in zip(inputs, saved):
            t.requires_grad, t.grad = rg, g

    errors = []
    checked = 0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            num = np.empty(len(idx))
            for m, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = f(*inputs).item()
                flat[i] = orig - h
                fm = f(*inputs).item()
                flat[i] = orig
                num[m] = (fp - fm) / (2 * h)
            ana = np.asarray(a).reshape(-1)[idx]
            scale = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0))
            diff = np.abs(ana - num).max(initial=0.0)
            errors.append(0.0 if scale == 0.0 else diff / scale)
            checked += len(idx)
    return GradCheckReport(max(errors, default=0.0), tol, errors, checked)
