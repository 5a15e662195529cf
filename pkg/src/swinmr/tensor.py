"""Minimal reverse-mode autodiff on top of NumPy.

Every differentiable op records its operands and a backward closure on the
result tensor. Node ids are handed out from a monotonically increasing
counter, so sorting the reachable nodes by id in descending order replays
the recorded tape in reverse. That is all :func:`backward` does.

Only first-order gradients are supported. Reductions go through NumPy in
index order, which keeps runs bit-reproducible for a fixed seed.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from .fourier import fft2c as _fft2c, ifft2c as _ifft2c

ArrayLike = Union["Tensor", np.ndarray, float, int]

_node_ids = itertools.count()
_grad_enabled = True
_mac_counter: Optional["MacCounter"] = None


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised on misuse of the computation graph (e.g. a second backward)."""


class MacCounter:
    """Tally of multiply-accumulates executed by :func:`matmul`."""

    def __init__(self):
        self.total = 0
        self.calls = 0

    def add(self, macs: int):
        self.total += int(macs)
        self.calls += 1


@contextlib.contextmanager
def count_macs():
    """Count matmul multiply-accumulates inside the block.

    >>> with count_macs() as c:
    ...     _ = matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
    >>> c.total
    24
    """
    global _mac_counter
    prev, _mac_counter = _mac_counter, MacCounter()
    try:
        yield _mac_counter
    finally:
        _mac_counter = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference, benchmarking, optimizer updates)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An n-dimensional real array that can take part in reverse-mode differentiation.

    Parameters
    ----------
    data : array_like
        Values. Floating arrays keep their dtype, anything else becomes float64.
    requires_grad : bool
        Whether gradients should be accumulated into ``grad`` for this tensor.
    dtype : numpy dtype, optional
        Force a dtype.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_ids)
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self, grad=None):
        backward(self, grad)


DiffTensor = Tensor


def as_tensor(x: ArrayLike, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is not None:
        return Tensor(np.asarray(x, dtype=dtype))
    return Tensor(x)


def _coerce(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    # bare constants take the dtype of the tensor operand so float32 graphs stay float32
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        for p in parents:
            if p._consumed:
                raise GraphError("operand belongs to a graph that was already back-propagated")
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing NumPy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(a.data / b.data, (a, b), bw)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a Python scalar."""
    f = x.data.dtype.type(factor)
    return _make(x.data * f, (x,), lambda g: (g * f,))


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def tabs(x: Tensor) -> Tensor:
    """Absolute value; the subgradient at 0 is taken as 0."""
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(xd.dtype, copy=False)

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(tsum(x, axis=axes, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}") from exc
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def _has_advanced(index) -> bool:
    if not isinstance(index, tuple):
        index = (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in index)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    advanced = _has_advanced(index)

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _make(np.array(out, copy=True), (x,), bw)


slice_ = getitem


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, _insert(t.shape, axis)) for t in tensors], axis=axis)


def _insert(shape, axis):
    shape = list(shape)
    if axis < 0:
        axis += len(shape) + 1
    shape.insert(axis, 1)
    return tuple(shape)


def roll(x: Tensor, shift: Sequence[int], axis: Sequence[int]) -> Tensor:
    """Toroidal shift, same semantics as :func:`numpy.roll`."""
    shift, axis = tuple(shift), tuple(axis)
    neg_shift = tuple(-s for s in shift)
    return _make(np.roll(x.data, shift, axis), (x,), lambda g: (np.roll(g, neg_shift, axis),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product ``a @ b`` with NumPy broadcasting on batch dims."""
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from exc
    out = np.matmul(a.data, b.data)
    if _mac_counter is not None:
        n, k = a.shape[-2:]
        m = b.shape[-1]
        _mac_counter.add(int(np.prod(batch, dtype=np.int64)) * n * k * m)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight (+ bias)`` with ``weight`` shaped [in, out]."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# neural-network primitives
# ---------------------------------------------------------------------------


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max-subtraction."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), bw)


softmax = softmax_lastdim


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last (channel) axis, then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    C = x.shape[-1]
    if gain.shape != (C,) or bias.shape != (C,):
        raise ShapeError(f"layer_norm affine params must be shaped ({C},), got {gain.shape}, {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gain.data + bias.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gx_hat = g * gain.data
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gain, g_bias

    return _make(out, (x, gain, bias), bw)


def _im2col(xp: np.ndarray, H: int, W: int) -> np.ndarray:
    B, C = xp.shape[:2]
    cols = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))  # B,C,H,W,3,3
    return np.ascontiguousarray(cols.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * 9, H * W)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (cross-correlation, as in deep-learning libraries).

    Parameters
    ----------
    x : Tensor
        [B, C_in, H, W]
    kernel : Tensor
        [C_out, C_in, 3, 3]
    bias : Tensor, optional
        [C_out]
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if kernel.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d supports 3x3 kernels only, got {kernel.shape}")
    B, Ci, H, W = x.shape
    Co = kernel.shape[0]
    if kernel.shape[1] != Ci:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, H, W)
    k2 = kernel.data.reshape(Co, Ci * 9)
    out = np.matmul(k2, cols)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = out.reshape(B, Co, H, W)

    def bw(g):
        g2 = g.reshape(B, Co, H * W)
        gk = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        gcols = np.matmul(k2.T, g2).reshape(B, Ci, 3, 3, H, W)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for di in range(3):
            for dj in range(3):
                gxp[:, :, di:di + H, dj:dj + W] += gcols[:, :, di, dj]
        gx = gxp[:, :, 1:-1, 1:-1]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=(0, 2)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, bw)


def fft2c_ri(x: Tensor) -> Tensor:
    """Centered orthonormal 2D FFT of a complex image stored as a trailing (re, im) axis.

    ``x`` is shaped [..., H, W, 2]. The transform is unitary, so the backward
    pass applies the inverse transform to the incoming gradient.
    """
    if x.shape[-1] != 2:
        raise ShapeError(f"fft2c_ri expects a trailing (re, im) axis of size 2, got {x.shape}")
    dt = x.dtype
    z = x.data[..., 0] + 1j * x.data[..., 1]
    Z = _fft2c(z)
    out = np.stack([Z.real, Z.imag], axis=-1).astype(dt, copy=False)

    def bw(g):
        gz = _ifft2c(g[..., 0] + 1j * g[..., 1])
        return (np.stack([gz.real, gz.imag], axis=-1).astype(dt, copy=False),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _collect(root: Tensor) -> list:
    seen = set()
    nodes = []
    stack_ = [root]
    while stack_:
        t = stack_.pop()
        if t.node_id in seen:
            continue
        seen.add(t.node_id)
        if t._consumed:
            raise GraphError("graph was already back-propagated")
        nodes.append(t)
        stack_.extend(p for p in t._parents if p.requires_grad)
    nodes.sort(key=lambda t: t.node_id, reverse=True)
    return nodes


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Back-propagate from ``loss`` into every reachable leaf with ``requires_grad``.

    Leaf gradients accumulate (call ``zero_grad`` between steps). Intermediate
    buffers are released afterwards and the graph cannot be replayed.
    """
    if loss._consumed:
        raise GraphError("backward called twice on the same graph")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    if grad is None:
        if loss.data.size != 1:
            raise GraphError(f"backward without an explicit grad needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    nodes = _collect(loss)
    grads = {loss.node_id: np.asarray(grad, dtype=loss.dtype)}
    for node in nodes:
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg
    for node in nodes:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True


# ---------------------------------------------------------------------------
# numerical gradient oracle
# ---------------------------------------------------------------------------


def numerical_grad(fn: Callable[[], float], arr: np.ndarray, indices: Optional[Iterable] = None,
                   step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. entries of ``arr`` (mutated in place).

    When ``indices`` is given only those flat positions are evaluated and a
    1-d array in the same order is returned.
    """
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else list(indices)
    out = np.zeros(len(idx))
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn()
        flat[i] = orig - step
        fm = fn()
        flat[i] = orig
        out[n] = (fp - fm) / (2 * step)
    return out.reshape(arr.shape) if indices is None else out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], step: float = 1e-5) -> float:
    """Worst relative error between analytic and numerical gradients of ``fn(*tensors)``.

    ``fn`` must return a scalar tensor. Inputs should be float64.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    backward(fn(*tensors))
    worst = 0.0
    for t, a in zip(tensors, arrays):
        def f():
            return fn(*[Tensor(x) for x in arrays]).item()

        num = numerical_grad(f, a, step=step)
        analytic = t.grad if t.grad is not None else np.zeros_like(a)
        worst = max(worst, relative_error(analytic, num))
    return worst
