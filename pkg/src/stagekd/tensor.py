"""Dense tensors with reverse-mode automatic differentiation.

A small Wengert-list engine: every primitive executed while gradients are
enabled appends an entry to the active tape, and ``backward`` replays the
reachable entries in reverse execution order. Arrays are numpy float32 by
default; float64 is used by the gradient-check tooling.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeMismatchError
from .kernels import col2im_nhwc, im2col_nhwc, maxpool2d_backward, maxpool2d_forward

DEFAULT_DTYPE = np.float32

_strict_mode = True


class _EngineState(threading.local):
    """Per-thread tape and grad switch, so concurrent evaluation workers
    never share a graph."""

    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


def set_strict_mode(on: bool) -> None:
    """Toggle strict determinism: caps any worker parallelism at one thread."""
    global _strict_mode
    _strict_mode = bool(on)


def strict_mode() -> bool:
    return _strict_mode


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def grad_enabled() -> bool:
    return _state.grad_enabled


class Tensor:
    """A dense array plus gradient bookkeeping.

    ``data`` is a numpy array (row-major), ``grad`` an optional same-shape
    buffer populated by ``backward``. Tensors produced by primitives keep a
    reference to the tape entry that created them; leaves have none.
    """

    __slots__ = ("data", "requires_grad", "grad", "_entry")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor constructed from non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._entry: Optional[TapeEntry] = None

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same data, cut from the tape, gradient-free."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t._entry = None
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor_like(other, self))

    def __radd__(self, other):
        return add(_as_tensor_like(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor_like(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor_like(other, self), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not a primitive; use mul with a reciprocal")
        return mul_scalar(self, 1.0 / float(other))

    def __neg__(self):
        return mul_scalar(self, -1.0)


def _as_tensor_like(value, ref: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=ref.dtype))


class Parameter:
    """A named trainable tensor. Names are unique within a model and stable
    across save/load (dotted path, e.g. ``backbone.stage2.conv1.weight``)."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, tensor: Tensor):
        tensor.requires_grad = True
        self.name = name
        self.tensor = tensor

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = value

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


class TapeEntry:
    """One executed primitive: inputs, output, and its backward rule."""

    __slots__ = ("index", "kind", "inputs", "output", "backward_fn")

    def __init__(self, index, kind, inputs, output, backward_fn):
        self.index = index
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed primitives (inputs always precede use)."""

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def push(self, kind, inputs, output, backward_fn) -> TapeEntry:
        e = TapeEntry(len(self.entries), kind, inputs, output, backward_fn)
        self.entries.append(e)
        output._entry = e
        return e

    def clear(self) -> None:
        for e in self.entries:
            e.output._entry = None
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


_state = _EngineState()


def active_tape() -> Tape:
    return _state.tape


def clear_tape() -> None:
    _state.tape.clear()


# ---------------------------------------------------------------------------
# Primitive registry
#
# Each forward takes (datas, attrs, needs) where needs is a tuple of
# requires-grad flags, or None when recording is off. It returns the output
# array and a backward closure mapping d(out) to per-input gradients (None
# for inputs that need none).


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # Sum out axes that numpy broadcasting expanded.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_same_dtype(kind: str, datas) -> None:
    dt = datas[0].dtype
    for d in datas[1:]:
        if d.dtype != dt:
            raise ShapeMismatchError(f"{kind}: mixed dtypes {dt} and {d.dtype}")


def _fwd_add(datas, attrs, needs):
    a, b = datas
    try:
        out = a + b
    except ValueError:
        raise ShapeMismatchError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    if needs is None:
        return out, None

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return out, backward


def _fwd_sub(datas, attrs, needs):
    a, b = datas
    try:
        out = a - b
    except ValueError:
        raise ShapeMismatchError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    if needs is None:
        return out, None

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return out, backward


def _fwd_mul(datas, attrs, needs):
    a, b = datas
    try:
        out = a * b
    except ValueError:
        raise ShapeMismatchError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    if needs is None:
        return out, None

    def backward(g):
        return (
            _unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None,
        )

    return out, backward


def _fwd_mul_scalar(datas, attrs, needs):
    (a,) = datas
    c = a.dtype.type(attrs["value"])
    out = a * c
    if needs is None:
        return out, None

    def backward(g):
        return (g * c,)

    return out, backward


def _fwd_matmul(datas, attrs, needs):
    a, b = datas
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul: expected 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: inner axes differ, {a.shape} @ {b.shape}")
    out = a @ b
    if needs is None:
        return out, None

    def backward(g):
        return (
            g @ b.T if needs[0] else None,
            a.T @ g if needs[1] else None,
        )

    return out, backward


def _fwd_conv2d(datas, attrs, needs):
    x, w = datas
    stride = int(attrs.get("stride", 1))
    pad = int(attrs.get("padding", 0))
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatchError(f"conv2d: expected 4-D input and kernel, got {x.shape}, {w.shape}")
    B, Cin, H, W = x.shape
    Cout, Cin_w, kh, kw = w.shape
    if Cin != Cin_w:
        raise ShapeMismatchError(f"conv2d: input channel axis {Cin} vs kernel channel axis {Cin_w}")
    if H + 2 * pad < kh or W + 2 * pad < kw:
        raise ShapeMismatchError(f"conv2d: spatial axes {H}x{W} too small for kernel {kh}x{kw} at padding {pad}")
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1

    xT = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    cols = im2col_nhwc(xT, kh, kw, stride, pad)
    w2 = np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(kh * kw * Cin, Cout)
    out = (cols @ w2).reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if needs is None:
        return out, None

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, Cout)
        dw = None
        if needs[1]:
            dw2 = cols.T @ gmat
            dw = np.ascontiguousarray(dw2.reshape(kh, kw, Cin, Cout).transpose(3, 2, 0, 1))
        dx = None
        if needs[0]:
            dcols = gmat @ w2.T
            dxT = col2im_nhwc(dcols, B, H, W, Cin, kh, kw, stride, pad)
            dx = np.ascontiguousarray(dxT.transpose(0, 3, 1, 2))
        return (dx, dw)

    return out, backward


def _fwd_relu(datas, attrs, needs):
    (x,) = datas
    out = np.maximum(x, 0)
    if needs is None:
        return out, None

    def backward(g):
        # Subgradient at 0 is 0.
        return (g * (x > 0),)

    return out, backward


def _fwd_global_avg_pool(datas, attrs, needs):
    (x,) = datas
    if x.ndim != 4:
        raise ShapeMismatchError(f"global_avg_pool: expected 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    out = x.mean(axis=(2, 3))
    if needs is None:
        return out, None

    def backward(g):
        scale = x.dtype.type(1.0 / (H * W))
        return (np.broadcast_to((g * scale)[:, :, None, None], x.shape),)

    return out, backward


def _fwd_max_pool2d(datas, attrs, needs):
    (x,) = datas
    kernel = int(attrs.get("kernel", 2))
    stride = int(attrs.get("stride", kernel))
    if x.ndim != 4:
        raise ShapeMismatchError(f"max_pool2d: expected 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if H < kernel or W < kernel:
        raise ShapeMismatchError(f"max_pool2d: spatial axes {H}x{W} smaller than kernel {kernel}")
    out, idx = maxpool2d_forward(x, kernel, stride)
    if needs is None:
        return out, None

    def backward(g):
        return (maxpool2d_backward(np.ascontiguousarray(g), idx, H, W),)

    return out, backward


def _fwd_reshape(datas, attrs, needs):
    (x,) = datas
    shape = tuple(attrs["shape"])
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ShapeMismatchError(f"reshape: cannot view {x.shape} as {shape}")
    if needs is None:
        return out, None

    def backward(g):
        return (g.reshape(x.shape),)

    return out, backward


def _fwd_log_softmax(datas, attrs, needs):
    (x,) = datas
    axis = int(attrs.get("axis", -1))
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    if needs is None:
        return out, None

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return out, backward


def _fwd_gather_rows(datas, attrs, needs):
    (x,) = datas
    idx = np.asarray(attrs["indices"], dtype=np.int64)
    if x.ndim != 2:
        raise ShapeMismatchError(f"gather_rows: expected 2-D input, got {x.shape}")
    if idx.ndim != 1 or idx.shape[0] != x.shape[0]:
        raise ShapeMismatchError(f"gather_rows: indices shape {idx.shape} vs rows {x.shape[0]}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ContractError(f"gather_rows: index out of range [0, {x.shape[1]})")
    rows = np.arange(x.shape[0])
    out = x[rows, idx]
    if needs is None:
        return out, None

    def backward(g):
        dx = np.zeros_like(x)
        dx[rows, idx] = g
        return (dx,)

    return out, backward


def _reduce_axes(attrs, ndim):
    axis = attrs.get("axis")
    if axis is None:
        return None
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def _fwd_reduce_sum(datas, attrs, needs):
    (x,) = datas
    axes = _reduce_axes(attrs, x.ndim)
    out = x.sum(axis=axes)
    if needs is None:
        return out, None

    def backward(g):
        if axes is None:
            return (np.broadcast_to(np.asarray(g, dtype=x.dtype), x.shape),)
        gshape = list(x.shape)
        for a in axes:
            gshape[a] = 1
        return (np.broadcast_to(g.reshape(gshape), x.shape),)

    return out, backward


def _fwd_reduce_mean(datas, attrs, needs):
    (x,) = datas
    axes = _reduce_axes(attrs, x.ndim)
    out = x.mean(axis=axes)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    if needs is None:
        return out, None

    def backward(g):
        scale = x.dtype.type(1.0 / count)
        if axes is None:
            return (np.broadcast_to(np.asarray(g * scale, dtype=x.dtype), x.shape),)
        gshape = list(x.shape)
        for a in axes:
            gshape[a] = 1
        return (np.broadcast_to((g * scale).reshape(gshape), x.shape),)

    return out, backward


PRIMITIVES: dict[str, Callable] = {
    "add": _fwd_add,
    "sub": _fwd_sub,
    "mul": _fwd_mul,
    "mul_scalar": _fwd_mul_scalar,
    "matmul": _fwd_matmul,
    "conv2d": _fwd_conv2d,
    "relu": _fwd_relu,
    "global_avg_pool": _fwd_global_avg_pool,
    "max_pool2d": _fwd_max_pool2d,
    "reshape": _fwd_reshape,
    "log_softmax": _fwd_log_softmax,
    "gather_rows": _fwd_gather_rows,
    "reduce_mean": _fwd_reduce_mean,
    "reduce_sum": _fwd_reduce_sum,
}


def apply_primitive(kind: str, inputs: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    """Execute one primitive, recording a tape entry when gradients flow."""
    if kind not in PRIMITIVES:
        raise ContractError(f"unknown primitive {kind!r}")
    attrs = attrs or {}
    datas = tuple(t.data for t in inputs)
    if len(datas) > 1:
        _check_same_dtype(kind, datas)
    record = _state.grad_enabled and any(t.requires_grad for t in inputs)
    needs = tuple(t.requires_grad for t in inputs) if record else None
    # Overflow surfaces as a NumericError below, not as a numpy warning.
    with np.errstate(over="ignore", invalid="ignore"):
        out_data, backward_fn = PRIMITIVES[kind](datas, attrs, needs)
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"{kind}: non-finite values in output")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = record
    out.grad = None
    out._entry = None
    if record:
        _state.tape.push(kind, tuple(inputs), out, backward_fn)
    return out


# Convenience wrappers -------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", (a, b))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("sub", (a, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mul", (a, b))


def mul_scalar(a: Tensor, value: float) -> Tensor:
    return apply_primitive("mul_scalar", (a,), {"value": value})


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", (a, b))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return apply_primitive("conv2d", (x, w), {"stride": stride, "padding": padding})


def relu(x: Tensor) -> Tensor:
    return apply_primitive("relu", (x,))


def global_avg_pool(x: Tensor) -> Tensor:
    return apply_primitive("global_avg_pool", (x,))


def max_pool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    return apply_primitive("max_pool2d", (x,), {"kernel": kernel, "stride": stride or kernel})


def reshape(x: Tensor, shape: Iterable[int]) -> Tensor:
    return apply_primitive("reshape", (x,), {"shape": tuple(shape)})


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("log_softmax", (x,), {"axis": axis})


def gather_rows(x: Tensor, indices) -> Tensor:
    return apply_primitive("gather_rows", (x,), {"indices": indices})


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    return apply_primitive("reduce_mean", (x,), {"axis": axis})


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    return apply_primitive("reduce_sum", (x,), {"axis": axis})


# Backward pass --------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf tensor reachable from ``loss``.

    Grads accumulate additively across calls until zeroed. Each tape entry
    on the path is visited exactly once, in reverse execution order.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._entry is None:
        if loss.requires_grad:
            _accumulate_leaf(loss, np.ones_like(loss.data))
        return

    # Collect the entries reachable from the loss.
    reachable: dict[int, TapeEntry] = {}
    stack = [loss._entry]
    while stack:
        e = stack.pop()
        if e.index in reachable:
            continue
        reachable[e.index] = e
        for t in e.inputs:
            if t._entry is not None:
                stack.append(t._entry)

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for e in sorted(reachable.values(), key=lambda e: e.index, reverse=True):
        gout = pending.pop(id(e.output), None)
        if gout is None:
            continue
        grads = e.backward_fn(gout)
        for t, g in zip(e.inputs, grads):
            if g is None:
                continue
            if t._entry is not None:
                key = id(t)
                prev = pending.get(key)
                pending[key] = g if prev is None else prev + g
            elif t.requires_grad:
                _accumulate_leaf(t, g)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype)
    else:
        t.grad = t.grad + g
