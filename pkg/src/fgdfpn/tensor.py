"""Dense tensors and the reverse-mode tape every differentiable op records on.

A :class:`Tape` is activated with ``with Tape() as tape:``; any op whose inputs
require gradients appends a record (inputs, output, backward rule) to the
active tape.  ``tape.backward(loss)`` replays the rules in reverse and
accumulates gradients into leaf tensors (``Parameter.grad`` in particular).
Outside a tape nothing is recorded, which is how inference runs.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from . import _elementwise

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_active_tapes: list["Tape"] = []


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else np.float32
    dtype = np.dtype(dtype)
    if dtype not in _FLOAT_DTYPES:
        raise TypeError(f"unsupported dtype {dtype}; use float32 or float64")
    return np.ascontiguousarray(arr, dtype=dtype)


class Tensor:
    """N-d float array in (batch, channel, height, width) order for 4-D data.

    Args:
        data: Anything :func:`numpy.asarray` accepts.
        requires_grad: Whether gradients should flow back to this tensor.
        dtype: ``float32`` (default for non-float input) or ``float64``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = _as_array(data, dtype)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)


def _not_scalar(t: Tensor):
    raise ShapeError(f"tensor of shape {t.shape} is not a scalar")


class Parameter(Tensor):
    """Trainable tensor with a gradient buffer of identical shape."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype.name})"


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of differentiable operations for one backward pass."""

    def __init__(self):
        self._records: list[tuple[tuple[Tensor, ...], Tensor, BackwardFn]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise RuntimeError("tape already consumed by backward()")
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> None:
        if self._consumed:
            raise RuntimeError("cannot record on a consumed tape")
        self._records.append((tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

        Raises:
            ShapeError: if ``loss`` has more than one element.
            RuntimeError: if this tape was already used for a backward pass.
        """
        if self._consumed:
            raise RuntimeError("backward() already ran on this tape; record a new one")
        if loss.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        self._consumed = True
        records, self._records = self._records, []
        produced = {id(out) for _, out, _ in records}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for inputs, output, rule in reversed(records):
            g_out = grads.pop(id(output), None)
            if g_out is None:
                continue
            for inp, g in zip(inputs, rule(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if key not in produced:
                    leaves[key] = inp
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
            if leaf.grad is None:
                leaf.grad = g.copy()
            else:
                leaf.grad += g


def active_tape() -> Optional[Tape]:
    return _active_tapes[-1] if _active_tapes else None


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``data`` as an op output and record it if any input needs a gradient."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(inputs, out, backward)
    return out


def zero_grads(params: Sequence[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


# -- elementwise -----------------------------------------------------------


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_result(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so large |x| never overflows exp
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    if slope <= 0:
        raise ValueError(f"leaky_relu slope must be positive, got {slope}")
    d = np.ascontiguousarray(x.data)
    s = d.dtype.type(slope)
    y = np.empty_like(d)
    _elementwise.leaky_forward(d, s, y)

    def backward(g):
        gx = np.empty_like(y)
        _elementwise.leaky_backward(y, np.ascontiguousarray(g), s, gx)
        return (gx,)

    return make_result(y, (x,), backward)


def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return make_result(a.data + a.dtype.type(b), (a,), lambda g: (g,))
    _check_same(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return make_result(a.data - a.dtype.type(b), (a,), lambda g: (g,))
    _check_same(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        s = a.dtype.type(b)
        return make_result(a.data * s, (a,), lambda g: (g * s,))
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    y = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return make_result(y, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    y = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    return make_result(y, (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Not differentiated at the bounds; used on inference outputs."""
    d = x.data
    inside = (d >= lo) & (d <= hi)
    return make_result(np.clip(d, lo, hi), (x,), lambda g: (g * inside,))


# -- structural ------------------------------------------------------------


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate 4-D tensors along the channel axis, preserving order."""
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    ref = xs[0]
    for t in xs[1:]:
        if t.ndim != 4 or (t.shape[0], *t.shape[2:]) != (ref.shape[0], *ref.shape[2:]):
            raise ShapeError(f"concat_channels: {t.shape} incompatible with {ref.shape}")
        if t.dtype != ref.dtype:
            raise TypeError("concat_channels: mixed dtypes")
    sizes = [t.shape[1] for t in xs]
    bounds = np.cumsum([0] + sizes)
    y = np.concatenate([t.data for t in xs], axis=1)

    def backward(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs))]

    return make_result(y, xs, backward)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Contiguous channel slices of ``x`` with the given channel counts."""
    sizes = [int(s) for s in sizes]
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split_channels: sizes {sizes} sum to {sum(sizes)}, tensor has {x.shape[1]} channels")
    if len(sizes) == 1:
        return [x]
    outs = []
    start = 0
    for s in sizes:
        lo, hi = start, start + s
        outs.append(channel_slice(x, lo, hi))
        start = hi
    return outs


def channel_slice(x: Tensor, lo: int, hi: int) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, lo:hi] = g
        return (full,)

    return make_result(np.ascontiguousarray(x.data[:, lo:hi]), (x,), backward)


def take_channels(x: Tensor, index: Sequence[int]) -> Tensor:
    """Gather channels by index (repeats allowed); gradients sum over repeats."""
    idx = np.asarray(index, dtype=np.intp)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= x.shape[1]:
        raise ShapeError(f"take_channels: index out of range for {x.shape[1]} channels")
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        for j, c in enumerate(idx):
            full[:, c] += g[:, j]
        return (full,)

    return make_result(x.data[:, idx], (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    y = x.data.reshape(tuple(shape))
    return make_result(y, (x,), lambda g: (g.reshape(old),))


def numel(shape: Sequence[int]) -> int:
    return int(math.prod(shape))


def crop(x: Tensor, h: int, w: int) -> Tensor:
    """Top-left ``h`` x ``w`` spatial window of a 4-D tensor."""
    shape, dtype = x.shape, x.dtype
    if x.ndim != 4 or h > shape[2] or w > shape[3] or h < 1 or w < 1:
        raise ShapeError(f"crop {h}x{w} out of range for {shape}")
    if (h, w) == shape[2:]:
        return x

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, :, :h, :w] = g
        return (full,)

    return make_result(np.ascontiguousarray(x.data[:, :, :h, :w]), (x,), backward)


def pad_to(x: Tensor, h: int, w: int) -> Tensor:
    """Zero-extend a 4-D tensor at the bottom and right to ``h`` x ``w``."""
    shape = x.shape
    if x.ndim != 4 or h < shape[2] or w < shape[3]:
        raise ShapeError(f"pad_to {h}x{w} smaller than {shape}")
    if (h, w) == shape[2:]:
        return x
    hh, ww = shape[2:]
    y = np.pad(x.data, ((0, 0), (0, 0), (0, h - hh), (0, w - ww)))
    return make_result(y, (x,), lambda g: (np.ascontiguousarray(g[:, :, :hh, :ww]),))
