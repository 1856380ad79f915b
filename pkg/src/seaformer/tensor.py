"""Dense N-d tensors with opt-in reverse-mode differentiation and MAC accounting.

Tensors wrap row-major numpy storage (float64 for test/gradcheck work, float32
for benchmark work) and every operation is pure: inputs are never mutated and
each call returns a fresh tensor. Two thread-local contexts hook into every
operation:

* ``Tape`` — while a tape is active, each op appends a backward rule (a
  vector-Jacobian product closure) so ``backward`` can replay the computation
  in reverse. With no tape active, forward passes pay no autodiff cost.
* ``MacCounter`` — while a counter is active, ops skip arithmetic entirely,
  propagate shapes through stride-0 zero stubs, and accumulate exact integer
  multiply-accumulate counts. One MAC = one multiplication; bare adds are
  free, transcendentals (softmax/sigmoid/exp/log/sqrt) cost a flat 4 MACs per
  element.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor", "Tape", "MacCounter", "DimensionError", "ConfigurationError",
    "backward", "matmul", "softmax", "log_softmax", "permute", "reshape",
    "broadcast_to", "concat", "add", "sub", "mul", "div", "neg", "sigmoid",
    "relu6", "exp", "log", "sqrt", "reduce_sum", "reduce_mean", "reduce_max",
    "interp_linear", "zeros", "ones", "full",
]

TRANSCENDENTAL_MACS = 4  # per element, for softmax/sigmoid/exp/log/sqrt

# Test hook: flips the sign of one matmul cotangent so gradcheck must fail.
_VJP_SIGN_BUG = False


class DimensionError(ValueError):
    """Operand shapes or axes do not line up."""


class ConfigurationError(ValueError):
    """A block or parameter bundle is internally inconsistent."""


_state = threading.local()


def _tape():
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def _counter():
    stack = getattr(_state, "counters", None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable-by-convention dense array, rank >= 1, every dim >= 1."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=np.float64):
        arr = np.array(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise DimensionError(f"tensor dims must all be >= 1, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor holds non-finite values")
        self.data = arr

    @classmethod
    def _wrap(cls, arr):
        t = object.__new__(cls)
        t.data = arr
        return t

    @classmethod
    def _stub(cls, shape, dtype):
        # Shape-only placeholder used under an active MacCounter.
        return cls._wrap(np.broadcast_to(np.zeros((), dtype=dtype), tuple(shape)))

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def rank(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def tolist(self):
        return self.data.tolist()

    def copy(self):
        return Tensor._wrap(self.data.copy())

    def __float__(self):
        return self.item()

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.dtype.name})"

    # Operator sugar; scalars wrap as constants of the same dtype.
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def permute(self, order):
        return permute(self, order)


def zeros(shape, dtype=np.float64):
    return Tensor._wrap(np.zeros(tuple(shape), dtype=dtype))


def ones(shape, dtype=np.float64):
    return Tensor._wrap(np.ones(tuple(shape), dtype=dtype))


def full(shape, value, dtype=np.float64):
    return Tensor._wrap(np.full(tuple(shape), value, dtype=dtype))


def as_tensor(x, dtype=np.float64):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _const_like(x, other):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=other.dtype).reshape(-1) if np.ndim(x) == 0
                        else np.asarray(x, dtype=other.dtype))


class Tape:
    """Ordered record of operations for one computation scope.

    Records are appended in execution order, which is a topological order, so
    reverse replay accumulates cotangents correctly. A tape is confined to a
    single thread.
    """

    def __init__(self):
        self._records = []  # (out, inputs, vjp)
        self._watched = []

    def watch(self, *tensors):
        for t in tensors:
            if not isinstance(t, Tensor):
                raise TypeError("watch expects Tensors")
            self._watched.append(t)

    def __len__(self):
        return len(self._records)

    def __enter__(self):
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False


class MacCounter:
    """Accumulates exact multiply-accumulate counts; suspends real arithmetic."""

    def __init__(self):
        self.macs = 0

    def add(self, n):
        self.macs += int(n)

    def __enter__(self):
        stack = getattr(_state, "counters", None)
        if stack is None:
            stack = _state.counters = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.counters.pop()
        return False


def _record(out, inputs, vjp):
    tape = _tape()
    if tape is not None:
        tape._records.append((out, inputs, vjp))


def backward(tape, loss_grad):
    """Reverse-accumulate cotangents; returns {watched leaf -> gradient tensor}.

    ``loss_grad`` must match the shape of the tape's final output (a scalar
    loss has shape (1,)). Watched leaves the output does not depend on get
    zero gradients of the leaf shape.
    """
    loss_grad = as_tensor(loss_grad)
    grads = {}
    if tape._records:
        final_out = tape._records[-1][0]
        if loss_grad.shape != final_out.shape:
            raise DimensionError(
                f"loss_grad shape {loss_grad.shape} does not match final output shape {final_out.shape}")
        grads[id(final_out)] = loss_grad.data.astype(final_out.dtype, copy=False)
        for out, inputs, vjp in reversed(tape._records):
            g = grads.get(id(out))
            if g is None:
                continue
            for t, gi in zip(inputs, vjp(g)):
                if gi is None:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
    return {
        leaf: Tensor._wrap(np.array(grads[id(leaf)])) if id(leaf) in grads
        else zeros(leaf.shape, leaf.dtype)
        for leaf in tape._watched
    }


# ---------------------------------------------------------------------------
# shape helpers


def _broadcast_shape(sa, sb):
    # Left-pad the shorter rank, then dims must match or be 1.
    ra, rb = len(sa), len(sb)
    rank = max(ra, rb)
    pa = (1,) * (rank - ra) + tuple(sa)
    pb = (1,) * (rank - rb) + tuple(sb)
    out = []
    for da, db in zip(pa, pb):
        if da == db or da == 1 or db == 1:
            out.append(max(da, db))
        else:
            raise DimensionError(f"shapes {tuple(sa)} and {tuple(sb)} do not broadcast")
    return tuple(out)


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _norm_axis(axis, rank):
    if not -rank <= axis < rank:
        raise DimensionError(f"axis {axis} out of range for rank {rank}")
    return axis % rank


# ---------------------------------------------------------------------------
# elementwise ops


def _binary(a, b, forward, vjp_maker, macs_per_elem):
    if not isinstance(a, Tensor):
        a = _const_like(a, b)
    if not isinstance(b, Tensor):
        b = _const_like(b, a)
    out_shape = _broadcast_shape(a.shape, b.shape)
    c = _counter()
    if c is not None:
        c.add(macs_per_elem * int(np.prod(out_shape)))
        return Tensor._stub(out_shape, np.result_type(a.dtype, b.dtype))
    out = Tensor._wrap(forward(a.data, b.data))
    if _tape() is not None:
        _record(out, (a, b), vjp_maker(a.data, b.data, out.data))
    return out


def add(a, b):
    return _binary(a, b, np.add,
                   lambda ad, bd, od: lambda g: (_unbroadcast(g, ad.shape),
                                                 _unbroadcast(g, bd.shape)),
                   macs_per_elem=0)


def sub(a, b):
    return _binary(a, b, np.subtract,
                   lambda ad, bd, od: lambda g: (_unbroadcast(g, ad.shape),
                                                 _unbroadcast(-g, bd.shape)),
                   macs_per_elem=0)


def mul(a, b):
    return _binary(a, b, np.multiply,
                   lambda ad, bd, od: lambda g: (_unbroadcast(g * bd, ad.shape),
                                                 _unbroadcast(g * ad, bd.shape)),
                   macs_per_elem=1)


def div(a, b):
    return _binary(a, b, np.divide,
                   lambda ad, bd, od: lambda g: (_unbroadcast(g / bd, ad.shape),
                                                 _unbroadcast(-g * ad / (bd * bd), bd.shape)),
                   macs_per_elem=1)


def _unary(x, forward, vjp_maker, macs_per_elem):
    x = as_tensor(x)
    c = _counter()
    if c is not None:
        c.add(macs_per_elem * x.size)
        return Tensor._stub(x.shape, x.dtype)
    out = Tensor._wrap(forward(x.data))
    if _tape() is not None:
        _record(out, (x,), vjp_maker(x.data, out.data))
    return out


def neg(x):
    return _unary(x, np.negative, lambda xd, od: lambda g: (-g,), 0)


def sigmoid(x):
    def fwd(xd):
        out = np.empty_like(xd)
        pos = xd >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
        e = np.exp(xd[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    return _unary(x, fwd,
                  lambda xd, od: lambda g: (g * od * (1.0 - od),),
                  TRANSCENDENTAL_MACS)


def relu6(x):
    return _unary(x, lambda xd: np.clip(xd, 0.0, 6.0),
                  lambda xd, od: lambda g: (g * ((xd > 0.0) & (xd < 6.0)),),
                  0)


def exp(x):
    return _unary(x, np.exp, lambda xd, od: lambda g: (g * od,), TRANSCENDENTAL_MACS)


def log(x):
    return _unary(x, np.log, lambda xd, od: lambda g: (g / xd,), TRANSCENDENTAL_MACS)


def sqrt(x):
    return _unary(x, np.sqrt, lambda xd, od: lambda g: (g / (2.0 * od),), TRANSCENDENTAL_MACS)


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b):
    """Matrix product on the last two axes; leading (batch) dims must match."""
    a, b = as_tensor(a), as_tensor(b)
    if a.rank < 2 or b.rank < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.rank != b.rank or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dims differ: {a.shape} x {b.shape}")
    m, k = a.shape[-2], a.shape[-1]
    k2, n = b.shape[-2], b.shape[-1]
    if k != k2:
        raise DimensionError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    batch = int(np.prod(a.shape[:-2], dtype=np.int64)) if a.rank > 2 else 1
    out_shape = a.shape[:-2] + (m, n)
    c = _counter()
    if c is not None:
        c.add(batch * m * k * n)
        return Tensor._stub(out_shape, np.result_type(a.dtype, b.dtype))
    out = Tensor._wrap(a.data @ b.data)
    if _tape() is not None:
        def vjp(g, ad=a.data, bd=b.data):
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
            if _VJP_SIGN_BUG:
                ga = -ga
            return ga, gb

        _record(out, (a, b), vjp)
    return out


# ---------------------------------------------------------------------------
# softmax family


def softmax(x, axis):
    """Max-shifted softmax along ``axis``; slices sum to one."""
    x = as_tensor(x)
    axis = _norm_axis(axis, x.rank)
    c = _counter()
    if c is not None:
        c.add(TRANSCENDENTAL_MACS * x.size)
        return Tensor._stub(x.shape, x.dtype)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = Tensor._wrap(e / e.sum(axis=axis, keepdims=True))
    if _tape() is not None:
        def vjp(g, od=out.data, ax=axis):
            return (od * (g - (g * od).sum(axis=ax, keepdims=True)),)

        _record(out, (x,), vjp)
    return out


def log_softmax(x, axis):
    x = as_tensor(x)
    axis = _norm_axis(axis, x.rank)
    c = _counter()
    if c is not None:
        c.add(TRANSCENDENTAL_MACS * x.size)
        return Tensor._stub(x.shape, x.dtype)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor._wrap(shifted - lse)
    if _tape() is not None:
        def vjp(g, od=out.data, ax=axis):
            return (g - np.exp(od) * g.sum(axis=ax, keepdims=True),)

        _record(out, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# structural ops


def permute(x, order):
    x = as_tensor(x)
    order = tuple(int(i) for i in order)
    if sorted(order) != list(range(x.rank)):
        raise ValueError(f"order {order} is not a permutation of 0..{x.rank - 1}")
    out_shape = tuple(x.shape[i] for i in order)
    c = _counter()
    if c is not None:
        return Tensor._stub(out_shape, x.dtype)
    out = Tensor._wrap(np.transpose(x.data, order))  # view; tensors are immutable
    if _tape() is not None:
        inverse = tuple(np.argsort(order))

        def vjp(g, inv=inverse):
            return (np.transpose(g, inv),)

        _record(out, (x,), vjp)
    return out


def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size or any(s < 1 for s in shape):
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    c = _counter()
    if c is not None:
        return Tensor._stub(shape, x.dtype)
    out = Tensor._wrap(x.data.reshape(shape))
    if _tape() is not None:
        def vjp(g, orig=x.shape):
            return (g.reshape(orig),)

        _record(out, (x,), vjp)
    return out


def broadcast_to(x, shape):
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if _broadcast_shape(x.shape, shape) != shape:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}")
    c = _counter()
    if c is not None:
        return Tensor._stub(shape, x.dtype)
    out = Tensor._wrap(np.broadcast_to(x.data, shape))  # view; tensors are immutable
    if _tape() is not None:
        def vjp(g, orig=x.shape):
            return (_unbroadcast(g, orig),)

        _record(out, (x,), vjp)
    return out


def concat(parts, axis):
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    rank = parts[0].rank
    axis = _norm_axis(axis, rank)
    for p in parts[1:]:
        if p.rank != rank or any(i != axis and p.shape[i] != parts[0].shape[i] for i in range(rank)):
            raise DimensionError(
                f"concat shapes differ off-axis: {[tuple(q.shape) for q in parts]}")
    out_shape = list(parts[0].shape)
    out_shape[axis] = sum(p.shape[axis] for p in parts)
    c = _counter()
    if c is not None:
        return Tensor._stub(out_shape, parts[0].dtype)
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=axis))
    if _tape() is not None:
        sizes = [p.shape[axis] for p in parts]

        def vjp(g, sizes=sizes, ax=axis):
            splits = np.split(g, np.cumsum(sizes)[:-1], axis=ax)
            return tuple(splits)

        _record(out, tuple(parts), vjp)
    return out


# ---------------------------------------------------------------------------
# reductions


def _reduce_axes(axis, rank):
    if axis is None:
        return tuple(range(rank))
    if isinstance(axis, int):
        return (_norm_axis(axis, rank),)
    return tuple(sorted(_norm_axis(a, rank) for a in axis))


def _reduced_shape(shape, axes, keepdims):
    if keepdims:
        return tuple(1 if i in axes else s for i, s in enumerate(shape))
    kept = tuple(s for i, s in enumerate(shape) if i not in axes)
    return kept if kept else (1,)


def _expand_for_reduce(g, in_shape, axes, keepdims):
    if not keepdims:
        target = tuple(1 if i in axes else s for i, s in enumerate(in_shape))
        g = g.reshape(target)
    return np.broadcast_to(g, in_shape)


def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _reduce_axes(axis, x.rank)
    out_shape = _reduced_shape(x.shape, axes, keepdims)
    c = _counter()
    if c is not None:
        return Tensor._stub(out_shape, x.dtype)
    out = Tensor._wrap(x.data.sum(axis=axes, keepdims=keepdims).reshape(out_shape))
    if _tape() is not None:
        def vjp(g, shp=x.shape, axs=axes, kd=keepdims):
            return (np.ascontiguousarray(_expand_for_reduce(g, shp, axs, kd)),)

        _record(out, (x,), vjp)
    return out


def reduce_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _reduce_axes(axis, x.rank)
    out_shape = _reduced_shape(x.shape, axes, keepdims)
    n = int(np.prod([x.shape[i] for i in axes]))
    c = _counter()
    if c is not None:
        c.add(int(np.prod(out_shape)))  # the 1/n scale
        return Tensor._stub(out_shape, x.dtype)
    out = Tensor._wrap(x.data.mean(axis=axes, keepdims=keepdims).reshape(out_shape))
    if _tape() is not None:
        def vjp(g, shp=x.shape, axs=axes, kd=keepdims, n=n):
            return (np.ascontiguousarray(_expand_for_reduce(g, shp, axs, kd)) / n,)

        _record(out, (x,), vjp)
    return out


def reduce_max(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _reduce_axes(axis, x.rank)
    out_shape = _reduced_shape(x.shape, axes, keepdims)
    c = _counter()
    if c is not None:
        return Tensor._stub(out_shape, x.dtype)
    raw = x.data.max(axis=axes, keepdims=True)
    out = Tensor._wrap(raw.reshape(out_shape))
    if _tape() is not None:
        def vjp(g, xd=x.data, raw=raw, shp=x.shape, axs=axes, kd=keepdims):
            mask = (xd == raw)
            return (mask * _expand_for_reduce(g, shp, axs, kd),)

        _record(out, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# 1-D linear interpolation (used to materialize positional tables)


def _interp_coords(n_in, n_out):
    # Half-pixel (align-corners = false) sampling with edge clamping. At
    # n_out == n_in the source coordinate is exactly the index, so t == 0.
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src)
    t = src - i0
    lo = np.clip(i0, 0, n_in - 1).astype(np.intp)
    hi = np.clip(i0 + 1, 0, n_in - 1).astype(np.intp)
    return lo, hi, t


def interp_linear(table, n_out):
    """Resample a (rows, D) table to (n_out, D) rows by linear interpolation."""
    table = as_tensor(table)
    if table.rank != 2:
        raise DimensionError(f"interp_linear expects a rank-2 table, got {table.shape}")
    n_in, d = table.shape
    n_out = int(n_out)
    if n_out < 1:
        raise DimensionError("interp_linear needs n_out >= 1")
    c = _counter()
    if c is not None:
        c.add(2 * n_out * d)
        return Tensor._stub((n_out, d), table.dtype)
    lo, hi, t = _interp_coords(n_in, n_out)
    t = t.astype(table.dtype)[:, None]
    out = Tensor._wrap((1.0 - t) * table.data[lo] + t * table.data[hi])
    if _tape() is not None:
        def vjp(g, lo=lo, hi=hi, t=t, n_in=n_in, d=d):
            gt = np.zeros((n_in, d), dtype=g.dtype)
            np.add.at(gt, lo, (1.0 - t) * g)
            np.add.at(gt, hi, t * g)
            return (gt,)

        _record(out, (table,), vjp)
    return out
