"""Minimal dense-tensor engine with reverse-mode differentiation.

Values are numpy arrays; gradients are computed by recording every
operation on a :class:`Tape` and replaying the adjoints in reverse
order.  float32 is the default precision; switch to float64 (see
:func:`using_dtype`) when checking gradients against finite differences.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf; the computation is invalid."""


_DEFAULT_DTYPE = np.float32
_FINITE_CHECKS = True
_TAPE_STACK: list["Tape"] = []


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


@contextmanager
def using_dtype(dtype):
    """Temporarily change the default precision (float64 for grad checks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not _FINITE_CHECKS:
        return
    # One cheap reduction: any NaN/Inf contaminates the sum.  A finite sum of
    # finite values can still overflow, so confirm before raising.
    total = float(np.sum(arr))
    if not math.isfinite(total) and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


class Tensor:
    """Dense n-dimensional real array, optionally participating in the tape.

    ``tracked`` marks tensors whose gradient is wanted (parameters and
    anything computed from them while a tape is active).
    """

    __slots__ = ("data", "tracked")

    def __init__(self, data, tracked: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.tracked = tracked

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
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"

    # Operator sugar; all routes through the taped ops below.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data) -> Tensor:
    """An untracked tensor: gradients never flow into it."""
    return Tensor(data, tracked=False)


def stop_gradient(x: Tensor) -> Tensor:
    """Same values as ``x`` but detached from the tape."""
    return Tensor(x.data, tracked=False)


class Tape:
    """Ordered record of operations for one differentiation pass.

    Used as a context manager: operations performed inside record
    themselves; :meth:`backward` then visits each record exactly once in
    reverse, accumulating gradients per tensor identity in a single
    deterministic order.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple, backward_fn) -> None:
        self._records.append((out, inputs, backward_fn))

    def gradients(self, loss: Tensor) -> dict:
        """Gradient of scalar ``loss`` w.r.t. every tracked tensor on the tape.

        Returns a map from tensor identity (``id``) to a gradient array of
        the same shape as the tensor's value.
        """
        if loss.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        # Reverse replay: by the time a record is visited, every use of its
        # output has already deposited its contribution, so pop is safe.
        for out, inputs, backward_fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for tensor, g_in in zip(inputs, backward_fn(g)):
                if g_in is None or not tensor.tracked:
                    continue
                acc = grads.get(id(tensor))
                grads[id(tensor)] = g_in if acc is None else acc + g_in
        return grads

    def backward(self, loss: Tensor, parameters=None) -> dict:
        """Run the adjoint pass; fill ``p.grad`` for each given parameter.

        Parameters not reachable from the loss receive a zero gradient.
        """
        grads = self.gradients(loss)
        if parameters is not None:
            for p in parameters:
                g = grads.get(id(p.value))
                if g is None:
                    p.grad = np.zeros_like(p.value.data)
                else:
                    p.grad = np.asarray(g, dtype=p.value.data.dtype)
        return grads


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _emit(out_data, inputs: tuple, backward_fn, op: str) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.tracked for t in inputs):
        out.tracked = True
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's original shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a, b) -> Tensor:
    """Matrix product with broadcast batching over leading dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward_fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit(out, (a, b), backward_fn, "matmul")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as err:
        raise ShapeError(f"add broadcast mismatch: {a.shape} + {b.shape}") from err

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(out, (a, b), backward_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as err:
        raise ShapeError(f"sub broadcast mismatch: {a.shape} - {b.shape}") from err

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(out, (a, b), backward_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as err:
        raise ShapeError(f"mul broadcast mismatch: {a.shape} * {b.shape}") from err

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(out, (a, b), backward_fn, "mul")


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _emit(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x, factor: float) -> Tensor:
    x = _as_tensor(x)
    factor = float(factor)
    return _emit(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)

    def backward_fn(g):
        return (g * (1.0 - out * out),)

    return _emit(out, (x,), backward_fn, "tanh")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def backward_fn(g):
        return (g * (x.data > 0),)

    return _emit(out, (x,), backward_fn, "relu")


_ELEMENTWISE = {"tanh": tanh, "relu": relu, "add": add, "mul": mul, "scale": scale}


def elementwise(kind: str, x, y=None) -> Tensor:
    """Dispatch by name; binary kinds take ``y``, ``scale`` takes a float."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(x) if y is None else fn(x, y)


def log(x) -> Tensor:
    x = _as_tensor(x)
    out = np.log(x.data)

    def backward_fn(g):
        return (g / x.data,)

    return _emit(out, (x,), backward_fn, "log")


def softmax(x, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``; outputs sum to 1 on that axis."""
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward_fn(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _emit(out, (x,), backward_fn, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def backward_fn(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _emit(out, (x,), backward_fn, "log_softmax")


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(out, (x,), backward_fn, "reduce_sum")


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(x.shape),)

    return _emit(out, (x,), backward_fn, "reshape")


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def backward_fn(g):
        return (np.transpose(g, inverse),)

    return _emit(out, (x,), backward_fn, "transpose")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _emit(out, tuple(tensors), backward_fn, "concat")


def broadcast_to(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    out = np.broadcast_to(x.data, shape).copy()

    def backward_fn(g):
        return (_unbroadcast(g, x.shape),)

    return _emit(out, (x,), backward_fn, "broadcast_to")


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along ``axis``."""
    x = _as_tensor(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = x.data[index].copy()

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _emit(out, (x,), backward_fn, "narrow")


def gather_rows(table, ids) -> Tensor:
    """Row lookup (embedding): ``out[..., :] = table[ids[...], :]``."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    out = table.data[ids]

    def backward_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _emit(out, (table,), backward_fn, "gather_rows")


def gather_last(x, ids) -> Tensor:
    """Pick one entry along the last axis: ``out[...] = x[..., ids[...]]``."""
    x = _as_tensor(x)
    ids = np.asarray(ids)
    out = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, ids[..., None], g[..., None], axis=-1)
        return (gx,)

    return _emit(out, (x,), backward_fn, "gather_last")


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ShapeError(
            f"layer_norm feature size {x.shape[-1]} does not match "
            f"gain {gain.shape} / bias {bias.shape}"
        )
    mean = np.mean(x.data, axis=-1, keepdims=True)
    centered = x.data - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv
    out = gain.data * normed + bias.data

    def backward_fn(g):
        g_gain = _unbroadcast(g * normed, gain.shape)
        g_bias = _unbroadcast(g, bias.shape)
        gn = g * gain.data
        gx = inv * (
            gn
            - np.mean(gn, axis=-1, keepdims=True)
            - normed * np.mean(gn * normed, axis=-1, keepdims=True)
        )
        return gx, g_gain, g_bias

    return _emit(out, (x, gain, bias), backward_fn, "layer_norm")


def squash(s, eps: float = 1e-9) -> Tensor:
    """Norm-bounding nonlinearity on the last axis.

    Maps ``s`` to ``(|s|^2 / (1 + |s|^2)) * s / (|s| + eps)``: direction is
    preserved and the output norm lies in [0, 1).  The eps guard makes the
    zero vector a fixed point instead of a singularity.
    """
    s = _as_tensor(s)
    n2 = np.sum(s.data * s.data, axis=-1, keepdims=True)
    n = np.sqrt(n2)
    denom = (1.0 + n2) * (n + eps)
    k = n2 / denom
    out = s.data * k

    def backward_fn(g):
        # out = s * k(n);  d out_a / d s_b = delta_ab k + s_a s_b * k'(n)/n
        # with k'(n)/n = (2(n+eps) - n(1+n^2)) / ((1+n^2)(n+eps))^2
        kprime_over_n = (2.0 * (n + eps) - n * (1.0 + n2)) / (denom * denom)
        inner = np.sum(g * s.data, axis=-1, keepdims=True)
        return (g * k + s.data * (inner * kprime_over_n),)

    return _emit(out, (s,), backward_fn, "squash")


def backward(loss: Tensor, parameters=None) -> dict:
    """Adjoint pass on the innermost active tape (see :meth:`Tape.backward`)."""
    tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward() requires an active Tape")
    return tape.backward(loss, parameters)


# ---------------------------------------------------------------------------
# parameters


class Parameter:
    """Named trainable weight plus its gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = Tensor(np.asarray(value, dtype=_DEFAULT_DTYPE), tracked=True)
        self.grad = np.zeros_like(self.value.data)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class ParameterStore:
    """Registry of uniquely named parameters in a stable insertion order.

    The iteration order doubles as the checkpoint serialization order.
    """

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value: np.ndarray) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list:
        return list(self._params)

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = np.zeros_like(p.value.data)

    def num_values(self) -> int:
        return sum(p.value.size for p in self._params.values())


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int):
    """Fan-average uniform init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(_DEFAULT_DTYPE)
