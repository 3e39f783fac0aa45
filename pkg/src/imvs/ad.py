"""Reverse-mode automatic differentiation over dense float32 arrays.

A Tape records every operation in execution order (which is already a
topological order, since an op's inputs must exist before the op runs).
Values are plain numpy float32 arrays; a Var couples a value with its
position on the tape.

Local derivatives (VJPs) are themselves expressed in terms of the same
op primitives, so a backward pass can be recorded onto the tape.  That
is what makes the nested gradient used by the Eikonal penalty work: the
inner spatial gradient is a Var, and differentiating a function of it
simply traverses the VJP nodes like any others.  The ordinary backward
pass runs with recording paused, so it costs no graph growth.
"""

from __future__ import annotations

import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

# reductions spanning more elements than this accumulate in float64
F64_REDUCE_MIN = 4096


class AdError(Exception):
    """Base class for autodiff failures."""


class ShapeError(AdError):
    """Operand shapes incompatible for an op."""


class DomainError(AdError):
    """Input outside an op's differentiable domain."""


class TapeError(AdError):
    """Tape misuse: detached tape, non-scalar backward, mixed tapes."""


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=DTYPE)
    return arr


class Var:
    """A value on a Tape, optionally carrying gradient requirements.

    ``parents`` and ``vjp`` are populated only while the owning tape is
    recording; constants created under ``tape.paused()`` are bare value
    holders.
    """

    __slots__ = ("tape", "value", "nid", "requires_grad", "parents", "vjp")

    def __init__(self, tape, value, nid, requires_grad, parents=None, vjp=None):
        self.tape = tape
        self.value = value
        self.nid = nid
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Var(shape={self.value.shape}, nid={self.nid}, requires_grad={self.requires_grad})"

    # operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(lift(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, lift(self.tape, other))

    def __rtruediv__(self, other):
        return div(lift(self.tape, other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def min(self, axis=None, keepdims=False):
        return min_(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() on non-scalar Var of shape {self.value.shape}")
        return float(self.value.reshape(()))


class _Paused:
    def __init__(self, tape):
        self.tape = tape

    def __enter__(self):
        self.prev = self.tape._recording
        self.tape._recording = False
        return self.tape

    def __exit__(self, *exc):
        self.tape._recording = self.prev
        return False


class Tape:
    """Ordered record of operations; rebuilt for every training step."""

    def __init__(self):
        self._nodes: list[Var] = []
        self._leaf_ids: list[int] = []
        self._recording = True
        self._alive = True

    def __len__(self):
        return len(self._nodes)

    def var(self, value, requires_grad=False) -> Var:
        """Create a leaf.  float32 ndarray inputs are held by reference,
        so optimizer updates to the same array are visible to later tapes."""
        if isinstance(value, np.ndarray) and value.dtype == DTYPE:
            arr = value
        else:
            arr = _as_array(value)
        if not self._recording:
            return Var(self, arr, None, False)
        nid = len(self._nodes)
        v = Var(self, arr, nid, requires_grad)
        self._nodes.append(v)
        if requires_grad:
            self._leaf_ids.append(nid)
        return v

    def constant(self, value) -> Var:
        return self.var(value, requires_grad=False)

    def paused(self):
        return _Paused(self)

    def close(self):
        self._alive = False

    def _emit(self, value, parents, vjp) -> Var:
        if not self._alive:
            raise TapeError("operation on a closed tape")
        if not self._recording:
            return Var(self, value, None, False)
        rg = any(p.requires_grad for p in parents)
        nid = len(self._nodes)
        v = Var(self, value, nid, rg, parents=tuple(parents), vjp=vjp if rg else None)
        self._nodes.append(v)
        return v


def lift(tape: Tape, x) -> Var:
    """Wrap a scalar or ndarray as a constant Var on ``tape``."""
    if isinstance(x, Var):
        if x.tape is not tape:
            raise TapeError("operands recorded on different tapes")
        return x
    return tape.var(x, requires_grad=False)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TapeError("no Var operand supplied")


def _is_scalar_shape(shape) -> bool:
    return int(np.prod(shape, dtype=np.int64)) == 1


def _check_elementwise(op: str, a: Var, b: Var) -> None:
    if a.value.shape == b.value.shape:
        return
    if _is_scalar_shape(a.value.shape) or _is_scalar_shape(b.value.shape):
        return
    raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ "
                     "(only scalar-with-tensor broadcasting is supported)")


def _reduce_to(g: Var, shape) -> Var:
    """Reduce a gradient back to a (possibly scalar) operand shape."""
    if g.value.shape == tuple(shape):
        return g
    return reshape(sum_(g), shape)


# ---------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------

def add(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = lift(t, a), lift(t, b)
    _check_elementwise("add", a, b)
    out = a.value + b.value

    def vjp(g, needed):
        return (
            _reduce_to(g, a.value.shape) if needed[0] else None,
            _reduce_to(g, b.value.shape) if needed[1] else None,
        )

    return t._emit(out, (a, b), vjp)


def sub(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = lift(t, a), lift(t, b)
    _check_elementwise("sub", a, b)
    out = a.value - b.value

    def vjp(g, needed):
        return (
            _reduce_to(g, a.value.shape) if needed[0] else None,
            _reduce_to(neg(g), b.value.shape) if needed[1] else None,
        )

    return t._emit(out, (a, b), vjp)


def mul(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = lift(t, a), lift(t, b)
    _check_elementwise("mul", a, b)
    out = a.value * b.value

    def vjp(g, needed):
        return (
            _reduce_to(mul(g, b), a.value.shape) if needed[0] else None,
            _reduce_to(mul(g, a), b.value.shape) if needed[1] else None,
        )

    return t._emit(out, (a, b), vjp)


def div(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = lift(t, a), lift(t, b)
    _check_elementwise("div", a, b)
    out = a.value / b.value
    if not np.all(np.isfinite(out)):
        raise DomainError("div: non-finite result (division by zero?)")

    def vjp(g, needed):
        ga = div(g, b) if (needed[0] or needed[1]) else None
        return (
            _reduce_to(ga, a.value.shape) if needed[0] else None,
            _reduce_to(neg(mul(ga, div(a, b))), b.value.shape) if needed[1] else None,
        )

    return t._emit(out, (a, b), vjp)


def neg(a) -> Var:
    t = _tape_of(a)
    a = lift(t, a)
    out = -a.value

    def vjp(g, needed):
        return (neg(g),)

    return t._emit(out, (a,), vjp)


def matmul(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = lift(t, a), lift(t, b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.value.shape} @ {b.value.shape}")
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.value.shape} @ {b.value.shape}")
    out = a.value @ b.value

    def vjp(g, needed):
        return (
            matmul(g, transpose(b)) if needed[0] else None,
            matmul(transpose(a), g) if needed[1] else None,
        )

    return t._emit(out, (a, b), vjp)


def transpose(a) -> Var:
    t = _tape_of(a)
    a = lift(t, a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expects 2-D, got {a.value.shape}")
    out = np.ascontiguousarray(a.value.T)

    def vjp(g, needed):
        return (transpose(g),)

    return t._emit(out, (a,), vjp)


def reshape(a, shape) -> Var:
    t = _tape_of(a)
    a = lift(t, a)
    if isinstance(shape, int):
        shape = (shape,)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.value.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {a.value.shape} to {shape}") from e
    orig = a.value.shape

    def vjp(g, needed):
        return (reshape(g, orig),)

    return t._emit(out, (a,), vjp)


def broadcast_to(a, shape) -> Var:
    """Explicit broadcast.  The gradient sums over the expanded axes."""
    t = _tape_of(a)
    a = lift(t, a)
    shape = tuple(int(s) for s in shape)
    try:
        out = np.ascontiguousarray(np.broadcast_to(a.value, shape))
    except ValueError as e:
        raise ShapeError(f"broadcast_to: {a.value.shape} not broadcastable to {shape}") from e
    src = a.value.shape
    pad = len(shape) - len(src)
    axes = tuple(i for i in range(len(shape))
                 if i < pad or src[i - pad] != shape[i])

    def vjp(g, needed):
        red = sum_(g, axis=axes, keepdims=True) if axes else g
        return (reshape(red, src),)

    return t._emit(out, (a,), vjp)


def _sum_value(x: np.ndarray, axis, keepdims) -> np.ndarray:
    n = x.size if axis is None else int(np.prod([x.shape[i] for i in np.atleast_1d(axis)]))
    if n > F64_REDUCE_MIN:
        return np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(DTYPE)
    return np.sum(x, axis=axis, keepdims=keepdims, dtype=DTYPE)


def sum_(a, axis=None, keepdims=False) -> Var:
    t = _tape_of(a)
    a = lift(t, a)
    if axis is not None and not isinstance(axis, tuple):
        axis = (int(axis),)
    out = np.asarray(_sum_value(a.value, axis, keepdims))
    src = a.value.shape

    def vjp(g, needed):
        gk = g
        if not keepdims and axis is not None:
            kshape = list(src)
            for ax in axis:
                kshape[ax] = 1
            gk = reshape(g, tuple(kshape))
        elif not keepdims and axis is None:
            gk = reshape(g, (1,) * len(src)) if src else g
        return (broadcast_to(gk, src) if src else gk,)

    return t._emit(out, (a,), vjp)


def mean_(a, axis=None, keepdims=False) -> Var:
    t = _tape_of(a)
    a = lift(t, a)
    if axis is None:
        n = a.value.size
    else:
        ax = axis if isinstance(axis, tuple) else (int(axis),)
        n = int(np.prod([a.value.shape[i] for i in ax]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), lift(t, DTYPE(1.0 / n)))


def min_(a, axis=None, keepdims=False) -> Var:
    """Min-reduce; the gradient routes to the first minimizer (ties break
    toward the lowest index), which is treated as a constant selection."""
    t = _tape_of(a)
    a = lift(t, a)
    if axis is not None and not isinstance(axis, int):
        raise ShapeError("min_: axis must be None or an int")
    out = np.asarray(np.min(a.value, axis=axis, keepdims=keepdims))
    src = a.value.shape
    if axis is None:
        onehot = np.zeros(a.value.size, dtype=DTYPE)
        onehot[int(np.argmin(a.value))] = 1.0
        onehot = onehot.reshape(src)
    else:
        idx = np.argmin(a.value, axis=axis)
        onehot = np.zeros_like(a.value)
        np.put_along_axis(onehot, np.expand_dims(idx, axis), DTYPE(1.0), axis)

    def vjp(g, needed):
        gk = g
        if axis is None:
            gk = reshape(g, (1,) * len(src)) if src else g
        elif not keepdims:
            kshape = list(src)
            kshape[axis] = 1
            gk = reshape(g, tuple(kshape))
        return (mul(broadcast_to(gk, src), lift(t, onehot)),)

    return t._emit(out, (a,), vjp)


def _unary(t, a, out, dlocal_builder) -> Var:
    def vjp(g, needed):
        return (mul(g, dlocal_builder()),)

    return t._emit(out, (a,), vjp)


def sin(a) -> Var:
    t = _tape_of(a)
    a = lift(t, a)
    return _unary(t, a, np.sin(a.value), lambda: cos(a))


def cos(a) -> Var:
    t = _tape_of(a)
    a = lift(t, a)
    return _unary(t, a, np.cos(a.value), lambda: neg(sin(a)))


def exp(a) -> Var:
    t = _tape_of(a)
    a = lift(t, a)
    out = np.exp(a.value)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp: overflow to non-finite values")
    v = t._emit(out, (a,), None)

    def vjp(g, needed):
        return (mul(g, v),)

    v.vjp = vjp if v.requires_grad else None
    return v


def log(a) -> Var:
    t = _tape_of(a)
    a = lift(t, a)
    if a.requires_grad and np.any(a.value <= 0.0):
        raise DomainError("log: non-positive input with gradient required")
    out = np.log(a.value)
    if not np.all(np.isfinite(out)):
        raise DomainError("log: non-finite result (non-positive input)")

    def vjp(g, needed):
        return (div(g, a),)

    return t._emit(out, (a,), vjp)


def sqrt(a) -> Var:
    t = _tape_of(a)
    a = lift(t, a)
    if a.requires_grad and np.any(a.value <= 0.0):
        raise DomainError("sqrt: non-positive input with gradient required")
    if np.any(a.value < 0.0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(a.value)
    v = t._emit(out, (a,), None)

    def vjp(g, needed):
        return (div(g, mul(v, lift(t, DTYPE(2.0)))),)

    v.vjp = vjp if v.requires_grad else None
    return v


def _sigmoid_value(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Var:
    t = _tape_of(a)
    a = lift(t, a)
    out = _sigmoid_value(a.value)
    v = t._emit(out, (a,), None)

    def vjp(g, needed):
        one = lift(t, DTYPE(1.0))
        return (mul(g, mul(v, sub(one, v))),)

    v.vjp = vjp if v.requires_grad else None
    return v


def abs_(a) -> Var:
    """|x| with subgradient 0 at x == 0."""
    t = _tape_of(a)
    a = lift(t, a)
    out = np.abs(a.value)
    sign = np.sign(a.value).astype(DTYPE)

    def vjp(g, needed):
        return (mul(g, lift(t, sign)),)

    return t._emit(out, (a,), vjp)


def power(a, p: float) -> Var:
    t = _tape_of(a)
    a = lift(t, a)
    p = float(p)
    if p != int(p) and np.any(a.value < 0.0):
        raise DomainError(f"power: fractional exponent {p} on negative input")
    if p < 0 and np.any(a.value == 0.0):
        raise DomainError(f"power: exponent {p} at zero")
    out = np.power(a.value, DTYPE(p))
    if not np.all(np.isfinite(out)):
        raise DomainError(f"power: non-finite result for exponent {p}")

    def vjp(g, needed):
        return (mul(g, mul(power(a, p - 1.0), lift(t, DTYPE(p)))),)

    return t._emit(out, (a,), vjp)


def relu(a) -> Var:
    t = _tape_of(a)
    a = lift(t, a)
    out = np.maximum(a.value, DTYPE(0.0))
    mask = (a.value > 0.0).astype(DTYPE)

    def vjp(g, needed):
        return (mul(g, lift(t, mask)),)

    return t._emit(out, (a,), vjp)


def _softplus_value(x: np.ndarray, beta: float) -> np.ndarray:
    bx = beta * x
    return (np.maximum(bx, 0.0) + np.log1p(np.exp(-np.abs(bx)))).astype(DTYPE) / DTYPE(beta)


def softplus(a, beta: float = 1.0) -> Var:
    """softplus(x) = log(1 + exp(beta x)) / beta, numerically stable."""
    t = _tape_of(a)
    a = lift(t, a)
    beta = float(beta)
    out = _softplus_value(a.value, beta)

    def vjp(g, needed):
        return (mul(g, sigmoid(mul(a, lift(t, DTYPE(beta))))),)

    return t._emit(out, (a,), vjp)


def clamp(a, lo: float, hi: float) -> Var:
    """Clamp to [lo, hi]; gradient passes only where no clamping occurred."""
    t = _tape_of(a)
    a = lift(t, a)
    out = np.clip(a.value, DTYPE(lo), DTYPE(hi))
    mask = ((a.value >= lo) & (a.value <= hi)).astype(DTYPE)

    def vjp(g, needed):
        return (mul(g, lift(t, mask)),)

    return t._emit(out, (a,), vjp)


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    if not parts:
        raise ShapeError("concat: empty input list")
    t = _tape_of(*parts)
    parts = [lift(t, p) for p in parts]
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[p.value.shape for p in parts]}") from e
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g, needed):
        grads = []
        for i in range(len(parts)):
            if not needed[i]:
                grads.append(None)
                continue
            key = [slice(None)] * out.ndim
            key[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(slice_(g, tuple(key)))
        return tuple(grads)

    return t._emit(out, tuple(parts), vjp)


def slice_(a, key) -> Var:
    t = _tape_of(a)
    a = lift(t, a)
    out = np.ascontiguousarray(a.value[key])
    src = a.value.shape

    def vjp(g, needed):
        return (unslice(g, key, src),)

    return t._emit(out, (a,), vjp)


def unslice(g, key, shape) -> Var:
    """Embed ``g`` into zeros of ``shape`` at ``key`` (adjoint of slice_)."""
    t = _tape_of(g)
    g = lift(t, g)
    out = np.zeros(shape, dtype=DTYPE)
    out[key] = g.value

    def vjp(gg, needed):
        return (slice_(gg, key),)

    return t._emit(out, (g,), vjp)


def gather_rows(a, index: np.ndarray) -> Var:
    """Select rows of a 2-D Var by integer index (duplicates allowed)."""
    t = _tape_of(a)
    a = lift(t, a)
    if a.value.ndim != 2:
        raise ShapeError(f"gather_rows: expects 2-D, got {a.value.shape}")
    index = np.asarray(index, dtype=np.int64)
    out = a.value[index]
    n = a.value.shape[0]

    def vjp(g, needed):
        return (scatter_rows(g, index, n),)

    return t._emit(out, (a,), vjp)


def scatter_rows(g, index: np.ndarray, nrows: int) -> Var:
    """Adjoint of gather_rows: accumulate rows of ``g`` into ``nrows`` slots."""
    t = _tape_of(g)
    g = lift(t, g)
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((nrows, g.value.shape[1]), dtype=DTYPE)
    np.add.at(out, index, g.value)

    def vjp(gg, needed):
        return (gather_rows(gg, index),)

    return t._emit(out, (g,), vjp)


def _conv_geometry(h: int, w: int, k: int, stride: int, pad: int):
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    return ho, wo


def _im2col_value(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    c, h, w = x.shape
    ho, wo = _conv_geometry(h, w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, k, k, ho, wo), dtype=DTYPE)
    for a in range(k):
        for b in range(k):
            cols[:, a, b] = xp[:, a:a + ho * stride:stride, b:b + wo * stride:stride]
    return cols.reshape(c * k * k, ho * wo)


def _col2im_value(cols: np.ndarray, shape, k: int, stride: int, pad: int) -> np.ndarray:
    c, h, w = shape
    ho, wo = _conv_geometry(h, w, k, stride, pad)
    colsr = cols.reshape(c, k, k, ho, wo)
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    for a in range(k):
        for b in range(k):
            xp[:, a:a + ho * stride:stride, b:b + wo * stride:stride] += colsr[:, a, b]
    return xp[:, pad:pad + h, pad:pad + w] if pad else xp


def im2col(a, k: int, stride: int, pad: int) -> Var:
    """Unfold (C, H, W) into (C*k*k, Ho*Wo) patch columns for convolution."""
    t = _tape_of(a)
    a = lift(t, a)
    if a.value.ndim != 3:
        raise ShapeError(f"im2col: expects (C, H, W), got {a.value.shape}")
    out = _im2col_value(a.value, k, stride, pad)
    src = a.value.shape

    def vjp(g, needed):
        return (col2im(g, src, k, stride, pad),)

    return t._emit(out, (a,), vjp)


def col2im(g, shape, k: int, stride: int, pad: int) -> Var:
    t = _tape_of(g)
    g = lift(t, g)
    out = _col2im_value(g.value, shape, k, stride, pad)

    def vjp(gg, needed):
        return (im2col(gg, k, stride, pad),)

    return t._emit(out, (g,), vjp)


# ---------------------------------------------------------------------
# backward passes
# ---------------------------------------------------------------------

def _backprop(output: Var, wrt_ids: set[int] | None, record: bool) -> dict[int, Var]:
    """Shared reverse traversal.

    Propagates only into nodes that can reach a target: targets are
    ``wrt_ids`` when given, otherwise every requires-grad node.  Returns
    accumulated gradients keyed by node id.
    """
    tape = output.tape
    if not tape._alive:
        raise TapeError("backward on a closed (detached) tape")
    if output.nid is None:
        raise TapeError("backward on an unrecorded Var")
    if output.value.size != 1:
        raise TapeError(f"backward requires a scalar output, got shape {output.value.shape}")

    if record and not tape._recording:
        raise TapeError("grad(create_graph=True) requires an actively recording tape")

    n = output.nid + 1
    if wrt_ids is None:
        relevant = None  # requires_grad flags already encode reachability
    else:
        relevant = np.zeros(n, dtype=bool)
        for i in wrt_ids:
            if i is not None and i < n:
                relevant[i] = True
        for nid in range(n):
            node = tape._nodes[nid]
            if node.parents:
                for p in node.parents:
                    if p.nid is not None and p.nid < n and relevant[p.nid]:
                        relevant[nid] = True
                        break

    def _is_target_path(node: Var) -> bool:
        if relevant is None:
            return node.requires_grad
        return bool(relevant[node.nid])

    grads: dict[int, Var] = {}
    seed = tape.var(np.ones_like(output.value)) if record else Var(tape, np.ones_like(output.value), None, False)
    grads[output.nid] = seed

    ctx = tape.paused() if not record else _NullCtx()
    with ctx:
        for nid in range(output.nid, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = tape._nodes[nid]
            if node.nid in _collect_ids(wrt_ids) or (relevant is None and node.requires_grad and not node.parents):
                grads[nid] = g  # keep: it's an answer
            if not node.parents or node.vjp is None:
                continue
            needed = tuple(
                p.nid is not None and p.nid <= output.nid and _is_target_path(p)
                for p in node.parents
            )
            if not any(needed):
                continue
            pgrads = node.vjp(g, needed)
            for p, pg in zip(node.parents, pgrads):
                if pg is None:
                    continue
                prev = grads.get(p.nid)
                grads[p.nid] = pg if prev is None else add(prev, pg)
    return grads


class _NullCtx:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


def _collect_ids(wrt_ids):
    return wrt_ids if wrt_ids is not None else ()


def backward(output: Var) -> dict[int, np.ndarray]:
    """Gradient of a scalar output w.r.t. every requires-grad leaf.

    Returns a map node-id -> float32 array; leaves the output does not
    reach get zeros.  Runs with recording paused.
    """
    tape = output.tape
    grads = _backprop(output, None, record=False)
    result: dict[int, np.ndarray] = {}
    for nid in tape._leaf_ids:
        leaf = tape._nodes[nid]
        g = grads.get(nid) if nid <= output.nid else None
        result[nid] = g.value if g is not None else np.zeros_like(leaf.value)
    return result


def grad(output: Var, wrt: Sequence[Var], create_graph: bool = False) -> list[Var]:
    """Gradients of a scalar output w.r.t. selected Vars.

    With ``create_graph=True`` the VJP computation is recorded on the
    tape, so the returned Vars are differentiable (used for the spatial
    SDF gradient feeding the Eikonal penalty and surface normals).
    """
    ids = {v.nid for v in wrt if v.nid is not None}
    grads = _backprop(output, ids, record=create_graph)
    out = []
    tape = output.tape
    for v in wrt:
        g = grads.get(v.nid) if v.nid is not None else None
        if g is None:
            zero = np.zeros_like(v.value)
            g = tape.var(zero) if create_graph else Var(tape, zero, None, False)
        out.append(g)
    return out


# ---------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------

class AdamState:
    """Per-parameter Adam moments with bias correction.

    Slots are created lazily by parameter name, so parameter groups that
    participate only in some steps keep consistent step counts.
    """

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.slots: dict[str, dict] = {}

    def slot(self, name: str, param: np.ndarray) -> dict:
        s = self.slots.get(name)
        if s is None:
            s = {"m": np.zeros_like(param), "v": np.zeros_like(param), "t": 0}
            self.slots[name] = s
        if s["m"].shape != param.shape:
            raise ShapeError(f"adam: slot {name!r} shape {s['m'].shape} != param {param.shape}")
        return s


def adam_step(state: AdamState, params: dict[str, Var], grads: dict[int, np.ndarray],
              lr: float | None = None) -> None:
    """One Adam update, in place on the parameter arrays.

    ``grads`` is the node-id-keyed map from :func:`backward`; every
    parameter must have an entry.
    """
    lr = state.lr if lr is None else float(lr)
    b1, b2, eps = state.beta1, state.beta2, state.eps
    for name in sorted(params):
        p = params[name]
        if p.nid not in grads:
            raise AdError(f"adam: missing gradient for parameter {name!r}")
        g = grads[p.nid]
        s = state.slot(name, p.value)
        s["t"] += 1
        t = s["t"]
        s["m"] = b1 * s["m"] + (1.0 - b1) * g
        s["v"] = b2 * s["v"] + (1.0 - b2) * (g * g)
        mhat = s["m"] / DTYPE(1.0 - b1 ** t)
        vhat = s["v"] / DTYPE(1.0 - b2 ** t)
        p.value -= (DTYPE(lr) * mhat / (np.sqrt(vhat) + DTYPE(eps))).astype(DTYPE)


def clip_gradients(grads: dict[int, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global l2 norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = DTYPE(max_norm / norm)
        for nid in grads:
            grads[nid] = grads[nid] * scale
    return norm


def checksum(arr: np.ndarray) -> int:
    """CRC32 of an array's little-endian float32 payload."""
    return zlib.crc32(np.ascontiguousarray(arr, dtype="<f4").tobytes())
