"""Dense float tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array (float32 by default, float64 for the
gradient-check tooling).  While a ``Tape`` is active, every primitive that
touches a grad-requiring tensor records itself onto the tape; ``backward``
replays the records in reverse and returns a gradient for every leaf that
requested one.  With no tape active the same primitives run as plain numpy,
so inference costs nothing extra.

Only the operations the model actually needs are provided; broadcasting is
supported for the elementwise ops (gradients are summed back to the input
shapes), while ``matmul`` is strictly two-dimensional.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError

_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    """The innermost tape on this thread, or None outside any ``with Tape()``."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Record:
    """One recorded primitive: output node, input nodes, backward rule."""

    __slots__ = ("out_id", "in_ids", "backward")

    def __init__(self, out_id, in_ids, backward):
        self.out_id = out_id
        self.in_ids = in_ids
        self.backward = backward


class Tape:
    """Wengert list of primitive applications for one forward pass.

    Records are appended in execution order, so every node's inputs precede
    it; the backward sweep walks the list once, in reverse.  A tape is
    confined to the thread that opened it.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._next_id = 0
        self._leaf_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def _register_leaf(self, tensor: "Tensor") -> Optional[int]:
        if not tensor.requires_grad:
            return None
        node_id = self._next_id
        self._next_id += 1
        self._leaf_ids.add(node_id)
        tensor.node_id = node_id
        tensor._tape = self
        return node_id

    def _record(self, in_ids, backward) -> int:
        out_id = self._next_id
        self._next_id += 1
        self._records.append(_Record(out_id, in_ids, backward))
        return out_id

    def gradients(self, loss: "Tensor") -> dict[int, "Tensor"]:
        """Reverse sweep from ``loss``; see the module-level ``backward``."""
        if loss._tape is not self or loss.node_id is None:
            raise ContractError("loss is not connected to this tape")
        if loss.data.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )
        grads: dict[int, np.ndarray] = {
            loss.node_id: np.ones_like(loss.data)
        }
        for rec in reversed(self._records):
            gout = grads.pop(rec.out_id, None)
            if gout is None:
                continue
            for in_id, gin in zip(rec.in_ids, rec.backward(gout)):
                if in_id is None or gin is None:
                    continue
                acc = grads.get(in_id)
                if acc is None:
                    grads[in_id] = gin
                else:
                    grads[in_id] = acc + gin
        return {
            node_id: Tensor(g)
            for node_id, g in grads.items()
            if node_id in self._leaf_ids
        }


ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """Dense n-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "node_id", "_tape")

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 dtype=None):
        if isinstance(data, (np.ndarray, np.generic)):
            # 0-d results of numpy ops arrive as scalars; keep their dtype
            arr = np.asarray(data)
            if dtype is not None and arr.dtype != dtype:
                arr = arr.astype(dtype)
            elif arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        else:
            arr = np.asarray(data, dtype=dtype or np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad})"

    # operator sugar; constants are adopted at the tensor's dtype
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tensor_sum(self, axis=axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis=axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _node_ids(tape: Optional[Tape], *tensors: Tensor):
    """Node ids of the inputs under ``tape``; registers leaves on first use."""
    ids = []
    for t in tensors:
        if t._tape is tape and t.node_id is not None:
            ids.append(t.node_id)
        elif t.requires_grad and tape is not None:
            ids.append(tape._register_leaf(t))
        else:
            ids.append(None)
    return ids


def _apply(out_data: np.ndarray, inputs: Sequence[Tensor],
           backward: Callable) -> Tensor:
    """Wrap an op result, recording it when a tape is live for its inputs."""
    tape = active_tape()
    needs = any(t.requires_grad or (t._tape is tape and t.node_id is not None)
                for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if tape is not None and needs:
        in_ids = _node_ids(tape, *inputs)
        if any(i is not None for i in in_ids):
            out.node_id = tape._record(in_ids, backward)
            out._tape = tape
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original input shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out = a.data + b.data
    ash, bsh = a.shape, b.shape

    def bwd(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _apply(out, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out = a.data - b.data
    ash, bsh = a.shape, b.shape

    def bwd(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _apply(out, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _apply(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _apply(-a.data, (a,), lambda g: (-g,))


def silu(x: Tensor) -> Tensor:
    """Elementwise x * sigmoid(x)."""
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig
    xd = x.data

    def bwd(g):
        return (g * (sig * (1.0 + xd * (1.0 - sig))),)

    return _apply(out, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tensor_sum(x: Tensor, axis=None) -> Tensor:
    # accumulate in float64 for accuracy, return at the input dtype
    out = np.sum(x.data, axis=axis, dtype=np.float64).astype(x.dtype)
    shape = x.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        ge = np.expand_dims(g, axis)
        return (np.broadcast_to(ge, shape).copy(),)

    return _apply(np.asarray(out), (x,), bwd)


def tensor_mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tensor_sum(x, axis=axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def bwd(g):
        return (g.reshape(old),)

    return _apply(x.data.reshape(shape), (x,), bwd)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-d tensor, got {x.shape}")

    def bwd(g):
        return (g.T.copy(),)

    return _apply(x.data.T.copy(), (x,), bwd)


def permute(x: Tensor, axes) -> Tensor:
    """Reorder axes; the result is materialized contiguous."""
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise DimensionError(
            f"permute axes {axes} do not index a rank-{x.data.ndim} tensor"
        )
    inverse = np.argsort(axes)

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _apply(np.ascontiguousarray(x.data.transpose(axes)), (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _apply(out, tuple(tensors), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if start < 0 or start + length > x.shape[axis]:
        raise DimensionError(
            f"narrow [{start}:{start + length}) out of range for axis {axis} "
            f"of shape {x.shape}"
        )
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    shape = x.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _apply(x.data[index].copy(), (x,), bwd)


# ---------------------------------------------------------------------------
# matmul / conv
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-d matrix product; dA = dC @ B^T, dB = A^T @ dC."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: {a.shape} @ {b.shape}"
        )
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _apply(ad @ bd, (a, b), bwd)


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation over (C_in, L) with weight (C_out, C_in, K).

    L_out = floor((L + 2*padding - K) / stride) + 1.  Gradients are defined
    for x, w and b.
    """
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise DimensionError(
            f"conv1d expects x (C_in, L) and w (C_out, C_in, K), "
            f"got {x.shape} and {w.shape}"
        )
    c_out, c_in, k = w.shape
    if x.shape[0] != c_in:
        raise DimensionError(
            f"conv1d channel mismatch: x has {x.shape[0]}, w expects {c_in}"
        )
    length = x.shape[1]
    if length + 2 * padding < k:
        raise DimensionError(
            f"conv1d kernel {k} larger than padded input {length + 2 * padding}"
        )
    if b.shape != (c_out,):
        raise DimensionError(f"conv1d bias must be ({c_out},), got {b.shape}")
    l_out = (length + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding))) if padding else x.data
    out = np.empty((c_out, l_out), dtype=x.dtype)
    out[:] = b.data[:, None]
    hi = stride * (l_out - 1) + 1
    for kk in range(k):
        out += w.data[:, :, kk] @ xp[:, kk:kk + hi:stride]
    wd, xpd = w.data, xp

    def bwd(g):
        db = g.sum(axis=1)
        dw = np.empty_like(wd)
        dxp = np.zeros_like(xpd)
        for kk in range(k):
            seg = xpd[:, kk:kk + hi:stride]
            dw[:, :, kk] = g @ seg.T
            dxp[:, kk:kk + hi:stride] += wd[:, :, kk].T @ g
        dx = dxp[:, padding:padding + length] if padding else dxp
        return np.ascontiguousarray(dx), dw, db

    return _apply(out, (x, w, b), bwd)


def conv_transpose1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Transposed convolution; weight is (C_in, C_out, K).

    L_out = (L - 1) * stride - 2 * padding + K.
    """
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise DimensionError(
            f"conv_transpose1d expects x (C_in, L) and w (C_in, C_out, K), "
            f"got {x.shape} and {w.shape}"
        )
    c_in, c_out, k = w.shape
    if x.shape[0] != c_in:
        raise DimensionError(
            f"conv_transpose1d channel mismatch: x has {x.shape[0]}, "
            f"w expects {c_in}"
        )
    length = x.shape[1]
    l_out = (length - 1) * stride - 2 * padding + k
    if l_out < 1:
        raise DimensionError(
            f"conv_transpose1d output length {l_out} < 1 for input {x.shape}"
        )
    full = np.zeros((c_out, (length - 1) * stride + k), dtype=x.dtype)
    hi = stride * (length - 1) + 1
    for kk in range(k):
        full[:, kk:kk + hi:stride] += w.data[:, :, kk].T @ x.data
    out = full[:, padding:padding + l_out] + b.data[:, None]
    wd, xd = w.data, x.data

    def bwd(g):
        db = g.sum(axis=1)
        gfull = np.zeros((c_out, (length - 1) * stride + k), dtype=g.dtype)
        gfull[:, padding:padding + l_out] = g
        dx = np.zeros_like(xd)
        dw = np.empty_like(wd)
        for kk in range(k):
            seg = gfull[:, kk:kk + hi:stride]
            dx += wd[:, :, kk] @ seg
            dw[:, :, kk] = xd @ seg.T
        return dx, dw, db

    return _apply(np.ascontiguousarray(out), (x, w, b), bwd)


# ---------------------------------------------------------------------------
# softmax / normalization
# ---------------------------------------------------------------------------

def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    denom = np.sum(e, axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
    y = e / denom

    def bwd(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _apply(y, (x,), bwd)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """GroupNorm over (C, L): normalize per group, affine per channel."""
    if x.data.ndim != 2:
        raise DimensionError(f"group_norm expects (C, L), got {x.shape}")
    c, length = x.shape
    if groups < 1 or c % groups != 0:
        raise ConfigurationError(
            f"groups={groups} must divide channel count {c}"
        )
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"group_norm affine must be ({c},), got {gamma.shape} / {beta.shape}"
        )
    xg = x.data.reshape(groups, -1)
    mean = xg.mean(axis=1, keepdims=True, dtype=np.float64)
    var = ((xg.astype(np.float64) - mean) ** 2).mean(axis=1, keepdims=True)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    mean = mean.astype(x.dtype)
    xhat = ((xg - mean) * inv_std).reshape(c, length)
    out = gamma.data[:, None] * xhat + beta.data[:, None]
    gd = gamma.data

    def bwd(g):
        dgamma = (g * xhat).sum(axis=1)
        dbeta = g.sum(axis=1)
        dxhat = (g * gd[:, None]).reshape(groups, -1)
        xh = xhat.reshape(groups, -1)
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xh).mean(axis=1, keepdims=True)
        dx = (inv_std * (dxhat - m1 - xh * m2)).reshape(c, length)
        return dx, dgamma, dbeta

    return _apply(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# backward entry point
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> dict[int, Tensor]:
    """Gradients of a scalar ``loss`` for every grad-requiring leaf.

    Returns {node_id -> gradient Tensor}; look leaves up by their
    ``node_id`` assigned during the taped forward pass.  Fan-out is
    accumulated; tensors with requires_grad=False never appear.
    """
    tape = loss._tape
    if tape is None:
        raise ContractError("loss is not connected to a tape")
    return tape.gradients(loss)
