"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything is built on numpy arrays in row-major order. Operations run
eagerly; when a Tape is active (``with Tape() as tape:``) each op that
touches a grad-requiring tensor records a backward rule, and
``tape.backward(loss)`` replays the records in reverse to accumulate
gradients into the ``.grad`` of every leaf tensor with
``requires_grad=True``.

Tapes are thread-confined: the active tape lives in thread-local state,
so independent tapes may run in parallel threads without sharing state.
"""

from __future__ import annotations

import struct
import threading
from typing import BinaryIO, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError

BCE_EPS = 1e-7
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LEAKY_SLOPE = 0.2

_local = threading.local()

_check_finite = False


def set_check_finite(flag: bool) -> None:
    """Globally enable/disable NaN/Inf checks on every op output (slow)."""
    global _check_finite
    _check_finite = bool(flag)


class Tensor:
    """A dense float64 array plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of operations for one reverse pass.

    Inputs of an operation always precede it on the tape, so a single
    reverse traversal visits each record exactly once.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        if getattr(_local, "tape", None) is not None:
            raise ConfigError("a Tape is already active in this thread")
        _local.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _local.tape = None

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self._records.append((output, inputs, backward))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

        Gradients add onto whatever is already in ``.grad``; callers reset
        with :func:`zero_grad` before each backward.
        """
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(out) for out, _, _ in self._records}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = backward(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if id(t) in grads:
                    grads[id(t)] += gi
                elif id(t) in produced:
                    grads[id(t)] = gi
                else:  # leaf: deposit
                    if t.grad is None:
                        t.grad = np.array(gi, dtype=np.float64)
                    else:
                        t.grad += gi


def active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


def zero_grad(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _out(data: np.ndarray, requires_grad: bool) -> Tensor:
    if _check_finite and not np.all(np.isfinite(data)):
        raise NumericalError("non-finite value produced by a forward op")
    return Tensor(data, requires_grad=requires_grad)


def _maybe_record(out: Tensor, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-D tensors")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out = _out(a.data @ b.data, a.requires_grad or b.requires_grad)

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _maybe_record(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as e:
        raise DimensionError(f"add shapes incompatible: {a.shape} + {b.shape}") from e
    out = _out(data, a.requires_grad or b.requires_grad)

    def backward(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _maybe_record(out, (a, b), backward)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as e:
        raise DimensionError(f"hadamard shapes incompatible: {a.shape} * {b.shape}") from e
    out = _out(data, a.requires_grad or b.requires_grad)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _maybe_record(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    out = _out(a.data * s, a.requires_grad)

    def backward(g):
        return (g * s,)

    return _maybe_record(out, (a,), backward)


def relu(x: Tensor) -> Tensor:
    out = _out(np.maximum(x.data, 0.0), x.requires_grad)

    def backward(g):
        return (g * (x.data > 0.0),)

    return _maybe_record(out, (x,), backward)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    out = _out(np.where(x.data > 0.0, x.data, slope * x.data), x.requires_grad)

    def backward(g):
        return (g * np.where(x.data > 0.0, 1.0, slope),)

    return _maybe_record(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = _out(s, x.requires_grad)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _maybe_record(out, (x,), backward)


def dropout(x: Tensor, p: float, rng, training: bool) -> Tensor:
    """Inverted dropout; exact identity in inference mode.

    ``rng`` is an int seed or a numpy Generator; surviving entries are
    scaled by 1/(1-p) so the expected output equals the input.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    gen = np.random.default_rng(rng) if isinstance(rng, int) else rng
    keep = (gen.random(x.shape) >= p) / (1.0 - p)
    out = _out(x.data * keep, x.requires_grad)

    def backward(g):
        return (g * keep,)

    return _maybe_record(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat shapes incompatible along axis {axis}") from e
    out = _out(data, any(t.requires_grad for t in tensors))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, tensors))

    return _maybe_record(out, tuple(tensors), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _out(x.data.reshape(shape), x.requires_grad)

    def backward(g):
        return (g.reshape(x.shape),)

    return _maybe_record(out, (x,), backward)


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError("transpose2d expects a 2-D tensor")
    out = _out(x.data.T, x.requires_grad)

    def backward(g):
        return (g.T,)

    return _maybe_record(out, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out = _out(np.asarray(x.data.sum()), x.requires_grad)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _maybe_record(out, (x,), backward)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over axis 0, keeping a leading dim: (n, d) -> (1, d)."""
    if x.data.ndim != 2:
        raise DimensionError("mean_rows expects a 2-D tensor")
    n = x.shape[0]
    out = _out(x.data.mean(axis=0, keepdims=True), x.requires_grad)

    def backward(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _maybe_record(out, (x,), backward)


# ---------------------------------------------------------------------------
# indexing / segments


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of x: out[i] = x[idx[i]]. Backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    out = _out(x.data[idx], x.requires_grad)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _maybe_record(out, (x,), backward)


def segment_sum(x: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of x into per-segment buckets: out[s] = sum of x rows with id s."""
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape[0] != x.shape[0]:
        raise DimensionError("segment ids must match the leading dim of x")
    data = np.zeros((num_segments,) + x.shape[1:], dtype=np.float64)
    np.add.at(data, segments, x.data)
    out = _out(data, x.requires_grad)

    def backward(g):
        return (g[segments],)

    return _maybe_record(out, (x,), backward)


def segment_softmax(logits: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Softmax within each segment (numerically stable via max-subtraction).

    Works columnwise for 2-D logits; segment ids index axis 0. Every
    segment referenced by an output entry has at least one member by
    construction, so empty buckets are never read.
    """
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape[0] != logits.shape[0]:
        raise DimensionError("segment ids must match the leading dim of logits")
    d = logits.data
    tail = d.shape[1:]
    m = np.full((num_segments,) + tail, -np.inf)
    np.maximum.at(m, segments, d)
    e = np.exp(d - m[segments])
    denom = np.zeros((num_segments,) + tail)
    np.add.at(denom, segments, e)
    y = e / denom[segments]
    out = _out(y, logits.requires_grad)

    def backward(g):
        gy = g * y
        dots = np.zeros((num_segments,) + tail)
        np.add.at(dots, segments, gy)
        return (gy - y * dots[segments],)

    return _maybe_record(out, (logits,), backward)


# ---------------------------------------------------------------------------
# normalization / loss


class BatchNormState:
    """Running statistics for one batch_norm site."""

    def __init__(self, dim: int):
        self.running_mean = np.zeros(dim, dtype=np.float64)
        self.running_var = np.ones(dim, dtype=np.float64)

    def copy(self) -> "BatchNormState":
        dup = BatchNormState(self.running_mean.shape[0])
        dup.running_mean = self.running_mean.copy()
        dup.running_var = self.running_var.copy()
        return dup


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool) -> Tensor:
    """Normalize columns of x, then apply the learnable affine gamma/beta.

    Training mode uses batch statistics and folds them into the running
    stats with momentum 0.1; inference mode uses the running stats only.
    """
    if x.data.ndim != 2:
        raise DimensionError("batch_norm expects a (batch, dim) tensor")
    dim = x.shape[1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise DimensionError("batch_norm affine params must have shape (dim,)")
    if training:
        n = x.shape[0]
        if n < 2:
            raise DimensionError(f"batch_norm needs batch size >= 2 in training mode, got {n}")
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        state.running_mean = (1 - BN_MOMENTUM) * state.running_mean + BN_MOMENTUM * mean
        state.running_var = (1 - BN_MOMENTUM) * state.running_var + BN_MOMENTUM * var
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mean) * inv_std
    out = _out(xhat * gamma.data + beta.data,
               x.requires_grad or gamma.requires_grad or beta.requires_grad)

    def backward(g):
        ggamma = (g * xhat).sum(axis=0) if gamma.requires_grad else None
        gbeta = g.sum(axis=0) if beta.requires_grad else None
        if not x.requires_grad:
            return None, ggamma, gbeta
        gxhat = g * gamma.data
        if training:
            n = x.shape[0]
            gx = inv_std / n * (n * gxhat - gxhat.sum(axis=0)
                                - xhat * (gxhat * xhat).sum(axis=0))
        else:
            gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return _maybe_record(out, (x, gamma, beta), backward)


def bce(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; predictions clamped to [eps, 1-eps]."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    t = np.broadcast_to(t, pred.shape)
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    loss = np.asarray(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean())
    out = _out(loss, pred.requires_grad)
    inside = (pred.data > BCE_EPS) & (pred.data < 1.0 - BCE_EPS)

    def backward(g):
        n = pred.size
        gp = np.where(inside, (-t / p + (1.0 - t) / (1.0 - p)) / n, 0.0)
        return (g * gp,)

    return _maybe_record(out, (pred,), backward)


# ---------------------------------------------------------------------------
# serialization: little-endian float64 with a shape header


def write_array(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype("<f8").tobytes())


def read_array(fh: BinaryIO) -> np.ndarray:
    (ndim,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(8 * count), dtype="<f8")
    return data.reshape(shape).astype(np.float64)
