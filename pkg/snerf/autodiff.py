"""
Autodiff
========

Reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded on a `Tape` in execution order; `Tape.backward`
walks the records in reverse exactly once and returns the gradient of a
scalar loss with respect to every parameter registered on the tape. A
tape created with `record=False` evaluates the same operations without
keeping any backward state (used for rendering).

Also holds the Adam optimizer and the flat binary checkpoint format.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import numpy.typing as npt

from snerf.utils import SNerfError

LOGGER = logging.getLogger(__name__)

Array = npt.NDArray[np.float64]
Backward = Callable[[Array], Sequence['Array | None']]

CHECKPOINT_MAGIC = b'SNERFCKP'
CHECKPOINT_VERSION = 1


class AutodiffError(SNerfError):
    pass


class Value:
    """A node on a tape: an immutable float64 array plus its node id."""

    __slots__ = ('_data', 'id', 'tape')

    def __init__(self, data: Array, node_id: int, tape: Tape) -> None:
        data.flags.writeable = False
        self._data = data
        self.id = node_id
        self.tape = tape

    @property
    def data(self) -> Array:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self._data.shape)

    def __repr__(self) -> str:
        return f'Value(shape={self.shape}, id={self.id})'

    def _lift(self, other: Value | float | Array) -> Value:
        if isinstance(other, Value):
            return other
        return self.tape.constant(other)

    def __add__(self, other: Value | float | Array) -> Value:
        return add(self, self._lift(other))

    def __radd__(self, other: float | Array) -> Value:
        return add(self._lift(other), self)

    def __sub__(self, other: Value | float | Array) -> Value:
        return add(self, neg(self._lift(other)))

    def __rsub__(self, other: float | Array) -> Value:
        return add(self._lift(other), neg(self))

    def __mul__(self, other: Value | float | Array) -> Value:
        return mul(self, self._lift(other))

    def __rmul__(self, other: float | Array) -> Value:
        return mul(self._lift(other), self)

    def __neg__(self) -> Value:
        return neg(self)

    def __getitem__(self, key: object) -> Value:
        return index(self, key)


@dataclass
class _Record:
    parents: tuple[int, ...]
    backward: Backward | None


class Tape:
    """Ordered record of operations plus a registry of parameters."""

    def __init__(self, record: bool = True) -> None:
        self.record = record
        self._records: list[_Record] = []
        self._params: dict[str, Value] = {}
        self._consumed = False

    def __len__(self) -> int:
        return len(self._records)

    def _push(
        self,
        data: Array,
        parents: tuple[Value, ...] = (),
        backward: Backward | None = None,
        op: str = 'constant',
    ) -> Value:
        if self._consumed:
            raise AutodiffError(
                'Tape already used for a backward pass; record a new one.'
            )
        data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise AutodiffError(f'Non-finite values produced by {op}.')
        for p in parents:
            if p.tape is not self:
                raise AutodiffError(
                    f'{op}: operands recorded on another tape.'
                )
        if not self.record:
            return Value(data, -1, self)
        node_id = len(self._records)
        self._records.append(
            _Record(
                tuple(p.id for p in parents),
                backward if parents else None,
            )
        )
        return Value(data, node_id, self)

    def constant(self, data: Array | float) -> Value:
        return self._push(np.array(data, dtype=np.float64))

    def parameter(self, name: str, data: Array) -> Value:
        """Registers a trainable array; repeated names return the same node."""
        if name in self._params:
            return self._params[name]
        value = self._push(np.array(data, dtype=np.float64), op=name)
        self._params[name] = value
        return value

    @property
    def parameters(self) -> dict[str, Value]:
        return dict(self._params)

    def backward(self, loss: Value) -> dict[str, Array]:
        """Gradients of a scalar loss for every registered parameter.

        Each record is visited once, in reverse insertion order, so the
        accumulation order (and hence the result) is deterministic.
        """
        if not self.record:
            raise AutodiffError('Cannot differentiate a non-recording tape.')
        if self._consumed:
            raise AutodiffError('backward already called on this tape.')
        if loss.tape is not self:
            raise AutodiffError('Loss was recorded on another tape.')
        if loss.shape != ():
            raise AutodiffError(
                f'Loss must be a scalar, not an array of shape {loss.shape}.'
            )
        self._consumed = True
        grads: list[Array | None] = [None] * len(self._records)
        grads[loss.id] = np.ones(())
        for node_id in range(loss.id, -1, -1):
            g = grads[node_id]
            record = self._records[node_id]
            if g is None or record.backward is None:
                continue
            for parent, pg in zip(record.parents, record.backward(g)):
                if pg is None:
                    continue
                current = grads[parent]
                grads[parent] = pg if current is None else current + pg
        result: dict[str, Array] = {}
        for name, value in self._params.items():
            g = grads[value.id]
            result[name] = (
                np.zeros(value.shape) if g is None else np.asarray(g)
            )
        self._records.clear()
        return result


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sums grad over the axes that broadcasting added or stretched."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(*shapes: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(*shapes))
    except ValueError:
        raise AutodiffError(
            f'Shape mismatch: {" vs ".join(map(str, shapes))}'
        )


def add(a: Value, b: Value) -> Value:
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return a.tape._push(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        'add',
    )


def neg(a: Value) -> Value:
    return a.tape._push(-a.data, (a,), lambda g: (-g,), 'neg')


def mul(a: Value, b: Value) -> Value:
    _broadcast_shape(a.shape, b.shape)
    da, db = a.data, b.data
    return a.tape._push(
        da * db,
        (a, b),
        lambda g: (
            _unbroadcast(g * db, da.shape),
            _unbroadcast(g * da, db.shape),
        ),
        'mul',
    )


def square(a: Value) -> Value:
    da = a.data
    return a.tape._push(da * da, (a,), lambda g: (2.0 * da * g,), 'square')


def exp(a: Value) -> Value:
    with np.errstate(over='ignore'):
        y = np.exp(a.data)
    return a.tape._push(y, (a,), lambda g: (g * y,), 'exp')


def sin(a: Value, omega: float = 1.0) -> Value:
    """sin(omega * a)."""
    z = omega * a.data
    return a.tape._push(
        np.sin(z), (a,), lambda g: (g * omega * np.cos(z),), 'sin'
    )


def relu(a: Value) -> Value:
    mask = a.data > 0
    return a.tape._push(
        np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), 'relu'
    )


def sigmoid(a: Value) -> Value:
    e = np.exp(-np.abs(a.data))
    y = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return a.tape._push(
        y, (a,), lambda g: (g * y * (1.0 - y),), 'sigmoid'
    )


def affine(w: Value, b: Value, x: Value) -> Value:
    """x @ w + b over the last axis of x; w has shape (n_in, n_out)."""
    if (
        len(w.shape) != 2
        or x.shape[-1:] != w.shape[:1]
        or b.shape != w.shape[1:]
    ):
        raise AutodiffError(
            f'affine: x {x.shape}, W {w.shape}, b {b.shape} incompatible.'
        )
    dx, dw = x.data, w.data
    n_in, n_out = dw.shape

    def backward(g: Array) -> tuple[Array, Array, Array]:
        g2 = g.reshape(-1, n_out)
        return (
            dx.reshape(-1, n_in).T @ g2,
            g2.sum(axis=0),
            g @ dw.T,
        )

    return x.tape._push(dx @ dw + b.data, (w, b, x), backward, 'affine')


def matmul_const(x: Value, m: Array) -> Value:
    """x @ m for a constant matrix m."""
    return x.tape._push(x.data @ m, (x,), lambda g: (g @ m.T,), 'matmul')


def sum(  # noqa: A001 - mirrors numpy
    a: Value, axis: int | None = None, keepdims: bool = False
) -> Value:
    shape = a.shape

    def backward(g: Array) -> tuple[Array]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape._push(
        a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, 'sum'
    )


def mean(a: Value, axis: int | None = None) -> Value:
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), a.tape.constant(1.0 / count))


def concat(values: Sequence[Value], axis: int = -1) -> Value:
    tape = values[0].tape
    sizes = [v.shape[axis] for v in values]
    try:
        data = np.concatenate([v.data for v in values], axis=axis)
    except ValueError as e:
        raise AutodiffError(f'concat: {e}')
    splits = np.cumsum(sizes)[:-1]
    return tape._push(
        data,
        tuple(values),
        lambda g: tuple(np.split(g, splits, axis=axis)),
        'concat',
    )


def broadcast(a: Value, shape: tuple[int, ...]) -> Value:
    source = a.shape
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise AutodiffError(f'Cannot broadcast {source} to {shape}.')
    return a.tape._push(
        data, (a,), lambda g: (_unbroadcast(g, source),), 'broadcast'
    )


def reshape(a: Value, shape: tuple[int, ...]) -> Value:
    source = a.shape
    return a.tape._push(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(source),), 'reshape'
    )


def index(a: Value, key: object) -> Value:
    """Basic (slice) indexing."""
    source = a.shape

    def backward(g: Array) -> tuple[Array]:
        full = np.zeros(source)
        full[key] += g  # type: ignore[index]
        return (full,)

    return a.tape._push(
        np.array(a.data[key]), (a,), backward, 'index'  # type: ignore[index]
    )


def exclusive_cumprod(a: Value) -> Value:
    """Running products along the last axis, starting from 1.

    For x of shape (..., N) returns P of shape (..., N + 1) with P_0 = 1
    and P_{i+1} = P_i x_i. The backward pass never divides by x.
    """
    x = a.data
    n = x.shape[-1]
    p = np.ones(x.shape[:-1] + (n + 1,))
    for i in range(n):
        p[..., i + 1] = p[..., i] * x[..., i]

    def backward(g: Array) -> tuple[Array]:
        # s_k = sum_{i>k} g_i prod_{k<j<i} x_j, so dL/dx_k = P_k s_k
        s = np.empty_like(x)
        s[..., n - 1] = g[..., n]
        for k in range(n - 2, -1, -1):
            s[..., k] = g[..., k + 1] + x[..., k + 1] * s[..., k + 1]
        return (p[..., :n] * s,)

    return a.tape._push(p, (a,), backward, 'exclusive_cumprod')


def stop_gradient(a: Value) -> Value:
    """Identity forward; contributes no gradient to a's ancestors."""
    return a.tape._push(np.array(a.data), op='stop_gradient')


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Array],
    grads: Mapping[str, Array],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, Array], AdamState]:
    """One bias-corrected Adam update of every parameter with a gradient.

    Parameters without a gradient are returned unchanged. A non-finite
    gradient aborts the step before anything is modified.
    """
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            raise AutodiffError(f'Non-finite gradient for parameter {name}.')
        if name not in params:
            raise AutodiffError(f'Gradient for unknown parameter {name}.')
        if grads[name].shape != params[name].shape:
            raise AutodiffError(
                f'Gradient shape {grads[name].shape} does not match'
                f' parameter {name} {params[name].shape}.'
            )
    step = state.step + 1
    new_params = dict(params)
    new_m, new_v = dict(state.m), dict(state.v)
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for name in sorted(grads):
        g = grads[name]
        m = beta1 * state.m.get(name, np.zeros_like(g)) + (1 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(g)) + (1 - beta2) * g * g
        new_m[name], new_v[name] = m, v
        new_params[name] = params[name] - lr * (m / c1) / (
            np.sqrt(v / c2) + eps
        )
    return new_params, AdamState(step, new_m, new_v)


def save_checkpoint(path: str, arrays: Mapping[str, Array]) -> None:
    """Writes arrays as: magic, version, count, then for each array its
    name length, UTF-8 name, rank, dims and little-endian float64 data."""
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<II', CHECKPOINT_VERSION, len(arrays)))
        for name in sorted(arrays):
            data = np.asarray(arrays[name], dtype='<f8')
            encoded = name.encode('utf-8')
            f.write(struct.pack('<I', len(encoded)))
            f.write(encoded)
            f.write(struct.pack('<I', data.ndim))
            f.write(struct.pack(f'<{data.ndim}Q', *data.shape))
            f.write(data.tobytes(order='C'))
    LOGGER.info(f'Checkpoint written to {path}.')


def load_checkpoint(path: str) -> dict[str, Array]:
    try:
        with open(path, 'rb') as f:
            blob = f.read()
    except OSError as e:
        raise AutodiffError(f'Cannot read checkpoint {path}: {e}')
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise AutodiffError(f'{path} is not a checkpoint file.')
    pos = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from('<II', blob, pos)
    if version != CHECKPOINT_VERSION:
        raise AutodiffError(f'Unsupported checkpoint version {version}.')
    pos += 8
    arrays: dict[str, Array] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from('<I', blob, pos)
            pos += 4
            name = blob[pos : pos + name_len].decode('utf-8')
            pos += name_len
            (rank,) = struct.unpack_from('<I', blob, pos)
            pos += 4
            dims = struct.unpack_from(f'<{rank}Q', blob, pos)
            pos += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            arrays[name] = (
                np.frombuffer(blob, dtype='<f8', count=size, offset=pos)
                .reshape(dims)
                .astype(np.float64)
            )
            pos += 8 * size
    except (struct.error, ValueError) as e:
        raise AutodiffError(f'Truncated checkpoint {path}: {e}')
    return arrays
