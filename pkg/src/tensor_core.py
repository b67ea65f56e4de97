"""
Tensor Core
Dense row-major tensor primitives shared by every other module: axis
permutations, unfold/fold, matrix products, row softmax and channel-wise
linear maps.

All kernels are pure: they never modify their inputs and always return a
fresh, contiguous, read-only float64 buffer.
"""

import contextlib
import contextvars
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

from src.errors import NonFiniteError, ShapeMismatchError

DTYPE = np.float64

# Upper bound on the partial-product block materialised by matmul.
_BLOCK_ELEMENTS = 1 << 20


def _freeze(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


def _as_buffer(data) -> np.ndarray:
    """Adopt read-only contiguous float64 arrays that own their memory, copy everything else."""
    if (
        isinstance(data, np.ndarray)
        and data.base is None
        and data.dtype == DTYPE
        and data.flags.c_contiguous
        and not data.flags.writeable
    ):
        return data
    return _freeze(np.array(data, dtype=DTYPE, order="C", copy=True))


@dataclass(frozen=True)
class FeatureTensor:
    """Dense k-mode tensor (k >= 2) in row-major layout; the channel axis is last."""

    data: np.ndarray

    def __post_init__(self):
        buffer = _as_buffer(self.data)
        if buffer.ndim < 2:
            raise ShapeMismatchError(f"FeatureTensor needs rank >= 2, got rank {buffer.ndim}")
        if buffer.size == 0:
            raise ShapeMismatchError(f"FeatureTensor axes must be positive, got {buffer.shape}")
        object.__setattr__(self, "data", buffer)

    @classmethod
    def from_buffer(cls, shape: Sequence[int], buffer: Sequence[float]) -> "FeatureTensor":
        """Build a tensor from a flat row-major buffer."""
        flat = np.asarray(buffer, dtype=DTYPE).reshape(-1)
        if flat.size != math.prod(shape):
            raise ShapeMismatchError(
                f"buffer of length {flat.size} does not match shape {tuple(shape)}"
            )
        return cls(flat.reshape(tuple(shape)))

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def rank(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def channels(self) -> int:
        return self.data.shape[-1]

    def flat(self) -> np.ndarray:
        """The row-major buffer as a 1-D view."""
        return self.data.reshape(-1)

    def linear_index(self, index: Sequence[int]) -> int:
        """Row-major offset of a multi-index."""
        return int(np.ravel_multi_index(tuple(index), self.shape))


@dataclass(frozen=True)
class Matrix2D:
    """Dense row-major matrix; carrier for unfolded tensors and affinities."""

    data: np.ndarray

    def __post_init__(self):
        buffer = _as_buffer(self.data)
        if buffer.ndim != 2:
            raise ShapeMismatchError(f"Matrix2D needs exactly two axes, got {buffer.shape}")
        if buffer.size == 0:
            raise ShapeMismatchError(f"Matrix2D axes must be positive, got {buffer.shape}")
        object.__setattr__(self, "data", buffer)

    @classmethod
    def identity(cls, n: int) -> "Matrix2D":
        return cls(np.eye(n, dtype=DTYPE))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class Permutation:
    """Bijective reordering of tensor axes; order[i] names the source axis of output axis i."""

    order: Tuple[int, ...]

    def __post_init__(self):
        order = tuple(int(i) for i in self.order)
        if sorted(order) != list(range(len(order))):
            raise ShapeMismatchError(f"{order} is not a permutation of 0..{len(order) - 1}")
        object.__setattr__(self, "order", order)

    @classmethod
    def identity(cls, rank: int) -> "Permutation":
        return cls(tuple(range(rank)))

    @classmethod
    def leading(cls, mode: int, rank: int) -> "Permutation":
        """Permutation that brings `mode` to the front and keeps the rest in order."""
        if not 0 <= mode < rank:
            raise ShapeMismatchError(f"mode {mode} out of range for rank {rank}")
        return cls((mode,) + tuple(i for i in range(rank) if i != mode))

    def __len__(self) -> int:
        return len(self.order)

    @property
    def mode(self) -> int:
        """The axis this permutation brings to the front."""
        return self.order[0]

    def inverse(self) -> "Permutation":
        inv = [0] * len(self.order)
        for position, axis in enumerate(self.order):
            inv[axis] = position
        return Permutation(tuple(inv))

    def compose(self, other: "Permutation") -> "Permutation":
        """Permutation equal to applying self first, then other."""
        if len(other) != len(self):
            raise ShapeMismatchError("cannot compose permutations of different lengths")
        return Permutation(tuple(self.order[i] for i in other.order))


def identity_permutation(rank: int) -> Permutation:
    return Permutation.identity(rank)


def inverse_permutation(p: Permutation) -> Permutation:
    return p.inverse()


def compose(p: Permutation, q: Permutation) -> Permutation:
    return p.compose(q)


# ---------------------------------------------------------------------------
# Operation counting
# ---------------------------------------------------------------------------


@dataclass
class OpCounter:
    """Multiply-add FLOPs (2 per MAC) recorded per phase."""

    flops: Dict[str, int] = field(default_factory=lambda: defaultdict(int))
    calls: Dict[str, int] = field(default_factory=lambda: defaultdict(int))

    @property
    def total(self) -> int:
        return sum(self.flops.values())

    def __getitem__(self, phase: str) -> int:
        return self.flops.get(phase, 0)


_ACTIVE_COUNTER: contextvars.ContextVar[Optional[OpCounter]] = contextvars.ContextVar(
    "fa_op_counter", default=None
)
_ACTIVE_PHASE: contextvars.ContextVar[str] = contextvars.ContextVar(
    "fa_op_phase", default="matmul"
)


@contextlib.contextmanager
def count_ops() -> Iterator[OpCounter]:
    """Count the FLOPs of every matmul executed inside the block."""
    counter = OpCounter()
    token = _ACTIVE_COUNTER.set(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTER.reset(token)


@contextlib.contextmanager
def op_phase(name: str) -> Iterator[None]:
    """Attribute matmul FLOPs inside the block to `name`."""
    token = _ACTIVE_PHASE.set(name)
    try:
        yield
    finally:
        _ACTIVE_PHASE.reset(token)


def _record_flops(flops: int) -> None:
    counter = _ACTIVE_COUNTER.get()
    if counter is not None:
        phase = _ACTIVE_PHASE.get()
        counter.flops[phase] += flops
        counter.calls[phase] += 1


# ---------------------------------------------------------------------------
# Layout operations
# ---------------------------------------------------------------------------


def _check_rank(x: FeatureTensor, p: Permutation) -> None:
    if len(p) != x.rank:
        raise ShapeMismatchError(
            f"permutation {p.order} has length {len(p)} but tensor has rank {x.rank}"
        )


def permute_axes(x: FeatureTensor, p: Permutation) -> FeatureTensor:
    """Reorder axes so that output axis i is input axis p.order[i]."""
    _check_rank(x, p)
    return FeatureTensor(_freeze(np.transpose(x.data, p.order).copy(order="C")))


def unfold(x: FeatureTensor, p: Permutation) -> Matrix2D:
    """
    Unfold a tensor into a matrix along the leading mode of `p`.

    The tensor is permuted by `p` and the contiguous buffer is reinterpreted
    as (x.shape[p.order[0]], product of the remaining axes).
    """
    permuted = permute_axes(x, p)
    rows = permuted.shape[0]
    return Matrix2D(permuted.data.reshape(rows, permuted.size // rows))


def fold(m: Matrix2D, p: Permutation, original_shape: Sequence[int]) -> FeatureTensor:
    """Inverse of unfold: restore the tensor of `original_shape` from its unfolding."""
    original_shape = tuple(int(s) for s in original_shape)
    if len(p) != len(original_shape):
        raise ShapeMismatchError(
            f"permutation {p.order} does not match rank of shape {original_shape}"
        )
    if m.rows * m.cols != math.prod(original_shape):
        raise ShapeMismatchError(
            f"{m.rows}x{m.cols} matrix cannot fold into shape {original_shape}"
        )
    if m.rows != original_shape[p.mode]:
        raise ShapeMismatchError(
            f"matrix has {m.rows} rows but mode {p.mode} has length {original_shape[p.mode]}"
        )
    permuted_shape = tuple(original_shape[axis] for axis in p.order)
    restored = np.transpose(m.data.reshape(permuted_shape), p.inverse().order)
    return FeatureTensor(_freeze(restored.copy(order="C")))


def transpose(m: Matrix2D) -> Matrix2D:
    return Matrix2D(_freeze(m.data.T.copy(order="C")))


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------


def _sequential_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Matrix product with a fixed left-to-right accumulation over the inner index.

    Partial products are materialised a block of inner indices at a time and
    accumulated with a cumulative sum, which adds strictly in index order.
    """
    rows, inner = a.shape
    cols = b.shape[1]
    block = max(1, _BLOCK_ELEMENTS // (rows * cols))
    acc = np.zeros((rows, cols), dtype=DTYPE)
    for start in range(0, inner, block):
        stop = min(start + block, inner)
        partial = a[:, start:stop, None] * b[None, start:stop, :]
        partial[:, 0, :] += acc
        acc = np.cumsum(partial, axis=1)[:, -1, :]
    return np.ascontiguousarray(acc)


def matmul(a: Matrix2D, b: Matrix2D) -> Matrix2D:
    """Deterministic matrix product; reproducible bit for bit across runs."""
    if a.cols != b.rows:
        raise ShapeMismatchError(f"cannot multiply {a.rows}x{a.cols} by {b.rows}x{b.cols}")
    _record_flops(2 * a.rows * a.cols * b.cols)
    return Matrix2D(_freeze(_sequential_matmul(a.data, b.data)))


def row_softmax(m: Matrix2D) -> Matrix2D:
    """Softmax along each row with max subtraction."""
    if not np.all(np.isfinite(m.data)):
        raise NonFiniteError("row_softmax received non-finite entries")
    shifted = m.data - m.data.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    return Matrix2D(_freeze(weights / weights.sum(axis=1, keepdims=True)))


def channel_linear(
    x: FeatureTensor, w: Matrix2D, b: Optional[np.ndarray] = None
) -> FeatureTensor:
    """
    Apply y[..., c'] = sum_c w[c', c] * x[..., c] + b[c'] at every position.

    Args:
        x: Input tensor, channel axis last
        w: Weight matrix of shape (out_channels, in_channels)
        b: Optional bias of length out_channels (zero when omitted)

    Returns:
        Tensor with the channel axis resized to w.rows
    """
    if w.cols != x.channels:
        raise ShapeMismatchError(
            f"weight expects {w.cols} channels but tensor has {x.channels}"
        )
    positions = Matrix2D(x.data.reshape(-1, x.channels))
    out = matmul(positions, transpose(w)).data
    if b is not None:
        bias = np.asarray(b, dtype=DTYPE).reshape(-1)
        if bias.size != w.rows:
            raise ShapeMismatchError(f"bias has {bias.size} entries, expected {w.rows}")
        out = out + bias
    return FeatureTensor(out.reshape(x.shape[:-1] + (w.rows,)))


def add(x: FeatureTensor, y: FeatureTensor) -> FeatureTensor:
    if x.shape != y.shape:
        raise ShapeMismatchError(f"cannot add shapes {x.shape} and {y.shape}")
    return FeatureTensor(_freeze(x.data + y.data))


def multiply(x: FeatureTensor, y: FeatureTensor) -> FeatureTensor:
    if x.shape != y.shape:
        raise ShapeMismatchError(f"cannot multiply shapes {x.shape} and {y.shape}")
    return FeatureTensor(_freeze(x.data * y.data))
