"""
Folded Attention
Embedded-Gaussian self-attention, per-mode sub-affinity matrices, the cascaded
folded attention operator, and the brute-force rank-one reference that the
cascade must reproduce.

Conventions:
- The channel axis is the last axis of every FeatureTensor.
- g is applied once before the cascade unless FAParams.reapply_g is set.
- Every sub-affinity is computed from the original input, never from an
  intermediate aggregate.
"""

import logging
import math
from dataclasses import dataclass, replace
from functools import reduce
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from src.errors import (
    ConfigurationError,
    GuardExceededError,
    IndexOutOfBoundsError,
    MemoryBudgetError,
    NonFiniteError,
    ShapeMismatchError,
)
from src.tensor_core import (
    DTYPE,
    FeatureTensor,
    Matrix2D,
    Permutation,
    add,
    channel_linear,
    fold,
    matmul,
    op_phase,
    row_softmax,
    transpose,
    unfold,
)
from src.utils import get_config

logger = logging.getLogger(__name__)

ROW_SUM_TOLERANCE = 1e-12
ORACLE_TOLERANCE = 1e-10


@dataclass(frozen=True)
class LinearMapParams:
    """Channel-axis affine map, used for theta, phi and g."""

    weight: Matrix2D
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if not isinstance(self.weight, Matrix2D):
            object.__setattr__(self, "weight", Matrix2D(self.weight))
        if self.bias is not None:
            bias = np.array(self.bias, dtype=DTYPE).reshape(-1)
            if bias.size != self.weight.rows:
                raise ShapeMismatchError(
                    f"bias has {bias.size} entries, weight has {self.weight.rows} rows"
                )
            bias.flags.writeable = False
            object.__setattr__(self, "bias", bias)

    @classmethod
    def identity(cls, channels: int) -> "LinearMapParams":
        return cls(Matrix2D.identity(channels))

    @classmethod
    def zeros(cls, out_features: int, in_features: int) -> "LinearMapParams":
        return cls(Matrix2D(np.zeros((out_features, in_features))))

    @classmethod
    def random(
        cls, out_features: int, in_features: int, rng: np.random.Generator
    ) -> "LinearMapParams":
        """Weights drawn from N(0, 1/sqrt(fan_in)), no bias."""
        scale = 1.0 / math.sqrt(in_features)
        return cls(Matrix2D(rng.normal(0.0, scale, size=(out_features, in_features))))

    @property
    def in_features(self) -> int:
        return self.weight.cols

    @property
    def out_features(self) -> int:
        return self.weight.rows

    def zeroed(self) -> "LinearMapParams":
        bias = None if self.bias is None else np.zeros_like(self.bias)
        return LinearMapParams(Matrix2D(np.zeros(self.weight.shape)), bias)

    def __call__(self, x: FeatureTensor) -> FeatureTensor:
        return channel_linear(x, self.weight, self.bias)


EmbeddingPair = Tuple[LinearMapParams, LinearMapParams]
PermutationLike = Union[Permutation, Sequence[int]]


def default_mode_order(rank: int) -> Tuple[Permutation, ...]:
    """
    One permutation per mode, each bringing its mode to the front.

    For rank 4 this is (0,1,2,3), (1,0,2,3), (2,0,1,3), (3,0,1,2), i.e. the
    height, width, depth and channel unfoldings.
    """
    if rank < 2:
        raise ShapeMismatchError(f"folded attention needs rank >= 2, got {rank}")
    return tuple(Permutation.leading(mode, rank) for mode in range(rank))


@dataclass(frozen=True)
class FAParams:
    """
    Parameters of folded attention (and of the self-attention baseline).

    theta and phi produce the affinity embeddings and are shared by all modes
    unless `per_mode` supplies one pair per entry of the mode order; g maps the
    aggregated values and must keep the channel count.
    """

    theta: LinearMapParams
    phi: LinearMapParams
    g: LinearMapParams
    mode_order: Optional[Tuple[Permutation, ...]] = None
    per_mode: Optional[Tuple[EmbeddingPair, ...]] = None
    reapply_g: bool = False
    residual: bool = False

    def __post_init__(self):
        if self.theta.out_features != self.phi.out_features:
            raise ShapeMismatchError("theta and phi must produce the same embedding size")
        if not self.theta.in_features == self.phi.in_features == self.g.in_features:
            raise ShapeMismatchError("theta, phi and g must read the same channel count")
        if self.g.out_features != self.g.in_features:
            raise ShapeMismatchError("g must preserve the channel count")
        if self.mode_order is not None:
            order = tuple(
                p if isinstance(p, Permutation) else Permutation(tuple(p))
                for p in self.mode_order
            )
            object.__setattr__(self, "mode_order", order)
        if self.per_mode is not None:
            pairs = tuple((theta, phi) for theta, phi in self.per_mode)
            for theta, phi in pairs:
                if theta.out_features != phi.out_features:
                    raise ShapeMismatchError("per-mode theta and phi must match")
                if theta.in_features != self.channels or phi.in_features != self.channels:
                    raise ShapeMismatchError("per-mode embeddings must read the input channels")
            if self.mode_order is not None and len(pairs) != len(self.mode_order):
                raise ShapeMismatchError("per_mode needs one embedding pair per mode")
            object.__setattr__(self, "per_mode", pairs)

    @property
    def embed_dim(self) -> int:
        return self.theta.out_features

    @property
    def channels(self) -> int:
        return self.g.in_features

    def resolved_mode_order(self, rank: int) -> Tuple[Permutation, ...]:
        return self.mode_order if self.mode_order is not None else default_mode_order(rank)

    def embeddings(self, stage: int) -> EmbeddingPair:
        if self.per_mode is None:
            return self.theta, self.phi
        return self.per_mode[stage]

    def check_compatible(self, x: FeatureTensor) -> Tuple[Permutation, ...]:
        """
        Validate the parameters against an input tensor.

        Returns:
            The mode order to use for x
        """
        if x.channels != self.channels:
            raise ShapeMismatchError(
                f"parameters expect {self.channels} channels, tensor has {x.channels}"
            )
        order = self.resolved_mode_order(x.rank)
        if any(len(p) != x.rank for p in order):
            raise ShapeMismatchError(f"mode order does not match tensor rank {x.rank}")
        if sorted(p.mode for p in order) != list(range(x.rank)):
            raise ShapeMismatchError("mode order must lead with every mode exactly once")
        if self.per_mode is not None and len(self.per_mode) != len(order):
            raise ShapeMismatchError("per_mode needs one embedding pair per mode")
        for stage in range(len(order)):
            theta, _ = self.embeddings(stage)
            if theta.out_features != x.channels:
                raise ShapeMismatchError(
                    f"the channel sub-affinity has side {theta.out_features} but g(x) has "
                    f"{x.channels} channels; folded attention needs embed_dim == C"
                )
        return order

    def zero_embeddings(self) -> "FAParams":
        """Copy with theta and phi zeroed, which makes every sub-affinity uniform."""
        per_mode = None
        if self.per_mode is not None:
            per_mode = tuple((theta.zeroed(), phi.zeroed()) for theta, phi in self.per_mode)
        return replace(self, theta=self.theta.zeroed(), phi=self.phi.zeroed(), per_mode=per_mode)


def init_params(
    channels: int,
    rng: np.random.Generator,
    *,
    embed_dim: Optional[int] = None,
    rank: int = 4,
    per_mode: bool = False,
    reapply_g: bool = False,
    residual: bool = False,
) -> FAParams:
    """
    Draw random parameters with weights from N(0, 1/sqrt(fan_in)).

    Args:
        channels: Channel count C of the inputs
        rng: Random generator
        embed_dim: Output size of theta/phi (defaults to C)
        rank: Tensor rank, used to size per-mode embeddings
        per_mode: Draw a separate theta/phi pair for every mode
        reapply_g: Apply g before every aggregation stage
        residual: Add the input to the output

    Returns:
        FAParams with the default mode order
    """
    embed_dim = embed_dim or channels
    theta = LinearMapParams.random(embed_dim, channels, rng)
    phi = LinearMapParams.random(embed_dim, channels, rng)
    g = LinearMapParams.random(channels, channels, rng)
    pairs = None
    if per_mode:
        pairs = tuple(
            (
                LinearMapParams.random(embed_dim, channels, rng),
                LinearMapParams.random(embed_dim, channels, rng),
            )
            for _ in range(rank)
        )
    return FAParams(theta, phi, g, per_mode=pairs, reapply_g=reapply_g, residual=residual)


@dataclass(frozen=True)
class SubAffinityMatrix:
    """Row-stochastic d x d affinity over one tensor mode."""

    mode: int
    m: Matrix2D

    def __post_init__(self):
        if self.m.rows != self.m.cols:
            raise ShapeMismatchError(f"sub-affinity must be square, got {self.m.shape}")
        if np.any(self.m.data < 0):
            raise ShapeMismatchError("sub-affinity entries must be nonnegative")
        deviation = np.max(np.abs(self.m.data.sum(axis=1) - 1.0))
        if deviation > ROW_SUM_TOLERANCE:
            raise ShapeMismatchError(f"sub-affinity rows must sum to 1 (off by {deviation:.3e})")

    @classmethod
    def identity(cls, mode: int, side: int) -> "SubAffinityMatrix":
        return cls(mode, Matrix2D.identity(side))

    @classmethod
    def uniform(cls, mode: int, side: int) -> "SubAffinityMatrix":
        return cls(mode, Matrix2D(np.full((side, side), 1.0 / side)))

    @property
    def side(self) -> int:
        return self.m.rows

    def row(self, i: int) -> np.ndarray:
        return self.m.data[i]


@dataclass(frozen=True)
class AffinityTensor:
    """Weights of every element with respect to the anchor element v."""

    v: Tuple[int, ...]
    a: FeatureTensor

    def total(self) -> float:
        return float(np.sum(self.a.data))

    def singular_value_ratios(self) -> List[float]:
        """sigma_2 / sigma_1 of every mode unfolding (0 for single-row unfoldings)."""
        ratios = []
        for p in default_mode_order(self.a.rank):
            sigma = np.linalg.svd(unfold(self.a, p).data, compute_uv=False)
            ratios.append(float(sigma[1] / sigma[0]) if sigma.size > 1 and sigma[0] > 0 else 0.0)
        return ratios

    def is_rank_one(self, tolerance: float = ORACLE_TOLERANCE) -> bool:
        return all(ratio <= tolerance for ratio in self.singular_value_ratios())

    def aggregate(self, values: np.ndarray) -> float:
        """Weighted sum of `values` (same shape as the tensor) under this affinity."""
        return float(np.add.reduce((self.a.data * values).reshape(-1)))


# ---------------------------------------------------------------------------
# Self-attention baseline
# ---------------------------------------------------------------------------


def _positions(x: FeatureTensor) -> int:
    return x.size // x.channels


def self_attention(
    x: FeatureTensor, params: FAParams, budget_bytes: Optional[int] = None
) -> FeatureTensor:
    """
    Embedded-Gaussian self-attention: Z = SM(theta(X) phi(X)^T) g(X).

    The spatial axes are flattened into N = prod(shape[:-1]) positions.

    Raises:
        MemoryBudgetError: If the N x N affinity exceeds the memory budget
    """
    if x.channels != params.channels:
        raise ShapeMismatchError(
            f"parameters expect {params.channels} channels, tensor has {x.channels}"
        )
    n = _positions(x)
    budget = budget_bytes if budget_bytes is not None else get_config().mem_budget_bytes
    required = n * n * np.dtype(DTYPE).itemsize
    if required > budget:
        raise MemoryBudgetError(required, budget, what=f"{n}x{n} self-attention affinity")

    with op_phase("embed"):
        tx, px, gx = params.theta(x), params.phi(x), params.g(x)
    with op_phase("affinity_build"):
        logits = matmul(
            Matrix2D(tx.data.reshape(n, params.embed_dim)),
            transpose(Matrix2D(px.data.reshape(n, params.embed_dim))),
        )
    if not np.all(np.isfinite(logits.data)):
        raise NonFiniteError("self-attention logits are not finite")
    affinity = row_softmax(logits)
    with op_phase("aggregate"):
        z = matmul(affinity, Matrix2D(gx.data.reshape(n, x.channels)))
    out = FeatureTensor(z.data.reshape(x.shape))
    return add(out, x) if params.residual else out


def self_attention_reference(
    x: FeatureTensor, params: FAParams, max_elements: Optional[int] = None
) -> FeatureTensor:
    """Scalar nested-loop evaluation of self-attention with an explicit N x N affinity."""
    limit = max_elements or get_config().oracle_max_elements
    if x.size > limit:
        raise GuardExceededError(x.size, limit, "explicit self-attention")
    n, c = _positions(x), x.channels
    rows = x.data.reshape(n, c)

    def embed(lin: LinearMapParams, vec: np.ndarray) -> List[float]:
        w = lin.weight.data
        out = []
        for o in range(lin.out_features):
            acc = 0.0 if lin.bias is None else float(lin.bias[o])
            for i in range(c):
                acc += w[o, i] * vec[i]
            out.append(acc)
        return out

    t = [embed(params.theta, rows[i]) for i in range(n)]
    f = [embed(params.phi, rows[i]) for i in range(n)]
    g = [embed(params.g, rows[i]) for i in range(n)]
    z = np.zeros((n, c))
    for i in range(n):
        logits = [sum(t[i][e] * f[j][e] for e in range(params.embed_dim)) for j in range(n)]
        peak = max(logits)
        weights = [math.exp(value - peak) for value in logits]
        norm = sum(weights)
        for j in range(n):
            for ch in range(c):
                z[i, ch] += weights[j] / norm * g[j][ch]
    out = z.reshape(x.shape)
    if params.residual:
        out = out + x.data
    return FeatureTensor(out)


# ---------------------------------------------------------------------------
# Folded attention
# ---------------------------------------------------------------------------


def _affinity_from_embeddings(
    tx: FeatureTensor, px: FeatureTensor, p: Permutation
) -> SubAffinityMatrix:
    with op_phase("affinity_build"):
        logits = matmul(unfold(tx, p), transpose(unfold(px, p)))
    if not np.all(np.isfinite(logits.data)):
        raise NonFiniteError(f"sub-affinity logits for mode {p.mode} are not finite")
    return SubAffinityMatrix(p.mode, row_softmax(logits))


def compute_sub_affinity(
    x: FeatureTensor, params: FAParams, p: PermutationLike
) -> SubAffinityMatrix:
    """
    Sub-affinity A^p = SM(u(theta(X), p) u(phi(X), p)^T) for the leading mode of p.

    Args:
        x: Original input tensor
        params: Attention parameters
        p: Permutation whose first entry is the attended mode

    Returns:
        Row-stochastic matrix of side x.shape[p.order[0]]
    """
    p = p if isinstance(p, Permutation) else Permutation(tuple(p))
    if len(p) != x.rank:
        raise ShapeMismatchError(f"permutation {p.order} does not match tensor rank {x.rank}")
    stage = 0
    if params.per_mode is not None:
        order = params.resolved_mode_order(x.rank)
        stage = next((i for i, q in enumerate(order) if q.mode == p.mode), None)
        if stage is None:
            raise ShapeMismatchError(f"no per-mode embeddings for mode {p.mode}")
    theta, phi = params.embeddings(stage)
    with op_phase("embed"):
        tx, px = theta(x), phi(x)
    return _affinity_from_embeddings(tx, px, p)


def compute_sub_affinities(x: FeatureTensor, params: FAParams) -> List[SubAffinityMatrix]:
    """All sub-affinities of x, one per entry of the mode order, in that order."""
    order = params.check_compatible(x)
    if params.per_mode is None:
        with op_phase("embed"):
            tx, px = params.theta(x), params.phi(x)
        return [_affinity_from_embeddings(tx, px, p) for p in order]
    subs = []
    for stage, p in enumerate(order):
        theta, phi = params.embeddings(stage)
        with op_phase("embed"):
            tx, px = theta(x), phi(x)
        subs.append(_affinity_from_embeddings(tx, px, p))
    return subs


def aggregate_mode(y: FeatureTensor, a: SubAffinityMatrix, p: PermutationLike) -> FeatureTensor:
    """Mode product Z = f(A^p u(Y, p), p): mix y along the leading mode of p."""
    p = p if isinstance(p, Permutation) else Permutation(tuple(p))
    if len(p) != y.rank:
        raise ShapeMismatchError(f"permutation {p.order} does not match tensor rank {y.rank}")
    if a.side != y.shape[p.mode] or a.mode != p.mode:
        raise ShapeMismatchError(
            f"sub-affinity for mode {a.mode} (side {a.side}) cannot mix mode {p.mode} "
            f"of length {y.shape[p.mode]}"
        )
    with op_phase("aggregate"):
        mixed = matmul(a.m, unfold(y, p))
    return fold(mixed, p, y.shape)


def aggregate_cascade(
    y: FeatureTensor, subs: Sequence[SubAffinityMatrix], mode_order: Sequence[PermutationLike]
) -> FeatureTensor:
    """Apply aggregate_mode for every (sub-affinity, permutation) pair in turn."""
    if len(subs) != len(mode_order):
        raise ShapeMismatchError("need one sub-affinity per permutation")
    for a, p in zip(subs, mode_order):
        y = aggregate_mode(y, a, p)
    return y


def folded_attention(x: FeatureTensor, params: FAParams) -> FeatureTensor:
    """
    Folded attention: aggregate g(X) with one sub-affinity per mode, in cascade.

    All sub-affinities are computed from x first. g is applied once, unless
    params.reapply_g asks for the nested reading where every stage reapplies g.
    """
    order = params.check_compatible(x)
    subs = compute_sub_affinities(x, params)
    with op_phase("embed"):
        y = params.g(x)
    for stage, (p, a) in enumerate(zip(order, subs)):
        if params.reapply_g and stage > 0:
            with op_phase("embed"):
                y = params.g(y)
        y = aggregate_mode(y, a, p)
        logger.debug("aggregated mode %d (side %d)", p.mode, a.side)
    return add(y, x) if params.residual else y


def rank_one_affinity(subs: Sequence[SubAffinityMatrix], v: Sequence[int]) -> AffinityTensor:
    """
    Affinity tensor of element v: the outer product of row v[m] of every sub-affinity.

    Raises:
        ShapeMismatchError: If a mode has no sub-affinity
        IndexOutOfBoundsError: If v lies outside the tensor
    """
    v = tuple(int(i) for i in v)
    by_mode = {a.mode: a for a in subs}
    if len(subs) != len(v) or sorted(by_mode) != list(range(len(v))):
        missing = sorted(set(range(len(v))) - set(by_mode))
        raise ShapeMismatchError(f"need one sub-affinity per mode, missing modes {missing}")
    for mode, i in enumerate(v):
        if not 0 <= i < by_mode[mode].side:
            raise IndexOutOfBoundsError(
                f"index {i} out of bounds for mode {mode} of length {by_mode[mode].side}"
            )
    weights = reduce(np.multiply.outer, (by_mode[mode].row(i) for mode, i in enumerate(v)))
    return AffinityTensor(v, FeatureTensor(weights))


def oracle_aggregate(
    x: FeatureTensor,
    params: FAParams,
    sub_affinities: Optional[Sequence[SubAffinityMatrix]] = None,
    max_elements: Optional[int] = None,
) -> FeatureTensor:
    """
    Brute-force folded attention: Z[v] = sum_w A_v[w] g(X)[w] for every position v.

    Each output element is computed on its own from its rank-one affinity
    tensor, so this serves as an independent reference for folded_attention.

    Args:
        x: Input tensor
        params: Attention parameters
        sub_affinities: Use these instead of computing them from x
        max_elements: Size guard (defaults to FA_ORACLE_MAX_ELEMENTS)
    """
    limit = max_elements or get_config().oracle_max_elements
    if x.size > limit:
        raise GuardExceededError(x.size, limit, "oracle aggregation")
    if params.reapply_g:
        raise ConfigurationError("the oracle only covers the single-application reading of g")
    subs = list(sub_affinities) if sub_affinities is not None else compute_sub_affinities(x, params)
    gx = params.g(x).data
    out = np.empty(x.shape, dtype=DTYPE)
    for v in np.ndindex(*x.shape):
        out[v] = rank_one_affinity(subs, v).aggregate(gx)
    if params.residual:
        out += x.data
    return FeatureTensor(out)


def two_mode_illustration(x: FeatureTensor, params: FAParams) -> FeatureTensor:
    """
    Folded attention on a rank-2 (width, channel) feature matrix.

    Z[i, j] = (a^{p_w}_i outer a^{p_c}_j) . g(X): each element's affinity is
    a rank-one matrix built from a width row and a channel row.
    """
    if x.rank != 2:
        raise ShapeMismatchError(f"two-mode folded attention needs a rank-2 tensor, got {x.rank}")
    return folded_attention(x, params)


def reconstruct_dense_affinity(
    subs: Sequence[SubAffinityMatrix], budget_bytes: Optional[int] = None
) -> Matrix2D:
    """
    The full element-to-element affinity implied by the sub-affinities.

    Row v (row-major linear index) is A_v flattened; the matrix equals the
    Kronecker product of the sub-affinities taken in axis order.
    """
    by_mode = {a.mode: a for a in subs}
    if sorted(by_mode) != list(range(len(subs))):
        raise ShapeMismatchError("need exactly one sub-affinity per mode")
    total = math.prod(a.side for a in subs)
    required = total * total * np.dtype(DTYPE).itemsize
    budget = budget_bytes if budget_bytes is not None else get_config().mem_budget_bytes
    if required > budget:
        raise MemoryBudgetError(required, budget, what=f"{total}x{total} dense affinity")
    dense = reduce(np.kron, (by_mode[mode].m.data for mode in range(len(subs))))
    return Matrix2D(dense)
