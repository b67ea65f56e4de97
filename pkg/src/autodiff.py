"""
Reverse-mode differentiation for the folded attention op set.

A Tape records primitive applications in execution order. Every primitive
runs the same tensor_core kernel as the untaped code path, so recording never
changes a value. backward() walks the tape in reverse and accumulates
vector-Jacobian products; finite_diff_check() certifies the result against
central differences.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from src.attention import FAParams, LinearMapParams
from src.errors import (
    GuardExceededError,
    NonFiniteError,
    ShapeMismatchError,
    UnsupportedPrimitiveError,
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
    multiply,
    permute_axes,
    row_softmax,
    unfold,
)
from src.utils import get_config

logger = logging.getLogger(__name__)


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=DTYPE, order="C", copy=True)
    array.flags.writeable = False
    return array


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return matmul(Matrix2D(a), Matrix2D(b)).data


# ---------------------------------------------------------------------------
# Primitive registry
# ---------------------------------------------------------------------------


class Primitive(NamedTuple):
    """forward(values, attrs) -> (output, saved); vjp(grad, values, output, saved, attrs) -> grads."""

    forward: Callable[..., Tuple[np.ndarray, Dict[str, np.ndarray]]]
    vjp: Callable[..., Tuple[Optional[np.ndarray], ...]]


def _permute_forward(values, attrs):
    (x,) = values
    return permute_axes(FeatureTensor(x), Permutation(attrs["order"])).data, {}


def _permute_vjp(grad, values, output, saved, attrs):
    inverse = Permutation(attrs["order"]).inverse()
    return (permute_axes(FeatureTensor(grad), inverse).data,)


def _unfold_forward(values, attrs):
    (x,) = values
    return unfold(FeatureTensor(x), Permutation(attrs["order"])).data, {}


def _unfold_vjp(grad, values, output, saved, attrs):
    (x,) = values
    return (fold(Matrix2D(grad), Permutation(attrs["order"]), x.shape).data,)


def _fold_forward(values, attrs):
    (m,) = values
    return fold(Matrix2D(m), Permutation(attrs["order"]), attrs["shape"]).data, {}


def _fold_vjp(grad, values, output, saved, attrs):
    return (unfold(FeatureTensor(grad), Permutation(attrs["order"])).data,)


def _matmul_forward(values, attrs):
    a, b = values
    return _mm(a, b), {}


def _matmul_vjp(grad, values, output, saved, attrs):
    a, b = values
    return _mm(grad, b.T), _mm(a.T, grad)


def _softmax_forward(values, attrs):
    (m,) = values
    out = row_softmax(Matrix2D(m)).data
    return out, {"softmax": out}


def _softmax_vjp(grad, values, output, saved, attrs):
    s = saved["softmax"]
    return ((grad - np.sum(grad * s, axis=1, keepdims=True)) * s,)


def _channel_linear_forward(values, attrs):
    x, w = values[0], values[1]
    bias = values[2] if len(values) > 2 else None
    return channel_linear(FeatureTensor(x), Matrix2D(w), bias).data, {}


def _channel_linear_vjp(grad, values, output, saved, attrs):
    x, w = values[0], values[1]
    g_rows = grad.reshape(-1, w.shape[0])
    x_rows = x.reshape(-1, w.shape[1])
    grads = [_mm(g_rows, w).reshape(x.shape), _mm(g_rows.T, x_rows)]
    if len(values) > 2:
        grads.append(g_rows.sum(axis=0))
    return tuple(grads)


def _add_forward(values, attrs):
    a, b = values
    if a.shape != b.shape:
        raise ShapeMismatchError(f"cannot add shapes {a.shape} and {b.shape}")
    if a.ndim >= 2:
        return add(FeatureTensor(a), FeatureTensor(b)).data, {}
    return a + b, {}


def _add_vjp(grad, values, output, saved, attrs):
    return grad, grad


def _mul_forward(values, attrs):
    a, b = values
    if a.shape != b.shape:
        raise ShapeMismatchError(f"cannot multiply shapes {a.shape} and {b.shape}")
    if a.ndim >= 2:
        return multiply(FeatureTensor(a), FeatureTensor(b)).data, {}
    return a * b, {}


def _mul_vjp(grad, values, output, saved, attrs):
    a, b = values
    return grad * b, grad * a


def _reshape_forward(values, attrs):
    (x,) = values
    if int(np.prod(attrs["shape"])) != x.size:
        raise ShapeMismatchError(f"cannot reshape {x.shape} to {attrs['shape']}")
    return x.reshape(attrs["shape"]), {}


def _reshape_vjp(grad, values, output, saved, attrs):
    (x,) = values
    return (grad.reshape(x.shape),)


def _sum_forward(values, attrs):
    (x,) = values
    return np.asarray(np.add.reduce(x.reshape(-1)), dtype=DTYPE), {}


def _sum_vjp(grad, values, output, saved, attrs):
    (x,) = values
    return (np.full(x.shape, float(grad), dtype=DTYPE),)


PRIMITIVES: Dict[str, Primitive] = {
    "permute": Primitive(_permute_forward, _permute_vjp),
    "unfold": Primitive(_unfold_forward, _unfold_vjp),
    "fold": Primitive(_fold_forward, _fold_vjp),
    "matmul": Primitive(_matmul_forward, _matmul_vjp),
    "row_softmax": Primitive(_softmax_forward, _softmax_vjp),
    "channel_linear": Primitive(_channel_linear_forward, _channel_linear_vjp),
    "add": Primitive(_add_forward, _add_vjp),
    "mul": Primitive(_mul_forward, _mul_vjp),
    "reshape": Primitive(_reshape_forward, _reshape_vjp),
    "sum": Primitive(_sum_forward, _sum_vjp),
}


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class Node:
    node_id: int
    op: str
    inputs: Tuple[int, ...]
    attrs: Dict[str, Any]
    value: np.ndarray
    saved: Dict[str, np.ndarray] = field(default_factory=dict)
    name: Optional[str] = None


@dataclass(frozen=True)
class Var:
    """Handle to a recorded value."""

    tape: "Tape"
    node_id: int

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.node_id].value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.output: Optional[int] = None

    def leaf(self, name: str, value: np.ndarray) -> Var:
        node = Node(len(self.nodes), "leaf", (), {}, _readonly(value), name=name)
        self.nodes.append(node)
        return Var(self, node.node_id)

    def apply(self, op: str, *inputs: Var, **attrs) -> Var:
        """Run primitive `op` on recorded inputs and record the result."""
        if op not in PRIMITIVES:
            raise UnsupportedPrimitiveError(f"'{op}' has no recorded derivative")
        for var in inputs:
            if var.tape is not self:
                raise ShapeMismatchError("input was recorded on a different tape")
        values = [self.nodes[var.node_id].value for var in inputs]
        out, saved = PRIMITIVES[op].forward(values, attrs)
        node = Node(len(self.nodes), op, tuple(v.node_id for v in inputs), attrs, out, saved)
        self.nodes.append(node)
        return Var(self, node.node_id)

    def permute(self, x: Var, order: Sequence[int]) -> Var:
        return self.apply("permute", x, order=tuple(order))

    def transpose(self, m: Var) -> Var:
        return self.permute(m, (1, 0))

    def unfold(self, x: Var, p: Permutation) -> Var:
        return self.apply("unfold", x, order=p.order)

    def fold(self, m: Var, p: Permutation, shape: Sequence[int]) -> Var:
        return self.apply("fold", m, order=p.order, shape=tuple(shape))

    def matmul(self, a: Var, b: Var) -> Var:
        return self.apply("matmul", a, b)

    def row_softmax(self, m: Var) -> Var:
        return self.apply("row_softmax", m)

    def channel_linear(self, x: Var, w: Var, b: Optional[Var] = None) -> Var:
        return self.apply("channel_linear", x, w) if b is None else self.apply("channel_linear", x, w, b)

    def add(self, a: Var, b: Var) -> Var:
        return self.apply("add", a, b)

    def mul(self, a: Var, b: Var) -> Var:
        return self.apply("mul", a, b)

    def reshape(self, x: Var, shape: Sequence[int]) -> Var:
        return self.apply("reshape", x, shape=tuple(shape))

    def sum(self, x: Var) -> Var:
        return self.apply("sum", x)

    @property
    def leaves(self) -> Dict[str, np.ndarray]:
        return {node.name: node.value for node in self.nodes if node.op == "leaf"}

    def __len__(self) -> int:
        return len(self.nodes)


Graph = Callable[[Tape, Dict[str, Var]], Var]


@dataclass
class GradResult:
    """Gradients keyed by input name, each shaped like its input."""

    grads: Dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]

    def __iter__(self):
        return iter(self.grads)

    def names(self) -> List[str]:
        return list(self.grads)


def record_and_run(graph: Graph, inputs: Mapping[str, np.ndarray]) -> Tuple[np.ndarray, Tape]:
    """
    Record `graph` on a fresh tape.

    Args:
        graph: Callable building the computation from tape primitives
        inputs: Named input arrays (become the tape leaves)

    Returns:
        The output value and the tape
    """
    tape = Tape()
    leaves = {name: tape.leaf(name, value) for name, value in inputs.items()}
    out = graph(tape, leaves)
    tape.output = out.node_id
    logger.debug("recorded %d nodes", len(tape))
    return out.value, tape


def replay(tape: Tape) -> np.ndarray:
    """Re-execute every recorded node from the saved leaf values."""
    if tape.output is None:
        raise ShapeMismatchError("tape has no output")
    values: List[np.ndarray] = []
    for node in tape.nodes:
        if node.op == "leaf":
            values.append(node.value)
            continue
        out, _ = PRIMITIVES[node.op].forward([values[i] for i in node.inputs], node.attrs)
        values.append(out)
    return values[tape.output]


def backward(tape: Tape, seed: np.ndarray) -> GradResult:
    """
    Gradient of <seed, output> with respect to every leaf of the tape.

    Raises:
        ShapeMismatchError: If seed and output shapes differ
        NonFiniteError: If a node produces a NaN or Inf gradient
    """
    if tape.output is None:
        raise ShapeMismatchError("tape has no output")
    seed = np.asarray(seed, dtype=DTYPE)
    output = tape.nodes[tape.output].value
    if seed.shape != output.shape:
        raise ShapeMismatchError(f"seed shape {seed.shape} != output shape {output.shape}")

    adjoints: Dict[int, np.ndarray] = {tape.output: seed}
    for node in reversed(tape.nodes[: tape.output + 1]):
        grad = adjoints.pop(node.node_id, None) if node.op != "leaf" else None
        if grad is None:
            continue
        values = [tape.nodes[i].value for i in node.inputs]
        input_grads = PRIMITIVES[node.op].vjp(grad, values, node.value, node.saved, node.attrs)
        for input_id, input_grad in zip(node.inputs, input_grads):
            if input_grad is None:
                continue
            if not np.all(np.isfinite(input_grad)):
                raise NonFiniteError(f"non-finite gradient from '{node.op}'", node_id=node.node_id)
            if input_id in adjoints:
                adjoints[input_id] = adjoints[input_id] + input_grad
            else:
                adjoints[input_id] = input_grad

    grads = {}
    for node in tape.nodes:
        if node.op == "leaf":
            grad = adjoints.get(node.node_id)
            grads[node.name] = (
                np.zeros_like(node.value) if grad is None else np.array(grad, dtype=DTYPE).reshape(node.value.shape)
            )
    return GradResult(grads)


# ---------------------------------------------------------------------------
# Attention graphs
# ---------------------------------------------------------------------------


def _linear_inputs(prefix: str, lin: LinearMapParams) -> Dict[str, np.ndarray]:
    inputs = {f"{prefix}_w": lin.weight.data}
    if lin.bias is not None:
        inputs[f"{prefix}_b"] = lin.bias
    return inputs


def attention_inputs(x: FeatureTensor, params: FAParams) -> Dict[str, np.ndarray]:
    """Named leaves for fa_graph / sa_graph: x plus every weight (and bias)."""
    inputs = {"x": x.data}
    if params.per_mode is None:
        inputs.update(_linear_inputs("theta", params.theta))
        inputs.update(_linear_inputs("phi", params.phi))
    else:
        for stage, (theta, phi) in enumerate(params.per_mode):
            inputs.update(_linear_inputs(f"theta{stage}", theta))
            inputs.update(_linear_inputs(f"phi{stage}", phi))
    inputs.update(_linear_inputs("g", params.g))
    return inputs


def _apply_linear(tape: Tape, x: Var, leaves: Dict[str, Var], prefix: str) -> Var:
    return tape.channel_linear(x, leaves[f"{prefix}_w"], leaves.get(f"{prefix}_b"))


def fa_graph(params: FAParams) -> Graph:
    """
    Folded attention as a tape graph.

    The graph reads its weights from the leaves built by attention_inputs();
    `params` only fixes the structure (mode order, per-mode embeddings,
    reapply_g, residual).
    """

    def graph(tape: Tape, leaves: Dict[str, Var]) -> Var:
        x = leaves["x"]
        x_tensor = FeatureTensor(x.value)
        order = params.check_compatible(x_tensor)
        shape = x.shape

        if params.per_mode is None:
            tx = _apply_linear(tape, x, leaves, "theta")
            px = _apply_linear(tape, x, leaves, "phi")
            embeddings = [(tx, px)] * len(order)
        else:
            embeddings = [
                (
                    _apply_linear(tape, x, leaves, f"theta{stage}"),
                    _apply_linear(tape, x, leaves, f"phi{stage}"),
                )
                for stage in range(len(order))
            ]

        affinities = []
        for p, (tx, px) in zip(order, embeddings):
            logits = tape.matmul(tape.unfold(tx, p), tape.transpose(tape.unfold(px, p)))
            affinities.append(tape.row_softmax(logits))

        y = _apply_linear(tape, x, leaves, "g")
        for stage, (p, a) in enumerate(zip(order, affinities)):
            if params.reapply_g and stage > 0:
                y = _apply_linear(tape, y, leaves, "g")
            y = tape.fold(tape.matmul(a, tape.unfold(y, p)), p, shape)
        return tape.add(y, x) if params.residual else y

    return graph


def sa_graph(params: FAParams) -> Graph:
    """Embedded-Gaussian self-attention as a tape graph."""

    def graph(tape: Tape, leaves: Dict[str, Var]) -> Var:
        x = leaves["x"]
        shape = x.shape
        n = int(np.prod(shape[:-1]))
        tx = tape.reshape(_apply_linear(tape, x, leaves, "theta"), (n, params.embed_dim))
        px = tape.reshape(_apply_linear(tape, x, leaves, "phi"), (n, params.embed_dim))
        gx = tape.reshape(_apply_linear(tape, x, leaves, "g"), (n, shape[-1]))
        affinity = tape.row_softmax(tape.matmul(tx, tape.transpose(px)))
        z = tape.reshape(tape.matmul(affinity, gx), shape)
        return tape.add(z, x) if params.residual else z

    return graph


def sum_of_squares(tape: Tape, z: Var) -> Var:
    return tape.sum(tape.mul(z, z))


def total_sum(tape: Tape, z: Var) -> Var:
    return tape.sum(z)


def with_loss(graph: Graph, loss: Callable[[Tape, Var], Var] = sum_of_squares) -> Graph:
    """Append a scalar loss head to a graph."""

    def scalar_graph(tape: Tape, leaves: Dict[str, Var]) -> Var:
        return loss(tape, graph(tape, leaves))

    return scalar_graph


# ---------------------------------------------------------------------------
# Finite-difference certification
# ---------------------------------------------------------------------------


FD_STEP = 1e-5
FD_RTOL = 1e-4
FD_FLOOR = 1e-8


@dataclass
class FDReport:
    """Worst analytic-vs-numeric disagreement found by finite_diff_check."""

    worst_name: Optional[str]
    worst_index: Optional[Tuple[int, ...]]
    analytic: float
    numeric: float
    rel_err: float
    rtol: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.rel_err <= self.rtol

    def to_dict(self) -> Dict[str, Any]:
        return {
            "worst_name": self.worst_name,
            "worst_index": list(self.worst_index) if self.worst_index is not None else None,
            "analytic": self.analytic,
            "numeric": self.numeric,
            "rel_err": self.rel_err,
            "rtol": self.rtol,
            "checked": self.checked,
            "passed": self.passed,
        }


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), FD_FLOOR)


def finite_diff_check(
    graph: Graph,
    inputs: Mapping[str, np.ndarray],
    h: float = FD_STEP,
    rtol: float = FD_RTOL,
    loss: Optional[Callable[[Tape, Var], Var]] = sum_of_squares,
    max_elements: Optional[int] = None,
) -> FDReport:
    """
    Compare backward() against central differences on every input entry.

    Args:
        graph: Graph to certify
        inputs: Named input arrays
        h: Step for (L(p + h e_i) - L(p - h e_i)) / 2h
        rtol: Relative error tolerance
        loss: Scalar head appended to the graph; None if the graph is already scalar
        max_elements: Limit on the total number of perturbed entries

    Returns:
        FDReport naming the worst offending entry

    Raises:
        GuardExceededError: If the inputs hold more entries than allowed
    """
    limit = max_elements if max_elements is not None else get_config().gradcheck_max_elements
    total = sum(int(np.asarray(v).size) for v in inputs.values())
    if total > limit:
        raise GuardExceededError(total, limit, "finite-difference check")

    scalar = with_loss(graph, loss) if loss is not None else graph
    base = {name: np.array(value, dtype=DTYPE) for name, value in inputs.items()}
    out, tape = record_and_run(scalar, base)
    if np.ndim(out) != 0:
        raise ShapeMismatchError(f"finite-difference check needs a scalar loss, got shape {np.shape(out)}")
    grads = backward(tape, np.ones((), dtype=DTYPE))

    def evaluate(name: str, index: Tuple[int, ...], delta: float) -> float:
        perturbed = dict(base)
        shifted = base[name].copy()
        shifted[index] += delta
        perturbed[name] = shifted
        value, _ = record_and_run(scalar, perturbed)
        return float(value)

    report = FDReport(None, None, 0.0, 0.0, 0.0, rtol, 0)
    for name, value in base.items():
        for index in np.ndindex(*value.shape):
            numeric = (evaluate(name, index, h) - evaluate(name, index, -h)) / (2.0 * h)
            analytic = float(grads[name][index])
            err = relative_error(analytic, numeric)
            report.checked += 1
            if report.worst_name is None or err > report.rel_err:
                report.worst_name, report.worst_index = name, tuple(int(i) for i in index)
                report.analytic, report.numeric, report.rel_err = analytic, numeric, err

    logger.info(
        "finite-difference check: %d entries, worst %s%s rel err %.3e",
        report.checked,
        report.worst_name,
        report.worst_index,
        report.rel_err,
    )
    return report
