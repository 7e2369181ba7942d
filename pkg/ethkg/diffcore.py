"""
Reverse-mode differentiation over dense float64 numpy tensors.

A ``Tape`` records every operation whose inputs require gradients, in
execution order. ``backward`` walks the records in reverse and accumulates
vector-Jacobian products into the leaves. Only the operations the ETH forward
pass needs are provided; shapes are explicit and the only implicit broadcast
is a 1-D bias added to every row.
"""

from dataclasses import (
    dataclass,
    field,
)
import math
from typing import (
    Callable,
    Dict,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from ethkg.errors import (
    InvalidArgumentError,
    NumericError,
)
from ethkg.geometry import (
    ATANH_EPS,
    BALL_EPS,
)


Array = np.ndarray
BackwardFn = Callable[[Array], Sequence[Optional[Array]]]

LAYER_NORM_EPS = 1e-8
SERIES_CUTOFF = 1e-4
# Above this argument tanh(a) >= 1 - BALL_EPS and the exp map is projected
TANH_SATURATION = math.atanh(1.0 - BALL_EPS)


class Node:
    """A value on a tape, plus its gradient once backward has run."""

    __slots__ = ("value", "grad", "requires_grad", "tape", "op", "parents", "name")

    def __init__(
        self,
        value: Array,
        tape: "Tape",
        requires_grad: bool = False,
        op: str = "leaf",
        parents: Tuple["Node", ...] = (),
        name: Optional[str] = None,
    ):
        self.value = value
        self.grad: Optional[Array] = None
        self.requires_grad = requires_grad
        self.tape = tape
        self.op = op
        self.parents = parents
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.shape})"

    def __add__(self, other: Union["Node", float]) -> "Node":
        if isinstance(other, Node):
            return add(self, other)
        return add_constant(self, float(other))

    def __radd__(self, other: float) -> "Node":
        return add_constant(self, float(other))

    def __sub__(self, other: Union["Node", float]) -> "Node":
        if isinstance(other, Node):
            return sub(self, other)
        return add_constant(self, -float(other))

    def __rsub__(self, other: float) -> "Node":
        return add_constant(scale_by_constant(self, -1.0), float(other))

    def __mul__(self, other: Union["Node", float]) -> "Node":
        if isinstance(other, Node):
            return hadamard(self, other)
        return scale_by_constant(self, float(other))

    def __rmul__(self, other: float) -> "Node":
        return scale_by_constant(self, float(other))

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)

    def __neg__(self) -> "Node":
        return scale_by_constant(self, -1.0)


@dataclass
class OpRecord:
    """One recorded operation: its output, inputs and VJP closure"""

    op: str
    output: Node
    parents: Tuple[Node, ...]
    backward_fn: BackwardFn


class Tape:
    """Ordered log of differentiable operations"""

    def __init__(self):
        self.records: List[OpRecord] = []
        self._leaves: List[Node] = []

    def __len__(self) -> int:
        return len(self.records)

    def leaf(
        self,
        value: Union[Array, float],
        requires_grad: bool = True,
        name: Optional[str] = None,
    ) -> Node:
        """Wrap a tensor as an input of the recorded computation."""
        value = np.array(value, dtype=np.float64)
        _check_finite("leaf", value)
        node = Node(value, self, requires_grad=requires_grad, name=name)
        if requires_grad:
            self._leaves.append(node)
        return node

    def constant(self, value: Union[Array, float]) -> Node:
        """Wrap a tensor that never receives a gradient."""
        return self.leaf(value, requires_grad=False)

    def ones(self, *shape: int) -> Node:
        return self.constant(np.ones(shape))

    @property
    def leaves(self) -> List[Node]:
        return list(self._leaves)

    def backward(self, root: Node) -> Dict[str, Array]:
        return backward(self, root)


def _check_finite(op: str, value: Array) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite output from op '{op}'")


def _tape_of(op: str, parents: Sequence[Node]) -> Tape:
    tape = parents[0].tape
    for parent in parents[1:]:
        if parent.tape is not tape:
            raise InvalidArgumentError(f"op '{op}' mixes nodes from different tapes")
    return tape


def _record(
    op: str, value: Array, parents: Tuple[Node, ...], backward_fn: BackwardFn
) -> Node:
    _check_finite(op, value)
    tape = _tape_of(op, parents)
    requires_grad = any(p.requires_grad for p in parents)
    node = Node(value, tape, requires_grad=requires_grad, op=op, parents=parents)
    if requires_grad:
        tape.records.append(OpRecord(op, node, parents, backward_fn))
    return node


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise InvalidArgumentError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(tape: Tape, root: Node) -> Dict[str, Array]:
    """Run reverse-mode accumulation from a scalar root.

    Every leaf that requires gradients gets ``grad`` set (zeros when the root
    does not depend on it). Returns the gradients of named leaves by name.
    """
    if root.value.size != 1:
        raise InvalidArgumentError(
            f"backward needs a scalar root, got shape {root.shape}"
        )
    if root.tape is not tape:
        raise InvalidArgumentError("root node belongs to a different tape")

    grads: Dict[int, Array] = {id(root): np.ones_like(root.value)}
    for record in reversed(tape.records):
        grad_out = grads.get(id(record.output))
        if grad_out is None:
            continue
        for parent, grad in zip(record.parents, record.backward_fn(grad_out)):
            if grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = grad

    named: Dict[str, Array] = {}
    for leaf in tape.leaves:
        leaf.grad = grads.get(id(leaf), np.zeros_like(leaf.value))
        if leaf.name is not None:
            named[leaf.name] = leaf.grad
    return named


# ---------------------------------------------------------------------------
# Linear algebra and shape ops


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != b.value.ndim or a.value.ndim not in (2, 3):
        raise InvalidArgumentError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise InvalidArgumentError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def vjp(g: Array) -> Sequence[Array]:
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return _record("matmul", av @ bv, (a, b), vjp)


def transpose(a: Node) -> Node:
    def vjp(g: Array) -> Sequence[Array]:
        return (np.swapaxes(g, -1, -2),)

    return _record("transpose", np.swapaxes(a.value, -1, -2).copy(), (a,), vjp)


def concat_rows(a: Node, b: Node) -> Node:
    """Row-wise concatenation: output row i is [a_i; b_i]."""
    if a.shape[:-1] != b.shape[:-1]:
        raise InvalidArgumentError(
            f"concat_rows: shape mismatch {a.shape} vs {b.shape}"
        )
    split = a.shape[-1]

    def vjp(g: Array) -> Sequence[Array]:
        return g[..., :split], g[..., split:]

    value = np.concatenate([a.value, b.value], axis=-1)
    return _record("concat_rows", value, (a, b), vjp)


def gather_rows(x: Node, index: Array) -> Node:
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise InvalidArgumentError("gather_rows: index must be one-dimensional")
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise InvalidArgumentError("gather_rows: index out of range")
    rows = x.shape[0]

    def vjp(g: Array) -> Sequence[Array]:
        out = np.zeros((rows,) + g.shape[1:])
        np.add.at(out, index, g)
        return (out,)

    return _record("gather_rows", x.value[index], (x,), vjp)


def scatter_mean_rows(x: Node, index: Array, num_rows: int) -> Node:
    """Average the rows of x that share a destination index; empty rows are 0."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (x.shape[0],):
        raise InvalidArgumentError(
            "scatter_mean_rows: one index per input row required"
        )
    if index.size and (index.min() < 0 or index.max() >= num_rows):
        raise InvalidArgumentError("scatter_mean_rows: index out of range")
    counts = np.bincount(index, minlength=num_rows).astype(np.float64)
    denom = np.maximum(counts, 1.0)[:, None]
    out = np.zeros((num_rows,) + x.shape[1:])
    np.add.at(out, index, x.value)

    def vjp(g: Array) -> Sequence[Array]:
        return ((g / denom)[index],)

    return _record("scatter_mean_rows", out / denom, (x,), vjp)


def mean_rows(x: Node) -> Node:
    """Mean over the row axis, keeping it: (n, d) -> (1, d)."""
    n = x.shape[-2]

    def vjp(g: Array) -> Sequence[Array]:
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _record("mean_rows", x.value.mean(axis=-2, keepdims=True), (x,), vjp)


def row_sum(x: Node) -> Node:
    """Sum over the last axis, keeping it: (n, d) -> (n, 1)."""

    def vjp(g: Array) -> Sequence[Array]:
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("row_sum", x.value.sum(axis=-1, keepdims=True), (x,), vjp)


def sum_all(x: Node) -> Node:
    def vjp(g: Array) -> Sequence[Array]:
        return (np.full(x.shape, float(g)),)

    return _record("sum_all", np.array(x.value.sum()), (x,), vjp)


def mean_all(x: Node) -> Node:
    size = x.value.size

    def vjp(g: Array) -> Sequence[Array]:
        return (np.full(x.shape, float(g) / size),)

    return _record("mean_all", np.array(x.value.mean()), (x,), vjp)


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; b may also be a 1-D bias added to every row of a."""
    if a.shape == b.shape:

        def vjp(g: Array) -> Sequence[Array]:
            return g, g

    elif b.value.ndim == 1 and a.shape[-1:] == b.shape:

        def vjp(g: Array) -> Sequence[Array]:
            return g, g.reshape(-1, b.shape[0]).sum(axis=0)

    else:
        raise InvalidArgumentError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _record("add", a.value + b.value, (a, b), vjp)


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)

    def vjp(g: Array) -> Sequence[Array]:
        return g, -g

    return _record("sub", a.value - b.value, (a, b), vjp)


def hadamard(a: Node, b: Node) -> Node:
    _same_shape("hadamard", a, b)
    av, bv = a.value, b.value

    def vjp(g: Array) -> Sequence[Array]:
        return g * bv, g * av

    return _record("hadamard", av * bv, (a, b), vjp)


def divide(a: Node, b: Node) -> Node:
    _same_shape("divide", a, b)
    av, bv = a.value, b.value

    def vjp(g: Array) -> Sequence[Array]:
        return g / bv, -g * av / (bv * bv)

    return _record("divide", av / bv, (a, b), vjp)


def scale_rows(x: Node, s: Node) -> Node:
    """Multiply row i of x by the scalar s[i, 0]."""
    if s.shape != x.shape[:-1] + (1,):
        raise InvalidArgumentError(
            f"scale_rows: expected scale shape {x.shape[:-1] + (1,)}"
        )
    xv, sv = x.value, s.value

    def vjp(g: Array) -> Sequence[Array]:
        return g * sv, (g * xv).sum(axis=-1, keepdims=True)

    return _record("scale_rows", xv * sv, (x, s), vjp)


def scale_by_constant(x: Node, k: float) -> Node:
    def vjp(g: Array) -> Sequence[Array]:
        return (g * k,)

    return _record("scale_by_constant", x.value * k, (x,), vjp)


def add_constant(x: Node, k: float) -> Node:
    def vjp(g: Array) -> Sequence[Array]:
        return (g,)

    return _record("add_constant", x.value + k, (x,), vjp)


def square(x: Node) -> Node:
    xv = x.value

    def vjp(g: Array) -> Sequence[Array]:
        return (2.0 * g * xv,)

    return _record("square", xv * xv, (x,), vjp)


def sqrt(x: Node) -> Node:
    y = np.sqrt(x.value)

    def vjp(g: Array) -> Sequence[Array]:
        return (np.where(y > 0, g / (2.0 * np.where(y > 0, y, 1.0)), 0.0),)

    return _record("sqrt", y, (x,), vjp)


def clamp_min(x: Node, lower: float) -> Node:
    mask = x.value > lower

    def vjp(g: Array) -> Sequence[Array]:
        return (g * mask,)

    return _record("clamp_min", np.where(mask, x.value, lower), (x,), vjp)


# ---------------------------------------------------------------------------
# Activations


def tanh(x: Node) -> Node:
    y = np.tanh(x.value)

    def vjp(g: Array) -> Sequence[Array]:
        return (g * (1.0 - y * y),)

    return _record("tanh", y, (x,), vjp)


def _sigmoid(x: Array) -> Array:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Node) -> Node:
    y = _sigmoid(x.value)

    def vjp(g: Array) -> Sequence[Array]:
        return (g * y * (1.0 - y),)

    return _record("sigmoid", y, (x,), vjp)


def softplus(x: Node) -> Node:
    xv = x.value

    def vjp(g: Array) -> Sequence[Array]:
        return (g * _sigmoid(xv),)

    return _record("softplus", np.logaddexp(0.0, xv), (x,), vjp)


def relu(x: Node) -> Node:
    mask = x.value > 0

    def vjp(g: Array) -> Sequence[Array]:
        return (g * mask,)

    return _record("relu", x.value * mask, (x,), vjp)


def rrelu(
    x: Node,
    lower: float,
    upper: float,
    training: bool,
    rng: Optional[np.random.Generator] = None,
) -> Node:
    """Randomized leaky ReLU.

    Training draws one negative slope per element from U[lower, upper]; the
    draw is kept in the closure so backward reuses it. Evaluation uses the
    midpoint slope.
    """
    if training:
        if rng is None:
            raise InvalidArgumentError("rrelu in training mode needs an rng")
        slope = rng.uniform(lower, upper, size=x.shape)
    else:
        slope = np.full(x.shape, 0.5 * (lower + upper))
    factor = np.where(x.value >= 0, 1.0, slope)

    def vjp(g: Array) -> Sequence[Array]:
        return (g * factor,)

    return _record("rrelu", x.value * factor, (x,), vjp)


def arctanh_clamped(x: Node, eps: float = ATANH_EPS) -> Node:
    bound = 1.0 - eps
    inside = np.abs(x.value) < bound
    xc = np.clip(x.value, -bound, bound)

    def vjp(g: Array) -> Sequence[Array]:
        return (np.where(inside, g / (1.0 - xc * xc), 0.0),)

    return _record("arctanh_clamped", np.arctanh(xc), (x,), vjp)


def _tanh_ratio(a: Array) -> Tuple[Array, Array]:
    b = np.abs(a)
    sign = np.sign(a)
    small = b < SERIES_CUTOFF
    saturated = b >= TANH_SATURATION
    safe = np.where(small, 1.0, b)
    t = np.tanh(safe)
    b2 = b * b
    value = np.where(
        small,
        1.0 - b2 / 3.0 + 2.0 * b2 * b2 / 15.0,
        np.where(saturated, (1.0 - BALL_EPS) / safe, t / safe),
    )
    deriv = np.where(
        small,
        -2.0 * b / 3.0 + 8.0 * b2 * b / 15.0,
        np.where(
            saturated,
            -(1.0 - BALL_EPS) / (safe * safe),
            (safe * (1.0 - t * t) - t) / (safe * safe),
        ),
    )
    return value, deriv * sign


def tanh_ratio(a: Node) -> Node:
    """min(tanh|a|, 1 - BALL_EPS) / |a|, with its limit 1 at a = 0.

    Multiplying a tangent vector of norm n by tanh_ratio(sqrt(c) n) gives its
    exponential map at the origin, already projected into the ball.
    """
    value, deriv = _tanh_ratio(a.value)

    def vjp(g: Array) -> Sequence[Array]:
        return (g * deriv,)

    return _record("tanh_ratio", value, (a,), vjp)


def _artanh_ratio(a: Array) -> Tuple[Array, Array]:
    b = np.abs(a)
    sign = np.sign(a)
    bound = 1.0 - ATANH_EPS
    small = b < SERIES_CUTOFF
    clamped = b >= bound
    safe = np.where(small, 1.0, b)
    inner = np.where(clamped | small, 0.5, b)
    at = np.arctanh(np.minimum(safe, bound))
    b2 = b * b
    value = np.where(small, 1.0 + b2 / 3.0 + b2 * b2 / 5.0, at / safe)
    deriv = np.where(
        small,
        2.0 * b / 3.0 + 4.0 * b2 * b / 5.0,
        np.where(
            clamped,
            -at / (safe * safe),
            (safe / (1.0 - inner * inner) - at) / (safe * safe),
        ),
    )
    return value, deriv * sign


def artanh_ratio(a: Node) -> Node:
    """arctanh(min(|a|, 1 - ATANH_EPS)) / |a|, with its limit 1 at a = 0."""
    value, deriv = _artanh_ratio(a.value)

    def vjp(g: Array) -> Sequence[Array]:
        return (g * deriv,)

    return _record("artanh_ratio", value, (a,), vjp)


def layer_norm(x: Node, eps: float = LAYER_NORM_EPS) -> Node:
    """Normalize the last axis to mean 0 and population std 1, no affine.

    The std gets ``eps`` added so constant rows map to zeros instead of failing.
    """
    xv = x.value
    n = xv.shape[-1]
    centered = xv - xv.mean(axis=-1, keepdims=True)
    std = np.sqrt((centered * centered).mean(axis=-1, keepdims=True))
    denom = std + eps
    y = centered / denom
    safe_std = np.where(std > 0, std, 1.0)

    def vjp(g: Array) -> Sequence[Array]:
        gc = g / denom
        proj = (g * centered).sum(axis=-1, keepdims=True) / (denom * denom)
        gc = gc - proj * centered / (n * safe_std)
        return (gc - gc.mean(axis=-1, keepdims=True),)

    return _record("layer_norm", y, (x,), vjp)


def sqrt_norm(x: Node) -> Node:
    """L2 norm of each row: (n, d) -> (n, 1)."""
    norm = np.linalg.norm(x.value, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    xv = x.value

    def vjp(g: Array) -> Sequence[Array]:
        return (np.where(norm > 0, g * xv / safe, 0.0),)

    return _record("sqrt_norm", norm, (x,), vjp)


# ---------------------------------------------------------------------------
# Losses


def softmax_cross_entropy(logits: Node, targets: Array) -> Node:
    """Mean over rows of -log softmax(logits)[target]."""
    targets = np.asarray(targets, dtype=np.int64)
    rows, cols = logits.shape
    if targets.shape != (rows,):
        raise InvalidArgumentError("softmax_cross_entropy: one target per row required")
    if targets.size and (targets.min() < 0 or targets.max() >= cols):
        raise InvalidArgumentError("softmax_cross_entropy: target out of range")
    z = logits.value
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    picked = log_probs[np.arange(rows), targets]

    def vjp(g: Array) -> Sequence[Array]:
        grad = np.exp(log_probs)
        grad[np.arange(rows), targets] -= 1.0
        return (grad * (float(g) / rows),)

    return _record("softmax_cross_entropy", np.array(-picked.mean()), (logits,), vjp)


def binary_cross_entropy_with_logits(logits: Node, labels: Array) -> Node:
    """Mean over all entries of -[y log s(z) + (1 - y) log(1 - s(z))]."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != logits.shape:
        raise InvalidArgumentError("binary_cross_entropy: labels must match logits")
    z = logits.value
    losses = np.maximum(z, 0.0) - z * labels + np.log1p(np.exp(-np.abs(z)))

    def vjp(g: Array) -> Sequence[Array]:
        return ((_sigmoid(z) - labels) * (float(g) / z.size),)

    return _record("binary_cross_entropy", np.array(losses.mean()), (logits,), vjp)


# ---------------------------------------------------------------------------
# Helpers built from the ops above


def broadcast_col(col: Node, width: int) -> Node:
    """(n, 1) -> (n, width) by multiplying with a constant ones row."""
    return matmul(col, col.tape.ones(1, width))


def broadcast_row(row: Node, height: int) -> Node:
    """(1, m) -> (height, m) by multiplying with a constant ones column."""
    return matmul(row.tape.ones(height, 1), row)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    """First/second moment estimates per named parameter"""

    step: int = 0
    m: Dict[str, Array] = field(default_factory=dict)
    v: Dict[str, Array] = field(default_factory=dict)


def adam_step(
    params: Dict[str, Array],
    grads: Dict[str, Array],
    state: AdamState,
    lr: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[Dict[str, Array], AdamState]:
    """Apply one bias-corrected Adam update to ``params`` in place."""
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step

    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != param.shape:
            raise InvalidArgumentError(
                f"adam_step: gradient shape {g.shape} != parameter shape "
                f"{param.shape} for {name}"
            )
        if name not in state.m:
            state.m[name] = np.zeros_like(param)
            state.v[name] = np.zeros_like(param)

        state.m[name] *= beta1
        state.m[name] += (1.0 - beta1) * g
        state.v[name] *= beta2
        state.v[name] += (1.0 - beta2) * (g * g)

        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state
