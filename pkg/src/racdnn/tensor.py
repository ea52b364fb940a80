"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Graph` is a per-pass tape. While a graph is active (``with
Graph():``), every differentiable operation appends a node holding the ids
of its tracked inputs and a closure that maps the output gradient to input
gradients. The tape is appended in execution order, so it is already
topologically sorted; :func:`backward` walks it once in reverse and
accumulates gradients into the ``grad`` slot of every reachable leaf.

Forward values are identical whether or not a graph is active; recording
only adds bookkeeping.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ArgumentError, GraphError, NumericError, ShapeError

Scalar = Union[int, float]

_tls = threading.local()


def _active_graph() -> Optional["Graph"]:
    return getattr(_tls, "graph", None)


class _Node:
    """One tape entry: a leaf (parameter/input) or a recorded operation."""

    __slots__ = ("inputs", "backward", "tensor")

    def __init__(self, inputs, backward, tensor=None):
        self.inputs = inputs
        self.backward = backward
        self.tensor = tensor


class Graph:
    """Append-only computation tape, confined to one thread per pass."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Graph":
        if _active_graph() is not None:
            raise ArgumentError("a graph is already active on this thread")
        _tls.graph = self
        return self

    def __exit__(self, *exc):
        _tls.graph = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def _leaf_id(self, t: "Tensor") -> Optional[int]:
        """Node id of `t` in this graph, registering leaves lazily."""
        if t._node is not None and t._node[0] is self:
            return t._node[1]
        if t.requires_grad:
            self._nodes.append(_Node((), None, t))
            t._node = (self, len(self._nodes) - 1)
            return t._node[1]
        return None

    def _add_op(self, input_ids, backward_fn) -> int:
        self._nodes.append(_Node(input_ids, backward_fn))
        return len(self._nodes) - 1


class Tensor:
    """n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._node: Optional[tuple[Graph, int]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.size != 1:
            raise ArgumentError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _tracked(t) -> bool:
    """True if gradients will flow through `t` under the active graph."""
    g = _active_graph()
    if g is None or not isinstance(t, Tensor):
        return False
    if t.requires_grad:
        return True
    return t._node is not None and t._node[0] is g


def record(out_data: np.ndarray, inputs: Sequence[Tensor],
           backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap `out_data` in a Tensor, appending a tape node if recording.

    `backward_fn` receives the output gradient and returns one gradient
    per entry of `inputs` (None for inputs that need none).
    """
    out = Tensor(out_data)
    g = _active_graph()
    if g is None:
        return out
    ids = tuple(g._leaf_id(t) if isinstance(t, Tensor) else None for t in inputs)
    if all(i is None for i in ids):
        return out
    out._node = (g, g._add_op(ids, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate `grad` on every leaf reachable from `loss`.

    Gradients accumulate additively, both across multiple uses of a node
    within the graph and across repeated backward calls.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ArgumentError("backward needs a scalar (single-element) tensor")
    if loss._node is None:
        raise GraphError("loss is not attached to any computation graph")
    graph, loss_id = loss._node
    grads: list[Optional[np.ndarray]] = [None] * (loss_id + 1)
    grads[loss_id] = np.ones_like(loss.data)
    for nid in range(loss_id, -1, -1):
        out_grad = grads[nid]
        grads[nid] = None
        if out_grad is None:
            continue
        node = graph._nodes[nid]
        if node.backward is None:
            leaf = node.tensor
            # copy: a backward closure may hand the same array to two inputs
            leaf.grad = out_grad.copy() if leaf.grad is None else leaf.grad + out_grad
            continue
        for in_id, g_in in zip(node.inputs, node.backward(out_grad)):
            if in_id is None or g_in is None:
                continue
            grads[in_id] = g_in if grads[in_id] is None else grads[in_id] + g_in


def zero_grads(params) -> None:
    """Clear the grad slot of every tensor in an iterable or dict."""
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None


def assert_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {what}")
    return t


# ---------------------------------------------------------------------------
# creation


def _validate_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ShapeError("shape must be non-empty")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    return shape


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_validate_shape(shape)), requires_grad)


def full(shape, value: Scalar, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(_validate_shape(shape), float(value)), requires_grad)


def uniform(shape, lo: float, hi: float, rng: np.random.Generator,
            requires_grad: bool = False) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=_validate_shape(shape)), requires_grad)


def he_normal(shape, fan_in: int, rng: np.random.Generator,
              requires_grad: bool = False) -> Tensor:
    """Normal(0, sqrt(2/fan_in)) initialization, suited to ReLU stacks."""
    if fan_in < 1:
        raise ArgumentError("fan_in must be >= 1")
    std = np.sqrt(2.0 / float(fan_in))
    return Tensor(rng.normal(0.0, std, size=_validate_shape(shape)), requires_grad)


def create(shape, init: str = "zeros", *, value: Scalar = 0.0,
           lo: float = -1.0, hi: float = 1.0, fan_in: int = 1,
           seed: Optional[int] = None, requires_grad: bool = False) -> Tensor:
    """Single-entry constructor covering all supported fill rules."""
    if init == "zeros":
        return zeros(shape, requires_grad)
    if init == "constant":
        return full(shape, value, requires_grad)
    rng = np.random.default_rng(seed)
    if init == "uniform":
        return uniform(shape, lo, hi, rng, requires_grad)
    if init == "he-normal":
        return he_normal(shape, fan_in, rng, requires_grad)
    raise ArgumentError(f"unknown init rule {init!r}")


# ---------------------------------------------------------------------------
# elementwise operations


def _binary_data(a: Tensor, b) -> tuple[np.ndarray, bool]:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
        return b.data, True
    return np.float64(b), False


def add(a: Tensor, b) -> Tensor:
    b_data, b_is_tensor = _binary_data(a, b)
    inputs = [a, b] if b_is_tensor else [a]

    def bwd(og):
        return (og, og) if b_is_tensor else (og,)

    return record(a.data + b_data, inputs, bwd)


def sub(a: Tensor, b) -> Tensor:
    b_data, b_is_tensor = _binary_data(a, b)
    inputs = [a, b] if b_is_tensor else [a]

    def bwd(og):
        return (og, -og) if b_is_tensor else (og,)

    return record(a.data - b_data, inputs, bwd)


def mul(a: Tensor, b) -> Tensor:
    b_data, b_is_tensor = _binary_data(a, b)
    inputs = [a, b] if b_is_tensor else [a]
    a_data = a.data

    def bwd(og):
        if b_is_tensor:
            return og * b_data, og * a_data
        return (og * b_data,)

    return record(a_data * b_data, inputs, bwd)


def scale(a: Tensor, c: Scalar) -> Tensor:
    c = float(c)

    def bwd(og):
        return (og * c,)

    return record(a.data * c, [a], bwd)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)
    mask = a.data > 0.0

    def bwd(og):
        return (og * mask,)

    return record(out_data, [a], bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)

    def bwd(og):
        return (og * s * (1.0 - s),)

    return record(s, [a], bwd)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def bwd(og):
        return (og * (1.0 - t * t),)

    return record(t, [a], bwd)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "max-with-0": relu,
    "sigmoid": sigmoid,
    "scalar-scale": scale,
}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by kind name; binary kinds require `b` (tensor or scalar)."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ArgumentError(f"unknown elementwise kind {kind!r}") from None
    if kind in ("add", "sub", "mul", "scalar-scale"):
        if b is None:
            raise ArgumentError(f"elementwise {kind!r} needs a second operand")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------------------
# structural / reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} vs {b.shape}")
    a_data, b_data = a.data, b.data

    def bwd(og):
        return og @ b_data.T, a_data.T @ og

    return record(a_data @ b_data, [a, b], bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}")
    in_shape = a.shape

    def bwd(og):
        return (og.reshape(in_shape),)

    return record(a.data.reshape(shape), [a], bwd)


def sum_all(a: Tensor) -> Tensor:
    in_shape = a.shape

    def bwd(og):
        return (np.full(in_shape, og.reshape(-1)[0]),)

    return record(np.array([a.data.sum()]), [a], bwd)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def masked_add(base: Tensor, delta: Tensor, mask: np.ndarray) -> Tensor:
    """base + delta where `mask` holds; elsewhere the result carries the
    base's bit pattern verbatim. Equivalent to a plain add when delta is
    zero off-mask, but immune to floating-point signed-zero artifacts."""
    if base.shape != delta.shape:
        raise ShapeError(f"shape mismatch: {base.shape} vs {delta.shape}")
    mask = np.broadcast_to(mask, base.shape)
    out_data = np.where(mask, base.data + delta.data, base.data)

    def bwd(og):
        return og, og * mask

    return record(out_data, [base, delta], bwd)
