"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine records every primitive as a node holding references to its
inputs; the record reachable from an output is the tape for that output.
Backward functions are themselves written in terms of the primitives, so a
gradient is an ordinary tape node and can be differentiated again
(reverse-over-reverse). That is what makes the gradient-penalty term of
WGAN-GP trainable: the norm of an input gradient is differentiable with
respect to the network parameters.

Supported shapes are scalars ``()``, vectors ``(n,)`` and matrices
``(n, m)``. There is no broadcasting beyond the bias add; mismatched shapes
raise immediately, which keeps the surface small enough to verify against
finite differences.

Conventions:
  * everything is float64;
  * the derivative of relu at exactly 0 is 0;
  * the derivative of sqrt at exactly 0 is left unguarded (it does not
    occur on the training paths, which take sqrt of sums of squares of
    non-degenerate gradients).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

Vjp = Callable[["Tensor"], tuple]


class Tensor:
    """A tape node: a float64 array plus the operation that produced it."""

    __slots__ = ("data", "parents", "requires_grad", "op", "_vjp")

    def __init__(
        self,
        data,
        parents: tuple = (),
        requires_grad: bool = False,
        op: str = "leaf",
        vjp: Vjp | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise DimensionError(f"tensors are at most 2-d, got shape {arr.shape}")
        self.data = arr
        self.parents = parents
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.op = op
        self._vjp = vjp

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"


def constant(data) -> Tensor:
    return Tensor(data, op="const")


def variable(data) -> Tensor:
    return Tensor(data, requires_grad=True, op="var")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor(a.data + b.data, (a, b), op="add", vjp=lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor(a.data - b.data, (a, b), op="sub", vjp=lambda g: (g, neg(g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return Tensor(
        a.data * b.data, (a, b), op="mul", vjp=lambda g: (mul(g, b), mul(g, a))
    )


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, (a,), op="neg", vjp=lambda g: (neg(g),))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor(a.data * c, (a,), op="scale", vjp=lambda g: (scale(g, c),))


def shift(a: Tensor, c: float) -> Tensor:
    return Tensor(a.data + float(c), (a,), op="shift", vjp=lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims {a.shape} @ {b.shape}")
    return Tensor(
        a.data @ b.data,
        (a, b),
        op="matmul",
        vjp=lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError("transpose expects a 2-d operand")
    return Tensor(
        np.ascontiguousarray(a.data.T),
        (a,),
        op="transpose",
        vjp=lambda g: (transpose(g),),
    )


def add_bias(m: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast bias add: (n, d) + (d,). The only broadcasting allowed."""
    if m.data.ndim != 2 or b.data.ndim != 1 or m.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: shapes {m.shape} and {b.shape}")
    return Tensor(
        m.data + b.data[None, :],
        (m, b),
        op="add_bias",
        vjp=lambda g: (g, sum_cols(g)),
    )


def relu(a: Tensor) -> Tensor:
    mask = constant((a.data > 0).astype(np.float64))
    return Tensor(
        np.maximum(a.data, 0.0), (a,), op="relu", vjp=lambda g: (mul(g, mask),)
    )


def sigmoid(a: Tensor) -> Tensor:
    # Stable in both tails: exp of a non-positive argument only.
    e = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def vjp(g):
        return (mul(g, mul(t, shift(neg(t), 1.0))),)

    t = Tensor(out, (a,), op="sigmoid", vjp=vjp)
    return t


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow; derivative is sigmoid(x)."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return Tensor(out, (a,), op="softplus", vjp=lambda g: (mul(g, sigmoid(a)),))


def log(a: Tensor) -> Tensor:
    return Tensor(
        np.log(a.data), (a,), op="log", vjp=lambda g: (mul(g, reciprocal(a)),)
    )


def reciprocal(a: Tensor) -> Tensor:
    def vjp(g):
        return (neg(mul(g, mul(t, t))),)

    t = Tensor(1.0 / a.data, (a,), op="reciprocal", vjp=vjp)
    return t


def sqrt(a: Tensor) -> Tensor:
    def vjp(g):
        return (mul(g, scale(reciprocal(t), 0.5)),)

    t = Tensor(np.sqrt(a.data), (a,), op="sqrt", vjp=vjp)
    return t


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor(
        np.sum(a.data), (a,), op="sum_all", vjp=lambda g: (expand_scalar(g, shape),)
    )


def sum_rows(a: Tensor) -> Tensor:
    """Row sums: (n, d) -> (n,)."""
    if a.data.ndim != 2:
        raise DimensionError("sum_rows expects a 2-d operand")
    d = a.shape[1]
    return Tensor(
        a.data.sum(axis=1), (a,), op="sum_rows", vjp=lambda g: (expand_cols(g, d),)
    )


def sum_cols(a: Tensor) -> Tensor:
    """Column sums: (n, d) -> (d,)."""
    if a.data.ndim != 2:
        raise DimensionError("sum_cols expects a 2-d operand")
    n = a.shape[0]
    return Tensor(
        a.data.sum(axis=0), (a,), op="sum_cols", vjp=lambda g: (expand_rows(g, n),)
    )


def expand_scalar(s: Tensor, shape: tuple) -> Tensor:
    if s.shape != ():
        raise DimensionError("expand_scalar expects a scalar")
    return Tensor(
        np.full(shape, s.data),
        (s,),
        op="expand_scalar",
        vjp=lambda g: (sum_all(g),),
    )


def expand_cols(v: Tensor, d: int) -> Tensor:
    """Repeat a vector (n,) across d columns -> (n, d)."""
    if v.data.ndim != 1:
        raise DimensionError("expand_cols expects a 1-d operand")
    return Tensor(
        np.repeat(v.data[:, None], d, axis=1),
        (v,),
        op="expand_cols",
        vjp=lambda g: (sum_rows(g),),
    )


def expand_rows(v: Tensor, n: int) -> Tensor:
    """Repeat a vector (d,) across n rows -> (n, d)."""
    if v.data.ndim != 1:
        raise DimensionError("expand_rows expects a 1-d operand")
    return Tensor(
        np.repeat(v.data[None, :], n, axis=0),
        (v,),
        op="expand_rows",
        vjp=lambda g: (sum_cols(g),),
    )


# derived helpers


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def _safe_reciprocal(a: Tensor) -> Tensor:
    """1/x with the convention 0 -> 0 (used for norm subgradients)."""

    def vjp(g):
        return (mul(neg(g), square(_safe_reciprocal(a))),)

    zero = a.data == 0.0
    data = np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, a.data))
    return Tensor(data, (a,), op="safe_reciprocal", vjp=vjp)


def row_norms(a: Tensor) -> Tensor:
    """Euclidean norm of each row of a matrix: (n, d) -> (n,).

    A fused primitive so the all-zero row corner gets the subgradient 0
    instead of the 0/0 that sqrt'(0) would produce; everywhere else the
    gradient is the exact x / ||x||.
    """

    def vjp(g):
        inv = _safe_reciprocal(norms)
        return (mul(expand_cols(mul(g, inv), a.shape[1]), a),)

    norms = Tensor(
        np.sqrt(np.sum(a.data * a.data, axis=1)), (a,), op="row_norms", vjp=vjp
    )
    return norms


# ---------------------------------------------------------------------------
# the tape and differentiation


def toposort(root: Tensor) -> list[Tensor]:
    """Nodes reachable from root that require grad, inputs before consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order


def grad(output: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
    """Gradients of a scalar output with respect to each tensor in wrt.

    The returned gradients are tape nodes, so any scalar function of them
    (e.g. a norm) can be passed to grad() again. Tensors in wrt that the
    output does not depend on get exact zeros.
    """
    if output.shape != ():
        raise ContractError(
            f"grad expects a scalar output, got shape {output.shape}"
        )
    order = toposort(output)
    grads: dict[int, Tensor] = {id(output): constant(1.0)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            held = grads.get(id(parent))
            grads[id(parent)] = pg if held is None else add(held, pg)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(g if g is not None else constant(np.zeros(w.shape)))
    return out


# ---------------------------------------------------------------------------
# parameter sets and the shared MLP forward pass


class ParamSet:
    """An ordered, named collection of parameter tensors.

    Names are unique and shapes are fixed at construction; the backing
    arrays are locked read-only so updates must build a new ParamSet.
    """

    def __init__(self, items: Iterable[tuple[str, np.ndarray]]):
        self._items: dict[str, Tensor] = {}
        for name, arr in items:
            if name in self._items:
                raise ContractError(f"duplicate parameter name {name!r}")
            a = np.array(arr, dtype=np.float64)
            a.setflags(write=False)
            self._items[name] = Tensor(a, requires_grad=True, op="param")

    @property
    def names(self) -> list[str]:
        return list(self._items)

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __len__(self) -> int:
        return len(self._items)

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._items.items()}

    def flat(self) -> np.ndarray:
        """All components concatenated in name order."""
        return np.concatenate([v.data.ravel() for v in self._items.values()])

    def replace(self, arrays: dict[str, np.ndarray]) -> "ParamSet":
        """A new ParamSet with the same names and shapes, new values."""
        out = []
        for name, t in self._items.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != t.shape:
                raise DimensionError(
                    f"parameter {name!r}: shape {a.shape} != {t.shape}"
                )
            out.append((name, a))
        return ParamSet(out)

    def map(self, fn) -> "ParamSet":
        return ParamSet([(k, fn(v.data)) for k, v in self._items.items()])


def init_mlp_params(layer_sizes: Sequence[int], rng: np.random.Generator) -> ParamSet:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases, seeded."""
    items = []
    for i in range(len(layer_sizes) - 1):
        fan_in, fan_out = layer_sizes[i], layer_sizes[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        items.append((f"W{i}", rng.uniform(-bound, bound, size=(fan_in, fan_out))))
        items.append((f"b{i}", np.zeros(fan_out)))
    return ParamSet(items)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "identity": lambda t: t}


def forward_mlp(params: ParamSet, x: Tensor, activations: Sequence[str]) -> Tensor:
    """Run a fully connected stack W0..Wk with one activation tag per layer.

    x is (batch, features); the batch dimension is preserved throughout.
    """
    n_layers = len(params) // 2
    if len(activations) != n_layers:
        raise ContractError(
            f"{len(activations)} activation tags for {n_layers} layers"
        )
    h = x
    for i in range(n_layers):
        w, b = params[f"W{i}"], params[f"b{i}"]
        if h.data.ndim != 2 or h.shape[1] != w.shape[0]:
            raise DimensionError(
                f"layer {i}: input shape {h.shape} does not match "
                f"weight shape {w.shape}"
            )
        act = activations[i]
        if act not in _ACTIVATIONS:
            raise ContractError(f"layer {i}: unknown activation {act!r}")
        h = _ACTIVATIONS[act](add_bias(matmul(h, w), b))
    return h
