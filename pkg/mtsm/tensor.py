# mtsm/tensor.py
"""
Dense float64 tensors with a reverse-mode tape.

Operations record themselves on the Graph active in the current context:

    with Graph() as g:
        loss = total(mul(x, x))
    grads = backward(g, loss)

Outside a graph nothing is recorded, which is how decoding runs. Every
operation returns a new tensor; inputs are never mutated.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from mtsm.errors import (
    ConfigError,
    ContractError,
    DegenerateRowError,
    DimensionError,
    DomainError,
    NonFiniteError,
    VocabError,
)

Array = np.ndarray
BackwardFn = Callable[[Array], Sequence[Optional[Array]]]

_active_graph: contextvars.ContextVar = contextvars.ContextVar("mtsm_active_graph", default=None)


# ==============================================================================
# Tensor
# ==============================================================================

class Tensor:
    """
    Row-major float64 array plus gradient bookkeeping.
    A 0-d tensor is a scalar (loss values, broadcast operands).
    """
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        self.data: Array = arr
        self.requires_grad = requires_grad
        self.grad: Optional[Array] = None
        self.name = name
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")

    @classmethod
    def _wrap(cls, arr: Array, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        return self.data.copy()

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar for model code
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x: Union[Tensor, float, int, Array]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ==============================================================================
# Graph
# ==============================================================================

@dataclass(frozen=True)
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Graph:
    """Ordered tape of executed operations. Confined to one thread."""

    def __init__(self):
        self.nodes: List[Node] = []
        self._token = None

    def __enter__(self) -> "Graph":
        if self._token is not None:
            raise ContractError("graph is already active")
        self._token = _active_graph.set(self)
        return self

    def __exit__(self, *exc) -> bool:
        _active_graph.reset(self._token)
        self._token = None
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node):
        self.nodes.append(node)


def active_graph() -> Optional[Graph]:
    return _active_graph.get()


def apply(op: str, out: Array, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """
    Wrap a forward result and register its backward rule.
    `backward_fn(g)` returns one gradient (or None) per input.
    """
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    requires_grad = any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad)
    graph = _active_graph.get()
    if requires_grad and graph is not None:
        graph.record(Node(op, tuple(inputs), result, backward_fn))
    return result


def backward(graph: Graph, loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, Array]:
    """
    Reverse pass over `graph` from a scalar `loss`.

    Sets `.grad` on every requires_grad tensor the loss depends on and
    returns them keyed by tensor. Tensors listed in `wrt` that the loss
    does not reach get a zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: Dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    reached: Dict[int, Tensor] = {id(loss): loss} if loss.requires_grad else {}

    for node in reversed(graph.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        for inp, ig in zip(node.inputs, node.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            reached[key] = inp
            grads[key] = grads[key] + ig if key in grads else ig

    result: Dict[Tensor, Array] = {}
    for key, t in reached.items():
        t.grad = np.asarray(grads[key], dtype=np.float64).reshape(t.shape)
        result[t] = t.grad
    for t in wrt or ():
        if t not in result:
            t.grad = np.zeros_like(t.data)
            result[t] = t.grad
    return result


# ==============================================================================
# Elementwise
# ==============================================================================

def _check_binary(op: str, a: Tensor, b: Tensor):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise DimensionError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def _reduce_to(g: Array, shape: Tuple[int, ...]) -> Array:
    # undo scalar broadcast
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("add", a, b)
    return apply("add", a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("sub", a, b)
    return apply("sub", a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("mul", a, b)
    return apply("mul", a.data * b.data, (a, b),
                 lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return apply("scale", a.data * factor, (a,), lambda g: (g * factor,))


def relu(a: Tensor) -> Tensor:
    # tie at exactly 0 passes no gradient
    live = a.data > 0
    return apply("relu", np.where(live, a.data, 0.0), (a,), lambda g: (g * live,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return apply("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError(f"log of non-positive value (min {a.data.min():.6g})")
    x = a.data
    return apply("log", np.log(x), (a,), lambda g: (g / x,))


_ELEMENTWISE = {
    "relu": relu,
    "exp": exp,
    "log": log,
    "add": add,
    "mul": mul,
    "scale": scale,
}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch by name: relu/exp/log take one tensor, add/mul two, scale a tensor and a float."""
    fn = _ELEMENTWISE.get(kind)
    if fn is None:
        raise ConfigError(f"unknown elementwise kind '{kind}', expected one of {sorted(_ELEMENTWISE)}")
    return fn(*operands)


# ==============================================================================
# Linear algebra and reshaping
# ==============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return apply("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return apply("transpose", np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    return apply("reshape", a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(a.shape),))


def select(a: Tensor, index: int) -> Tensor:
    """Slice `index` along the first axis."""
    if a.ndim < 2 or not (0 <= index < a.shape[0]):
        raise DimensionError(f"select: index {index} invalid for shape {a.shape}")

    def _back(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return apply("select", a.data[index].copy(), (a,), _back)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    ax = axis % parts[0].ndim
    for p in parts[1:]:
        if p.ndim != parts[0].ndim or any(
            p.shape[i] != parts[0].shape[i] for i in range(p.ndim) if i != ax
        ):
            raise DimensionError(f"concat: shapes {[q.shape for q in parts]} disagree off axis {axis}")
    splits = np.cumsum([p.shape[ax] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=ax)
    return apply("concat", out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=ax)))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d]."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not fit {x.shape}")
    d = b.shape[0]
    return apply("add_bias", x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, d).sum(axis=0)))


def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, W)
    return add_bias(y, b) if b is not None else y


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a scalar."""
    return apply("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of `table` by integer id."""
    idx = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    if idx.ndim != 1 or idx.size == 0:
        raise DimensionError(f"embedding expects a non-empty id sequence, got shape {idx.shape}")
    if idx.min() < 0 or idx.max() >= rows:
        bad = int(idx[(idx < 0) | (idx >= rows)][0])
        raise VocabError(f"token id {bad} outside vocabulary of size {rows}")

    def _back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return apply("embedding", table.data[idx], (table,), _back)


# ==============================================================================
# Normalizations
# ==============================================================================

def _mask_array(mask, shape: Tuple[int, ...]) -> Array:
    m = mask.data != 0 if isinstance(mask, Tensor) else np.asarray(mask, dtype=bool)
    if m.shape != shape:
        raise DimensionError(f"mask shape {m.shape} does not match {shape}")
    return m


def softmax_rows(t: Tensor, mask=None) -> Tensor:
    """
    Softmax over the last axis with the row max subtracted first.
    `mask` is boolean with True = allowed; masked entries come out exactly 0.
    """
    x = t.data
    allowed = None
    if mask is not None:
        allowed = _mask_array(mask, x.shape)
        if not allowed.any(axis=-1).all():
            raise DegenerateRowError("softmax row has every position masked")
        x = np.where(allowed, x, -np.inf)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    if allowed is not None:
        y = np.where(allowed, y, 0.0)
    return apply("softmax_rows", y, (t,),
                 lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def layer_norm(t: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis (population variance), then gain * x + bias."""
    d = t.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs at least 2 features, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not fit width {d}")
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")

    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + eps)
    xhat = (x - mu) * inv_std
    out = xhat * gain.data + bias.data

    def _back(g):
        dxhat = g * gain.data
        dx = inv_std / d * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return (dx, dgain, dbias)

    return apply("layer_norm", out, (t, gain, bias), _back)


def dropout(t: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no generator is given."""
    if rate <= 0.0 or rng is None:
        return t
    keep = (rng.random(t.shape) >= rate) / (1.0 - rate)
    return apply("dropout", t.data * keep, (t,), lambda g: (g * keep,))
