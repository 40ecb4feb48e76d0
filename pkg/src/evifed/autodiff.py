"""Minimal reverse-mode differentiation over float64 numpy arrays.

Operations are recorded on the active :class:`Graph` (a tape kept per
thread).  Outside of a graph, operations compute values only, which is how
frozen evaluation runs without bookkeeping.

    with Graph() as g:
        y = matmul(x, w)
        loss = sum_all(y)
    backward(loss, g)
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from evifed import special
from evifed.errors import DimensionError, InvalidInputError

EVIDENCE_CEILING = 10.0

_local = threading.local()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidInputError(f"item() needs a single value, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Graph:
    """Tape of recorded operations; recording order is a topological order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, rule) -> None:
        self.nodes.append(Node(inputs, output, rule))

    def __len__(self) -> int:
        return len(self.nodes)


def active_graph() -> Graph | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording inside an enclosing graph."""

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        self._saved = list(stack)
        stack.clear()
        return self

    def __exit__(self, *exc):
        _local.stack[:] = self._saved


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], rule, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise InvalidInputError(f"{op} produced non-finite values")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    graph = active_graph()
    out.requires_grad = needs and graph is not None
    if out.requires_grad:
        graph.record(inputs, out, rule)
    return out


def backward(loss: Tensor, graph: Graph) -> None:
    """Accumulate dloss/dleaf into ``.grad`` of every leaf that requires grad."""
    if loss.data.size != 1:
        raise InvalidInputError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(node.output) for node in graph.nodes}
    if id(loss) not in produced:
        if loss.requires_grad:
            _accumulate_leaf(loss, np.ones_like(loss.data))
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.rule(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in produced:
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            else:
                _accumulate_leaf(inp, gi)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64).reshape(t.shape)
    else:
        t.grad = t.grad + g


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched 3-D operands with equal batch size."""
    a, b = as_tensor(a), as_tensor(b)
    ok = (a.data.ndim == b.data.ndim and a.data.ndim in (2, 3)
          and a.shape[-1] == b.shape[-2]
          and (a.data.ndim == 2 or a.shape[0] == b.shape[0]))
    if not ok:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), rule, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis of ``x`` (the one broadcast allowed)."""
    x, b = as_tensor(x), as_tensor(b)
    if b.data.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match rows of {x.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def mul_scalar_tensor(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every entry of ``x`` by a one-element tensor ``s``."""
    x, s = as_tensor(x), as_tensor(s)
    if s.size != 1:
        raise DimensionError(f"mul_scalar_tensor: scale must have one element, got {s.shape}")
    xd, sv = x.data, s.data.reshape(())

    def rule(g):
        return g * sv, np.sum(g * xd).reshape(s.shape)

    return _result(xd * sv, (x, s), rule, "mul_scalar_tensor")


# -- reductions and reshaping -------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),),
                   "sum_all")


def sum_axis(x: Tensor, axis: int) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(x.data.sum(axis=axis), (x,), rule, "sum_axis")


def mean_axis(x: Tensor, axis: int) -> Tensor:
    x = as_tensor(x)
    n = x.shape[axis]
    return scale(sum_axis(x, axis), 1.0 / n)


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return scale(sum_all(x), 1.0 / x.size)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from exc
    return _result(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    inverse = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from exc
    stops = np.cumsum([t.shape[axis] for t in tensors]).tolist()
    starts = [0] + stops[:-1]
    lead = (slice(None),) * (axis % out.ndim)

    def rule(g):
        return tuple(g[lead + (slice(a, b),)] for a, b in zip(starts, stops))

    return _result(out, tensors, rule, "concat")


def index(x: Tensor, key) -> Tensor:
    """Basic (slice / integer) indexing."""
    x = as_tensor(x)
    shape = x.shape

    def rule(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _result(np.array(x.data[key]), (x,), rule, "index")


# -- elementwise nonlinearities -------------------------------------------------


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def exp_activation(x: Tensor, ceiling: float = EVIDENCE_CEILING) -> Tensor:
    """exp(min(x, ceiling)); the clamp bounds evidence and zeroes the gradient above it."""
    x = as_tensor(x)
    clipped = np.minimum(x.data, ceiling)
    out = np.exp(clipped)
    inside = x.data <= ceiling
    return _result(out, (x,), lambda g: (g * out * inside,), "exp_activation")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise InvalidInputError("log: non-positive input")
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis with max subtraction."""
    x = as_tensor(x)
    if x.size == 0 or x.shape[-1] == 0:
        raise InvalidInputError(f"softmax_rows: empty input of shape {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), rule, "softmax_rows")


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine terms)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def rule(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _result(xhat, (x,), rule, "layer_norm")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or the rate is zero."""
    x = as_tensor(x)
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def digamma(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result(np.asarray(special.digamma(xd)), (x,),
                   lambda g: (g * special.trigamma(xd),), "digamma")


def lgamma(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result(np.asarray(special.lgamma(xd)), (x,),
                   lambda g: (g * special.digamma(xd),), "lgamma")


# -- fused attention ------------------------------------------------------------


def multihead_prefix_attention(qkv: Tensor, pK: Tensor | None, pV: Tensor | None,
                               heads: int) -> Tensor:
    """Multi-head attention over packed ``qkv`` of shape (N, L, 3m).

    Optional prefixes ``pK``/``pV`` of shape (P, m) are shared by every
    sequence in the batch and split across heads like the keys and values.
    Per head this is softmax(Q [pK; K]^T / sqrt(m / heads)) [pV; V].
    """
    qkv = as_tensor(qkv)
    n, length, three_m = qkv.shape
    m = three_m // 3
    if three_m != 3 * m or m % heads:
        raise DimensionError(f"packed qkv width {three_m} incompatible with {heads} heads")
    dh = m // heads
    s = 1.0 / np.sqrt(dh)

    def split(a):  # (N, L, m) -> (N, H, L, dh)
        return a.reshape(n, a.shape[1], heads, dh).transpose(0, 2, 1, 3)

    q = split(qkv.data[..., :m])
    k = split(qkv.data[..., m:2 * m])
    v = split(qkv.data[..., 2 * m:])
    has_prefix = pK is not None and pK.shape[0] > 0
    if has_prefix:
        pK, pV = as_tensor(pK), as_tensor(pV)
        if pK.shape != pV.shape or pK.shape[1] != m:
            raise DimensionError(f"prefix shapes {pK.shape}, {pV.shape} incompatible with width {m}")
        P = pK.shape[0]
        pk = pK.data.reshape(P, heads, dh).transpose(1, 0, 2)
        pv = pV.data.reshape(P, heads, dh).transpose(1, 0, 2)
        k = np.concatenate([np.broadcast_to(pk, (n,) + pk.shape), k], axis=2)
        v = np.concatenate([np.broadcast_to(pv, (n,) + pv.shape), v], axis=2)
    else:
        P = 0
    scores = (q @ k.transpose(0, 1, 3, 2)) * s
    scores -= scores.max(axis=-1, keepdims=True)
    a = np.exp(scores)
    a /= a.sum(axis=-1, keepdims=True)
    o = a @ v
    out = o.transpose(0, 2, 1, 3).reshape(n, length, m)

    def rule(g):
        go = split(g)
        da = go @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ go
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * s
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q

        def merge(x):  # (N, H, L, dh) -> (N, L, m)
            return x.transpose(0, 2, 1, 3).reshape(n, x.shape[2], m)

        gqkv = np.concatenate([merge(dq), merge(dk[:, :, P:]), merge(dv[:, :, P:])], axis=-1)
        if not has_prefix:
            return (gqkv,)
        gpk = dk[:, :, :P].sum(axis=0).transpose(1, 0, 2).reshape(P, m)
        gpv = dv[:, :, :P].sum(axis=0).transpose(1, 0, 2).reshape(P, m)
        return gqkv, gpk, gpv

    inputs = (qkv, pK, pV) if has_prefix else (qkv,)
    return _result(out, inputs, rule, "multihead_prefix_attention")
