"""Reverse-mode automatic differentiation over numpy arrays.

Graphs are built by running ordinary Python code on :class:`Tensor` objects.
Every operation whose inputs require gradients appends a node to the owning
:class:`Graph`; the node list is append-only and therefore already in
topological order. ``Graph.backward`` walks it in reverse.

Operations on inputs that do not require gradients are evaluated eagerly and
recorded nowhere, so the same model code doubles as a fast inference path.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715
LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class GraphError(RuntimeError):
    """Misuse of a graph, e.g. calling backward before any forward pass."""


class ParamStore:
    """Named float64 arrays with matching gradient accumulators."""

    def __init__(self) -> None:
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.values:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=DTYPE)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.values if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def size(self) -> int:
        return sum(v.size for v in self.values.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self.values.items():
            out.add(name, value.copy())
        return out


class Tensor:
    """An array value, optionally attached to a graph node."""

    __slots__ = ("value", "grad", "requires_grad", "graph", "node")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, graph: "Graph | None" = None,
                 node: int | None = None) -> None:
        self.value = np.asarray(value, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.graph = graph
        self.node = node
        self.grad = np.zeros_like(self.value) if requires_grad and node is not None else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.value

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class _Node:
    __slots__ = ("op", "parents", "vjps", "sink")

    def __init__(self, op: str, parents: tuple, vjps: tuple, sink=None) -> None:
        self.op = op
        self.parents = parents
        self.vjps = vjps
        self.sink = sink


class Graph:
    """Append-only tape of operation records."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def variable(self, value, name: str = "var") -> Tensor:
        """A leaf that requires gradients; its gradient lands in ``.grad``."""
        node_id = len(self.nodes)
        t = Tensor(value, requires_grad=True, graph=self, node=node_id)
        self.nodes.append(_Node(f"leaf:{name}", (), (), sink=t.grad))
        self._leaves[node_id] = t
        return t

    def param(self, store: ParamStore, name: str) -> Tensor:
        """A leaf bound to ``store``; gradients accumulate into ``store.grads[name]``."""
        node_id = len(self.nodes)
        t = Tensor.__new__(Tensor)
        t.value = store.values[name]
        t.requires_grad = True
        t.graph = self
        t.node = node_id
        t.grad = store.grads[name]
        self.nodes.append(_Node(f"param:{name}", (), (), sink=t.grad))
        self._leaves[node_id] = t
        return t

    def _record(self, op: str, value: np.ndarray, parents: tuple, vjps: tuple) -> Tensor:
        node_id = len(self.nodes)
        self.nodes.append(_Node(op, parents, vjps))
        t = Tensor.__new__(Tensor)
        t.value = value
        t.requires_grad = True
        t.graph = self
        t.node = node_id
        t.grad = None
        return t

    def backward(self, output: Tensor, seed=None) -> None:
        """Accumulate d(output . seed)/d(leaf) into every leaf reachable from ``output``."""
        if not isinstance(output, Tensor) or output.graph is not self or output.node is None:
            raise GraphError("backward called on a tensor that was not produced by this graph")
        if not self.nodes:
            raise GraphError("backward before forward: graph is empty")
        if seed is None:
            if output.value.size != 1:
                raise ShapeError("seed required for non-scalar output")
            seed = np.ones_like(output.value)
        seed = np.asarray(seed, dtype=DTYPE)
        if seed.shape != output.shape:
            raise ShapeError(f"seed shape {seed.shape} != output shape {output.shape}")
        pending: dict[int, np.ndarray] = {output.node: seed}
        for node_id in range(output.node, -1, -1):
            g = pending.pop(node_id, None)
            if g is None:
                continue
            node = self.nodes[node_id]
            if node.sink is not None:
                node.sink += g
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                if parent is None:
                    continue
                pg = vjp(g)
                prev = pending.get(parent.node)
                pending[parent.node] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# op plumbing


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


as_tensor = _as_tensor


def _graph_of(*xs) -> Graph | None:
    for x in xs:
        if isinstance(x, Tensor) and x.requires_grad and x.graph is not None:
            return x.graph
    return None


def _next_id(graph: Graph | None) -> str:
    return str(len(graph.nodes)) if graph is not None else "eager"


def _compute(op: str, graph: Graph | None, fn: Callable, *shapes):
    try:
        return fn()
    except ValueError as exc:
        raise ShapeError(f"node {_next_id(graph)} ({op}): incompatible shapes {shapes}: {exc}") from None


def _emit(op: str, value, inputs: Sequence, vjps: Sequence[Callable]) -> Tensor:
    graph = _graph_of(*inputs)
    if graph is None:
        return Tensor(value)
    parents = []
    fns = []
    for x, fn in zip(inputs, vjps):
        if isinstance(x, Tensor) and x.requires_grad:
            if x.graph is not graph:
                raise GraphError(f"node {len(graph.nodes)} ({op}): inputs belong to different graphs")
            parents.append(x)
            fns.append(fn)
    return graph._record(op, np.asarray(value, dtype=DTYPE), tuple(parents), tuple(fns))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    v = _compute("add", _graph_of(a, b), lambda: a.value + b.value, a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit("add", v, (a, b), (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    v = _compute("sub", _graph_of(a, b), lambda: a.value - b.value, a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit("sub", v, (a, b), (lambda g: _unbroadcast(g, sa), lambda g: -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.value, b.value
    v = _compute("mul", _graph_of(a, b), lambda: av * bv, a.shape, b.shape)
    return _emit("mul", v, (a, b), (lambda g: _unbroadcast(g * bv, av.shape),
                                    lambda g: _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.value, b.value
    v = _compute("div", _graph_of(a, b), lambda: av / bv, a.shape, b.shape)
    return _emit("div", v, (a, b), (lambda g: _unbroadcast(g / bv, av.shape),
                                    lambda g: _unbroadcast(-g * v / bv, bv.shape)))


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    av = a.value
    v = av ** exponent
    return _emit("pow", v, (a,), (lambda g: g * exponent * av ** (exponent - 1),))


def sin(a) -> Tensor:
    a = _as_tensor(a)
    av = a.value
    return _emit("sin", np.sin(av), (a,), (lambda g: g * np.cos(av),))


def cos(a) -> Tensor:
    a = _as_tensor(a)
    av = a.value
    return _emit("cos", np.cos(av), (a,), (lambda g: -g * np.sin(av),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    v = np.exp(a.value)
    return _emit("exp", v, (a,), (lambda g: g * v,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    v = np.tanh(a.value)
    return _emit("tanh", v, (a,), (lambda g: g * (1.0 - v * v),))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    v = np.sqrt(a.value)
    return _emit("sqrt", v, (a,), (lambda g: g * 0.5 / v,))


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    s = np.sign(a.value)
    return _emit("abs", np.abs(a.value), (a,), (lambda g: g * s,))


def relu(a) -> Tensor:
    """Positive-part clamp max(x, 0); the subgradient at 0 is taken as 0."""
    a = _as_tensor(a)
    mask = a.value > 0
    return _emit("relu", np.where(mask, a.value, 0.0), (a,), (lambda g: g * mask,))


def gelu(a) -> Tensor:
    """tanh-approximated GeLU."""
    a = _as_tensor(a)
    x = a.value
    x2 = x * x
    t = np.tanh(GELU_C * (x + GELU_A * x2 * x))
    v = 0.5 * x * (1.0 + t)

    def vjp(g):
        dt = (1.0 - t * t) * (GELU_C * (1.0 + 3.0 * GELU_A * x2))
        return g * (0.5 * (1.0 + t) + 0.5 * x * dt)

    return _emit("gelu", v, (a,), (vjp,))


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"node {_next_id(_graph_of(a, b))} (matmul): operands must be at least 2-D, "
                         f"got {av.shape} and {bv.shape}")
    v = _compute("matmul", _graph_of(a, b), lambda: av @ bv, av.shape, bv.shape)
    return _emit("matmul", v, (a, b), (
        lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape),
        lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape),
    ))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    v = _compute("reshape", _graph_of(a), lambda: a.value.reshape(shape), old, shape)
    return _emit("reshape", v, (a,), (lambda g: g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    v = _compute("transpose", _graph_of(a), lambda: np.transpose(a.value, axes), a.shape, axes)
    return _emit("transpose", v, (a,), (lambda g: np.transpose(g, inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    v = np.swapaxes(a.value, ax1, ax2)
    return _emit("swapaxes", v, (a,), (lambda g: np.swapaxes(g, ax1, ax2),))


def concat(xs: Iterable, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    graph = _graph_of(*xs)
    v = _compute("concat", graph, lambda: np.concatenate([x.value for x in xs], axis=axis),
                 *[x.shape for x in xs])
    ax = axis % v.ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])
    vjps = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        sl = (slice(None),) * ax + (slice(int(lo), int(hi)),)
        vjps.append(lambda g, sl=sl: g[sl])
    return _emit("concat", v, xs, vjps)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    expanded = [reshape(x, x.shape[:axis % (x.ndim + 1)] + (1,) + x.shape[axis % (x.ndim + 1):])
                for x in xs]
    return concat(expanded, axis=axis)


def getitem(a, index) -> Tensor:
    """Basic slicing / integer indexing (no fancy indexing; see :func:`take`)."""
    a = _as_tensor(a)
    shape = a.shape
    v = _compute("slice", _graph_of(a), lambda: a.value[index], shape, index)

    def vjp(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[index] = g
        return out

    return _emit("slice", v, (a,), (vjp,))


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array; repeated indices accumulate."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape
    ax = axis % a.ndim
    v = _compute("take", _graph_of(a), lambda: np.take(a.value, idx, axis=ax), shape, idx.shape)

    def vjp(g):
        out = np.zeros(shape, dtype=DTYPE)
        gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        gm = gm.reshape((idx.size,) + gm.shape[idx.ndim:])
        np.add.at(np.moveaxis(out, ax, 0), idx.ravel(), gm)
        return out

    return _emit("take", v, (a,), (vjp,))


# ---------------------------------------------------------------------------
# reductions


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    v = np.sum(a.value, axis=axis, keepdims=keepdims)
    return _emit("sum", v, (a,), (lambda g: _expand_reduced(g, shape, axis, keepdims),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    v = np.mean(a.value, axis=axis, keepdims=keepdims)
    n = a.value.size / max(np.size(v), 1)
    return _emit("mean", v, (a,), (lambda g: _expand_reduced(g, shape, axis, keepdims) / n,))


def max_(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    a = _as_tensor(a)
    av = a.value
    arg = np.expand_dims(np.argmax(av, axis=axis), axis)
    v = np.take_along_axis(av, arg, axis=axis)
    if not keepdims:
        v = np.squeeze(v, axis=axis)

    def vjp(g):
        out = np.zeros_like(av)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(out, arg, gk, axis=axis)
        return out

    return _emit("max", v, (a,), (vjp,))


def norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; gradient at the origin is taken as 0."""
    a = _as_tensor(a)
    av = a.value
    v = np.sqrt(np.sum(av * av, axis=axis))

    def vjp(g):
        denom = np.expand_dims(v, axis)
        safe = np.where(denom > 0, denom, 1.0)
        return np.where(denom > 0, np.expand_dims(g, axis) * av / safe, 0.0)

    return _emit("norm", v, (a,), (vjp,))


# ---------------------------------------------------------------------------
# composite layers with fused gradients


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _emit("softmax", y, (a,), (lambda g: y * (g - np.sum(g * y, axis=-1, keepdims=True)),))


def layer_norm(a, gamma, beta, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gamma.value
    v = _compute("layer_norm", _graph_of(a, gamma, beta), lambda: xhat * gv + beta.value,
                 a.shape, gamma.shape, beta.shape)

    def vjp_x(g):
        dxhat = g * gv
        return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                      - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))

    lead = tuple(range(x.ndim - 1))
    return _emit("layer_norm", v, (a, gamma, beta), (
        vjp_x,
        lambda g: _unbroadcast(np.sum(g * xhat, axis=lead), gv.shape),
        lambda g: _unbroadcast(np.sum(g, axis=lead), beta.shape),
    ))


# ---------------------------------------------------------------------------
# verification


def gradient_check(loss_fn: Callable[[Graph], Tensor], params: ParamStore, step: float = 1e-4,
                   n_coords: int = 200, rng: np.random.Generator | None = None, floor: float = 1e-8) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn`` receives a fresh :class:`Graph` and must return a scalar tensor
    built from ``params`` through ``Graph.param``. At least ``n_coords``
    coordinates (or all of them, if fewer exist) are sampled uniformly.
    The relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    params.zero_grad()
    graph = Graph()
    out = loss_fn(graph)
    base = float(np.asarray(out.value).reshape(()))
    if not math.isfinite(base):
        raise ValueError(f"non-finite loss {base}")
    if out.graph is graph and out.requires_grad:
        graph.backward(out)

    coords = [(name, i) for name in params for i in range(params[name].size)]
    if len(coords) > n_coords:
        picks = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(picks)]

    def evaluate() -> float:
        val = float(np.asarray(loss_fn(Graph()).value).reshape(()))
        if not math.isfinite(val):
            raise ValueError(f"non-finite loss {val}")
        return val

    worst = 0.0
    for name, i in coords:
        flat = params.values[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        fp = evaluate()
        flat[i] = orig - step
        fm = evaluate()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * step)
        analytic = float(params.grads[name].reshape(-1)[i])
        denom = max(abs(analytic), abs(numeric), floor)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
