"""Dense float64 tensors with eager reverse-mode differentiation.

Every op builds its result eagerly and records a closure mapping the
upstream gradient to one gradient per parent. ``backward`` walks the graph
in reverse topological order and returns a :class:`GradMap`.

Non-finite values are treated as bugs: every constructed tensor is checked
and a :class:`NonFiniteError` is raised at the first offending op.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradMap",
    "NonFiniteError",
    "GraphReleasedError",
    "tensor",
    "parameter",
    "backward",
    "finite_diff_grad",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "reshape",
    "transpose",
    "sum",
    "mean",
    "mean_over_axis",
    "relu",
    "exp",
    "sqrt",
    "square",
    "l2_norm",
    "concat",
    "gather",
    "straight_through",
    "tensor_to_bytes",
    "tensor_from_bytes",
]


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class GraphReleasedError(RuntimeError):
    """Raised when backward runs over a graph that was already consumed."""


_BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A node in the differentiation graph.

    Leaves created with ``requires_grad=True`` are parameters. Interior nodes
    keep their parents and a backward closure until the graph is released.
    """

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward: _BackwardFn | None = None):
        # interior results are fresh arrays already; leaves get a private copy
        arr = np.asarray(data, dtype=np.float64) if _parents else np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor{' ' + name if name else ''}")
        self.data = arr
        self.requires_grad = bool(requires_grad or any(p.requires_grad for p in _parents))
        self.name = name
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self._released = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents and not self._released

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single value, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; all of these route through the module-level ops
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


class GradMap(dict):
    """Parameter tensor -> gradient tensor, keyed by identity."""

    def get_array(self, param: Tensor) -> np.ndarray:
        return self[param].data


def tensor(data, name: str | None = None) -> Tensor:
    """A constant (non-differentiable) tensor."""
    return Tensor(data, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn: _BackwardFn) -> Tensor:
    return Tensor(data, _parents=parents, _backward=fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if (a.data < 0).any():
        raise NonFiniteError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return _make(out, (a,), fn)


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def l2_norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at zero is taken as 0."""
    a = _as_tensor(a)
    norm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

    def fn(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(norm > 0, a.data / np.where(norm > 0, norm, 1.0), 0.0)
        return (gk * unit,)

    out = norm if keepdims else np.squeeze(norm, axis=axis)
    return _make(out, (a,), fn)


# --------------------------------------------------------------------------
# contractions and reductions


def matmul(a, b) -> Tensor:
    """``numpy.matmul`` semantics, including 1-D promotion and batch broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError("matmul: scalar operands are not allowed")
    k_a = a.shape[-1]
    k_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if k_a != k_b:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def fn(g):
        A = a.data[None, :] if a.ndim == 1 else a.data
        B = b.data[:, None] if b.ndim == 1 else b.data
        G = g
        if a.ndim == 1:
            G = np.expand_dims(G, -2)
        if b.ndim == 1:
            G = np.expand_dims(G, -1)
        ga = np.matmul(G, np.swapaxes(B, -1, -2))
        gb = np.matmul(np.swapaxes(A, -1, -2), G)
        ga = _unbroadcast(ga, A.shape).reshape(a.shape)
        gb = _unbroadcast(gb, B.shape).reshape(b.shape)
        return ga, gb

    return _make(out, (a, b), fn)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise ValueError("mean over an empty axis")
    out = np.mean(a.data, axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(out, (a,), fn)


def mean_over_axis(a, axis: int) -> Tensor:
    return mean(a, axis=axis)


# --------------------------------------------------------------------------
# shape


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat: shape mismatch ({exc})") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def gather(a, indices) -> Tensor:
    """Rows of ``a`` picked by an integer array of any shape (``a[indices]``)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx]

    def fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(out, (a,), fn)


def straight_through(pre, quantized) -> Tensor:
    """Forward value of ``quantized``; gradient routed unchanged to ``pre``.

    ``quantized`` receives nothing through this node.
    """
    pre, quantized = _as_tensor(pre), _as_tensor(quantized)
    if pre.shape != quantized.shape:
        raise ValueError(f"straight_through: shape mismatch {pre.shape} vs {quantized.shape}")
    return _make(quantized.data.copy(), (pre,), lambda g: (g,))


# --------------------------------------------------------------------------
# differentiation


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._released:
            raise GraphReleasedError(
                "backward through a released graph; pass retain_graph=True to reuse it")
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None,
             retain_graph: bool = False) -> GradMap:
    """Gradients of a scalar ``loss`` with respect to leaf parameters.

    With ``params`` given, exactly those tensors appear in the result (zero
    gradient when unreachable). Otherwise every reachable leaf that requires
    grad is returned. The graph is released afterwards unless
    ``retain_graph`` is set.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is detached from any differentiation graph")

    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: list[Tensor] = []
    for node in reversed(order):
        g = grads.get(id(node))
        if not node._parents:
            leaves.append(node)
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)

    if not retain_graph:
        for node in order:
            if node._parents:
                node._parents = ()
                node._backward = None
                node._released = True

    out = GradMap()
    if params is None:
        for leaf in leaves:
            out[leaf] = Tensor(grads.get(id(leaf), np.zeros_like(leaf.data)))
    else:
        for p in params:
            if p in out:
                continue
            g = grads.get(id(p)) if p.requires_grad else None
            out[p] = Tensor(np.zeros_like(p.data) if g is None else g)
    return out


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient estimate of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("finite difference step must be positive")

    def evaluate(arr: np.ndarray) -> float:
        val = f(Tensor(arr))
        val_arr = val.data if isinstance(val, Tensor) else np.asarray(val, dtype=np.float64)
        if val_arr.size != 1:
            raise ValueError(f"finite_diff_grad needs a scalar function, got shape {val_arr.shape}")
        return float(val_arr.reshape(-1)[0])

    base = x.data.astype(np.float64)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += h
        minus[i] -= h
        grad[i] = (evaluate(plus.reshape(base.shape)) - evaluate(minus.reshape(base.shape))) / (2 * h)
    return Tensor(grad.reshape(base.shape))


# --------------------------------------------------------------------------
# raw serialization: rank (u64), extents (u64 each), then float64 data, all little-endian


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    header = struct.pack("<Q", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor at ``offset``; returns it and the offset just past it."""
    (rank,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    shape = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64)
    offset += 8 * count
    return Tensor(data.reshape(shape)), offset
