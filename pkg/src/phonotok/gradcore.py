"""Small reverse-mode autodiff engine over float64 numpy arrays.

Operations are recorded on the active :class:`Graph` (a dynamic tape) and
replayed in reverse by :func:`backward`. Broadcasting is deliberately limited
to exact shape matches and size-1 operands; bias addition has its own
primitive (:func:`add_row`).

Usage::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Graph() as g:
        loss = sum_all(square(matmul(x, w)))
    backward(g, loss)
    w.grad
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_ACTIVE: contextvars.ContextVar["Graph | None"] = contextvars.ContextVar(
    "phonotok_graph", default=None
)


class Tensor:
    """Dense float64 array with an optional accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    forward: Callable
    backward: Callable
    saved: object = None
    kwargs: dict = field(default_factory=dict)


class Graph:
    """Append-only tape of primitive applications.

    A node's inputs are always tensors that existed before it was created,
    so the list order is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def replay(self):
        """Recompute every node from the current leaf values.

        Returns True when every recomputed output is bitwise equal to the
        recorded one.
        """
        values: dict[int, np.ndarray] = {}
        same = True
        for node in self.nodes:
            args = [values.get(id(t), t.data) for t in node.inputs]
            out, _ = node.forward(*args, **node.kwargs)
            values[id(node.output)] = out
            if out.shape != node.output.data.shape or not np.array_equal(out, node.output.data):
                same = False
        return same


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        self._token = _ACTIVE.set(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        return False


def active_graph():
    return _ACTIVE.get()


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_op(op, forward, backward, inputs, **kwargs):
    """Run a primitive and record it on the active graph.

    ``forward(*arrays, **kwargs)`` returns ``(output_array, saved)``.
    ``backward(g, saved, *arrays, **kwargs)`` returns one gradient (or None)
    per input.
    """
    inputs = tuple(as_tensor(t) for t in inputs)
    out, saved = forward(*(t.data for t in inputs), **kwargs)
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    graph = _ACTIVE.get()
    if graph is not None:
        graph.nodes.append(Node(op, inputs, result, forward, backward, saved, kwargs))
    return result


def backward(graph: Graph, loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.output) for n in graph.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g, node.saved, *(t.data for t in node.inputs), **node.kwargs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64)
            if key not in produced:
                leaves[key] = t
    for node in graph.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves.setdefault(id(t), t)
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros(t.data.shape)
        g = np.broadcast_to(g, t.data.shape).astype(np.float64, copy=True)
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# shape helpers


def _binary_shapes(op, a, b):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    return np.full(shape, g.sum())


# ---------------------------------------------------------------------------
# primitives


def _matmul_fwd(a, b):
    return a @ b, None


def _matmul_bwd(g, _, a, b):
    return g @ b.T, a.T @ g


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return apply_op("matmul", _matmul_fwd, _matmul_bwd, (a, b))


def _add_fwd(a, b):
    return a + b, None


def _add_bwd(g, _, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_fwd(a, b):
    return a - b, None


def _sub_bwd(g, _, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _mul_fwd(a, b):
    return a * b, None


def _mul_bwd(g, _, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    return apply_op("add", _add_fwd, _add_bwd, (a, b))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    return apply_op("sub", _sub_fwd, _sub_bwd, (a, b))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    return apply_op("mul", _mul_fwd, _mul_bwd, (a, b))


def _tanh_fwd(x):
    y = np.tanh(x)
    return y, y


def _tanh_bwd(g, y, x):
    return (g * (1.0 - y * y),)


def tanh(x):
    return apply_op("tanh", _tanh_fwd, _tanh_bwd, (x,))


def _relu_fwd(x):
    return np.maximum(x, 0.0), None


def _relu_bwd(g, _, x):
    return (g * (x > 0),)


def relu(x):
    return apply_op("relu", _relu_fwd, _relu_bwd, (x,))


def _square_fwd(x):
    return x * x, None


def _square_bwd(g, _, x):
    return (2.0 * x * g,)


def square(x):
    return apply_op("square", _square_fwd, _square_bwd, (x,))


def _scale_fwd(x, c):
    return x * c, None


def _scale_bwd(g, _, x, c):
    return (g * c,)


def scale(x, c):
    return apply_op("scale", _scale_fwd, _scale_bwd, (x,), c=float(c))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "tanh": tanh,
    "relu": relu,
    "square": square,
    "scale": scale,
}


def elementwise(op_id, x, y=None):
    """Dispatch by name; ``scale`` takes a float as ``y``."""
    try:
        fn = _ELEMENTWISE[op_id]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op_id!r}") from None
    if op_id in ("tanh", "relu", "square"):
        return fn(x)
    if y is None:
        raise ContractError(f"{op_id} needs two operands")
    return fn(x, y)


def _add_row_fwd(x, b):
    return x + b[None, :], None


def _add_row_bwd(g, _, x, b):
    return g, g.sum(axis=0)


def add_row(x, b):
    """Add a length-N vector to every row of a T×N matrix."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_row: cannot add {b.shape} to rows of {x.shape}")
    return apply_op("add_row", _add_row_fwd, _add_row_bwd, (x, b))


def _sum_fwd(x):
    return np.asarray(x.sum()), None


def _sum_bwd(g, _, x):
    return (np.full(x.shape, float(g)),)


def sum_all(x):
    return apply_op("sum", _sum_fwd, _sum_bwd, (x,))


def _mean_fwd(x):
    return np.asarray(x.mean()), None


def _mean_bwd(g, _, x):
    return (np.full(x.shape, float(g) / x.size),)


def mean_all(x):
    return apply_op("mean", _mean_fwd, _mean_bwd, (x,))


def _softmax_fwd(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)
    return y, y


def _softmax_bwd(g, y, x):
    return (y * (g - (g * y).sum(axis=1, keepdims=True)),)


def softmax_rows(x):
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {x.shape}")
    return apply_op("softmax_rows", _softmax_fwd, _softmax_bwd, (x,))


def _log_softmax_fwd(x):
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse
    return y, y


def _log_softmax_bwd(g, y, x):
    return (g - np.exp(y) * g.sum(axis=1, keepdims=True),)


def log_softmax_rows(x):
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"log_softmax_rows expects a matrix, got {x.shape}")
    return apply_op("log_softmax_rows", _log_softmax_fwd, _log_softmax_bwd, (x,))


def _lse_fwd(x):
    m = x.max(axis=1, keepdims=True)
    out = (m + np.log(np.exp(x - m).sum(axis=1, keepdims=True)))[:, 0]
    return out, out


def _lse_bwd(g, out, x):
    return (np.exp(x - out[:, None]) * g[:, None],)


def logsumexp_rows(x):
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"logsumexp_rows expects a matrix, got {x.shape}")
    return apply_op("logsumexp_rows", _lse_fwd, _lse_bwd, (x,))


def _sqdist_fwd(z, m):
    diff = z[:, None, :] - m[None, :, :]
    return np.einsum("tkd,tkd->tk", diff, diff), None


def _sqdist_bwd(g, _, z, m):
    # d/dz_t = 2 sum_k g_tk (z_t - m_k); d/dm_k = -2 sum_t g_tk (z_t - m_k)
    gz = 2.0 * (g.sum(axis=1)[:, None] * z - g @ m)
    gm = -2.0 * (g.T @ z - g.sum(axis=0)[:, None] * m)
    return gz, gm


def sqdist(z, m):
    """Pairwise squared Euclidean distances between rows of z (T×D) and m (K×D)."""
    z, m = as_tensor(z), as_tensor(m)
    if z.data.ndim != 2 or m.data.ndim != 2 or z.shape[1] != m.shape[1]:
        raise DimensionError(f"sqdist: incompatible shapes {z.shape} and {m.shape}")
    return apply_op("sqdist", _sqdist_fwd, _sqdist_bwd, (z, m))


def _concat_fwd(a, b):
    return np.concatenate([a, b], axis=1), a.shape[1]


def _concat_bwd(g, split, a, b):
    return g[:, :split], g[:, split:]


def concat_cols(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
    return apply_op("concat_cols", _concat_fwd, _concat_bwd, (a, b))


def _mixture_st_fwd(w, m):
    ids = np.argmax(w, axis=1)
    return m[ids], None


def _mixture_st_bwd(g, _, w, m):
    return g @ m.T, w.T @ g


def mixture_st(w, m):
    """Straight-through mixture: forward picks the argmax centroid per row,
    backward behaves like the soft mixture ``w @ m``."""
    w, m = as_tensor(w), as_tensor(m)
    if w.data.ndim != 2 or m.data.ndim != 2 or w.shape[1] != m.shape[0]:
        raise DimensionError(f"mixture_st: cannot combine {w.shape} with {m.shape}")
    return apply_op("mixture_st", _mixture_st_fwd, _mixture_st_bwd, (w, m))


def detach(x):
    """Same values, cut from the graph."""
    return Tensor(as_tensor(x).data, requires_grad=False)


# ---------------------------------------------------------------------------
# verification


@dataclass
class GradCheckReport:
    max_rel_error: dict
    tol: float
    failures: list

    @property
    def passed(self):
        return not self.failures

    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(f, leaves: Sequence[Tensor], step=1e-5, tol=1e-6, names=None):
    """Compare analytic gradients of ``f()`` with central differences.

    ``f`` takes no arguments and builds its scalar result from ``leaves``.
    Relative error per entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if step <= 0:
        raise ContractError("grad_check step must be positive")
    names = list(names) if names is not None else [t.name or f"leaf{i}" for i, t in enumerate(leaves)]
    for t in leaves:
        t.zero_grad()
    with Graph() as graph:
        out = f()
    backward(graph, out)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in leaves]

    errors, failures = {}, []
    with no_grad():
        for name, t, a in zip(names, leaves, analytic):
            flat = t.data.reshape(-1)
            numeric = np.zeros(flat.size)
            bad = None
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    bad = i
                    break
                numeric[i] = (fp - fm) / (2.0 * step)
            if bad is not None:
                errors[name] = float("inf")
                failures.append(f"{name}[{bad}]: non-finite value during finite differences")
                continue
            a = a.reshape(-1)
            if not np.all(np.isfinite(a)):
                idx = int(np.flatnonzero(~np.isfinite(a))[0])
                errors[name] = float("inf")
                failures.append(f"{name}[{idx}]: non-finite analytic gradient")
                continue
            denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
            rel = np.abs(a - numeric) / denom
            worst = float(rel.max()) if rel.size else 0.0
            errors[name] = worst
            if worst > tol:
                failures.append(f"{name}[{int(rel.argmax())}]: relative error {worst:.3e} > {tol:g}")
    for t in leaves:
        t.zero_grad()
    return GradCheckReport(errors, tol, failures)
