"""Dense tensors with tape-based reverse-mode differentiation.

Every op computes its output eagerly with numpy. When a :class:`Graph` is
active and at least one input requires a gradient, the op also appends a
node to the graph; nodes are appended in creation order, so the tape is
already topologically sorted and :meth:`Graph.backward` just walks it in
reverse.

Shape rules are deliberately strict: elementwise ops accept equal shapes or
a right-aligned suffix (the smaller operand is expanded over leading axes).
Anything else raises :class:`ShapeError`.
"""
from __future__ import annotations

import math
import os
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = threading.local()
_default_precision = os.environ.get("BIPETE_PRECISION", "f32")
if _default_precision not in _DTYPES:
    raise ValueError(f"BIPETE_PRECISION must be one of {sorted(_DTYPES)}, got {_default_precision!r}")


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    """An op produced NaN or infinity."""


# --------------------------------------------------------------------------
# precision switch


def get_precision() -> str:
    return getattr(_state, "precision", _default_precision)


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    _state.precision = name


def get_dtype():
    return _DTYPES[get_precision()]


@contextmanager
def precision(name: str):
    """Temporarily switch the global float precision ('f32' or 'f64')."""
    old = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


# --------------------------------------------------------------------------
# tensors and the tape


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or get_dtype())
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("kind", "out", "inputs", "backward")

    def __init__(self, kind, out, inputs, backward):
        self.kind = kind
        self.out = out
        self.inputs = inputs
        self.backward = backward


class IndexedGrad:
    """Gradient that touches only ``index`` of its input (sparse accumulation)."""

    __slots__ = ("index", "value")

    def __init__(self, index, value):
        self.index = index
        self.value = value


class Graph:
    """Recording tape. Use as a context manager to capture ops."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        stack = _graph_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _graph_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, root: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        return backward(self, root, wrt)


def _graph_stack() -> list[Graph]:
    stack = getattr(_state, "graphs", None)
    if stack is None:
        stack = _state.graphs = []
    return stack


def current_graph() -> Graph | None:
    stack = _graph_stack()
    return stack[-1] if stack else None


@contextmanager
def no_record():
    """Suspend recording (inference inside an active graph)."""
    stack = _graph_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def record(kind: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out`` in a Tensor and, if needed, append a node to the active graph.

    ``backward(g)`` must return one gradient per input (``None`` allowed for
    inputs that need none). Gradients may be arrays or :class:`IndexedGrad`.
    """
    # a finite sum implies finite elements; the elementwise test runs only when it is not
    if not math.isfinite(out.sum()) and not np.isfinite(out).all():
        raise NumericError(f"{kind}: non-finite output")
    graph = current_graph()
    needs = graph is not None and any(t.requires_grad for t in inputs)
    t = Tensor(out, requires_grad=needs, dtype=out.dtype)
    if needs:
        graph.nodes.append(_Node(kind, t, tuple(inputs), backward))
    return t


def backward(graph: Graph, root: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``root`` with respect to every leaf of ``graph``.

    Leaves listed in ``wrt`` that the root does not depend on get zeros.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    produced = {id(n.out) for n in graph.nodes}
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    owned: set[int] = set()
    leaves: dict[int, Tensor] = {}

    for node in reversed(graph.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in produced:
                leaves[key] = inp
            cur = grads.get(key)
            if isinstance(gi, IndexedGrad):
                if cur is None:
                    cur = np.zeros(inp.shape, dtype=inp.dtype)
                elif key not in owned:
                    cur = cur.copy()
                cur[gi.index] += gi.value
                grads[key] = cur
                owned.add(key)
            elif cur is None:
                grads[key] = gi
            else:
                grads[key] = cur + gi
                owned.add(key)

    result = {t: np.asarray(grads[k], dtype=t.dtype) for k, t in leaves.items()}
    for t in wrt or ():
        if t not in result:
            result[t] = np.zeros(t.shape, dtype=t.dtype)
    return result


# --------------------------------------------------------------------------
# shape helpers


def _expand_check(kind: str, sa: tuple, sb: tuple) -> tuple:
    if sa == sb:
        return sa
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"{kind}: shapes {sa} and {sb} are not equal and neither is a trailing suffix")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _expand_check("add", a.shape, b.shape)
    out = a.data + b.data
    return record("add", out, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _expand_check("sub", a.shape, b.shape)
    out = a.data - b.data
    return record("sub", out, (a, b), lambda g: (_reduce_to(g, a.shape), -_reduce_to(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim and b.ndim:
        _expand_check("mul", a.shape, b.shape)
    out = a.data * b.data

    def bw(g):
        ga = _reduce_to(g * b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", out, (a, b), bw)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _stable_sigmoid(a.data)
    return record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return record("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return record("exp", e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a nonpositive value")
    return record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def softplus(a) -> Tensor:
    """log(1 + exp(a)), overflow-free."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return record("softplus", out, (a,), lambda g: (g * _stable_sigmoid(x),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return record("gelu", out, (a,), bw)


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; ``mask`` broadcasts numpy-style (it is a constant)."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, a.shape)
    except ValueError as err:
        raise ShapeError(f"masked_fill: mask {mask.shape} vs {a.shape}") from err
    out = np.where(full, a.dtype.type(value), a.data)
    return record("masked_fill", out, (a,), lambda g: (np.where(full, 0, g),))


def dropout(a, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0:
        return as_tensor(a)
    a = as_tensor(a)
    keep = (rng.random(a.shape, dtype=np.float32) >= rate).astype(a.dtype) / a.dtype.type(1.0 - rate)
    return record("dropout", a.data * keep, (a,), lambda g: (g * keep,))


# --------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be 2-D (shared across ``a``'s leading axes) or carry the same
    leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    if a.ndim == 2 and b.ndim > 2:
        raise ShapeError(f"matmul: batched rhs needs batched lhs, got {a.shape} @ {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data

    def bw(g):
        ga = None
        if a.requires_grad:
            if b.ndim == 2:
                # one 2-D GEMM is much faster than a stacked product with a transposed view
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = g @ np.swapaxes(b.data, -1, -2)
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return record("matmul", out, (a, b), bw)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return record("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"reshape {a.shape} -> {tuple(shape)}") from err
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def slice(a, index) -> Tensor:  # noqa: A001 - op name
    """Basic (non-fancy) indexing, e.g. ``slice(x, (slice(None), 3))``."""
    a = as_tensor(a)
    out = a.data[index]
    return record("slice", np.array(out), (a,), lambda g: (IndexedGrad(index, g),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        parts = []
        for i in range(len(ts)):
            sl = [np.s_[:]] * g.ndim
            sl[ax] = np.s_[bounds[i]:bounds[i + 1]]
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return record("concat", out, ts, bw)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - op name
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size // max(np.asarray(out).size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return record("mean", np.asarray(out), (a,), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if axis not in (-1, a.ndim - 1):
        raise ShapeError("softmax is defined over the last axis only")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record("softmax", s, (a,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (population variance), then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _reduce_to(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _reduce_to(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return record("layer_norm", out, (x, gamma, beta), bw)


def embedding(table, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer ``ids`` (any shape)."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def bw(g):
        gt = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return record("embedding", out, (table,), bw)


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "slice": slice,
    "transpose": transpose,
    "reshape": reshape,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "gelu": gelu,
    "mean": mean,
    "sum": sum,
    "embedding": embedding,
    "masked_fill": masked_fill,
}


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch an op by name, e.g. ``forward_op("matmul", a, b)``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


# --------------------------------------------------------------------------
# recurrent cell


def gru_cell(x_t, h_prev, params: dict, x_proj: Tensor | None = None, gate: np.ndarray | None = None) -> Tensor:
    """One GRU step (gate order: reset, update, candidate).

    r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
    z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
    n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
    h' = (1 - z) * n + z * h

    ``params`` holds ``w_ih`` [in, 3H], ``w_hh`` [H, 3H], ``b_ih`` and
    ``b_hh`` [3H]. Pass ``x_proj`` (= x W_ih + b_ih) to skip the input
    projection when it was computed for the whole sequence at once.
    ``gate`` (constant, broadcast to [B, 1]) blends h' with h_prev:
    rows with gate 0 keep their previous state.
    """
    h_prev = as_tensor(h_prev)
    w_hh, b_hh = params["w_hh"], params["b_hh"]
    H = w_hh.shape[0]
    if h_prev.shape[-1] != H or w_hh.shape != (H, 3 * H) or b_hh.shape != (3 * H,):
        raise ShapeError(f"gru_cell: hidden {h_prev.shape} vs w_hh {w_hh.shape}")
    if x_proj is None:
        x_t = as_tensor(x_t)
        if x_t.shape[-1] != params["w_ih"].shape[0]:
            raise ShapeError(f"gru_cell: input {x_t.shape} vs w_ih {params['w_ih'].shape}")
        x_proj = add(matmul(x_t, params["w_ih"]), params["b_ih"])
    if x_proj.shape != h_prev.shape[:-1] + (3 * H,):
        raise ShapeError(f"gru_cell: projected input {x_proj.shape} vs hidden {h_prev.shape}")

    h = h_prev.data
    xp = x_proj.data
    hp = h @ w_hh.data + b_hh.data
    rz = _stable_sigmoid(xp[..., :2 * H] + hp[..., :2 * H])
    r, z = rz[..., :H], rz[..., H:]
    hn = hp[..., 2 * H:]
    n = np.tanh(xp[..., 2 * H:] + r * hn)
    new = n + z * (h - n)
    if gate is not None:
        m = np.asarray(gate, dtype=h.dtype).reshape(h.shape[:-1] + (1,))
        out = h + m * (new - h)
    else:
        m = None
        out = new

    def bw(g):
        g_new = g if m is None else g * m
        gh = g_new * z if m is None else g * (1 - m) + g_new * z
        d_an = g_new * (1 - z) * (1 - n * n)
        d_ar = d_an * hn * r * (1 - r)
        d_az = g_new * (h - n) * z * (1 - z)
        g_x = np.concatenate([d_ar, d_az, d_an], axis=-1)
        g_hp = np.concatenate([d_ar, d_az, d_an * r], axis=-1)
        gh = gh + g_hp @ w_hh.data.T
        flat_h = h.reshape(-1, H)
        flat_g = g_hp.reshape(-1, 3 * H)
        return g_x, gh, flat_h.T @ flat_g, flat_g.sum(axis=0)

    return record("gru_cell", out, (x_proj, h_prev, w_hh, b_hh), bw)
