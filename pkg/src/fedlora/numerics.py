"""Dense float64 matrices, a tape-based reverse-mode autodiff engine, Adam,
and a central finite-difference gradient checker.

Matrices are plain 2-D ``numpy.float64`` arrays. ``matmul`` is a compiled
triple loop that sums over the inner index in ascending order, so results do
not depend on the BLAS build or thread count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

from .errors import NumericError, ShapeError, StateError, UnsupportedOpError

Matrix = np.ndarray


def as_matrix(value) -> Matrix:
    """Coerce to a C-contiguous 2-D float64 array (scalars become 1x1)."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"matrix dimensions must be positive, got {arr.shape}")
    return np.ascontiguousarray(arr)


@numba.njit(cache=True)
def _matmul_ascending(a, b):
    m, depth = a.shape
    n = b.shape[1]
    out = np.empty((m, n))
    for i in range(m):
        for j in range(n):
            out[i, j] = a[i, 0] * b[0, j]
        for k in range(1, depth):
            aik = a[i, k]
            for j in range(n):
                out[i, j] += aik * b[k, j]
    return out


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _matmul_ascending(
        np.ascontiguousarray(a, dtype=np.float64), np.ascontiguousarray(b, dtype=np.float64)
    )


def softmax_rows(a: Matrix) -> Matrix:
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def normalize_rows(a: Matrix) -> Matrix:
    """L2-normalize rows; an all-zero row stays zero."""
    norms = np.sqrt((a * a).sum(axis=1, keepdims=True))
    safe = np.where(norms > 0.0, norms, 1.0)
    return a / safe


# --------------------------------------------------------------------------
# autodiff
# --------------------------------------------------------------------------


@dataclass
class Node:
    id: int
    value: Matrix
    requires_grad: bool = False
    trainable: bool = False
    name: str | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape


@dataclass
class OpRecord:
    op: str
    inputs: tuple[int, ...]
    output: int
    saved: dict = field(default_factory=dict)


def _unbroadcast(g: Matrix, shape: tuple[int, int]) -> Matrix:
    if g.shape == shape:
        return g
    return g.sum(axis=0, keepdims=True)


# Each primitive: forward(values, **kw) -> (out, saved);
# backward(g, values, out, saved, needs, **kw) -> one grad per input (None where not needed)
def _f_matmul(vals, **_):
    return matmul(vals[0], vals[1]), {}


def _b_matmul(g, vals, out, saved, needs):
    a, b = vals
    ga = matmul(g, np.ascontiguousarray(b.T)) if needs[0] else None
    gb = matmul(np.ascontiguousarray(a.T), g) if needs[1] else None
    return ga, gb


def _f_add(vals, **_):
    a, b = vals
    if a.shape != b.shape and not (b.shape[0] == 1 and b.shape[1] == a.shape[1]):
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    return a + b, {}


def _b_add(g, vals, out, saved, needs):
    return g, _unbroadcast(g, vals[1].shape)


def _f_scale(vals, c):
    return vals[0] * c, {}


def _b_scale(g, vals, out, saved, needs, c):
    return (g * c,)


def _f_tanh(vals, **_):
    return np.tanh(vals[0]), {}


def _b_tanh(g, vals, out, saved, needs):
    return (g * (1.0 - out * out),)


def _f_softmax(vals, **_):
    return softmax_rows(vals[0]), {}


def _b_softmax(g, vals, out, saved, needs):
    inner = (g * out).sum(axis=1, keepdims=True)
    return (out * (g - inner),)


def _f_log(vals, **_):
    x = vals[0]
    if np.any(x <= 0.0):
        raise NumericError("log of a non-positive entry")
    return np.log(x), {}


def _b_log(g, vals, out, saved, needs):
    return (g / vals[0],)


def _f_gather(vals, index):
    x = vals[0]
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != (x.shape[0],) or np.any(idx < 0) or np.any(idx >= x.shape[1]):
        raise ShapeError(f"gather index does not fit matrix of shape {x.shape}")
    return x[np.arange(x.shape[0]), idx].reshape(-1, 1), {"idx": idx}


def _b_gather(g, vals, out, saved, needs, index):
    grad = np.zeros_like(vals[0])
    grad[np.arange(grad.shape[0]), saved["idx"]] = g[:, 0]
    return (grad,)


def _f_mean(vals, **_):
    x = vals[0]
    return np.array([[x.sum() / x.size]]), {}


def _b_mean(g, vals, out, saved, needs):
    x = vals[0]
    return (np.full_like(x, g[0, 0] / x.size),)


def _f_sum(vals, **_):
    return np.array([[vals[0].sum()]]), {}


def _b_sum(g, vals, out, saved, needs):
    return (np.full_like(vals[0], g[0, 0]),)


def _f_transpose(vals, **_):
    return np.ascontiguousarray(vals[0].T), {}


def _b_transpose(g, vals, out, saved, needs):
    return (np.ascontiguousarray(g.T),)


def _f_normalize(vals, **_):
    x = vals[0]
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    safe = np.where(norms > 0.0, norms, 1.0)
    return x / safe, {"norms": norms, "safe": safe}


def _b_normalize(g, vals, out, saved, needs):
    inner = (g * out).sum(axis=1, keepdims=True)
    grad = (g - out * inner) / saved["safe"]
    grad = np.where(saved["norms"] > 0.0, grad, 0.0)
    return (grad,)


def _f_append_ones(vals, **_):
    x = vals[0]
    return np.hstack([x, np.ones((x.shape[0], 1))]), {}


def _b_append_ones(g, vals, out, saved, needs):
    return (np.ascontiguousarray(g[:, :-1]),)


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_f_matmul, _b_matmul),
    "add": (_f_add, _b_add),
    "scale": (_f_scale, _b_scale),
    "tanh": (_f_tanh, _b_tanh),
    "softmax": (_f_softmax, _b_softmax),
    "log": (_f_log, _b_log),
    "gather": (_f_gather, _b_gather),
    "mean": (_f_mean, _b_mean),
    "sum": (_f_sum, _b_sum),
    "transpose": (_f_transpose, _b_transpose),
    "normalize": (_f_normalize, _b_normalize),
    "append_ones": (_f_append_ones, _b_append_ones),
}


class Tape:
    """Records primitive applications in execution order.

    A tape is single-use and single-threaded: build the graph, call
    :meth:`backward` once with the scalar loss node.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.ops: list[OpRecord] = []
        self.loss: Node | None = None
        self._params: dict[str, Node] = {}

    def _new(self, value, requires_grad=False, trainable=False, name=None) -> Node:
        node = Node(len(self.nodes), value, requires_grad, trainable, name)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._new(as_matrix(value))

    def param(self, value, name: str, trainable: bool = True) -> Node:
        if name in self._params:
            raise StateError(f"parameter {name!r} registered twice on one tape")
        node = self._new(as_matrix(value), requires_grad=trainable, trainable=trainable, name=name)
        self._params[name] = node
        return node

    def apply(self, op: str, *inputs: Node, **kw) -> Node:
        try:
            fwd, _ = PRIMITIVES[op]
        except KeyError:
            raise UnsupportedOpError(f"unsupported primitive {op!r}") from None
        out, saved = fwd([n.value for n in inputs], **kw)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite value produced by {op}")
        node = self._new(out, requires_grad=any(n.requires_grad for n in inputs))
        if kw:
            saved = {**saved, "_kw": kw}
        self.ops.append(OpRecord(op, tuple(n.id for n in inputs), node.id, saved))
        return node

    # convenience wrappers
    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def add(self, a, b):
        return self.apply("add", a, b)

    def scale(self, a, c: float):
        return self.apply("scale", a, c=float(c))

    def tanh(self, a):
        return self.apply("tanh", a)

    def softmax(self, a):
        return self.apply("softmax", a)

    def log(self, a):
        return self.apply("log", a)

    def gather(self, a, index):
        return self.apply("gather", a, index=index)

    def mean(self, a):
        return self.apply("mean", a)

    def sum(self, a):
        return self.apply("sum", a)

    def transpose(self, a):
        return self.apply("transpose", a)

    def normalize(self, a):
        return self.apply("normalize", a)

    def append_ones(self, a):
        return self.apply("append_ones", a)

    def backward(self, loss: Node | None = None) -> dict[str, Matrix]:
        """Gradients of the scalar loss for every trainable parameter, by name.

        Trainable parameters the loss does not depend on get a zero gradient.
        """
        loss = loss if loss is not None else self.loss
        if loss is None:
            raise StateError("backward called before forward")
        if loss.shape != (1, 1):
            raise StateError(f"loss must be a 1x1 scalar, got {loss.shape}")
        grads: dict[int, Matrix] = {loss.id: np.ones((1, 1))}
        for rec in reversed(self.ops):
            g = grads.pop(rec.output, None)
            if g is None:
                continue
            kw = rec.saved.get("_kw", {})
            inputs = [self.nodes[i] for i in rec.inputs]
            _, bwd = PRIMITIVES[rec.op]
            out = self.nodes[rec.output].value
            needs = [n.requires_grad for n in inputs]
            in_grads = bwd(g, [n.value for n in inputs], out, rec.saved, needs, **kw)
            for node, ig in zip(inputs, in_grads):
                if not node.requires_grad:
                    continue
                if node.id in grads:
                    grads[node.id] = grads[node.id] + ig
                else:
                    grads[node.id] = ig
        result = {}
        for name, node in self._params.items():
            if node.trainable:
                result[name] = grads.get(node.id, np.zeros_like(node.value))
        return result


def forward(build: Callable[..., Node], params: dict[str, Matrix], *inputs, trainable=None) -> Tape:
    """Run ``build(tape, nodes, *inputs)`` on a fresh tape and record its loss.

    ``trainable`` restricts which params get gradients (default: all).
    """
    tape = Tape()
    nodes = {
        name: tape.param(value, name, trainable=trainable is None or name in trainable)
        for name, value in params.items()
    }
    tape.loss = build(tape, nodes, *inputs)
    return tape


def backward(tape: Tape) -> dict[str, Matrix]:
    return tape.backward()


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, Matrix] = field(default_factory=dict)
    v: dict[str, Matrix] = field(default_factory=dict)


def adam_step(params: dict[str, Matrix], grads: dict[str, Matrix], state: AdamState) -> dict[str, Matrix]:
    """One Adam step with decoupled weight decay; returns new arrays, updates ``state``.

    Only names present in ``grads`` are touched; other entries are passed through.
    """
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    out = dict(params)
    for name in sorted(grads):
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ShapeError(f"Adam moment shape {m.shape} does not match parameter {name!r} {p.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        new = p
        if state.weight_decay:
            new = new - state.lr * state.weight_decay * new
        new = new - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        out[name] = new
    return out


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


def finite_diff_check(
    build: Callable[..., Node], params: dict[str, Matrix], h: float = 1e-4, inputs: tuple = ()
) -> float:
    """Max over entries of |g_autodiff - g_central| / max(1, |g_central|)."""
    if h <= 0:
        raise ValueError("h must be positive")
    tape = forward(build, params, *inputs)
    ad = tape.backward()

    def loss_at(p):
        val = forward(build, p, *inputs, trainable=()).loss.value[0, 0]
        if not math.isfinite(val):
            raise NumericError("non-finite loss while probing finite differences")
        return val

    worst = 0.0
    for name in sorted(params):
        base = params[name]
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            minus = base.copy()
            plus[idx] += h
            minus[idx] -= h
            f_plus = loss_at({**params, name: plus})
            f_minus = loss_at({**params, name: minus})
            g_fd = (f_plus - f_minus) / (2.0 * h)
            err = abs(ad[name][idx] - g_fd) / max(1.0, abs(g_fd))
            worst = max(worst, err)
    return worst
