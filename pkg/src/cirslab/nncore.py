"""Small reverse-mode autodiff engine over 2-D float64 arrays, plus Adam.

Every value is a ``Tensor`` wrapping a 2-D numpy array. Operations build the
graph as they run (define-by-run); ``backward`` walks it in reverse
topological order. Broadcasting is limited to a ``(1, d)`` row or a
``(1, 1)`` scalar against an ``(n, d)`` operand.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Dict, Iterable, Mapping

import numpy as np

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "op", "name", "requires_grad")

    def __init__(self, data, name: str | None = None, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensor {name!r}: only 2-D data supported, got ndim={arr.ndim}")
        if 0 in arr.shape:
            raise ShapeError(f"tensor {name!r}: zero-sized dimension {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], tuple] | None = None
        self.op = "leaf"
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor({self.op}{label}, shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: tuple, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.parents = parents
    out.backward_fn = backward_fn
    out.op = op
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, int]:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    out = []
    for da, db in zip(sa, sb):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"{op}: incompatible shapes {sa} ({a.name or a.op}) and {sb} ({b.name or b.op})")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    return _node(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    return _node(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    return _node(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _node(out, "div", (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, "scale", (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _node(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError(f"log: non-positive input at node {a.name or a.op}")
    return _node(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    sig = _sigmoid(a.data)
    return _node(out, "softplus", (a,), lambda g: (g * sig,))


def log_sigmoid(a: Tensor) -> Tensor:
    out = -np.logaddexp(0.0, -a.data)
    sig = _sigmoid(a.data)
    return _node(out, "log_sigmoid", (a,), lambda g: (g * (1.0 - sig),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), "clip", (a,), lambda g: (g * mask,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"minimum: shapes {a.shape} and {b.shape} differ")
    pick_a = a.data <= b.data
    return _node(np.where(pick_a, a.data, b.data), "minimum", (a, b),
                 lambda g: (g * pick_a, g * ~pick_a))


# ---------------------------------------------------------------- structural

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape} at ({a.name or a.op}, {b.name or b.op})")
    return _node(a.data @ b.data, "matmul", (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _node(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def concat(parts: Iterable[Tensor], axis: int = 1) -> Tensor:
    parts = tuple(parts)
    other = 1 - axis
    if len({p.shape[other] for p in parts}) != 1:
        raise ShapeError(f"concat axis={axis}: mismatched shapes {[p.shape for p in parts]}")
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([p.data for p in parts], axis=axis), "concat", parts, bw)


def rows(a: Tensor, index) -> Tensor:
    """Gather rows by integer index (embedding lookup)."""
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise IndexError(f"rows: index out of range for table of {a.shape[0]} rows")

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], "rows", (a,), bw)


def pick(a: Tensor, index) -> Tensor:
    """Select one column per row: out[r, 0] = a[r, index[r]]."""
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.shape[0] != a.shape[0]:
        raise ShapeError(f"pick: {idx.shape[0]} indices for {a.shape[0]} rows")
    r = np.arange(a.shape[0])

    def bw(g):
        out = np.zeros_like(a.data)
        out[r, idx] = g[:, 0]
        return (out,)

    return _node(a.data[r, idx][:, None], "pick", (a,), bw)


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    if axis is None:
        return _node(np.array([[a.data.sum()]]), "sum", (a,),
                     lambda g: (np.full(a.shape, g[0, 0]),))
    out = a.data.sum(axis=axis, keepdims=True)
    return _node(out, "sum", (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax. ``mask`` marks allowed entries (False -> probability 0)."""
    z = a.data if mask is None else np.where(mask, a.data, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _node(out, "softmax", (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _node(out, "log_softmax", (a,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    centered = a - mean(a, axis=1)
    var = mean(square(centered), axis=1)
    inv = exp(scale(log(var + eps), -0.5))
    return centered * inv * gain + bias


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------- graph

def toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d leaf into ``.grad`` of every ``requires_grad`` leaf."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar output, got shape {loss.shape}")
    order = toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


class Params(dict):
    """Named leaf tensors that receive gradients."""

    def add(self, name: str, value) -> Tensor:
        t = Tensor(value, name=name, requires_grad=True)
        self[name] = t
        return t

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        return {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in self.items()}

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: t.data for k, t in self.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            if k not in self:
                raise KeyError(f"unknown parameter {k!r}")
            if self[k].shape != np.shape(v):
                raise ShapeError(f"parameter {k!r}: shape {np.shape(v)} != {self[k].shape}")
            self[k].data = np.array(v, dtype=np.float64)


class ComputeGraph:
    """A parameterised scalar function with explicit forward/backward phases.

    ``build(params, inputs) -> Tensor`` constructs the graph each forward pass.
    """

    def __init__(self, build: Callable[[Params, Mapping[str, Tensor]], Tensor], params: Params):
        self.build = build
        self.params = params
        self.output: Tensor | None = None

    def forward(self, inputs: Mapping[str, object] | None = None) -> Tensor:
        bound = {k: _lift(v) for k, v in (inputs or {}).items()}
        self.output = self.build(self.params, bound)
        return self.output

    def backward(self) -> Dict[str, np.ndarray]:
        if self.output is None:
            raise GraphError("backward called before forward")
        self.params.zero_grad()
        backward(self.output)
        self.output = None
        return self.params.grads()


def gradient_check(graph: ComputeGraph, inputs: Mapping[str, object] | None = None,
                   epsilon: float = 1e-5) -> float:
    """Max relative error between backward gradients and central differences."""
    graph.forward(inputs)
    analytic = graph.backward()
    worst = 0.0
    for name, p in graph.params.items():
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            up = graph.forward(inputs).item()
            flat[k] = orig - epsilon
            down = graph.forward(inputs).item()
            flat[k] = orig
            numeric = (up - down) / (2 * epsilon)
            exact = analytic[name].reshape(-1)[k]
            denom = max(abs(numeric), abs(exact), 1.0)
            worst = max(worst, abs(numeric - exact) / denom)
    graph.output = None
    return worst


# ---------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, params: Params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, grads: Mapping[str, np.ndarray] | None = None) -> None:
        grads = self.params.grads() if grads is None else grads
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            p = self.params[k]
            if np.shape(g) != p.shape:
                raise ShapeError(f"adam: gradient for {k!r} has shape {np.shape(g)}, parameter {p.shape}")
            m = self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------- checkpoint

def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named tensors as a versioned ``.npz`` archive."""
    payload = {f"t/{k}": np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
    header = {"version": CHECKPOINT_VERSION, "meta": meta or {}}
    payload["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[Dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        tensors = {k[2:]: z[k].copy() for k in z.files if k.startswith("t/")}
    return tensors, header["meta"]
