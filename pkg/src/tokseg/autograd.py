"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

Every primitive produces a new immutable ``Tensor``. When any input requires
gradients, the output remembers its parents and a closure that maps the output
gradient to input gradients; together these nodes form the graph that
``backward`` walks in reverse topological order.

There is no implicit broadcasting. Elementwise ops demand identical shapes,
``matmul`` demands identical leading (batch) dims, and the only row-wise
expansion is the explicit ``add_bias`` primitive.
"""

from __future__ import annotations

import enum
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GraphConsumed, MissingGrad, NonFinite, NotScalar, ShapeMismatch

DTYPE = np.float64

_GELU_C = math.sqrt(2.0 / math.pi)


def _consumed(_g):
    raise GraphConsumed("backward already ran through this graph; rebuild it")


class Tensor:
    """A shaped float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None, _op: str = "leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        if not np.isfinite(arr).all():
            raise NonFinite(f"non-finite values produced by {_op}")
        if arr.size == 0 and arr.ndim > 0 and 0 in arr.shape and _op == "leaf":
            raise ShapeMismatch("tensor dimensions must be positive")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; all of these dispatch to the exact-shape primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


class no_grad:
    """Context manager that stops graph recording (evaluation passes)."""

    _depth = 0

    def __enter__(self):
        no_grad._depth += 1
        return self

    def __exit__(self, *exc):
        no_grad._depth -= 1
        return False


def _make(out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if no_grad._depth or not any(p.requires_grad for p in parents):
        return Tensor(out, _op=op)
    return Tensor(out, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, _op=op)


def _same_shape(op: str, *ts: Tensor) -> None:
    shape = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape:
            raise ShapeMismatch(f"{op}: shapes {shape} and {t.shape} differ")


# ---------------------------------------------------------------------------
# primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _make(ad @ bd, (a, b), bw, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd  # a non-finite quotient is reported by _make
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector of length ``x.shape[-1]`` to every row of ``x``."""
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeMismatch(f"add_bias: bias {b.shape} does not match rows of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.data.size:
        raise ShapeMismatch(f"reshape: cannot view {x.shape} as {shape}")
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatch(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "permute")


def gather(x: Tensor, index, axis: int = 0) -> Tensor:
    """Select entries ``index`` (1-D int array) along ``axis``."""
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeMismatch("gather: index must be one-dimensional")
    axis = axis % x.ndim
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeMismatch(f"gather: index out of range for axis of length {n}")
    src = x.shape
    unique = np.unique(idx).size == idx.size

    def bw(g):
        out = np.zeros(src, dtype=DTYPE)
        moved = np.moveaxis(out, axis, 0)
        gm = np.moveaxis(g, axis, 0)
        if unique:
            moved[idx] = gm
        else:
            np.add.at(moved, idx, gm)
        return (out,)

    return _make(np.take(x.data, idx, axis=axis), (x,), bw, "gather")


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (same shape, bool) marks allowed entries.

    Forbidden entries get probability exactly zero. Every row needs at least one
    allowed entry.
    """
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ShapeMismatch(f"softmax mask {mask.shape} does not match {z.shape}")
        if not mask.any(axis=-1).all():
            raise ShapeMismatch("softmax mask has a row with no allowed entry")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax_lastdim")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax_lastdim")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis, then apply per-channel gain and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layernorm: affine params must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx = g * gd
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return (dx, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw, "layernorm")


def gelu(x: Tensor) -> Tensor:
    """GELU in its tanh form (the erf form costs ~5x more on CPU)."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd * xd * xd)
    t = np.tanh(inner)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(0.5 * xd * (1.0 + t), (x,), bw, "gelu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) evaluated without overflow."""
    xd = x.data
    out = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    s = _sigmoid(xd)
    return _make(out, (x,), lambda g: (g * s,), "softplus")


def sum_axis(x: Tensor, axis: int | None = None) -> Tensor:
    src = x.shape
    if axis is None:
        return _make(np.asarray(x.data.sum()), (x,),
                     lambda g: (np.broadcast_to(g, src).copy(),), "sum_axis")
    axis = axis % x.ndim

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _make(x.data.sum(axis=axis), (x,), bw, "sum_axis")


def mean_axis(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis % x.ndim]
    return scale(sum_axis(x, axis), 1.0 / n)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    if table.ndim != 2:
        raise ShapeMismatch("embedding table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatch(f"embedding id out of range [0, {table.shape[0]})")
    src = table.shape

    def bw(g):
        out = np.zeros(src, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, src[1]))
        return (out,)

    return _make(table.data[ids], (table,), bw, "embedding_lookup")


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeMismatch("concat_lastdim: leading dims differ")
    edges = np.cumsum([0] + [p.shape[-1] for p in parts])

    def bw(g):
        return tuple(g[..., edges[i]:edges[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=-1), parts, bw, "concat_lastdim")


def slice_lastdim(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[-1]:
        raise ShapeMismatch(f"slice [{start}, {stop}) outside last dim {x.shape[-1]}")
    src = x.shape

    def bw(g):
        out = np.zeros(src, dtype=DTYPE)
        out[..., start:stop] = g
        return (out,)

    return _make(x.data[..., start:stop], (x,), bw, "split_lastdim")


def split_lastdim(x: Tensor, n: int) -> list[Tensor]:
    d = x.shape[-1]
    if n <= 0 or d % n:
        raise ShapeMismatch(f"split_lastdim: {d} not divisible into {n} chunks")
    k = d // n
    return [slice_lastdim(x, i * k, (i + 1) * k) for i in range(n)]


class OpKind(enum.Enum):
    matmul = "matmul"
    add = "add"
    sub = "sub"
    mul = "mul"
    div = "div"
    scale = "scale"
    add_bias = "add_bias"
    reshape = "reshape"
    permute = "permute"
    gather = "gather"
    softmax_lastdim = "softmax_lastdim"
    log_softmax_lastdim = "log_softmax_lastdim"
    layernorm = "layernorm"
    gelu = "gelu"
    sigmoid = "sigmoid"
    softplus = "softplus"
    mean_axis = "mean_axis"
    sum_axis = "sum_axis"
    embedding_lookup = "embedding_lookup"
    concat_lastdim = "concat_lastdim"
    split_lastdim = "split_lastdim"


_PRIMITIVES = {
    OpKind.matmul: matmul, OpKind.add: add, OpKind.sub: sub, OpKind.mul: mul,
    OpKind.div: div, OpKind.scale: scale, OpKind.add_bias: add_bias,
    OpKind.reshape: reshape, OpKind.permute: permute, OpKind.gather: gather,
    OpKind.softmax_lastdim: softmax_lastdim, OpKind.log_softmax_lastdim: log_softmax_lastdim,
    OpKind.layernorm: layernorm, OpKind.gelu: gelu, OpKind.sigmoid: sigmoid,
    OpKind.softplus: softplus, OpKind.mean_axis: mean_axis, OpKind.sum_axis: sum_axis,
    OpKind.embedding_lookup: embedding_lookup,
}


def primitive_forward(op_kind, inputs: Sequence[Tensor], **attrs):
    """Dispatch a primitive by name; ``attrs`` are the op's keyword arguments."""
    kind = OpKind(op_kind) if not isinstance(op_kind, OpKind) else op_kind
    if kind is OpKind.concat_lastdim:
        return concat_lastdim(inputs)
    if kind is OpKind.split_lastdim:
        return split_lastdim(inputs[0], **attrs)
    return _PRIMITIVES[kind](*inputs, **attrs)


# ---------------------------------------------------------------------------
# reverse pass

def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) to every tracked leaf.

    Leaves get their ``.grad`` set (accumulating across calls is not supported;
    it is overwritten) and the returned dict maps each leaf to its gradient.
    The graph's closures are released afterwards, so a second call on the same
    graph raises ``GraphConsumed``.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    if loss._backward is _consumed:
        raise GraphConsumed("backward already ran through this graph; rebuild it")
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g
                leaves[node] = g
            continue
        fn = node._backward
        node._backward = _consumed
        if g is None:
            continue
        for parent, pg in zip(node._parents, fn(g)):
            if not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return leaves


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn(*inputs)`` must return a scalar. The error per coordinate is
    ``|a - fd| / max(1, |a|, |fd|)``. ``max_coords`` limits probing to a random
    subset of coordinates per input (all coordinates when None).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = fn(*inputs)
    grads = backward(loss)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t in inputs:
        analytic = grads.get(t)
        if analytic is None:
            analytic = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        base = t.data.copy()
        for i in coords:
            probe = base.copy().reshape(-1)
            probe[i] = base.reshape(-1)[i] + eps
            t.data = probe.reshape(base.shape)
            up = fn(*inputs).item()
            probe[i] = base.reshape(-1)[i] - eps
            t.data = probe.reshape(base.shape)
            down = fn(*inputs).item()
            t.data = base
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NonFinite("non-finite loss while probing")
            fd = (up - down) / (2.0 * eps)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - fd) / max(1.0, abs(a), abs(fd)))
    return worst


# ---------------------------------------------------------------------------
# optimisers

def sgd_step(params: Iterable[Tensor], grads: dict[Tensor, np.ndarray], lr: float,
             frozen: Iterable[Tensor] = ()) -> list[Tensor]:
    """Plain gradient descent ``p <- p - lr * g``; frozen params are skipped."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    frozen_ids = {id(p) for p in frozen}
    params = list(params)
    for p in params:
        if id(p) in frozen_ids:
            continue
        g = grads.get(p)
        if g is None:
            raise MissingGrad(p.name or repr(p))
        p.data = p.data - lr * g
    return params


class AdamW:
    """Decoupled-weight-decay Adam behind the same step interface as ``sgd_step``."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, no_decay: Iterable[Tensor] = ()):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._no_decay = {id(p) for p in no_decay}
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: dict[Tensor, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            data = p.data
            if self.weight_decay and id(p) not in self._no_decay:
                data = data * (1.0 - lr * self.weight_decay)
            p.data = data - lr * update


def cosine_lr(base: float, step: int, total: int, warmup: int = 0, floor: float = 0.0) -> float:
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    span = max(1, total - warmup)
    frac = min(1.0, (step - warmup) / span)
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * frac))
