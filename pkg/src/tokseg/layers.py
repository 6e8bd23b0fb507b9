"""Parameterised building blocks: linear maps, layer norm, MLPs, attention blocks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DimMismatch


class Module:
    """Tiny parameter container; children and parameters are found by attribute walk."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        seen, out = set(), []
        for _, p in self.named_parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimMismatch(f"{name}: checkpoint shape {arr.shape} != model {p.shape}")
            p.data = arr.copy()


def param(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def apply_rows(x: Tensor, fn) -> Tensor:
    """Run a row-wise map over the last axis of ``x`` regardless of leading dims."""
    lead = x.shape[:-1]
    flat = ag.reshape(x, (int(np.prod(lead, dtype=np.int64)), x.shape[-1]))
    out = fn(flat)
    return ag.reshape(out, lead + (out.shape[-1],))


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, bias: bool = True,
                 std: float | None = None):
        std = std if std is not None else 1.0 / math.sqrt(din)
        self.weight = param(rng.normal(0.0, std, size=(din, dout)))
        self.bias = param(np.zeros(dout)) if bias else None
        self.din, self.dout = din, dout

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.din:
            raise DimMismatch(f"Linear expects last dim {self.din}, got {x.shape[-1]}")

        def rows(flat):
            y = ag.matmul(flat, self.weight)
            return ag.add_bias(y, self.bias) if self.bias is not None else y

        return apply_rows(x, rows)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layernorm(x, self.gamma, self.beta)


class Mlp(Module):
    """``[norm] -> linear(din -> hidden) -> GELU -> linear(hidden -> dout)``.

    The default hidden width is twice the narrower side, which keeps the
    widening unshuffle MLPs (d -> alpha*d) cheap.

    With ``hidden=None`` the MLP degenerates to a single affine map, which is
    what the structured (identity / copy) test MLPs use.
    """

    def __init__(self, din: int, dout: int, rng: np.random.Generator,
                 hidden: int | None = -1, norm: bool = True):
        if hidden == -1:
            hidden = 2 * min(din, dout)
        self.din, self.dout, self.hidden = din, dout, hidden
        self.norm = LayerNorm(din) if norm else None
        if hidden is None:
            self.fc1 = Linear(din, dout, rng)
            self.fc2 = None
        else:
            self.fc1 = Linear(din, hidden, rng)
            self.fc2 = Linear(hidden, dout, rng)

    @classmethod
    def affine(cls, weight: np.ndarray, bias: np.ndarray | None = None) -> "Mlp":
        """A fixed single-layer MLP ``x @ weight + bias`` with no normalisation."""
        weight = np.asarray(weight, dtype=np.float64)
        din, dout = weight.shape
        mlp = cls(din, dout, np.random.default_rng(0), hidden=None, norm=False)
        mlp.fc1.weight = param(weight)
        mlp.fc1.bias = param(np.zeros(dout) if bias is None else bias)
        return mlp

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.din:
            raise DimMismatch(f"Mlp expects input dim {self.din}, got {x.shape[-1]}")
        h = self.norm(x) if self.norm is not None else x
        h = self.fc1(h)
        if self.fc2 is not None:
            h = self.fc2(ag.gelu(h))
        return h


def concat_identity(din: int, copies: int) -> np.ndarray:
    """Weight of the identity map on ``copies * din`` channels."""
    return np.eye(din * copies)


def copy_to_chunks(d: int, alpha: int) -> np.ndarray:
    """Weight mapping a d-vector to ``alpha`` stacked copies of itself."""
    return np.tile(np.eye(d), (1, alpha))


class SelfAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise DimMismatch(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(d, 3 * d, rng)
        self.proj = Linear(d, d, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        b, n, d = x.shape
        h, dh = self.heads, d // self.heads
        q, k, v = ag.split_lastdim(self.qkv(x), 3)

        def heads(t):
            return ag.permute(ag.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

        q, k, v = heads(q), heads(k), heads(v)
        scores = ag.scale(ag.matmul(q, ag.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        if mask is not None:
            mask = np.broadcast_to(mask[:, None, :, :], scores.shape)
        att = ag.softmax_lastdim(scores, mask)
        out = ag.permute(ag.matmul(att, v), (0, 2, 1, 3))
        return self.proj(ag.reshape(out, (b, n, d)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 2):
        self.ln1 = LayerNorm(d)
        self.attn = SelfAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.mlp = Mlp(d, d, rng, hidden=mlp_ratio * d, norm=False)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = ag.add(x, self.attn(self.ln1(x), mask))
        return ag.add(x, self.mlp(self.ln2(x)))
