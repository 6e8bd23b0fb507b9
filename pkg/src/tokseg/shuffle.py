"""
Resolution-changing feature operators on row-major token grids.

Every operator is an index gather plus reshape, so the exact placement is fully
described by small integer tables. ``shuffle_table`` is the single source of
truth for how an s x s block maps onto channel chunks: compression reads it
forwards and unshuffle expansion reads its inverse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DimMismatch, Indivisible, ShapeMismatch
from .layers import Mlp


@dataclass(frozen=True)
class ShuffleSpec:
    s: int = 2
    d0: int = 32
    d: int = 64

    def __post_init__(self):
        if self.s < 1:
            raise ValueError("stride must be positive")

    @property
    def alpha(self) -> int:
        return self.s * self.s


@dataclass
class GridFeatures:
    """Token grid ``h x w``; ``data`` is ``[..., h*w, dim]`` in row-major spatial order."""

    h: int
    w: int
    data: Tensor

    def __post_init__(self):
        if self.data.ndim < 2 or self.data.shape[-2] != self.h * self.w:
            raise ShapeMismatch(f"grid {self.h}x{self.w} does not match data {self.data.shape}")

    @property
    def dim(self) -> int:
        return self.data.shape[-1]

    @property
    def n_tokens(self) -> int:
        return self.h * self.w


def shuffle_table(h: int, w: int, s: int) -> np.ndarray:
    """Source pixel for each (block, intra-block offset) slot, flattened.

    Slot ``t * s*s + k`` holds the pixel at offset ``k = i*s + j`` inside block
    ``t = R*(w//s) + C``; that pixel's flat index is ``(R*s+i)*w + C*s+j``.
    """
    if h % s or w % s:
        raise Indivisible(f"grid {h}x{w} not divisible by stride {s}")
    R, C, i, j = np.meshgrid(np.arange(h // s), np.arange(w // s), np.arange(s), np.arange(s),
                             indexing="ij")
    return ((R * s + i) * w + (C * s + j)).reshape(-1)


def inverse_table(table: np.ndarray) -> np.ndarray:
    inv = np.empty_like(table)
    inv[table] = np.arange(table.size)
    return inv


def upsample_table(h: int, w: int, s: int) -> np.ndarray:
    r, c = np.meshgrid(np.arange(h * s), np.arange(w * s), indexing="ij")
    return ((r // s) * w + (c // s)).reshape(-1)


def scan_table(h: int, w: int, s: int) -> np.ndarray:
    """Window source pixels for stride-1 scanning with clamp-to-edge borders."""
    r, c, i, j = np.meshgrid(np.arange(h), np.arange(w), np.arange(s), np.arange(s), indexing="ij")
    rr = np.minimum(r + i, h - 1)
    cc = np.minimum(c + j, w - 1)
    return (rr * w + cc).reshape(-1)


def _check_mlp(mlp: Mlp, din: int, dout: int | None = None) -> None:
    if mlp.din != din:
        raise DimMismatch(f"mlp input dim {mlp.din}, expected {din}")
    if dout is not None and mlp.dout != dout:
        raise DimMismatch(f"mlp output dim {mlp.dout}, expected {dout}")


def _pack(x: Tensor, table: np.ndarray, groups: int, alpha: int) -> Tensor:
    """Gather token rows by ``table`` and fold each run of ``alpha`` into channels."""
    lead = x.shape[:-2]
    g = ag.gather(x, table, axis=-2)
    return ag.reshape(g, lead + (groups, alpha * x.shape[-1]))


def pixel_shuffle_compress(F: GridFeatures, spec: ShuffleSpec, mlp: Mlp,
                           table: np.ndarray | None = None) -> GridFeatures:
    s, a = spec.s, spec.alpha
    if F.h % s or F.w % s:
        raise Indivisible(f"grid {F.h}x{F.w} not divisible by stride {s}")
    _check_mlp(mlp, a * F.dim)
    table = shuffle_table(F.h, F.w, s) if table is None else table
    packed = _pack(F.data, table, F.n_tokens // a, a)
    return GridFeatures(F.h // s, F.w // s, mlp(packed))


def self_replicate_compress(F: GridFeatures, spec: ShuffleSpec, mlp: Mlp) -> GridFeatures:
    """Feed ``alpha`` copies of each pixel's feature through the compression MLP."""
    _check_mlp(mlp, spec.alpha * F.dim)
    replicated = ag.concat_lastdim([F.data] * spec.alpha)
    return GridFeatures(F.h, F.w, mlp(replicated))


def scanning_compress(F: GridFeatures, spec: ShuffleSpec, mlp: Mlp) -> GridFeatures:
    """Stride-1 shuffle: each pixel's token comes from the s x s window it tops-left."""
    _check_mlp(mlp, spec.alpha * F.dim)
    packed = _pack(F.data, scan_table(F.h, F.w, spec.s), F.n_tokens, spec.alpha)
    return GridFeatures(F.h, F.w, mlp(packed))


def pixel_unshuffle_expand(F: GridFeatures, spec: ShuffleSpec, mlp_out: Mlp,
                           table: np.ndarray | None = None) -> GridFeatures:
    """Project each token to ``alpha * d`` channels and scatter the chunks over its block.

    Chunk ``k`` lands at intra-block offset ``k`` (row-major), the exact inverse
    of the placement used by ``pixel_shuffle_compress``.
    """
    s, a = spec.s, spec.alpha
    _check_mlp(mlp_out, F.dim)
    if mlp_out.dout % a:
        raise DimMismatch(f"mlp output dim {mlp_out.dout} not divisible by alpha={a}")
    d = mlp_out.dout // a
    H, W = F.h * s, F.w * s
    table = shuffle_table(H, W, s) if table is None else table
    y = mlp_out(F.data)
    lead = y.shape[:-2]
    slots = ag.reshape(y, lead + (F.n_tokens * a, d))
    return GridFeatures(H, W, ag.gather(slots, inverse_table(table), axis=-2))


def upsample_nearest(F: GridFeatures, s: int) -> GridFeatures:
    if s < 1:
        raise ValueError("upsampling stride must be >= 1")
    if s == 1:
        return F
    return GridFeatures(F.h * s, F.w * s, ag.gather(F.data, upsample_table(F.h, F.w, s), axis=-2))


def upsample_bilinear_weights(h: int, w: int, s: int) -> np.ndarray:
    """Dense ``[h*s*w*s, h*w]`` interpolation matrix (half-pixel centres, edge clamp)."""

    def axis_weights(n):
        out = np.zeros((n * s, n))
        pos = (np.arange(n * s) + 0.5) / s - 0.5
        lo = np.clip(np.floor(pos).astype(int), 0, n - 1)
        hi = np.clip(lo + 1, 0, n - 1)
        frac = np.clip(pos - np.floor(pos), 0.0, 1.0)
        frac = np.where(pos < 0, 0.0, frac)
        out[np.arange(n * s), lo] += 1.0 - frac
        out[np.arange(n * s), hi] += frac
        return out

    return np.kron(axis_weights(h), axis_weights(w))


def upsample_bilinear(F: GridFeatures, s: int) -> GridFeatures:
    """Interpolating alternative to ``upsample_nearest`` (not used by default)."""
    if s == 1:
        return F
    m = upsample_bilinear_weights(F.h, F.w, s)
    x = F.data
    lead = x.shape[:-2]
    if lead:
        flat = ag.reshape(x, (int(np.prod(lead)),) + x.shape[-2:])
        mt = Tensor(np.broadcast_to(m, (flat.shape[0],) + m.shape))
        out = ag.reshape(ag.matmul(mt, flat), lead + (m.shape[0], x.shape[-1]))
    else:
        out = ag.matmul(Tensor(m), x)
    return GridFeatures(F.h * s, F.w * s, out)


def upsample(F: GridFeatures, s: int, kind: str = "nearest") -> GridFeatures:
    if kind == "nearest":
        return upsample_nearest(F, s)
    if kind == "bilinear":
        return upsample_bilinear(F, s)
    raise ValueError(f"unknown upsampling kind {kind!r}")
