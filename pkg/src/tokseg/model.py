"""
Miniature multimodal model: patch-embedding ViT encoder, pixel-shuffle
connector, and a pre-norm transformer LLM whose attention mask is chosen per
segmentation variant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import BadImageShape, DimMismatch, MaskShapeMismatch, ShapeMismatch, VocabOverflow
from .head import FeatureBundle, MlpSharing, PipelineMode, fuse, predict_mask
from .layers import Block, LayerNorm, Linear, Mlp, Module, param
from .masks import MaskVariant, Role, TokenLayout, build_attention_mask
from .shuffle import (GridFeatures, ShuffleSpec, pixel_shuffle_compress, scanning_compress,
                      self_replicate_compress)
from .vocab import PAD_ID, SEG_ID, VOCAB_SIZE


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch: int = 8
    d0: int = 32
    d: int = 64
    enc_depth: int = 2
    enc_heads: int = 4
    llm_depth: int = 4
    llm_heads: int = 4
    vocab: int = VOCAB_SIZE
    s: int = 2
    max_len: int = 48

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ShapeMismatch("image size must be divisible by the patch size")
        if self.grid % self.s:
            raise ShapeMismatch("patch grid must be divisible by the shuffle stride")
        if self.d % self.llm_heads or self.d0 % self.enc_heads:
            raise ShapeMismatch("widths must be divisible by head counts")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def spec(self) -> ShuffleSpec:
        return ShuffleSpec(self.s, self.d0, self.d)


def _tile_positions(n: int, batch: int) -> np.ndarray:
    return np.tile(np.arange(n), (batch, 1))


def concat_tokens(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate ``[B, n_i, d]`` pieces along the token axis."""
    parts = [p for p in parts if p.shape[1] > 0]
    if len(parts) == 1:
        return parts[0]
    joined = ag.concat_lastdim([ag.permute(p, (0, 2, 1)) for p in parts])
    return ag.permute(joined, (0, 2, 1))


class VisionEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self._cfg = cfg
        self.patch_embed = Linear(cfg.patch * cfg.patch * 3, cfg.d0, rng)
        self.pos = param(rng.normal(0.0, 0.02, size=(cfg.grid * cfg.grid, cfg.d0)))
        self.blocks = [Block(cfg.d0, cfg.enc_heads, rng) for _ in range(cfg.enc_depth)]
        self.ln = LayerNorm(cfg.d0)

    def patches(self, images: np.ndarray) -> np.ndarray:
        cfg = self._cfg
        B = images.shape[0]
        g, p = cfg.grid, cfg.patch
        x = images.reshape(B, g, p, g, p, 3).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(B, g * g, p * p * 3)

    def __call__(self, images: np.ndarray) -> GridFeatures:
        cfg = self._cfg
        B = images.shape[0]
        x = self.patch_embed(Tensor(self.patches(images)))
        x = ag.add(x, ag.embedding_lookup(self.pos, _tile_positions(cfg.grid ** 2, B)))
        for blk in self.blocks:
            x = blk(x)
        return GridFeatures(cfg.grid, cfg.grid, self.ln(x))


class Llm(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.tok = param(rng.normal(0.0, 0.5, size=(cfg.vocab, cfg.d)))
        self.pos = param(rng.normal(0.0, 0.02, size=(cfg.max_len, cfg.d)))
        self.blocks = [Block(cfg.d, cfg.llm_heads, rng) for _ in range(cfg.llm_depth)]
        self.ln_f = LayerNorm(cfg.d)
        self.head = Linear(cfg.d, cfg.vocab, rng)

    def __call__(self, seq: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        B, L, _ = seq.shape
        if mask.shape != (B, L, L):
            raise MaskShapeMismatch(f"mask {mask.shape} does not fit sequence {(B, L, L)}")
        h = seq
        for blk in self.blocks:
            h = blk(h, mask)
        return h, self.head(self.ln_f(h))


def images_array(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    return x


@dataclass
class Batch:
    """Token ids and layouts for a batch of prompts, padded to a common length."""

    ids: np.ndarray
    layouts: list[TokenLayout]
    answers: list[list[int]]
    prefix_len: int
    n_img: int

    @property
    def seg_rows(self) -> np.ndarray:
        return np.array([i for i, lay in enumerate(self.layouts) if lay.seg_index is not None],
                        dtype=np.intp)


def layout_for(prefix_len: int, n_img: int, suffix_len: int, with_seg: bool, n_answer: int,
               pad: int = 0) -> TokenLayout:
    roles = ([Role.TEXT] * prefix_len + [Role.IMG] * n_img + [Role.TEXT] * suffix_len
             + ([Role.SEG] if with_seg else []) + [Role.ANSWER] * n_answer + [Role.PAD] * pad)
    return TokenLayout(tuple(roles))


def make_batch(prefix_ids: Sequence[int], suffixes: Sequence[Sequence[int]],
               with_seg: Sequence[bool], answers: Sequence[Sequence[int]], n_img: int,
               vocab: int = VOCAB_SIZE) -> Batch:
    rows, lengths = [], []
    for suf, seg, ans in zip(suffixes, with_seg, answers):
        for t in list(prefix_ids) + list(suf) + list(ans):
            if not 0 <= int(t) < vocab:
                raise VocabOverflow(f"token id {t} outside vocabulary of {vocab}")
        row = list(prefix_ids) + [PAD_ID] * n_img + list(suf) + ([SEG_ID] if seg else []) + list(ans)
        rows.append(row)
        lengths.append(len(row))
    L = max(lengths)
    ids = np.full((len(rows), L), PAD_ID, dtype=np.int64)
    layouts = []
    for i, (row, suf, seg, ans) in enumerate(zip(rows, suffixes, with_seg, answers)):
        ids[i, :len(row)] = row
        layouts.append(layout_for(len(prefix_ids), n_img, len(suf), bool(seg), len(ans), L - len(row)))
    return Batch(ids, layouts, [list(map(int, a)) for a in answers], len(prefix_ids), n_img)


class SegModel(Module):
    """Every trainable piece of the pipeline, wired by mode and MLP-sharing choice."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, sharing: MlpSharing | str = MlpSharing.Shared2,
                 retention: str = "self_replicate", upsampling: str = "nearest"):
        rng = np.random.default_rng(seed)
        self._cfg = cfg
        self._sharing = MlpSharing(sharing)
        self._retention = retention
        self._upsampling = upsampling
        spec = cfg.spec
        self.encoder = VisionEncoder(cfg, rng)
        self.compress = Mlp(spec.alpha * cfg.d0, cfg.d, rng)
        self.llm = Llm(cfg, rng)
        a = spec.alpha
        self.f_pus = Mlp(cfg.d, a * cfg.d, rng)
        if self._sharing is MlpSharing.Shared1:
            self._f_pus_prime = self.f_pus
        else:
            self.f_pus_prime = Mlp(cfg.d, a * cfg.d, rng)
        if self._sharing is MlpSharing.Independent3:
            self.f_pus_hq = Mlp(cfg.d, a * cfg.d, rng)

    @property
    def cfg(self) -> ModelConfig:
        return self._cfg

    @property
    def sharing(self) -> MlpSharing:
        return self._sharing

    @property
    def pus_prime(self) -> Mlp:
        return self._f_pus_prime if self._sharing is MlpSharing.Shared1 else self.f_pus_prime

    @property
    def pus_hq(self) -> Mlp | None:
        return self.f_pus_hq if self._sharing is MlpSharing.Independent3 else None

    # -- pieces -------------------------------------------------------------
    def encode_image(self, images) -> GridFeatures:
        x = images_array(images)
        size = self._cfg.image_size
        if x.ndim != 4 or x.shape[1:] != (size, size, 3):
            raise BadImageShape(f"expected images of shape [B, {size}, {size}, 3], got {x.shape}")
        return self.encoder(x)

    def compress_features(self, F_V0: GridFeatures) -> GridFeatures:
        return pixel_shuffle_compress(F_V0, self._cfg.spec, self.compress)

    def retain_features(self, F_V0: GridFeatures) -> GridFeatures:
        if self._retention == "scanning":
            return scanning_compress(F_V0, self._cfg.spec, self.compress)
        return self_replicate_compress(F_V0, self._cfg.spec, self.compress)

    def assemble(self, F_V1: GridFeatures, batch: Batch) -> Tensor:
        """Embed prompt tokens around the image tokens and add positions."""
        B, L = batch.ids.shape
        if L > self._cfg.max_len:
            raise ShapeMismatch(f"sequence of {L} tokens exceeds max_len {self._cfg.max_len}")
        emb = ag.embedding_lookup(self.llm.tok, batch.ids)
        p, n = batch.prefix_len, batch.n_img
        if F_V1.data.shape[-2] != n:
            raise DimMismatch(f"{F_V1.data.shape[-2]} image tokens for a span of {n}")
        parts = []
        if p:
            parts.append(ag.gather(emb, np.arange(p), axis=1))
        parts.append(F_V1.data)
        if L > p + n:
            parts.append(ag.gather(emb, np.arange(p + n, L), axis=1))
        seq = concat_tokens(parts)
        return ag.add(seq, ag.embedding_lookup(self.llm.pos, _tile_positions(L, B)))

    def assemble_sequence(self, F_V1: GridFeatures, text_ids: Sequence[int], with_seg: bool,
                          answer_ids: Sequence[int], suffix_ids: Sequence[int] = ()
                          ) -> tuple[Tensor, TokenLayout]:
        """One sample: ``[text][IMG][suffix][SEG][answer]`` as ``[L, d]`` plus its layout."""
        x = F_V1.data
        if x.ndim == 2:
            x = ag.reshape(x, (1,) + x.shape)
        batch = make_batch(text_ids, [suffix_ids], [with_seg], [answer_ids], F_V1.n_tokens,
                           self._cfg.vocab)
        seq = self.assemble(GridFeatures(F_V1.h, F_V1.w, x), batch)
        return ag.reshape(seq, seq.shape[1:]), batch.layouts[0]

    def llm_forward(self, seq: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """Unbatched ``[L, d]`` sequence and ``[L, L]`` mask; returns (hidden, logits)."""
        L = seq.shape[0]
        if np.shape(mask) != (L, L):
            raise MaskShapeMismatch(f"mask {np.shape(mask)} does not fit a sequence of {L}")
        hidden, logits = self.llm(ag.reshape(seq, (1,) + seq.shape), np.asarray(mask)[None])
        return ag.reshape(hidden, hidden.shape[1:]), ag.reshape(logits, logits.shape[1:])

    def masks(self, batch: Batch, variant: MaskVariant | str) -> np.ndarray:
        return np.stack([build_attention_mask(lay, variant, allow_missing_seg=True)
                         for lay in batch.layouts])

    @staticmethod
    def extract_img(hidden: Tensor, layout: TokenLayout) -> Tensor:
        lo, hi = layout.img_span
        return ag.gather(hidden, np.arange(lo, hi), axis=-2)

    @staticmethod
    def extract_seg(hidden: Tensor, layout: TokenLayout) -> Tensor:
        if layout.seg_index is None:
            raise ShapeMismatch("layout has no SEG position")
        row = ag.gather(hidden, np.array([layout.seg_index]), axis=-2)
        return ag.reshape(row, hidden.shape[:-2] + hidden.shape[-1:])

    # -- full pass ----------------------------------------------------------
    def forward(self, images, batch: Batch, mode: PipelineMode | str,
                variant: MaskVariant | str) -> dict:
        """Run the whole pipeline.

        Returns text logits ``[B, L, V]`` plus, for the rows carrying a SEG
        token, mask logits ``[B_seg, side*side]`` and the feature bundle.
        """
        mode = PipelineMode(mode)
        cfg = self._cfg
        F_V0 = self.encode_image(images)
        F_V1 = self.compress_features(F_V0)
        seq = self.assemble(F_V1, batch)
        hidden, logits = self.llm(seq, self.masks(batch, variant))
        out = {"text_logits": logits, "hidden": hidden}
        rows = batch.seg_rows
        if rows.size == 0:
            return out
        B, L, d = hidden.shape
        lo, hi = batch.prefix_len, batch.prefix_len + batch.n_img
        img_h = ag.gather(ag.gather(hidden, rows, axis=0), np.arange(lo, hi), axis=1)
        seg_pos = np.array([batch.layouts[r].seg_index for r in rows]) + rows * L
        F_SEG = ag.gather(ag.reshape(hidden, (B * L, d)), seg_pos, axis=0)
        g1 = cfg.grid // cfg.s

        def sub(grid: GridFeatures) -> GridFeatures:
            if rows.size == B:
                return grid
            return GridFeatures(grid.h, grid.w, ag.gather(grid.data, rows, axis=0))

        F_V1s = sub(F_V1)
        needs_hq = mode in (PipelineMode.HROnly, PipelineMode.HR_RFR, PipelineMode.Full_RFA)
        if needs_hq:
            F_V1HQ = self.retain_features(sub(F_V0))
        else:
            F_V1HQ = GridFeatures(cfg.grid, cfg.grid, Tensor(np.zeros((rows.size, cfg.grid ** 2, d))))
        bundle = FeatureBundle(F_V0=sub(F_V0), F_V1=F_V1s, F_V1HQ=F_V1HQ,
                               F_IMG=GridFeatures(g1, g1, img_h), F_SEG=F_SEG)
        F_img, F_seg = fuse(bundle, mode, cfg.spec, self._sharing, self.f_pus, self.pus_prime,
                            self.pus_hq, self._upsampling)
        out["mask_logits"] = predict_mask(F_img, F_seg)
        out["mask_side"] = F_img.h
        out["bundle"] = bundle
        out["seg_rows"] = rows
        return out
