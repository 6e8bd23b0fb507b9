"""
Decoder-free mask prediction from LLM-side features.

The fusion functions take the five pipeline feature maps and produce the
post-processed image tokens and segmentation embedding that the dot-product
head consumes. ``PipelineMode`` selects between the compressed baseline, the
high-resolution variants and the full residual amplifier.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DimMismatch, NonBinaryGT, NonFinite, ShapeMismatch, SharingViolation
from .layers import Mlp
from .masks import TokenLayout
from .shuffle import GridFeatures, ShuffleSpec, pixel_unshuffle_expand, upsample


class PipelineMode(enum.Enum):
    CompressedBaseline = "CompressedBaseline"
    HROnly = "HROnly"
    HR_RFR = "HR_RFR"
    PUSOnly = "PUSOnly"
    Full_RFA = "Full_RFA"


class MlpSharing(enum.Enum):
    Shared1 = "Shared1"
    Shared2 = "Shared2"
    Independent3 = "Independent3"


PIPELINE_MODES = tuple(PipelineMode)


def mask_side(mode: PipelineMode | str, n1_side: int, s: int) -> int:
    """Side length of the square mask grid each mode predicts."""
    mode = PipelineMode(mode)
    if mode is PipelineMode.CompressedBaseline:
        return n1_side
    if mode is PipelineMode.Full_RFA:
        return n1_side * s * s
    return n1_side * s


@dataclass
class FeatureBundle:
    F_V0: GridFeatures
    F_V1: GridFeatures
    F_V1HQ: GridFeatures
    F_IMG: GridFeatures
    F_SEG: Tensor

    def check(self, spec: ShuffleSpec) -> None:
        s = spec.s
        if (self.F_V1.h, self.F_V1.w) != (self.F_IMG.h, self.F_IMG.w):
            raise ShapeMismatch("F_IMG and F_V1 grids differ")
        if (self.F_V1HQ.h, self.F_V1HQ.w) != (self.F_V1.h * s, self.F_V1.w * s):
            raise ShapeMismatch("F_V1HQ must be the compressed grid enlarged by the stride")
        dims = {self.F_V1.dim, self.F_IMG.dim, self.F_V1HQ.dim, self.F_SEG.shape[-1]}
        if len(dims) != 1:
            raise ShapeMismatch(f"inconsistent feature widths {sorted(dims)}")


@dataclass
class PusMlps:
    """The unshuffle MLPs as wired by an ``MlpSharing`` choice."""

    v1: Mlp
    img: Mlp
    hq: Mlp

    @classmethod
    def wire(cls, sharing: MlpSharing | str, f_pus: Mlp, f_pus_prime: Mlp,
             f_pus_hq: Mlp | None = None) -> "PusMlps":
        sharing = MlpSharing(sharing)
        if sharing is MlpSharing.Shared1:
            if f_pus_prime is not f_pus or (f_pus_hq is not None and f_pus_hq is not f_pus):
                raise SharingViolation("Shared1 needs a single MLP for every path")
            return cls(f_pus, f_pus, f_pus)
        if sharing is MlpSharing.Shared2:
            if f_pus_hq is not None and f_pus_hq is not f_pus:
                raise SharingViolation("Shared2 ties the F_V1 and F_V1HQ paths to one MLP")
            return cls(f_pus, f_pus_prime, f_pus)
        if f_pus_hq is None:
            raise SharingViolation("Independent3 needs a third MLP for F_V1HQ")
        return cls(f_pus, f_pus_prime, f_pus_hq)


def residual_refill(b: FeatureBundle, spec: ShuffleSpec, upsampling: str = "nearest") -> GridFeatures:
    """F_V1HQ plus the nearest-upsampled LLM residual ``F_IMG - F_V1``."""
    b.check(spec)
    residual = GridFeatures(b.F_V1.h, b.F_V1.w, ag.sub(b.F_IMG.data, b.F_V1.data))
    up = upsample(residual, spec.s, upsampling)
    return GridFeatures(b.F_V1HQ.h, b.F_V1HQ.w, ag.add(b.F_V1HQ.data, up.data))


def residual_amplify(b: FeatureBundle, spec: ShuffleSpec, sharing: MlpSharing | str,
                     f_pus: Mlp, f_pus_prime: Mlp, f_pus_hq: Mlp | None = None,
                     upsampling: str = "nearest") -> GridFeatures:
    b.check(spec)
    mlps = PusMlps.wire(sharing, f_pus, f_pus_prime, f_pus_hq)
    img = pixel_unshuffle_expand(b.F_IMG, spec, mlps.img)
    v1 = pixel_unshuffle_expand(b.F_V1, spec, mlps.v1)
    rfa = GridFeatures(img.h, img.w, ag.sub(img.data, v1.data))
    hq = pixel_unshuffle_expand(b.F_V1HQ, spec, mlps.hq)
    up = upsample(rfa, spec.s, upsampling)
    return GridFeatures(hq.h, hq.w, ag.add(hq.data, up.data))


def seg_embed_post(F_SEG: Tensor, f_pus_prime: Mlp, alpha: int) -> Tensor:
    """Mean of the ``alpha`` unshuffled chunks of the segmentation embedding."""
    if f_pus_prime.dout % alpha:
        raise DimMismatch(f"mlp output {f_pus_prime.dout} not divisible by alpha={alpha}")
    chunks = ag.split_lastdim(f_pus_prime(F_SEG), alpha)
    total = chunks[0]
    for c in chunks[1:]:
        total = ag.add(total, c)
    return ag.scale(total, 1.0 / alpha)


def fuse(b: FeatureBundle, mode: PipelineMode | str, spec: ShuffleSpec,
         sharing: MlpSharing | str, f_pus: Mlp, f_pus_prime: Mlp,
         f_pus_hq: Mlp | None = None, upsampling: str = "nearest") -> tuple[GridFeatures, Tensor]:
    """Post-processed image tokens and segmentation embedding for ``mode``."""
    mode = PipelineMode(mode)
    if mode is PipelineMode.CompressedBaseline:
        return b.F_IMG, b.F_SEG
    if mode is PipelineMode.HROnly:
        return b.F_V1HQ, b.F_SEG
    if mode is PipelineMode.HR_RFR:
        return residual_refill(b, spec, upsampling), b.F_SEG
    mlps = PusMlps.wire(sharing, f_pus, f_pus_prime, f_pus_hq)
    seg = seg_embed_post(b.F_SEG, mlps.img, spec.alpha)
    if mode is PipelineMode.PUSOnly:
        return pixel_unshuffle_expand(b.F_IMG, spec, mlps.img), seg
    return residual_amplify(b, spec, sharing, f_pus, f_pus_prime, f_pus_hq, upsampling), seg


def predict_mask(F_img: GridFeatures | Tensor, F_seg: Tensor) -> Tensor:
    """Mask logits ``F_img @ F_seg / sqrt(d)``, one per image token.

    Accepts ``[N, d]`` with ``[d]``, or batched ``[B, N, d]`` with ``[B, d]``.
    """
    x = F_img.data if isinstance(F_img, GridFeatures) else F_img
    d = x.shape[-1]
    if F_seg.shape[-1] != d or F_seg.shape[:-1] != x.shape[:-2]:
        raise DimMismatch(f"image tokens {x.shape} and seg embedding {F_seg.shape} disagree")
    col = ag.reshape(F_seg, F_seg.shape + (1,))
    logits = ag.matmul(x, col)
    return ag.scale(ag.reshape(logits, x.shape[:-1]), 1.0 / math.sqrt(d))


# ---------------------------------------------------------------------------
# losses

def _binary(gt) -> np.ndarray:
    g = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if not np.isin(g, (0.0, 1.0)).all():
        raise NonBinaryGT("ground truth must contain only 0 and 1")
    return g


def bce_loss(logits: Tensor, gt) -> Tensor:
    """Mean binary cross-entropy in the stable ``softplus(l) - g*l`` form."""
    g = _binary(gt)
    if g.shape != logits.shape:
        raise ShapeMismatch(f"gt {g.shape} vs logits {logits.shape}")
    per_pixel = ag.sub(ag.softplus(logits), ag.mul(Tensor(g), logits))
    return ag.mean_axis(per_pixel)


def dice_loss(logits: Tensor, gt, eps: float = 1.0) -> Tensor:
    """Soft DICE over the last axis, averaged over any leading (batch) axes."""
    g = _binary(gt)
    if g.shape != logits.shape:
        raise ShapeMismatch(f"gt {g.shape} vs logits {logits.shape}")
    p = ag.sigmoid(logits)
    inter = ag.sum_axis(ag.mul(p, Tensor(g)), -1)
    num = ag.add(ag.scale(inter, 2.0), Tensor(np.full(inter.shape, eps)))
    den = ag.add(ag.sum_axis(p, -1), Tensor(g.sum(axis=-1) + eps))
    ratio = ag.div(num, den)
    return ag.sub(Tensor(np.ones(())), ag.mean_axis(ratio))


def text_ce_loss(logits: Tensor, answer_ids: Sequence, layout) -> Tensor:
    """Mean next-token cross-entropy over ANSWER positions.

    ``logits`` is ``[L, V]`` with one layout and one id list, or ``[B, L, V]``
    with a list of layouts and a list of id lists. The token at answer position
    ``j`` is predicted from the logits at ``j - 1``.
    """
    if logits.ndim == 2:
        logits = ag.reshape(logits, (1,) + logits.shape)
        layouts, answers = [layout], [answer_ids]
    else:
        layouts, answers = list(layout), list(answer_ids)
    B, L, V = logits.shape
    flat_index = []
    for b, (lay, ids) in enumerate(zip(layouts, answers)):
        pos = lay.answer_positions
        if len(pos) != len(ids):
            raise ShapeMismatch(f"{len(ids)} answer ids for {len(pos)} answer positions")
        for j, tok in zip(pos, ids):
            if j == 0:
                raise ShapeMismatch("an answer token cannot open the sequence")
            flat_index.append(((b * L) + j - 1) * V + int(tok))
    if not flat_index:
        return Tensor(np.zeros(()))
    logp = ag.log_softmax_lastdim(logits)
    picked = ag.gather(ag.reshape(logp, (B * L * V,)), np.array(flat_index), axis=0)
    return ag.scale(ag.mean_axis(picked), -1.0)


def total_loss(text: Tensor, bce: Tensor, dice: Tensor) -> Tensor:
    """Unweighted sum of the three objectives."""
    for name, t in (("text", text), ("bce", bce), ("dice", dice)):
        if not np.isfinite(t.data).all():
            raise NonFinite(f"{name} loss is not finite")
    return ag.add(ag.add(text, bce), dice)
