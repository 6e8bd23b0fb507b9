"""Token role layouts and the segmentation attention-mask family."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import NoSegToken, ShapeMismatch


class Role(enum.IntEnum):
    TEXT = 0
    IMG = 1
    SEG = 2
    ANSWER = 3
    PAD = 4


class MaskVariant(enum.Enum):
    """Ordered so each variant's visibility contains the previous one's."""

    Causal = "Causal"
    ImgBidir = "ImgBidir"
    ImgBidirSeg = "ImgBidirSeg"
    ImgBidirSegText = "ImgBidirSegText"
    FullBidir = "FullBidir"


MASK_VARIANTS = tuple(MaskVariant)


@dataclass(frozen=True)
class TokenLayout:
    roles: tuple[Role, ...]

    def __post_init__(self):
        roles = tuple(Role(r) for r in self.roles)
        object.__setattr__(self, "roles", roles)
        img = [i for i, r in enumerate(roles) if r is Role.IMG]
        if img and img != list(range(img[0], img[-1] + 1)):
            raise ShapeMismatch("IMG positions must be one contiguous span")
        seg = [i for i, r in enumerate(roles) if r is Role.SEG]
        if len(seg) > 1:
            raise ShapeMismatch("at most one SEG position is allowed")
        if seg and img and seg[0] < img[-1]:
            raise ShapeMismatch("SEG must come after the IMG span")
        pad = [i for i, r in enumerate(roles) if r is Role.PAD]
        if pad and pad != list(range(pad[0], len(roles))):
            raise ShapeMismatch("padding must be a suffix of the sequence")

    @classmethod
    def from_string(cls, spec: str) -> "TokenLayout":
        """Build from letters, e.g. ``"TTIIIS"`` (T, I, S, A, P)."""
        code = {"T": Role.TEXT, "I": Role.IMG, "S": Role.SEG, "A": Role.ANSWER, "P": Role.PAD}
        return cls(tuple(code[c] for c in spec))

    def __len__(self) -> int:
        return len(self.roles)

    @property
    def img_span(self) -> tuple[int, int]:
        img = [i for i, r in enumerate(self.roles) if r is Role.IMG]
        return (img[0], img[-1] + 1) if img else (0, 0)

    @property
    def seg_index(self) -> int | None:
        for i, r in enumerate(self.roles):
            if r is Role.SEG:
                return i
        return None

    @property
    def answer_positions(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r is Role.ANSWER]

    def role_array(self) -> np.ndarray:
        return np.array([int(r) for r in self.roles], dtype=np.int64)


def build_attention_mask(layout: TokenLayout, variant: MaskVariant | str,
                         allow_missing_seg: bool = False) -> np.ndarray:
    """``[L, L]`` bool matrix; entry ``(q, k)`` says query q may attend to key k.

    Padding keys are hidden from every other position; a padding query sees
    only itself.
    """
    variant = MaskVariant(variant)
    L = len(layout)
    roles = layout.role_array()
    if variant is MaskVariant.FullBidir:
        vis = np.ones((L, L), dtype=bool)
    else:
        vis = np.tril(np.ones((L, L), dtype=bool))
        is_img = roles == Role.IMG
        if variant is not MaskVariant.Causal:
            vis |= is_img[:, None] & is_img[None, :]
        if variant in (MaskVariant.ImgBidirSeg, MaskVariant.ImgBidirSegText):
            seg = layout.seg_index
            if seg is None:
                if not allow_missing_seg:
                    raise NoSegToken(f"{variant.value} needs a SEG position in the layout")
            else:
                vis[is_img, seg] = True
        if variant is MaskVariant.ImgBidirSegText:
            vis |= is_img[:, None] & (roles == Role.TEXT)[None, :]
    pad = roles == Role.PAD
    if pad.any():
        vis[:, pad] = False
        vis[pad, :] = False
        vis[np.diag_indices(L)] = True
    return vis


def reachability(mask: np.ndarray, depth: int) -> np.ndarray:
    """Which keys can influence each query after ``depth`` stacked attention layers."""
    reach = mask.astype(bool)
    step = mask.astype(np.int64)
    for _ in range(depth - 1):
        reach = (reach.astype(np.int64) @ step) > 0
    return reach
