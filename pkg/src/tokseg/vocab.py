"""The fixed 64-token vocabulary shared by the data generator and the model."""

from __future__ import annotations

from typing import Sequence

from .errors import VocabOverflow

VOCAB_SIZE = 64

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle")
SIZES = ("small", "large")
REGIONS = ("left", "right", "top", "bottom", "center")
COUNTS = ("one", "two", "three", "four", "five", "six")

_WORDS = (
    ("[PAD]", "[SEG]", "[BOS]", "<image>", ":", "the", "please", "segment",
     "it", "is", ".", "?", "on", "how", "many", "objects", "are", "there", "what", "color")
    + COLORS + SHAPES + SIZES + REGIONS + COUNTS
)

TOKENS: tuple[str, ...] = _WORDS + tuple(f"[UNUSED{i}]" for i in range(VOCAB_SIZE - len(_WORDS)))
assert len(TOKENS) == VOCAB_SIZE

TOKEN_TO_ID = {t: i for i, t in enumerate(TOKENS)}
PAD_ID = TOKEN_TO_ID["[PAD]"]
SEG_ID = TOKEN_TO_ID["[SEG]"]

PROMPT_PREFIX = ("[BOS]", "<image>", ":")
SEG_ANSWER = ("it", "is", "[SEG]", ".")


def encode(words: Sequence[str]) -> list[int]:
    try:
        return [TOKEN_TO_ID[w] for w in words]
    except KeyError as exc:
        raise VocabOverflow(f"word {exc.args[0]!r} is not in the vocabulary") from None


def decode(ids: Sequence[int]) -> list[str]:
    out = []
    for i in ids:
        if not 0 <= int(i) < VOCAB_SIZE:
            raise VocabOverflow(f"token id {i} outside vocabulary of {VOCAB_SIZE}")
        out.append(TOKENS[int(i)])
    return out
