"""Content tokenization, placeholder normalization, framing and vocabulary."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, CLS, MASK, HEX, NUM = "[PAD]", "[CLS]", "[MASK]", "[HEX]", "[NUM]"
SPECIALS = (PAD, CLS, MASK, HEX, NUM)
PAD_ID, CLS_ID, MASK_ID, HEX_ID, NUM_ID = range(5)

VOCAB_HEADER = "a2log-vocab v1"

_SPLIT_RE = re.compile(r"[.,:/\s]+")
_HEX_PREFIXED = re.compile(r"0[xX][0-9a-fA-F]+")
_HEX_BARE = re.compile(r"[0-9a-fA-F]{8,}")
_DECIMAL = re.compile(r"[+-]?[0-9]+")


class VocabularyFormatError(ValueError):
    pass


def tokenize_content(content: str) -> list[str]:
    return [t for t in _SPLIT_RE.split(content) if t]


def _is_hex(tok: str) -> bool:
    if _HEX_PREFIXED.fullmatch(tok):
        return True
    return bool(_HEX_BARE.fullmatch(tok)) and any(c.isalpha() for c in tok)


def normalize_tokens(tokens: Iterable[str]) -> list[str]:
    """Replace hexadecimal literals by ``[HEX]`` and integers >= 10 by ``[NUM]``.

    A token counts as hexadecimal if it carries a ``0x`` prefix, or if it is
    at least eight hex digits long and contains a letter (so plain decimals
    and short words such as ``ace`` are left alone).
    """
    out = []
    for tok in tokens:
        if _is_hex(tok):
            out.append(HEX)
        elif _DECIMAL.fullmatch(tok) and int(tok) >= 10:
            out.append(NUM)
        else:
            out.append(tok)
    return out


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[str, ...]
    origin_length: int

    @property
    def maskable_positions(self) -> list[int]:
        return [j for j in range(1, self.origin_length) if self.tokens[j] not in (CLS, PAD)]


def frame_sequence(tokens: Sequence[str], u: int) -> TokenSequence:
    if u < 2:
        raise ValueError(f"sequence length must be >= 2, got {u}")
    body = [CLS, *tokens][:u]
    origin = len(body)
    body += [PAD] * (u - origin)
    return TokenSequence(tuple(body), origin)


def prepare(content: str, u: int) -> TokenSequence:
    """Full preprocessing of one log content into a framed token sequence."""
    return frame_sequence(normalize_tokens(tokenize_content(content)), u)


@dataclass
class Vocabulary:
    words: list[str] = field(default_factory=lambda: list(SPECIALS))
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if tuple(self.words[:5]) != SPECIALS:
            raise VocabularyFormatError("special tokens must occupy ids 0..4 in fixed order")
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise VocabularyFormatError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def id(self, word: str) -> int:
        return self.index.get(word, MASK_ID)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.words[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def dumps(self) -> str:
        lines = [VOCAB_HEADER] + [f"{i}\t{w}" for i, w in enumerate(self.words)]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        lines = text.split("\n")
        if not lines or lines[0] != VOCAB_HEADER:
            raise VocabularyFormatError(f"expected header {VOCAB_HEADER!r}")
        words = []
        for line in lines[1:]:
            if not line:
                continue
            i, _, w = line.partition("\t")
            if int(i) != len(words) or not w:
                raise VocabularyFormatError(f"bad vocabulary line {line!r}")
            words.append(w)
        return cls(words)

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def build_vocabulary(train_sequences: Sequence[TokenSequence]) -> Vocabulary:
    if not train_sequences:
        raise ValueError("cannot build a vocabulary from zero sequences")
    words = list(SPECIALS)
    seen = set(SPECIALS)
    for seq in train_sequences:
        for tok in seq.tokens:
            if tok not in seen:
                seen.add(tok)
                words.append(tok)
    return Vocabulary(words)


def encode_ids(seq: TokenSequence, vocab: Vocabulary) -> list[int]:
    return [vocab.id(t) for t in seq.tokens]


def encode_batch(seqs: Sequence[TokenSequence], vocab: Vocabulary, u: int | None = None) -> np.ndarray:
    if not seqs:
        return np.zeros((0, u or 0), dtype=np.int64)
    return np.array([encode_ids(s, vocab) for s in seqs], dtype=np.int64)
