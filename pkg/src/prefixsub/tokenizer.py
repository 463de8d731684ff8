"""Whitespace tokenizer, vocabulary files and batch padding."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)


class Vocab:
    """Token <-> id mapping with the special tokens at ids 0..4."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise InputError(f"vocabulary must start with {', '.join(SPECIAL_TOKENS)}")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise InputError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    @classmethod
    def from_texts(cls, texts: Iterable[str], min_count: int = 1) -> "Vocab":
        counts = Counter()
        for text in texts:
            counts.update(text.lower().split())
        words = sorted((w for w, c in counts.items() if c >= min_count and w not in SPECIAL_TOKENS),
                       key=lambda w: (-counts[w], w))
        return cls(list(SPECIAL_TOKENS) + words)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        path = Path(path)
        if not path.is_file():
            raise InputError(f"vocabulary file not found: {path}")
        return cls(path.read_text(encoding="utf-8").splitlines())


@dataclass
class TokenSequence:
    ids: list[int]
    mask: list[bool] = field(default_factory=list)
    label: float | int | None = None

    def __post_init__(self) -> None:
        if not self.mask:
            self.mask = [True] * len(self.ids)
        if len(self.mask) != len(self.ids):
            raise InputError("ids and mask lengths differ")


def tokenize(text_a: str, text_b: str | None, vocab: Vocab, max_seq_len: int = 64,
             label=None) -> TokenSequence:
    """``[CLS] a [SEP]`` or ``[CLS] a [SEP] b [SEP]``; truncates the longer segment first."""
    a = [vocab.id(w) for w in text_a.lower().split()]
    b = [vocab.id(w) for w in text_b.lower().split()] if text_b is not None else None
    budget = max_seq_len - (3 if b is not None else 2)
    if budget < 0:
        raise InputError(f"max_seq_len={max_seq_len} too small for the special tokens")
    if b is None:
        a = a[:budget]
        ids = [CLS_ID] + a + [SEP_ID]
    else:
        while len(a) + len(b) > budget:
            if len(a) >= len(b):
                a.pop()
            else:
                b.pop()
        ids = [CLS_ID] + a + [SEP_ID] + b + [SEP_ID]
    return TokenSequence(ids=ids, label=label)


@dataclass
class Batch:
    ids: np.ndarray    # (B, L) int64
    mask: np.ndarray   # (B, L) bool, True for real tokens
    labels: np.ndarray | None = None
    rows: np.ndarray | None = None  # source row indices, used to key sampling streams

    def __len__(self) -> int:
        return self.ids.shape[0]


def collate(sequences: Sequence[TokenSequence], rows: Sequence[int] | None = None,
            length: int | None = None) -> Batch:
    """Right-pad to the longest sequence (or ``length``) with ``[PAD]``."""
    if not sequences:
        raise InputError("cannot collate an empty batch")
    longest = max(len(s.ids) for s in sequences)
    length = longest if length is None else length
    if length < longest:
        raise InputError(f"padding length {length} shorter than longest sequence {longest}")
    ids = np.full((len(sequences), length), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(sequences), length), dtype=bool)
    for i, seq in enumerate(sequences):
        ids[i, : len(seq.ids)] = seq.ids
        mask[i, : len(seq.ids)] = seq.mask
    labels = None
    if all(s.label is not None for s in sequences):
        labels = np.array([s.label for s in sequences])
    row_arr = np.arange(len(sequences)) if rows is None else np.asarray(rows, dtype=np.int64)
    return Batch(ids=ids, mask=mask, labels=labels, rows=row_arr)
