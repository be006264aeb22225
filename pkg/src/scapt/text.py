"""Tokenizer, vocabulary and input formatting."""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, CLS, SEP, MASK, BOS = 0, 1, 2, 3, 4, 5
RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[BOS]")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and split punctuation into its own tokens."""
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    """Token <-> id bijection with a fixed reserved block at ids 0..5."""

    def __init__(self, tokens: Sequence[str] = (), min_count: int = 1):
        self.min_count = min_count
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok in self.stoi:
                raise ValueError(f"duplicate or reserved token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    @classmethod
    def build(cls, token_lists: Iterable[Sequence[str]], min_count: int = 1) -> "Vocab":
        """Build from training-split token lists; ordering is by count, then token."""
        counts = Counter(tok for toks in token_lists for tok in toks)
        kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED), key=lambda t: (-counts[t], t))
        return cls(kept, min_count=min_count)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    @property
    def first_regular_id(self) -> int:
        return len(RESERVED)

    def id(self, tok: str) -> int:
        return self.stoi.get(tok, UNK)

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def tokens(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(RESERVED):]))

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)

    def to_list(self) -> list[str]:
        return self.itos[len(RESERVED):]


def format_input(tokens: Sequence[str], vocab: Vocab, max_len: int) -> list[int]:
    """[CLS] + tokens + [SEP]; the tail is truncated to fit ``max_len``.

    Token ``i`` ends up at position ``i + 1``.
    """
    if max_len < 2:
        raise ValueError("max_len must leave room for [CLS] and [SEP]")
    body = vocab.ids(tokens[: max_len - 2])
    return [CLS] + body + [SEP]


def pad_batch(seqs: Sequence[Sequence[int]], length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences.  Returns ``(ids, mask)`` with mask True on real tokens."""
    width = max((len(s) for s in seqs), default=0) if length is None else length
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        if len(s) > width:
            raise ValueError(f"sequence of length {len(s)} exceeds pad width {width}")
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask
