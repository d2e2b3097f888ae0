"""Corpus tokenisation and lane-aligned segment batching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import DataError

UNK = "<unk>"
IGNORE = -1


@dataclass
class Vocab:
    symbols: list[str]
    policy: str = "char"

    def __post_init__(self):
        self.index = {s: i for i, s in enumerate(self.symbols)}
        if UNK not in self.index:
            raise ValueError("vocabulary must reserve the unknown symbol")
        self.unk_id = self.index[UNK]

    def __len__(self) -> int:
        return len(self.symbols)

    def split(self, text: str) -> list[str]:
        return list(text) if self.policy == "char" else text.split()

    def encode(self, text: str) -> np.ndarray:
        idx, unk = self.index, self.unk_id
        return np.fromiter((idx.get(s, unk) for s in self.split(text)), dtype=np.int64)

    def decode(self, ids) -> str:
        sep = "" if self.policy == "char" else " "
        return sep.join(self.symbols[int(i)] for i in ids)

    def to_dict(self) -> dict:
        return {"symbols": self.symbols, "policy": self.policy}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(list(d["symbols"]), d.get("policy", "char"))


@dataclass
class CorpusSplit:
    name: str
    ids: np.ndarray
    vocab: Vocab

    def __len__(self) -> int:
        return int(self.ids.size)


def build_vocab(train_text: str, policy: str = "char", max_vocab: int | None = None) -> Vocab:
    """Train-split symbols sorted by codepoint, then the reserved unknown id.

    Word policy keeps the ``max_vocab - 1`` most frequent words (ties broken
    alphabetically) before sorting.
    """
    if policy not in ("char", "word"):
        raise ValueError(f"unknown tokenizer policy {policy!r}")
    units = list(train_text) if policy == "char" else train_text.split()
    if not units:
        raise DataError("train split is empty")
    if policy == "word" and max_vocab is not None:
        uniq, counts = np.unique(np.array(units, dtype=object), return_counts=True)
        order = sorted(zip(-counts, uniq))[: max(max_vocab - 1, 1)]
        symbols = sorted(w for _, w in order)
    else:
        symbols = sorted(set(units))
    return Vocab(symbols + [UNK], policy)


def tokenize_corpus(
    train: str,
    valid: str = "",
    test: str = "",
    policy: str = "char",
    max_vocab: int | None = None,
) -> dict[str, CorpusSplit]:
    vocab = build_vocab(train, policy, max_vocab)
    return {name: CorpusSplit(name, vocab.encode(text), vocab) for name, text in (("train", train), ("valid", valid), ("test", test))}


def split_text(text: str, valid_frac: float = 0.05, test_frac: float = 0.05) -> tuple[str, str, str]:
    """Contiguous train/valid/test cut of a single document."""
    n = len(text)
    n_test = int(n * test_frac)
    n_valid = int(n * valid_frac)
    n_train = n - n_valid - n_test
    return text[:n_train], text[n_train : n_train + n_valid], text[n_train + n_valid :]


@dataclass
class Segment:
    inputs: np.ndarray  # lanes x T
    targets: np.ndarray  # lanes x T, IGNORE where the corpus has no next token
    index: int


def segment_batches(split: CorpusSplit | np.ndarray, seg_len: int, lanes: int = 1) -> Iterator[Segment]:
    """Lane-aligned ``T``-token segments.

    The stream is cut into ``lanes`` contiguous slices of equal length; each
    slice is walked left to right so segment ``i + 1`` of a lane directly
    continues segment ``i``. A trailing partial segment is dropped. Targets
    are the next corpus token, so only the very last position of the corpus
    can lack one.
    """
    ids = split.ids if isinstance(split, CorpusSplit) else np.asarray(split)
    n = ids.size
    if n < lanes * seg_len:
        raise DataError(f"corpus of {n} tokens is shorter than lanes*T = {lanes * seg_len}")
    lane_len = n // lanes
    n_seg = lane_len // seg_len
    nxt = np.append(ids[1:], IGNORE)
    starts = np.arange(lanes) * lane_len
    for i in range(n_seg):
        rows = starts[:, None] + i * seg_len + np.arange(seg_len)[None, :]
        yield Segment(ids[rows], nxt[rows], i)


def segment_count(n_tokens: int, seg_len: int, lanes: int = 1) -> int:
    return (n_tokens // lanes) // seg_len
