"""Byte-level tokenization and windowing of plain-text corpora."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .errors import EmptyCorpus, InvalidInput


@dataclass(frozen=True)
class CorpusSpec:
    paths: tuple[str, ...]
    seq_len: int = 256
    stride: int = 256
    max_docs: int | None = None

    def __post_init__(self):
        if self.seq_len < 1:
            raise InvalidInput("seq_len must be positive")
        if not 1 <= self.stride <= self.seq_len:
            raise InvalidInput(f"stride must be in [1, seq_len], got {self.stride}")

    @classmethod
    def from_dir(cls, directory, **kw) -> "CorpusSpec":
        d = Path(directory)
        if not d.is_dir():
            raise EmptyCorpus(f"corpus directory {d} does not exist")
        return cls(tuple(str(p) for p in sorted(d.glob("*.txt"))), **kw)


@dataclass(frozen=True)
class TokenBatch:
    sequences: list[list[int]]
    fingerprint: str = ""

    def __len__(self):
        return len(self.sequences)

    @property
    def n_tokens(self) -> int:
        return sum(len(s) for s in self.sequences)


def tokenize_bytes(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def windows(tokens: list[int], seq_len: int, stride: int) -> list[list[int]]:
    """Windows starting every ``stride`` tokens; the final short window is kept."""
    out = []
    for start in range(0, len(tokens), stride):
        out.append(tokens[start : start + seq_len])
        if start + seq_len >= len(tokens):
            break
    return out


def build_batches(spec: CorpusSpec, max_tokens: int | None = None) -> TokenBatch:
    """Window every document in path order (truncated to ``max_docs`` files).

    ``max_tokens`` optionally caps the total number of tokens kept, cutting
    the last window short.
    """
    paths = list(spec.paths)[: spec.max_docs] if spec.max_docs is not None else list(spec.paths)
    docs = []
    for p in paths:
        try:
            docs.append(Path(p).read_bytes())
        except OSError:
            continue
    if not docs:
        raise EmptyCorpus("no readable documents")

    h = hashlib.sha256()
    h.update(json.dumps({k: v for k, v in asdict(spec).items() if k != "paths"} | {"max_tokens": max_tokens},
                        sort_keys=True).encode())
    seqs: list[list[int]] = []
    budget = max_tokens
    for raw in docs:
        h.update(hashlib.sha256(raw).digest())
        for w in windows(list(raw), spec.seq_len, spec.stride):
            if budget is not None:
                if budget <= 0:
                    break
                w = w[:budget]
                budget -= len(w)
            seqs.append(w)
    if not seqs:
        raise EmptyCorpus("documents contain no tokens")
    return TokenBatch(seqs, h.hexdigest())
