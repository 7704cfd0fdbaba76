"""Per-layer importance scores.

LIM (layer input modification): negative cosine similarity between the
residual stream entering and leaving a block, averaged over every token
position of a calibration batch.  Higher means the block rewrites its input
more.

ZD (z-score distribution): fraction of a block's pooled matrix weights whose
z-score exceeds 1.  Needs no data.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .corpus import TokenBatch
from .errors import DegenerateActivations, InvalidInput
from .model import TransformerModel, forward_batch

NORM_FLOOR = 1e-12
SIGMA_FLOOR = 1e-20


def descending_order(scores: Sequence[float]) -> list[int]:
    """Layer indices by decreasing score, ties to the lower index."""
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


class _LimAccumulator:
    def __init__(self, n_layers: int):
        self.sums = [0.0] * n_layers
        self.counts = [0] * n_layers

    def add(self, i: int, a: np.ndarray, b: np.ndarray) -> None:
        a = a.reshape(-1, a.shape[-1]).astype(np.float64)
        b = b.reshape(-1, b.shape[-1]).astype(np.float64)
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        ok = (na >= NORM_FLOOR) & (nb >= NORM_FLOOR)
        cos = np.clip((a[ok] * b[ok]).sum(axis=1) / (na[ok] * nb[ok]), -1.0, 1.0)
        self.sums[i] += float(-cos.sum())
        self.counts[i] += int(ok.sum())

    def result(self) -> list[float]:
        bad = [i for i, c in enumerate(self.counts) if c == 0]
        if bad:
            raise DegenerateActivations(f"layers {bad} have no position with non-zero input and output")
        return [s / c for s, c in zip(self.sums, self.counts)]


def lim_from_traces(traces: Iterable) -> list[float]:
    """LIM per layer from (input_states, output_states) pairs or BlockTrace objects, one per layer."""
    pairs = [(t.input_states, t.output_states) if hasattr(t, "input_states") else t for t in traces]
    acc = _LimAccumulator(len(pairs))
    for i, (a, b) in enumerate(pairs):
        acc.add(i, np.asarray(a), np.asarray(b))
    return acc.result()


def lim_scores(model: TransformerModel, batch: TokenBatch, batch_size: int = 16) -> list[float]:
    seqs = batch.sequences if isinstance(batch, TokenBatch) else batch
    seqs = [s for s in seqs if len(s)]
    if not seqs:
        raise InvalidInput("calibration batch is empty")
    acc = _LimAccumulator(model.n_layers)
    i = 0
    while i < len(seqs):
        j = i
        while j < len(seqs) and j - i < batch_size and len(seqs[j]) == len(seqs[i]):
            j += 1
        _, traces = forward_batch(model, np.asarray(seqs[i:j]), capture=True)
        for layer, (a, b) in enumerate(traces):
            acc.add(layer, a, b)
        i = j
    return acc.result()


def zd_from_weights(mats: Sequence[np.ndarray], two_sided: bool = False, pooled: bool = True) -> float:
    """ZD of one block.

    ``pooled`` standardizes all matrices together (population sigma); otherwise
    ZD is computed per matrix and averaged.  ``two_sided`` counts |z| > 1.
    """
    if not pooled:
        return float(np.mean([zd_from_weights([m], two_sided) for m in mats]))
    w = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in mats])
    mu = w.mean()
    sigma = w.std()
    if sigma < SIGMA_FLOOR:
        return 0.0
    z = (w - mu) / sigma
    hits = np.abs(z) > 1 if two_sided else z > 1
    return int(hits.sum()) / w.size


def zd_scores(model: TransformerModel, two_sided: bool = False, pooled: bool = True) -> list[float]:
    return [zd_from_weights(model.block_matrices(i), two_sided, pooled) for i in range(model.n_layers)]


@dataclass
class ImportanceReport:
    n_layers: int
    lim: list[float] = field(default_factory=list)
    zd: list[float] = field(default_factory=list)
    lim_order: list[int] = field(default_factory=list)
    zd_order: list[int] = field(default_factory=list)
    calibration_fingerprint: str = ""

    @classmethod
    def from_scores(cls, n_layers: int, lim=None, zd=None, fingerprint: str = "") -> "ImportanceReport":
        lim = list(lim or [])
        zd = list(zd or [])
        return cls(n_layers, lim, zd, descending_order(lim), descending_order(zd), fingerprint)

    def order(self, name: str) -> list[int]:
        """Ordering (most to least important) by score name; ``reverse_lim`` flips LIM."""
        if name == "lim":
            o = self.lim_order
        elif name == "zd":
            o = self.zd_order
        elif name == "reverse_lim":
            o = self.lim_order[::-1]
        else:
            raise InvalidInput(f"report has no ordering {name!r}")
        if len(o) != self.n_layers:
            raise InvalidInput(f"report does not contain {name} scores")
        return list(o)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, s: str) -> "ImportanceReport":
        return cls(**json.loads(s))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "lim", "zd"])
        for i in range(self.n_layers):
            w.writerow([i, repr(self.lim[i]) if self.lim else "", repr(self.zd[i]) if self.zd else ""])
        return buf.getvalue()


def build_report(model: TransformerModel, batch: TokenBatch | None = None, scores=("lim", "zd"),
                 two_sided: bool = False, pooled: bool = True) -> ImportanceReport:
    scores = tuple(scores)
    unknown = set(scores) - {"lim", "zd"}
    if unknown:
        raise InvalidInput(f"unknown scores {sorted(unknown)}")
    lim = zd = None
    fingerprint = ""
    if "lim" in scores:
        if batch is None:
            raise InvalidInput("LIM needs a calibration batch")
        lim = lim_scores(model, batch)
        fingerprint = getattr(batch, "fingerprint", "")
    if "zd" in scores:
        zd = zd_scores(model, two_sided, pooled)
    return ImportanceReport.from_scores(model.n_layers, lim, zd, fingerprint)
