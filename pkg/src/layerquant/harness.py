"""Evaluation, sweep and pruning-comparison drivers behind the CLI."""
from __future__ import annotations

import csv
import io
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Sequence

import numpy as np

from . import planner, quant
from .errors import InvalidInput, LayerQuantError
from .model import (TransformerModel, batch_nll, block_forward, embed, perplexity, pooled_perplexity,
                    prune_layers, quantize_block, token_batches)

RETENTION_FACTOR = 10 / 9
SWEEP_COLUMNS = ["ordering", "n_low", "avg_bits", "idealized_bytes", "exact_bytes", "perplexity", "stddev"]
PRUNE_COLUMNS = ["increment", "method", "n_low", "n_pruned", "avg_bits", "idealized_bytes", "exact_bytes", "perplexity"]


class NumericFailure(LayerQuantError):
    """A perplexity came out NaN or infinite."""


class MemoryMismatch(LayerQuantError, AssertionError):
    pass


def retention(ppl: float, baseline_ppl: float) -> float:
    """exp(-(log ppl - log baseline)), clamped to (0, 1]."""
    return min(1.0, math.exp(-(math.log(ppl) - math.log(baseline_ppl))))


@dataclass
class EvalReport:
    ordering: str
    avg_bits: float
    n_low_layers: int
    perplexity: float
    baseline_perplexity: float | None = None
    retention: float | None = None
    runtime_seconds: float = 0.0
    n_tokens: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class PlanEvaluator:
    """Perplexity of many plans on one model and batch.

    Each (layer, bits, outlier fraction) variant is quantized once.  Distinct
    plans are visited in lexicographic order of their per-layer variants and
    the residual stream of the shared prefix is reused, so two plans that
    first differ at layer i only recompute layers i..N-1.  Every batch goes
    through exactly the operations a plain ``perplexity`` call performs, so
    results are bitwise identical to evaluating each fake-quantized model on
    its own, and independent of ``threads`` (which only spreads batches).
    """

    def __init__(self, model: TransformerModel, sequences: Sequence[Sequence[int]],
                 group_size: int = quant.DEFAULT_GROUP_SIZE, kernel: str = "rtn", threads: int = 1):
        if not sequences:
            raise InvalidInput("empty corpus")
        self.model = model
        self.sequences = sequences
        self.group_size = group_size
        self.kernel = kernel
        self.threads = max(1, int(threads))
        self._blocks: dict[tuple, dict[str, np.ndarray]] = {}
        self._ppl: dict[tuple, float] = {}
        self._batches = token_batches(sequences)
        for _, toks in self._batches:
            if toks.shape[1] - 1 > model.config.max_seq_len:
                raise InvalidInput("sequence longer than max_seq_len + 1")
            if toks.min() < 0 or toks.max() >= model.config.vocab_size:
                raise InvalidInput("token out of range")

    def _variant(self, i: int, bits: int, frac: float) -> dict[str, np.ndarray]:
        key = (i, bits, frac)
        if key not in self._blocks:
            if bits == 16:
                self._blocks[key] = {n: self.model.weights[n] for n in self.model.block_matrix_names(i)}
            else:
                qs = quantize_block(self.model, i, bits, self.group_size, frac, self.kernel)
                self._blocks[key] = {name: quant.dequantize(q) for name, q in qs.items()}
        return self._blocks[key]

    def key(self, plan: planner.QuantPlan) -> tuple:
        if plan.n_layers != self.model.n_layers:
            raise InvalidInput(f"plan covers {plan.n_layers} layers, model has {self.model.n_layers}")
        fr = plan.outlier_fraction_per_layer or [0.0] * plan.n_layers
        pruned = set(plan.pruned_layers)
        return tuple((0, 0, 0.0) if i in pruned else (1, int(b), float(fr[i]))
                     for i, b in enumerate(plan.bits_per_layer))

    def build(self, plan: planner.QuantPlan) -> TransformerModel:
        """The fake-quantized (and pruned) model a plan describes."""
        updates = {}
        for i, (kind, bits, frac) in enumerate(self.key(plan)):
            if kind:
                updates.update(self._variant(i, bits, frac))
        return prune_layers(self.model.with_weights(updates), plan.pruned_layers)

    def _run_layer(self, i: int, variant: tuple, xs: list[np.ndarray], pool) -> list[np.ndarray]:
        kind, bits, frac = variant
        if not kind:
            return xs
        mats = self._variant(i, bits, frac)
        w = self.model.w

        def get(suffix):
            name = f"blocks.{i}.{suffix}"
            return mats[name].astype(np.float32, copy=False) if name in mats else w(name)

        step = partial(block_forward, self.model.config, get)
        return list(pool.map(step, xs)) if pool else [step(x) for x in xs]

    def evaluate_all(self, plans: Sequence[planner.QuantPlan]) -> list[float]:
        keys = [self.key(p) for p in plans]
        todo = sorted(set(k for k in keys if k not in self._ppl))
        if todo:
            n = self.model.n_layers
            pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None
            try:
                states = [[embed(self.model, toks[:, :-1]) for _, toks in self._batches]]
                prev: tuple = ()
                for k in todo:
                    shared = 0
                    while shared < min(len(prev), n) and prev[shared] == k[shared]:
                        shared += 1
                    del states[shared + 1 :]
                    for i in range(shared, n):
                        states.append(self._run_layer(i, k[i], states[i], pool))
                    nll = [batch_nll(self.model, x, toks) for x, (_, toks) in zip(states[n], self._batches)]
                    ppl = pooled_perplexity(self.sequences, nll)
                    if not math.isfinite(ppl):
                        raise NumericFailure("non-finite perplexity")
                    self._ppl[k] = ppl
                    prev = k
            finally:
                if pool:
                    pool.shutdown()
        return [self._ppl[k] for k in keys]

    def perplexity(self, plan: planner.QuantPlan) -> float:
        return self.evaluate_all([plan])[0]


def evaluate(model: TransformerModel, sequences, plan: planner.QuantPlan | None = None,
             baseline_ppl: float | None = None) -> EvalReport:
    t0 = time.perf_counter()
    if plan is None:
        ppl = perplexity(model, sequences)
        ordering, avg, n_low = "none", 16.0, 0
    else:
        ppl = PlanEvaluator(model, sequences, plan.group_size, plan.kernel).perplexity(plan)
        top = max(plan.bits_per_layer)
        ordering, avg, n_low = plan.ordering_name, plan.avg_bits, sum(1 for i in plan.kept_layers if plan.bits_per_layer[i] < top)
    if not math.isfinite(ppl):
        raise NumericFailure("perplexity is not finite")
    ret = retention(ppl, baseline_ppl) if baseline_ppl is not None else None
    return EvalReport(ordering, avg, n_low, ppl, baseline_ppl, ret, time.perf_counter() - t0,
                      sum(len(s) for s in sequences))


# -- sweep -------------------------------------------------------------------


@dataclass
class SweepRow:
    ordering: str
    n_low: int
    avg_bits: float
    idealized_bytes: float
    exact_bytes: int
    perplexity: float
    stddev: float = 0.0
    low_layers: list[int] = field(default_factory=list)  # from the first seed for random


@dataclass
class SweepResult:
    rows: list[SweepRow]
    retention_points: dict[str, dict]
    high_bits: int
    low_bits: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            w.writerow([r.ordering, r.n_low, repr(r.avg_bits), repr(r.idealized_bytes), r.exact_bytes,
                        repr(r.perplexity), repr(r.stddev)])
        return buf.getvalue()

    def curve(self, ordering: str) -> list[SweepRow]:
        return [r for r in self.rows if r.ordering == ordering]


def retention_point(rows: Sequence[SweepRow], factor: float = RETENTION_FACTOR) -> dict:
    """Deepest n_low reached before perplexity first exceeds ``factor`` times the n_low=0 value."""
    rows = sorted(rows, key=lambda r: r.n_low)
    base = rows[0].perplexity
    best = rows[0]
    for r in rows[1:]:
        if r.perplexity > factor * base:
            break
        best = r
    return {"n_low": best.n_low, "avg_bits": best.avg_bits, "perplexity": best.perplexity,
            "baseline_perplexity": base, "factor": factor}


def sweep(model: TransformerModel, sequences, report=None, orderings=("lim", "zd", "reverse_lim", "random"),
          high_bits: int = 4, low_bits: int = 2, seeds: int = 3, seed: int = 0,
          group_size: int = quant.DEFAULT_GROUP_SIZE, threads: int = 1,
          retention_factor: float = RETENTION_FACTOR, evaluator: PlanEvaluator | None = None) -> SweepResult:
    """Two-level plans with n_low = 0..N demoted layers for each ordering.

    ``random`` is averaged over ``seeds`` permutations (seeds ``seed .. seed+seeds-1``);
    its stddev column is the population standard deviation across them.
    """
    n = model.n_layers
    ev = evaluator or PlanEvaluator(model, sequences, group_size, threads=threads)
    groups: dict[str, list[list[planner.QuantPlan]]] = {}
    for name in orderings:
        name = "reverse_lim" if name == "reverse" else name
        if name == "random":
            orders = [planner.ordering("random", n, seed=seed + j)[1] for j in range(seeds)]
        else:
            orders = [planner.ordering(name, n, report)[1]]
        groups[name] = [[planner.two_level_plan(o, n - k, high_bits, low_bits, name, group_size=group_size)
                         for o in orders] for k in range(n + 1)]

    flat = [p for per_k in groups.values() for plans in per_k for p in plans]
    ev.evaluate_all(flat)

    rows = []
    for name, per_k in groups.items():
        for k, plans in enumerate(per_k):
            ppls = [ev.perplexity(p) for p in plans]
            ideal, exact = planner.plan_memory(plans[0], model)
            rows.append(SweepRow(name, k, plans[0].avg_bits, ideal, exact, statistics.fmean(ppls),
                                 statistics.pstdev(ppls) if len(ppls) > 1 else 0.0,
                                 sorted(plans[0].order[n - k :]) if k else []))
    rows.sort(key=lambda r: (r.ordering, r.n_low))
    points = {name: retention_point([r for r in rows if r.ordering == name], retention_factor) for name in groups}
    return SweepResult(rows, points, high_bits, low_bits)


# -- quantization vs pruning -------------------------------------------------


@dataclass
class PruneRow:
    increment: int
    method: str
    n_low: int
    n_pruned: int
    avg_bits: float
    idealized_bytes: float
    exact_bytes: int
    perplexity: float
    layers: list[int] = field(default_factory=list)


def compare_prune(model: TransformerModel, sequences, order: Sequence[int], ordering_name: str = "lim",
                  high_bits: int = 8, low_bits: int = 4, group_size: int = quant.DEFAULT_GROUP_SIZE,
                  threads: int = 1, evaluate_ppl: bool = True) -> list[PruneRow]:
    """Per increment k: 2k layers demoted vs k importance-pruned vs k pruned from the top.

    Each row frees the same idealized memory, which is checked for every k.
    """
    if high_bits != 2 * low_bits:
        raise InvalidInput("memory equivalence needs high_bits == 2 * low_bits")
    n = model.n_layers
    ev = PlanEvaluator(model, sequences, group_size, threads=threads)
    top = planner.sequential_top_order(n)
    triples = []
    for k in range(n // 2 + 1):
        a = planner.two_level_plan(order, n - 2 * k, high_bits, low_bits, ordering_name, group_size=group_size)
        b = planner.pruning_plan(order, k, high_bits, ordering_name, group_size=group_size)
        c = planner.pruning_plan(top, k, high_bits, "sequential_top", group_size=group_size)
        triples.append((k, a, b, c))
    if evaluate_ppl:
        ev.evaluate_all([p for _, *plans in triples for p in plans])

    rows = []
    for k, a, b, c in triples:
        mem = [planner.plan_memory(p, model) for p in (a, b, c)]
        if not (mem[0][0] == mem[1][0] == mem[2][0]):
            raise MemoryMismatch(f"increment {k}: idealized bytes differ {[m[0] for m in mem]}")
        for method, p, (ideal, exact) in zip(("quantization", "prune_importance", "prune_sequential_top"), (a, b, c), mem):
            ppl = ev.perplexity(p) if evaluate_ppl else float("nan")
            layers = p.pruned_layers if p.pruned_layers else sorted(i for i in range(n) if p.bits_per_layer[i] == low_bits)
            rows.append(PruneRow(k, method, 2 * k if method == "quantization" else 0, len(p.pruned_layers),
                                 p.avg_bits, ideal, exact, ppl, list(layers)))
    return rows


def prune_rows_csv(rows: Sequence[PruneRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PRUNE_COLUMNS)
    for r in rows:
        w.writerow([r.increment, r.method, r.n_low, r.n_pruned, repr(r.avg_bits), repr(r.idealized_bytes),
                    r.exact_bytes, repr(r.perplexity)])
    return buf.getvalue()
