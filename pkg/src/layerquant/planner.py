"""Bit-assignment plans: two-level, three-level, pruning and outlier-fraction.

An ordering is a permutation of layer indices from most to least important.
Every plan keeps the "high" precision for a prefix of the ordering and
demotes (or prunes) its tail.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

from . import quant
from .errors import DegenerateBudget, InvalidInput, PlanMismatch
from .tensor import Rng

PLAN_BITS = (2, 4, 8, 16)
ORDERINGS = ("lim", "zd", "reverse_lim", "random", "sequential_top")


@dataclass(frozen=True)
class Budget:
    """Memory figures in any consistent unit (bytes, GB, ...)."""

    m_available: float
    m_lower: float
    m_higher: float
    n_layers: int

    def __post_init__(self):
        if self.m_lower > self.m_higher:
            raise InvalidInput("m_lower must not exceed m_higher")
        if self.n_layers < 1:
            raise InvalidInput("n_layers must be >= 1")

    def interpolated_memory(self, n_higher: int) -> float:
        """m_lower + n_higher/N * (m_higher - m_lower), exact before the final float conversion."""
        lo, hi = Fraction(self.m_lower), Fraction(self.m_higher)
        return float(lo + Fraction(n_higher, self.n_layers) * (hi - lo))


def n_higher_from_budget(b: Budget) -> int:
    """floor((M_avail - M_lower) / (M_higher - M_lower) * N), clamped to [0, N]."""
    if b.m_higher == b.m_lower:
        raise DegenerateBudget("m_higher equals m_lower; the budget does not separate the two levels")
    lo, hi, avail = Fraction(b.m_lower), Fraction(b.m_higher), Fraction(b.m_available)
    n = math.floor((avail - lo) / (hi - lo) * b.n_layers)
    return max(0, min(b.n_layers, n))


@dataclass
class QuantPlan:
    bits_per_layer: list[int]
    ordering_name: str
    n_higher: int
    avg_bits: float
    pruned_layers: list[int] = field(default_factory=list)
    outlier_fraction_per_layer: list[float] | None = None
    budget: dict | None = None
    order: list[int] = field(default_factory=list)
    group_size: int = quant.DEFAULT_GROUP_SIZE
    kernel: str = "rtn"

    @property
    def n_layers(self) -> int:
        return len(self.bits_per_layer)

    @property
    def kept_layers(self) -> list[int]:
        pruned = set(self.pruned_layers)
        return [i for i in range(self.n_layers) if i not in pruned]

    def n_at(self, bits: int) -> int:
        return sum(1 for i in self.kept_layers if self.bits_per_layer[i] == bits)

    def avg_bits_display(self) -> str:
        return format_bits(average_bits(self.bits_per_layer, self.pruned_layers))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "QuantPlan":
        return cls(**d)

    @classmethod
    def from_json(cls, s: str) -> "QuantPlan":
        return cls.from_dict(json.loads(s))


def average_bits(bits: Sequence[int], pruned: Sequence[int] = ()) -> Fraction:
    """Mean bit width over kept layers (all blocks hold the same number of weights)."""
    drop = set(pruned)
    kept = [b for i, b in enumerate(bits) if i not in drop]
    if not kept:
        raise InvalidInput("plan keeps no layers")
    return Fraction(sum(kept), len(kept))


def format_bits(avg) -> str:
    """Two decimals, truncated (3.6875 -> '3.68', 3.2857 -> '3.28')."""
    hundredths = math.floor(Fraction(avg) * 100)
    return f"{hundredths // 100}.{hundredths % 100:02d}"


# -- orderings ---------------------------------------------------------------


def check_order(order: Sequence[int], n_layers: int | None = None) -> list[int]:
    order = [int(i) for i in order]
    n = len(order) if n_layers is None else n_layers
    if sorted(order) != list(range(n)):
        raise InvalidInput(f"ordering is not a permutation of 0..{n - 1}")
    return order


def random_order(n_layers: int, seed: int) -> list[int]:
    return Rng(seed).permutation(n_layers)


def sequential_top_order(n_layers: int) -> list[int]:
    """Last block first, then 0..N-2: its tail is the top of the stack minus the final block."""
    return [n_layers - 1] + list(range(n_layers - 1))


def ordering(name: str, n_layers: int, report=None, seed: int = 0) -> tuple[str, list[int]]:
    """Resolve an ordering name to (recorded name, permutation)."""
    if name == "random":
        return f"random({seed})", random_order(n_layers, seed)
    if name == "sequential_top":
        return name, sequential_top_order(n_layers)
    if name in ("lim", "zd", "reverse_lim", "reverse"):
        if report is None:
            raise InvalidInput(f"ordering {name!r} needs an importance report")
        name = "reverse_lim" if name == "reverse" else name
        return name, check_order(report.order(name), n_layers)
    raise InvalidInput(f"unknown ordering {name!r}; choose from {ORDERINGS}")


# -- plans -------------------------------------------------------------------


def _check_bits(*bits: int) -> None:
    for b in bits:
        if b not in PLAN_BITS:
            raise InvalidInput(f"bit width {b} not in {PLAN_BITS}")


def two_level_plan(order: Sequence[int], n_higher: int, high_bits: int = 4, low_bits: int = 2,
                   ordering_name: str = "custom", **kw) -> QuantPlan:
    """The first ``n_higher`` layers of ``order`` get ``high_bits``, the rest ``low_bits``."""
    order = check_order(order)
    n = len(order)
    _check_bits(high_bits, low_bits)
    if high_bits <= low_bits:
        raise InvalidInput(f"high_bits ({high_bits}) must exceed low_bits ({low_bits})")
    if not 0 <= n_higher <= n:
        raise InvalidInput(f"n_higher={n_higher} outside [0, {n}]")
    bits = [low_bits] * n
    for i in order[:n_higher]:
        bits[i] = high_bits
    return QuantPlan(bits, ordering_name, n_higher, float(average_bits(bits)), order=order, **kw)


def budget_plan(order: Sequence[int], budget: Budget, high_bits: int = 4, low_bits: int = 2,
                ordering_name: str = "custom", **kw) -> QuantPlan:
    if budget.n_layers != len(order):
        raise PlanMismatch(f"budget is for {budget.n_layers} layers, ordering has {len(order)}")
    n_hi = n_higher_from_budget(budget)
    plan = two_level_plan(order, n_hi, high_bits, low_bits, ordering_name, **kw)
    plan.budget = asdict(budget) | {"interpolated_memory": budget.interpolated_memory(n_hi)}
    return plan


def three_level_plan(order: Sequence[int], x: int, ordering_name: str = "custom", **kw) -> QuantPlan:
    """Top ``x`` layers at 8 bits, bottom ``2x`` at 2 bits, the rest at 4 (average stays 4)."""
    order = check_order(order)
    n = len(order)
    if x < 0 or 3 * x > n:
        raise InvalidInput(f"three-level plan needs 0 <= 3x <= N, got x={x}, N={n}")
    bits = [4] * n
    for i in order[:x]:
        bits[i] = 8
    for i in order[n - 2 * x :] if x else []:
        bits[i] = 2
    return QuantPlan(bits, ordering_name, x, float(average_bits(bits)), order=order, **kw)


def pruning_plan(order: Sequence[int], k: int, base_bits: int = 16, ordering_name: str = "custom", **kw) -> QuantPlan:
    """Remove the ``k`` least important layers; survivors stay at ``base_bits``."""
    order = check_order(order)
    n = len(order)
    _check_bits(base_bits)
    if not 0 <= k < n:
        raise InvalidInput(f"can prune 0..{n - 1} layers, got {k}")
    pruned = sorted(order[n - k :]) if k else []
    bits = [base_bits] * n
    return QuantPlan(bits, ordering_name, n - k, float(average_bits(bits, pruned)), pruned_layers=pruned,
                     order=order, **kw)


def outlier_plan(order: Sequence[int], n_high_threshold: int, p_high: float, p_low: float, bits: int = 4,
                 ordering_name: str = "custom", **kw) -> QuantPlan:
    """Uniform ``bits``; the ``n_high_threshold`` most important layers keep fraction ``p_high`` as outliers."""
    order = check_order(order)
    n = len(order)
    if not 0 <= p_low <= p_high <= 1:
        raise InvalidInput(f"need 0 <= p_low <= p_high <= 1, got {p_low}, {p_high}")
    if not 0 <= n_high_threshold <= n:
        raise InvalidInput(f"n_high_threshold={n_high_threshold} outside [0, {n}]")
    if bits not in (2, 4, 8):
        raise InvalidInput("outlier plans need 2, 4 or 8 base bits")
    frac = [float(p_low)] * n
    for i in order[:n_high_threshold]:
        frac[i] = float(p_high)
    return QuantPlan([bits] * n, ordering_name, n_high_threshold, float(bits),
                     outlier_fraction_per_layer=frac, order=order, **kw)


# -- memory accounting -------------------------------------------------------


def tensor_exact_bytes(shape: Sequence[int], bits: int, group_size: int = quant.DEFAULT_GROUP_SIZE,
                       outlier_fraction: float = 0.0) -> int:
    """Exact storage the default kernel uses for one matrix; 16 bits means 2 bytes per weight."""
    n = math.prod(shape)
    if bits == 16:
        return 2 * n
    packed = math.ceil(n * bits / 8)
    if outlier_fraction > 0:
        return packed + 8 * math.ceil(n / group_size) + 6 * math.ceil(outlier_fraction * n)
    if bits == 8:
        return packed + 8 * shape[-1]
    return packed + 8 * math.ceil(n / group_size)


def plan_memory(plan: QuantPlan, model) -> tuple[float, int]:
    """(idealized, exact) bytes of the decoder blocks under ``plan``; pruned layers cost nothing."""
    if plan.n_layers != model.n_layers:
        raise PlanMismatch(f"plan covers {plan.n_layers} layers, model has {model.n_layers}")
    ideal = 0.0
    exact = 0
    fr = plan.outlier_fraction_per_layer
    for i in plan.kept_layers:
        bits = plan.bits_per_layer[i]
        f = float(fr[i]) if fr else 0.0
        for w in model.block_matrices(i):
            ideal += w.size * bits / 8
            if plan.kernel == "rtn" or bits == 16:
                exact += tensor_exact_bytes(w.shape, bits, plan.group_size, f)
            else:
                exact += quant.quantized_bytes(quant.get_kernel(plan.kernel)(w, bits, plan.group_size, f))
    return ideal, exact


def idealized_block_bytes(plan: QuantPlan, params_per_layer: int) -> float:
    """Idealized bytes when every block has ``params_per_layer`` weights."""
    return sum(params_per_layer * plan.bits_per_layer[i] / 8 for i in plan.kept_layers)


def budget_from_model(model, m_available: float, high_bits: int = 4, low_bits: int = 2) -> Budget:
    """Budget whose M_lower/M_higher are the idealized block memory of the uniform plans."""
    n = sum(w.size for i in range(model.n_layers) for w in model.block_matrices(i))
    return Budget(m_available, n * low_bits / 8, n * high_bits / 8, model.n_layers)
