from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from layerquant import planner
from layerquant.errors import DegenerateBudget, InvalidInput, PlanMismatch
from layerquant.importance import ImportanceReport
from layerquant.planner import (
    Budget,
    QuantPlan,
    average_bits,
    budget_plan,
    format_bits,
    n_higher_from_budget,
    outlier_plan,
    pruning_plan,
    sequential_top_order,
    three_level_plan,
    two_level_plan,
)

# (N, layers at 2 bits, displayed average)
TABLE = [(32, 5, "3.68"), (32, 10, "3.37"), (32, 15, "3.06"),
         (40, 5, "3.75"), (40, 10, "3.50"), (40, 15, "3.25"),
         (28, 5, "3.64"), (28, 10, "3.28"), (28, 15, "2.92")]


def test_worked_budget_example():
    b = Budget(20, 17, 34, 32)
    assert n_higher_from_budget(b) == 5
    assert b.interpolated_memory(5) == 19.65625
    assert b.interpolated_memory(6) > 20


def test_budget_edges():
    assert n_higher_from_budget(Budget(10, 17, 34, 32)) == 0
    assert n_higher_from_budget(Budget(50, 17, 34, 32)) == 32
    assert n_higher_from_budget(Budget(34, 17, 34, 32)) == 32
    with pytest.raises(DegenerateBudget):
        n_higher_from_budget(Budget(20, 17, 17, 32))
    with pytest.raises(InvalidInput):
        Budget(20, 34, 17, 32)


@given(st.integers(1, 80), st.fractions(0, 100), st.fractions(0, 100), st.fractions(-10, 200))
def test_budget_safe_and_maximal(n, lo, span, avail):
    if span == 0:
        return
    b = Budget(avail, lo, lo + span, n)
    k = n_higher_from_budget(b)
    assert 0 <= k <= n
    interp = lambda j: lo + Fraction(j, n) * span  # noqa: E731
    if avail >= lo:
        assert interp(k) <= avail
    if k < n and avail >= lo:
        assert interp(k + 1) > avail


@pytest.mark.parametrize("n,n_low,shown", TABLE)
def test_average_bits_table(n, n_low, shown):
    plan = two_level_plan(list(range(n)), n - n_low)
    assert plan.n_at(2) == n_low
    assert plan.avg_bits_display() == shown


def test_forty_layer_split():
    plan = two_level_plan(list(range(40)), 30)
    assert average_bits(plan.bits_per_layer) == Fraction(7, 2)


def test_format_bits_truncates():
    assert format_bits(Fraction(59, 16)) == "3.68"
    assert format_bits(Fraction(92, 28)) == "3.28"
    assert format_bits(4) == "4.00"
    assert format_bits(Fraction(1, 3)) == "0.33"


@pytest.mark.parametrize("x", range(11))
def test_three_level_average_is_four(x):
    order = planner.random_order(32, x)
    plan = three_level_plan(order, x)
    assert average_bits(plan.bits_per_layer) == 4
    assert plan.n_at(8) == x and plan.n_at(2) == 2 * x
    assert [plan.bits_per_layer[i] for i in order[:x]] == [8] * x


def test_three_level_bounds():
    with pytest.raises(InvalidInput):
        three_level_plan(list(range(32)), 11)


@given(st.permutations(list(range(12))), st.integers(0, 12))
def test_two_level_layer_sets(order, k):
    plan = two_level_plan(order, k)
    assert {i for i, b in enumerate(plan.bits_per_layer) if b == 4} == set(order[:k])
    assert plan.n_higher == k and plan.order == list(order)


def test_two_level_errors():
    with pytest.raises(InvalidInput):
        two_level_plan([0, 1, 1], 1)
    with pytest.raises(InvalidInput):
        two_level_plan([0, 1], 3)
    with pytest.raises(InvalidInput):
        two_level_plan([0, 1], 1, 2, 4)
    with pytest.raises(InvalidInput):
        two_level_plan([0, 1], 1, 5, 2)


def test_budget_plan_records_budget():
    plan = budget_plan(list(range(32)), Budget(20, 17, 34, 32), ordering_name="lim")
    assert plan.n_higher == 5 and plan.budget["interpolated_memory"] == 19.65625
    with pytest.raises(PlanMismatch):
        budget_plan(list(range(8)), Budget(20, 17, 34, 32))


def test_pruning_plans():
    plan = pruning_plan(sequential_top_order(32), 2)
    assert plan.pruned_layers == [29, 30]
    assert sequential_top_order(4) == [3, 0, 1, 2]
    imp = pruning_plan([2, 0, 3, 1], 2, base_bits=8)
    assert imp.pruned_layers == [1, 3] and imp.kept_layers == [0, 2]
    with pytest.raises(InvalidInput):
        pruning_plan([0, 1], 2)


def test_outlier_plan():
    plan = outlier_plan([3, 1, 0, 2], 2, 0.01, 0.001)
    assert plan.outlier_fraction_per_layer == [0.001, 0.01, 0.001, 0.01]
    assert plan.bits_per_layer == [4] * 4
    with pytest.raises(InvalidInput):
        outlier_plan([0, 1], 1, 0.001, 0.01)


def test_orderings():
    r = ImportanceReport.from_scores(4, lim=[0.1, 0.9, 0.5, 0.2], zd=[0.3, 0.1, 0.2, 0.4])
    assert planner.ordering("lim", 4, r) == ("lim", [1, 2, 3, 0])
    assert planner.ordering("reverse_lim", 4, r)[1] == [0, 3, 2, 1]
    assert planner.ordering("zd", 4, r)[1] == [3, 0, 2, 1]
    name, order = planner.ordering("random", 4, seed=5)
    assert name == "random(5)" and sorted(order) == [0, 1, 2, 3]
    assert planner.ordering("random", 4, seed=5)[1] == order
    with pytest.raises(InvalidInput):
        planner.ordering("nope", 4)


def test_plan_json_round_trip():
    plan = outlier_plan([1, 0, 2], 1, 0.01, 0.0, ordering_name="zd")
    assert QuantPlan.from_json(plan.to_json()) == plan
    assert plan.to_json() == QuantPlan.from_json(plan.to_json()).to_json()


def test_memory_accounting(tiny_model):
    n = sum(w.size for w in tiny_model.block_matrices(0))
    plan = two_level_plan([0, 1, 2, 3], 1, 8, 4)
    ideal, exact = planner.plan_memory(plan, tiny_model)
    assert ideal == n * (8 + 4 * 3) / 8
    assert exact > ideal
    pruned = pruning_plan([0, 1, 2, 3], 2, base_bits=8)
    assert planner.plan_memory(pruned, tiny_model)[0] == 2 * n
    assert planner.idealized_block_bytes(pruned, n) == 2 * n
    b = planner.budget_from_model(tiny_model, 3 * n / 8)
    assert (b.m_lower, b.m_higher) == (4 * n * 2 / 8, 4 * n * 4 / 8)
    assert planner.tensor_exact_bytes((4096,), 4, 128) == 2304
    assert planner.tensor_exact_bytes((10, 10), 16) == 200


@given(st.sampled_from([8, 12, 32]), st.data())
def test_prune_vs_quant_memory_identity(n, data):
    k = data.draw(st.integers(0, n // 2))
    order = list(range(n))
    params = 1000
    q = two_level_plan(order, n - 2 * k, 8, 4)
    p = pruning_plan(order, k, base_bits=8)
    assert planner.idealized_block_bytes(q, params) == planner.idealized_block_bytes(p, params)
