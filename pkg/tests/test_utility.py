import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpaste.mining import PatternLibrary, PatternTuple, ToolStat
from bpaste.resources import InterferenceModel
from bpaste.trace import EventSignature
from bpaste.utility import (
    UtilityBreakdown,
    corun_latency,
    expected_utility,
    overlap_gain,
    solo_latency,
    unlock_gain,
)
from conftest import chain_hypothesis, dag_hypothesis, make_node, profile
from oracles import longest_path_ms


def test_solo_latency_single_and_chain():
    assert solo_latency(chain_hypothesis([make_node("a", latency=100)])) == 100
    h = chain_hypothesis(
        [make_node("a", latency=100), make_node("b", latency=50), make_node("c", latency=25)]
    )
    assert solo_latency(h) == 175


def test_solo_latency_diamond_longest_arm():
    nodes = [
        make_node("s", latency=0),
        make_node("l", latency=100),
        make_node("r", latency=120),
        make_node("t", latency=0),
    ]
    h = dag_hypothesis(nodes, [("s", "l"), ("s", "r"), ("l", "t"), ("r", "t")], "s")
    assert solo_latency(h) == 120
    assert solo_latency(h) == longest_path_ms(h)


def test_barriers_contribute_zero():
    from bpaste.hypotheses import NODE_BARRIER

    h = chain_hypothesis(
        [make_node("a", latency=100),
         make_node("b", kind=NODE_BARRIER, latency=0),
         make_node("c", latency=50)]
    )
    assert solo_latency(h) == 150


def test_model_nodes_weight_paths_but_carry_their_estimate():
    from bpaste.hypotheses import NODE_MODEL

    h = chain_hypothesis(
        [make_node("a", latency=100),
         make_node("m", kind=NODE_MODEL, latency=200),
         make_node("c", latency=50)]
    )
    assert solo_latency(h) == 350


def test_corun_equals_solo_with_empty_admitted(unit_capacity_model):
    h = chain_hypothesis([make_node("a", latency=100, rho=profile(cpu=0.9))])
    assert corun_latency(h, [], unit_capacity_model) == 100


def test_corun_proportional_share_single_dimension(unit_capacity_model):
    h = chain_hypothesis([make_node("a", latency=100, rho=profile(cpu=0.5))])
    other = chain_hypothesis([make_node("o", latency=10, rho=profile(cpu=1.0))], hid="o")
    assert corun_latency(h, [other], unit_capacity_model) == pytest.approx(150.0)


def test_corun_slowdown_is_max_over_dimensions_not_product(unit_capacity_model):
    h = chain_hypothesis([make_node("a", latency=100, rho=profile(cpu=0.75, mem=0.6))])
    other = chain_hypothesis([make_node("o", latency=10, rho=profile(cpu=0.75, mem=0.6))], hid="o")
    # totals: cpu 1.5, mem 1.2 -> slowdown 1.5, never 1.8
    assert corun_latency(h, [other], unit_capacity_model) == pytest.approx(150.0)


def test_overlap_gain_examples(unit_capacity_model):
    h = chain_hypothesis([make_node("a", latency=100, rho=profile(cpu=0.3))])
    assert overlap_gain(h, [], unit_capacity_model, gap_est=0.0) == pytest.approx(100.0)
    assert overlap_gain(h, [], unit_capacity_model, gap_est=500.0) == pytest.approx(100.0)
    # co-run 200 via a saturating co-runner, gap 50: min(200, 150) = 150
    other = chain_hypothesis([make_node("o", latency=10, rho=profile(cpu=1.7))], hid="o")
    assert corun_latency(h, [other], unit_capacity_model) == pytest.approx(200.0)
    assert overlap_gain(h, [other], unit_capacity_model, gap_est=50.0) == pytest.approx(150.0)


def _sig(tool):
    return EventSignature(tool, "success", ())


def _continuation_library():
    pat1 = PatternTuple((_sig("exit"),), _sig("succ1"), (), 0.5, 5, 0.0)
    pat2 = PatternTuple((_sig("succ1"),), _sig("succ2"), (), 0.5, 5, 0.0)
    stats = {"succ1": ToolStat(5, 200.0), "succ2": ToolStat(5, 400.0)}
    return PatternLibrary([pat1, pat2], stats, 100.0)


def test_unlock_gain_leaf_is_zero():
    h = chain_hypothesis([make_node("x", tool="lonely", latency=50)])
    assert unlock_gain(h, _continuation_library(), horizon=2) == 0.0


def test_unlock_gain_single_successor():
    h = chain_hypothesis([make_node("x", tool="exit", latency=50)])
    assert unlock_gain(h, _continuation_library(), horizon=1) == pytest.approx(100.0)


def test_unlock_gain_two_step_continuation():
    h = chain_hypothesis([make_node("x", tool="exit", latency=50)])
    # 0.5 * 200 + 0.25 * 400
    assert unlock_gain(h, _continuation_library(), horizon=2) == pytest.approx(200.0)


def test_breakdown_arithmetic_exact():
    bd = UtilityBreakdown(q=0.9, overlap_ms=100.0, unlock_ms=50.0, interference_ms=20.0,
                          lam=1.0, mu=1.0)
    assert bd.eu == pytest.approx(117.0)
    assert UtilityBreakdown(0.0, 100.0, 50.0, 20.0, 1.0, 1.0).eu == 0.0


def test_expected_utility_assembles_components(unit_capacity_model):
    lib = _continuation_library()
    h = chain_hypothesis([make_node("x", tool="exit", latency=100, rho=profile(cpu=0.5))], q=0.9)
    other = chain_hypothesis([make_node("o", latency=10, rho=profile(cpu=1.0))], hid="o")
    bd = expected_utility(h, [other], unit_capacity_model, gap_est=50.0, library=lib,
                          lam=1.0, mu=1.0, unlock_horizon=2)
    assert bd.interference_ms == pytest.approx(50.0)  # 150 co-run - 100 solo
    assert bd.overlap_ms == pytest.approx(150.0)  # min(150, 50 + 100)
    assert bd.unlock_ms == pytest.approx(200.0)
    assert bd.eu == pytest.approx(0.9 * (150.0 + 200.0 - 50.0))
    # the breakdown invariant is recomputable from its own fields
    assert bd.eu == pytest.approx(bd.q * (bd.overlap_ms + bd.lam * bd.unlock_ms - bd.mu * bd.interference_ms))


def test_interference_zero_under_capacity_with_empty_set(unit_capacity_model):
    h = chain_hypothesis([make_node("x", latency=100, rho=profile(cpu=0.4, mem=0.4))])
    bd = expected_utility(h, [], unit_capacity_model, 0.0, PatternLibrary([], {}, 0.0), 1.0, 1.0)
    assert bd.interference_ms == 0.0


@given(
    extra=st.floats(min_value=0.0, max_value=1.5),
    lam=st.floats(min_value=0.0, max_value=3.0),
    mu=st.floats(min_value=0.0, max_value=3.0),
)
@settings(max_examples=40, deadline=None)
def test_interference_monotone_and_nonnegative(extra, lam, mu):
    model = InterferenceModel(profile(cpu=1.0, mem=1.0, io=1.0, slots=2.0))
    h = chain_hypothesis([make_node("x", latency=100, rho=profile(cpu=0.5))])
    small = [chain_hypothesis([make_node("o1", latency=10, rho=profile(cpu=0.4))], hid="o1")]
    big = small + [chain_hypothesis([make_node("o2", latency=10, rho=profile(cpu=extra))], hid="o2")]
    assert corun_latency(h, big, model) >= corun_latency(h, small, model)
    lib = PatternLibrary([], {}, 0.0)
    bd = expected_utility(h, big, model, 25.0, lib, lam, mu)
    assert bd.interference_ms >= 0.0


def test_eu_linear_in_unlock_and_interference():
    # finite differences on the scalar fields of the breakdown
    base = UtilityBreakdown(0.7, 120.0, 80.0, 30.0, 1.5, 2.0)
    bumped_u = UtilityBreakdown(0.7, 120.0, 81.0, 30.0, 1.5, 2.0)
    bumped_i = UtilityBreakdown(0.7, 120.0, 80.0, 31.0, 1.5, 2.0)
    assert bumped_u.eu - base.eu == pytest.approx(0.7 * 1.5)
    assert bumped_i.eu - base.eu == pytest.approx(-0.7 * 2.0)


def test_linear_coefficient_identity_matches_proportional():
    cap = profile(cpu=1.0, mem=1.0, io=1.0, slots=2.0)
    ident = tuple(tuple(1.0 if i == j else 0.0 for j in range(4)) for i in range(4))
    linear = InterferenceModel(cap, "linear_coefficient", ident)
    prop = InterferenceModel(cap)
    subject = profile(cpu=0.5)
    others = [profile(cpu=0.8), profile(mem=0.3)]
    assert linear.slowdown(subject, others) == pytest.approx(prop.slowdown(subject, others))
    assert linear.slowdown(subject, []) == 1.0


def test_negative_eu_possible_under_tight_capacity():
    model = InterferenceModel(profile(cpu=0.1, mem=0.1, io=0.1, slots=0.1))
    h = chain_hypothesis([make_node("x", latency=100, rho=profile(cpu=0.1))], q=1.0)
    other = chain_hypothesis([make_node("o", latency=10, rho=profile(cpu=0.5))], hid="o")
    bd = expected_utility(h, [other], model, 0.0, PatternLibrary([], {}, 0.0), 1.0, 5.0)
    assert bd.eu < 0
