"""Shared builders for traces, hypotheses, and small workloads."""

from __future__ import annotations

import pytest

from bpaste.hypotheses import (
    NODE_BARRIER,
    NODE_TOOL,
    BranchHypothesis,
    FutureNode,
    FutureSubgraph,
)
from bpaste.resources import InterferenceModel, ResourceProfile
from bpaste.sandbox import SafetyLevel
from bpaste.trace import AgentTrace, TOOL_CALL, TOOL_RETURN, REASON_END, REASON_START, TraceEvent


def make_trace(steps, with_reason=False, gap=50.0, latency=10.0, settle=5.0):
    """Build a trace from (tool, args, result, outcome) tuples."""
    events, t = [], 0.0
    for tool, args, result, outcome in steps:
        if with_reason:
            events.append(TraceEvent(t, REASON_START))
            t += gap
            events.append(TraceEvent(t, REASON_END))
        events.append(TraceEvent(t, TOOL_CALL, tool, "", dict(args), {}))
        t += latency
        events.append(TraceEvent(t, TOOL_RETURN, tool, outcome, {}, dict(result)))
        t += settle
    return AgentTrace(events)


def step(tool, args=None, result=None, outcome="success"):
    return (tool, args or {}, result or {}, outcome)


def profile(cpu=0.0, mem=0.0, io=0.0, slots=0.0):
    return ResourceProfile.from_mapping({"cpu": cpu, "mem": mem, "io": io, "slots": slots})


def make_node(nid, tool="t", latency=100.0, rho=None, kind=NODE_TOOL,
              safety=SafetyLevel.LEVEL1_READONLY, conf=1.0, outcome="success",
              arg_shape=(), resolved=None):
    from bpaste.trace import EventSignature

    sig = None if kind == NODE_BARRIER else EventSignature(tool, outcome, tuple(arg_shape))
    return FutureNode(
        node_id=nid,
        kind=kind,
        signature=sig,
        safety=safety,
        latency_est=latency,
        rho=rho if rho is not None else ResourceProfile.zero(),
        conf=conf,
        resolved_args=dict(resolved or {}),
    )


def chain_hypothesis(nodes, q=1.0, gap=0.0, hid="h0"):
    """Linear hypothesis over prebuilt nodes."""
    edges = [(a.node_id, b.node_id) for a, b in zip(nodes, nodes[1:])]
    graph = FutureSubgraph(list(nodes), edges, nodes[0].node_id, max(4, len(nodes)))
    rho = ResourceProfile.zero()
    for n in nodes:
        rho = rho.combine_max(n.rho)
    return BranchHypothesis(
        graph=graph,
        q=q,
        bindings=(),
        rho=rho,
        safety=max(n.safety for n in nodes),
        chain=[n.node_id for n in nodes],
        head_gap_ms=gap,
        gen_stream_len=0,
        hid=hid,
    )


def dag_hypothesis(nodes, edges, entry, q=1.0):
    """Arbitrary-graph hypothesis (chain order = a topological order)."""
    graph = FutureSubgraph(list(nodes), list(edges), entry, 8)
    rho = ResourceProfile.zero()
    for n in nodes:
        rho = rho.combine_max(n.rho)
    order = [entry]
    frontier = [entry]
    while frontier:
        nxt = []
        for nid in frontier:
            for succ in graph.successors(nid):
                if succ not in order:
                    order.append(succ)
                    nxt.append(succ)
        frontier = nxt
    return BranchHypothesis(
        graph=graph,
        q=q,
        bindings=(),
        rho=rho,
        safety=max(n.safety for n in nodes),
        chain=order,
        head_gap_ms=0.0,
        gen_stream_len=0,
        hid="dag",
    )


@pytest.fixture
def unit_capacity_model():
    return InterferenceModel(profile(cpu=1.0, mem=1.0, io=1.0, slots=2.0))
