"""Admission policy and the decision core of the speculative scheduler.

The runtime protocol processes every event in four phases: reconcile an
arriving authoritative call with speculative work (reuse / promote / resume
a prefix), preempt speculation in ascending-utility order until pending
authoritative demand fits, dispatch authoritative work untouched by
speculation, and finally admit the highest-marginal-value branch prefixes
that fit inside min(slack, budget). This module holds the policy surface
and the pure decision functions; the event-driven runtime that applies
them lives in the simulator.

Admission is a greedy approximation of the subset optimization it targets;
``brute_force_admit`` is the exact (exponential) reference used in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .hypotheses import (
    NODE_BARRIER,
    NODE_PREP,
    NODE_TOOL,
    Beam,
    BranchHypothesis,
    FutureSubgraph,
)
from .resources import ResourceProfile
from .sandbox import SAFETY_BY_NAME, SafetyLevel
from .utility import UtilityBreakdown

REUSED = "reused"
PROMOTED = "promoted"
PREFIX_RESUMED = "prefix_resumed"
MISS = "miss"


@dataclass(frozen=True)
class Policy:
    """Operator-set speculation policy (all knobs the runtime honors)."""

    beam_k: int = 4
    budget: ResourceProfile = field(default_factory=ResourceProfile.zero)
    lam: float = 1.0
    mu: float = 1.0
    horizon_h: int = 2
    fanout_limit: int = 3
    max_safety: Mapping[str, SafetyLevel] = field(
        default_factory=lambda: {"default": SafetyLevel.LEVEL1_READONLY}
    )
    preempt_cost_eps: float = 0.0
    binding_threshold: float = 0.8
    gap_fallback_ms: float = 200.0
    latency_fallback_ms: float = 120.0

    def __post_init__(self) -> None:
        if self.beam_k < 1:
            raise ValueError("beam_K must be >= 1")
        if self.preempt_cost_eps < 0:
            raise ValueError("preempt_cost_eps must be >= 0")
        if self.lam < 0 or self.mu < 0:
            raise ValueError("lambda and mu must be >= 0")
        if not 0 < self.binding_threshold <= 1:
            raise ValueError("binding_threshold must be in (0, 1]")

    def safety_cap(self, tool: str) -> SafetyLevel:
        cap = self.max_safety.get(tool, self.max_safety.get("default"))
        if cap is None:
            return SafetyLevel.LEVEL1_READONLY
        return cap


def parse_safety_map(text: str) -> dict[str, SafetyLevel]:
    out: dict[str, SafetyLevel] = {}
    for entry in text.split(","):
        if not entry:
            continue
        name, _, level = entry.partition(":")
        if level not in SAFETY_BY_NAME:
            raise ValueError(f"unknown safety level {level!r}")
        if SAFETY_BY_NAME[level] == SafetyLevel.NON_SPECULATIVE:
            raise ValueError("a safety cap cannot be non_speculative")
        out[name] = SAFETY_BY_NAME[level]
    return out


def select_prefix(
    h: BranchHypothesis, policy: Policy, residual: ResourceProfile
) -> list[str] | None:
    """Longest entry-anchored prefix that is safe and fits ``residual``.

    Walks the chain until a node is non-speculative, exceeds the per-tool
    safety cap, or pushes the prefix's peak demand past the residual.
    Returns None when not even the first real node qualifies.
    """
    chosen: list[str] = []
    peak = ResourceProfile.zero()
    has_work = False
    for nid in h.chain:
        node = h.graph.node(nid)
        if node.kind == NODE_BARRIER:
            chosen.append(nid)
            continue
        if node.safety == SafetyLevel.NON_SPECULATIVE:
            break
        if node.kind in (NODE_TOOL, NODE_PREP):
            if node.safety > policy.safety_cap(node.tool):
                break
        new_peak = peak.combine_max(node.rho)
        if not new_peak.fits_within(residual):
            break
        peak = new_peak
        chosen.append(nid)
        has_work = True
    if not has_work:
        return None
    return chosen


def prefix_hypothesis(h: BranchHypothesis, node_ids: Sequence[str]) -> BranchHypothesis:
    """Truncate a hypothesis to an admitted prefix (own q, rho, safety)."""
    nodes = [h.graph.node(nid) for nid in node_ids]
    edges = [(a.node_id, b.node_id) for a, b in zip(nodes, nodes[1:])]
    graph = FutureSubgraph(nodes, edges, nodes[0].node_id, h.graph.depth_bound)
    rho = ResourceProfile.zero()
    q = 1.0
    saw_tool = False
    for n in nodes:
        rho = rho.combine_max(n.rho)
        if n.kind == NODE_TOOL:
            q *= n.conf
            saw_tool = True
    if not saw_tool:
        head_tools = [h.graph.node(i) for i in h.chain if h.graph.node(i).kind == NODE_TOOL]
        q = head_tools[0].conf if head_tools else h.q
    safety = max((n.safety for n in nodes), default=SafetyLevel.LEVEL0_PREP)
    return BranchHypothesis(
        graph=graph,
        q=q,
        bindings=tuple((n.node_id, fn) for n in nodes for _, fn in sorted(n.late_bindings.items())),
        rho=rho,
        safety=safety,
        chain=list(node_ids),
        head_gap_ms=h.head_gap_ms,
        gen_stream_len=h.gen_stream_len,
        window=h.window,
        hid=h.hid,
    )


def tool_keys(h: BranchHypothesis) -> list[tuple]:
    return [
        node_key(n)
        for n in (h.graph.node(i) for i in h.chain)
        if n.kind == NODE_TOOL
    ]


def node_key(n) -> tuple:
    return (n.tool, tuple(sorted(n.resolved_args.items())))


def overlaps_admitted(candidate: BranchHypothesis, admitted: Sequence[BranchHypothesis]) -> bool:
    """True when the candidate would re-run work an admitted branch covers."""
    cand = tool_keys(candidate)
    if not cand:
        return False
    covered = {k for a in admitted for k in tool_keys(a)}
    return cand[0] in covered


def launchable(prefix: BranchHypothesis) -> bool:
    """A prefix is worth launching only if its first real node can dispatch
    immediately: preps always can, a tool node needs all arguments resolved
    now (late bindings have no predecessor to read at the head)."""
    for nid in prefix.chain:
        node = prefix.graph.node(nid)
        if node.kind == NODE_BARRIER:
            continue
        if node.kind == NODE_PREP:
            return True
        return set(node.arg_fields) == set(node.resolved_args)
    return False


Evaluator = Callable[[BranchHypothesis, Sequence[BranchHypothesis]], UtilityBreakdown]


@dataclass
class Admission:
    hypothesis: BranchHypothesis
    prefix: BranchHypothesis
    breakdown: UtilityBreakdown


def greedy_admit(
    candidates: Sequence[BranchHypothesis],
    admitted: Sequence[BranchHypothesis],
    cap: ResourceProfile,
    policy: Policy,
    evaluate: Evaluator,
    covered_keys: set[tuple] | None = None,
) -> list[Admission]:
    """Repeatedly admit the feasible prefix with the highest positive
    marginal expected utility against the growing admitted set.

    ``covered_keys`` names (tool, args) work that must not be duplicated
    even though it no longer reserves resources (finished or stalled
    branches still hold usable results).
    """
    current = list(admitted)
    extra_cover = covered_keys or set()
    picked: list[Admission] = []
    remaining = list(candidates)
    while True:
        used = ResourceProfile.zero()
        for a in current:
            used = used + a.rho
        residual = cap - used
        best: tuple[tuple, Admission] | None = None
        for h in remaining:
            keys = tool_keys(h)
            if keys and keys[0] in extra_cover:
                continue
            if overlaps_admitted(h, current):
                continue
            ids = select_prefix(h, policy, residual)
            if not ids:
                continue
            ph = prefix_hypothesis(h, ids)
            if not launchable(ph):
                continue
            bd = evaluate(ph, current)
            if bd.eu <= 0:
                continue
            key = (-bd.eu, -ph.q, ph.total_latency_est(), ph.hid)
            if best is None or key < best[0]:
                best = (key, Admission(h, ph, bd))
        if best is None:
            return picked
        adm = best[1]
        picked.append(adm)
        current.append(adm.prefix)
        remaining = [h for h in remaining if h is not adm.hypothesis]


def brute_force_admit(
    beam: Beam,
    cap: ResourceProfile,
    policy: Policy,
    evaluate: Evaluator,
) -> tuple[list[BranchHypothesis], float]:
    """Exact admitted-set optimizer by subset enumeration (test oracle).

    Each hypothesis contributes its best individually-feasible prefix; a
    subset is feasible when the summed prefix demand fits ``cap``. Ties
    resolve to the earliest subset in bitmask order.
    """
    hyps = beam.hypotheses
    if len(hyps) > 12:
        raise ValueError("brute_force_admit refuses beams larger than 12")
    prefixes: list[BranchHypothesis | None] = []
    for h in hyps:
        ids = select_prefix(h, policy, cap)
        prefixes.append(prefix_hypothesis(h, ids) if ids else None)

    best_total = 0.0
    best_set: list[BranchHypothesis] = []
    for mask in range(1 << len(hyps)):
        subset = [prefixes[i] for i in range(len(hyps)) if mask >> i & 1]
        if any(p is None for p in subset):
            continue
        chosen = [p for p in subset if p is not None]
        demand = ResourceProfile.zero()
        for p in chosen:
            demand = demand + p.rho
        if not demand.fits_within(cap):
            continue
        total = sum(
            evaluate(p, [o for o in chosen if o is not p]).eu for p in chosen
        )
        if total > best_total + 1e-12:
            best_total = total
            best_set = chosen
    return best_set, best_total


def preemption_order(
    executions: Sequence[object],
    evaluate_execution: Callable[[object, Sequence[object]], float],
) -> list[object]:
    """Victim order for protection: ascending current utility, recomputed
    against the set that remains after each removal. Promoted executions
    must not be passed in."""
    pool = list(executions)
    order: list[object] = []
    while pool:
        scored = sorted(
            ((evaluate_execution(ex, [o for o in pool if o is not ex]), ex.eid, ex) for ex in pool),
            key=lambda s: (s[0], s[1]),
        )
        _, _, victim = scored[0]
        order.append(victim)
        pool.remove(victim)
    return order
