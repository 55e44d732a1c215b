"""Expected critical-path reduction scoring for branch hypotheses.

The admission value of running a branch speculatively combines three
components, all in milliseconds of critical path:

  overlap   latency hidden by starting before the authoritative call,
            capped by how long the work takes under contention;
  unlock    probability-discounted critical-path value of the work a
            finished branch makes reachable (an upward-rank estimate over
            the mined continuation tree);
  interference  extra latency the branch suffers from co-running with the
            already admitted set (co-run latency minus isolated latency).

The score is q * (overlap + lambda * unlock - mu * interference); it can go
negative, in which case admission refuses the branch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .hypotheses import BranchHypothesis, match_candidates
from .mining import PatternLibrary
from .resources import InterferenceModel
from .trace import EventSignature


@dataclass(frozen=True)
class UtilityBreakdown:
    q: float
    overlap_ms: float
    unlock_ms: float
    interference_ms: float
    lam: float
    mu: float

    @property
    def eu(self) -> float:
        return self.q * (
            self.overlap_ms + self.lam * self.unlock_ms - self.mu * self.interference_ms
        )


def solo_latency(h: BranchHypothesis) -> float:
    """Longest latency-weighted path through the branch graph."""
    graph = h.graph
    if not graph.nodes:
        raise ValueError("hypothesis graph is empty")
    memo: dict[str, float] = {}

    def longest_from(nid: str) -> float:
        if nid in memo:
            return memo[nid]
        node = graph.node(nid)
        succs = graph.successors(nid)
        tail = max((longest_from(s) for s in succs), default=0.0)
        memo[nid] = node.latency_est + tail
        return memo[nid]

    return longest_from(graph.entry)


def corun_latency(
    h: BranchHypothesis,
    admitted: Iterable[BranchHypothesis],
    model: InterferenceModel,
) -> float:
    """Isolated latency stretched by the model's co-run slowdown."""
    slowdown = model.slowdown(h.rho, [a.rho for a in admitted])
    return solo_latency(h) * slowdown


def overlap_gain(
    h: BranchHypothesis,
    admitted: Iterable[BranchHypothesis],
    model: InterferenceModel,
    gap_est: float,
) -> float:
    """Latency hidden by the head start: the work is fully hidden when it
    finishes before the authoritative path would have finished it serially."""
    if gap_est < 0:
        raise ValueError("gap_est must be >= 0")
    return max(0.0, min(corun_latency(h, admitted, model), gap_est + solo_latency(h)))


def unlock_gain(
    h: BranchHypothesis,
    library: PatternLibrary,
    horizon: int,
    latency_fallback_ms: float = 100.0,
    _memo: dict | None = None,
) -> float:
    """Probability-weighted latency of continuations past the branch exit.

    Each successor pattern contributes chain-probability times its tool's
    estimated latency, recursively up to ``horizon`` further steps. The
    continuation tree starts beyond the branch's own graph.
    """
    tool_sigs = [n.signature for n in h.tool_nodes() if n.signature is not None]
    sigs: tuple[EventSignature, ...] = tuple(h.window) + tuple(tool_sigs)
    memo = _memo if _memo is not None else {}

    max_ctx = max((len(p.context) for p in library.patterns), default=1)

    def rec(window: tuple[EventSignature, ...], depth: int) -> float:
        if depth >= horizon:
            return 0.0
        key = (window[-(max_ctx + 1) :], depth)
        if key in memo:
            return memo[key]
        total = 0.0
        for pattern, _ in match_candidates(library.patterns, window, True):
            lat = library.latency_estimate(pattern.predicted.tool, latency_fallback_ms)
            cont = rec(window + (pattern.predicted,), depth + 1)
            total += pattern.confidence * (lat + cont)
        memo[key] = total
        return total

    return rec(sigs, 0)


def expected_utility(
    h: BranchHypothesis,
    admitted: Sequence[BranchHypothesis],
    model: InterferenceModel,
    gap_est: float,
    library: PatternLibrary,
    lam: float,
    mu: float,
    unlock_horizon: int = 2,
    latency_fallback_ms: float = 100.0,
    _unlock_memo: dict | None = None,
) -> UtilityBreakdown:
    if lam < 0 or mu < 0:
        raise ValueError("lambda and mu must be >= 0")
    solo = solo_latency(h)
    corun = corun_latency(h, admitted, model)
    d_overlap = max(0.0, min(corun, gap_est + solo))
    d_unlock = unlock_gain(h, library, unlock_horizon, latency_fallback_ms, _unlock_memo)
    d_interf = corun - solo
    return UtilityBreakdown(
        q=h.q,
        overlap_ms=d_overlap,
        unlock_ms=d_unlock,
        interference_ms=d_interf,
        lam=lam,
        mu=mu,
    )
