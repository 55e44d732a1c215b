"""Independent reference implementations used to cross-check the package.

These deliberately use different loop structures than the production code:
mining enumerates windows first (not tool positions), and path length walks
every root-to-leaf path explicitly.
"""

from __future__ import annotations

from collections import defaultdict

from bpaste.trace import AgentTrace, signature_stream


def brute_force_mine(corpus: list[AgentTrace], min_support: int, max_w: int):
    """Window-first enumeration of every (context, next tool) pair.

    Returns {(ctx_sigs, next_sig): (support, confidence)}.
    """
    pair_count = defaultdict(int)
    ctx_count = defaultdict(int)
    successors = defaultdict(set)
    for trace in corpus:
        stream = signature_stream(trace)
        sigs = [it.signature for it in stream]
        n = len(sigs)
        for start in range(n):
            for width in range(1, max_w + 1):
                end = start + width
                if end > n:
                    break
                nxt = None
                for j in range(end, n):
                    if not sigs[j].is_reason:
                        nxt = sigs[j]
                        break
                    # reasoning marks may sit between context and the call
                if nxt is None:
                    continue
                # but another tool in between disqualifies: the scan above
                # stops at the first tool, so this is already the next tool.
                ctx = tuple(sigs[start:end])
                pair_count[(ctx, nxt)] += 1
                ctx_count[ctx] += 1
                successors[ctx].add(nxt)
    out = {}
    for (ctx, nxt), support in pair_count.items():
        if support < min_support:
            continue
        conf = (support + 1) / (ctx_count[ctx] + len(successors[ctx]))
        out[(ctx, nxt)] = (support, conf)
    return out


def longest_path_ms(hypothesis) -> float:
    """Max latency over every entry-to-leaf path, enumerated explicitly."""
    graph = hypothesis.graph

    def walk(nid: str) -> list[float]:
        node = graph.node(nid)
        succs = graph.successors(nid)
        if not succs:
            return [node.latency_est]
        return [node.latency_est + tail for s in succs for tail in walk(s)]

    return max(walk(graph.entry))
