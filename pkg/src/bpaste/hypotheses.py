"""Branch hypotheses: bounded future subgraphs assembled from mined patterns.

A hypothesis is a linear chain of predicted tool nodes (with preparation
nodes prepended for tools that declare warm-up needs, and a commit barrier
in front of every staged-write node). Its probability is the product of the
chained pattern confidences. Argument bindings resolve against live history
where possible; bindings that point at earlier predicted nodes stay late
(resolved only once that node has run), and arguments with no binding are
left unresolved, which blocks speculative dispatch of that node but not
matching.

The beam keeps the K highest-scoring hypotheses for the current runtime
context; matching reconciles an arriving authoritative invocation with any
speculative work already done for it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Protocol, Sequence

from .mining import BindingFn, PatternLibrary, PatternTuple
from .resources import ResourceProfile
from .sandbox import SafetyLevel, SandboxState
from .trace import REASON_MARK, EventSignature, StreamItem

NODE_TOOL = "tool"
NODE_PREP = "preparation"
NODE_MODEL = "model"
NODE_BARRIER = "barrier"


@dataclass(frozen=True)
class ToolProfile:
    """Runtime-declared per-tool properties consulted when building nodes."""

    demand: ResourceProfile
    safety: SafetyLevel
    warmup_ms: float = 0.0


@dataclass
class FutureNode:
    node_id: str
    kind: str
    signature: EventSignature | None
    safety: SafetyLevel
    latency_est: float
    rho: ResourceProfile
    conf: float = 1.0
    resolved_args: dict[str, str] = field(default_factory=dict)
    late_bindings: dict[str, tuple[str, BindingFn]] = field(default_factory=dict)

    @property
    def tool(self) -> str:
        return self.signature.tool if self.signature else ""

    @property
    def arg_fields(self) -> tuple[str, ...]:
        return self.signature.arg_shape if self.signature else ()

    def unbound_args(self) -> set[str]:
        return set(self.arg_fields) - set(self.resolved_args) - set(self.late_bindings)


@dataclass
class FutureSubgraph:
    nodes: list[FutureNode]
    edges: list[tuple[str, str]]
    entry: str
    depth_bound: int

    def node(self, node_id: str) -> FutureNode:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    def successors(self, node_id: str) -> list[str]:
        return [b for a, b in self.edges if a == node_id]

    def validate(self) -> None:
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids")
        targets = {b for _, b in self.edges}
        entries = [i for i in ids if i not in targets]
        if entries != [self.entry]:
            raise ValueError(f"graph must have the single entry {self.entry!r}")
        # Depth check (tool nodes only) plus cycle detection via DFS.
        depths: dict[str, int] = {}

        def walk(nid: str, depth: int, seen: tuple[str, ...]) -> None:
            if nid in seen:
                raise ValueError("cycle detected")
            node = self.node(nid)
            d = depth + (1 if node.kind == NODE_TOOL else 0)
            depths[nid] = max(depths.get(nid, 0), d)
            for succ in self.successors(nid):
                walk(succ, d, seen + (nid,))

        walk(self.entry, 0, ())
        if any(d > self.depth_bound for d in depths.values()):
            raise ValueError("depth bound exceeded")
        for n in self.nodes:
            if n.kind == NODE_BARRIER and (n.latency_est != 0 or not n.rho.is_zero()):
                raise ValueError("barrier nodes must be zero-cost")
            if n.safety == SafetyLevel.LEVEL2_STAGED:
                if not self._barrier_dominated(n.node_id):
                    raise ValueError(f"staged node {n.node_id} not behind a barrier")

    def _barrier_dominated(self, target: str) -> bool:
        # Every entry->target path must pass a barrier before the target.
        def paths_ok(nid: str, barrier_seen: bool) -> bool:
            if nid == target:
                return barrier_seen
            node = self.node(nid)
            seen = barrier_seen or node.kind == NODE_BARRIER
            succs = self.successors(nid)
            relevant = [s for s in succs if self._reaches(s, target)]
            return all(paths_ok(s, seen) for s in relevant) if relevant else True

        return paths_ok(self.entry, False)

    def _reaches(self, src: str, dst: str) -> bool:
        if src == dst:
            return True
        return any(self._reaches(s, dst) for s in self.successors(src))


@dataclass
class BranchHypothesis:
    graph: FutureSubgraph
    q: float
    bindings: tuple[tuple[str, BindingFn], ...]
    rho: ResourceProfile
    safety: SafetyLevel
    chain: list[str]  # execution order (linear for pattern-built chains)
    head_gap_ms: float
    gen_stream_len: int
    window: tuple[EventSignature, ...] = ()
    hid: str = ""

    def graph_key(self) -> tuple:
        return tuple(
            (
                n.kind,
                n.signature.encode() if n.signature else "",
                tuple(sorted(n.resolved_args.items())),
                tuple(sorted(n.late_bindings)),
            )
            for n in (self.graph.node(i) for i in self.chain)
        )

    def tool_nodes(self) -> list[FutureNode]:
        return [self.graph.node(i) for i in self.chain if self.graph.node(i).kind == NODE_TOOL]

    def total_latency_est(self) -> float:
        return sum(self.graph.node(i).latency_est for i in self.chain)

    def entry_signature(self) -> str:
        node = self.graph.node(self.graph.entry)
        return node.signature.encode() if node.signature else node.kind


@dataclass
class Beam:
    hypotheses: list[BranchHypothesis]
    generation_state: tuple[EventSignature, ...]


def _suffix_match(ctx: tuple[EventSignature, ...], sigs: Sequence[EventSignature]) -> bool:
    return len(sigs) >= len(ctx) and tuple(sigs[-len(ctx) :]) == ctx


def match_candidates(
    patterns: Sequence[PatternTuple],
    sigs: Sequence[EventSignature],
    allow_reason_extension: bool,
) -> list[tuple[PatternTuple, bool]]:
    """Patterns whose context matches the window suffix.

    When ``allow_reason_extension`` is set, the window is also tried with a
    synthetic trailing reasoning mark (used when chaining past predicted
    nodes, where the future boundary event has not happened yet). Candidates
    are deduplicated per predicted signature, keeping the most confident.
    """
    extended = tuple(sigs) + (REASON_MARK,)
    hits: dict[EventSignature, tuple[PatternTuple, bool]] = {}
    ranked: list[tuple[float, int, str, PatternTuple, bool]] = []
    for p in patterns:
        if _suffix_match(p.context, sigs):
            ranked.append((-p.confidence, -len(p.context), p.key()[0], p, False))
        elif allow_reason_extension and _suffix_match(p.context, extended):
            ranked.append((-p.confidence, -len(p.context), p.key()[0], p, True))
    ranked.sort(key=lambda r: r[:3])
    for _, _, _, p, ext in ranked:
        hits.setdefault(p.predicted, (p, ext))
    return sorted(
        hits.values(), key=lambda c: (-c[0].confidence, c[0].predicted.encode())
    )


# Alignment entries while chaining: real history items carry values, node
# entries defer to the referenced node, reason entries carry nothing.
_HIST = "hist"
_NODE = "node"
_REASON = "reason"


def _bind_node_args(
    node: FutureNode,
    pattern: PatternTuple,
    aligned: Sequence[tuple[str, object]],
) -> None:
    for b in pattern.bindings:
        if not 0 <= b.source_pos < len(aligned):
            continue
        kind, ref = aligned[b.source_pos]
        if kind == _HIST:
            item: StreamItem = ref  # type: ignore[assignment]
            value = b.apply_to(item.args, item.result)
            if value is not None:
                node.resolved_args[b.arg] = value
        elif kind == _NODE:
            src: FutureNode = ref  # type: ignore[assignment]
            node.late_bindings[b.arg] = (src.node_id, b)
        # _REASON entries carry no payload; the argument stays unresolved.


def generate_hypotheses(
    history: Sequence[StreamItem],
    library: PatternLibrary,
    catalog: Mapping[str, ToolProfile],
    horizon_h: int,
    fanout_limit: int,
    latency_fallback_ms: float = 100.0,
    warm_tools: Iterable[str] = (),
    stream_len: int | None = None,
) -> list[BranchHypothesis]:
    """Chain matching patterns forward up to ``horizon_h`` tool nodes.

    Every root-to-node chain becomes its own hypothesis; duplicates arising
    from different chains keep the highest probability.
    """
    if horizon_h < 1:
        raise ValueError("horizon_h must be >= 1")
    warm = set(warm_tools)
    gen_len = len(history) if stream_len is None else stream_len
    out: dict[tuple, BranchHypothesis] = {}
    counter = [0]

    def fresh_id(prefix: str) -> str:
        counter[0] += 1
        return f"{prefix}{counter[0]}"

    base_entries: list[tuple[str, object]] = [(_HIST, it) for it in history]
    base_sigs = [it.signature for it in history]

    def expand(
        entries: list[tuple[str, object]],
        sigs: list[EventSignature],
        chain_nodes: list[FutureNode],
        q: float,
        head_gap: float,
        depth: int,
        synthetic: bool,
    ) -> None:
        if depth >= horizon_h:
            return
        cands = match_candidates(library.patterns, sigs, allow_reason_extension=synthetic)
        for pattern, used_ext in cands[:fanout_limit]:
            profile = catalog.get(pattern.predicted.tool)
            if profile is None:
                continue
            aligned = entries + ([(_REASON, None)] if used_ext else [])
            aligned = aligned[len(aligned) - len(pattern.context) :]

            step_nodes: list[FutureNode] = []
            tool_node = FutureNode(
                node_id=fresh_id("n"),
                kind=NODE_TOOL,
                signature=pattern.predicted,
                safety=profile.safety,
                latency_est=library.latency_estimate(
                    pattern.predicted.tool, latency_fallback_ms
                ),
                rho=profile.demand,
                conf=pattern.confidence,
            )
            _bind_node_args(tool_node, pattern, aligned)
            if profile.warmup_ms > 0 and pattern.predicted.tool not in warm:
                step_nodes.append(
                    FutureNode(
                        node_id=fresh_id("p"),
                        kind=NODE_PREP,
                        signature=pattern.predicted,
                        safety=SafetyLevel.LEVEL0_PREP,
                        latency_est=profile.warmup_ms,
                        rho=profile.demand,
                        conf=pattern.confidence,
                    )
                )
            if profile.safety == SafetyLevel.LEVEL2_STAGED:
                step_nodes.append(
                    FutureNode(
                        node_id=fresh_id("b"),
                        kind=NODE_BARRIER,
                        signature=None,
                        safety=SafetyLevel.LEVEL0_PREP,
                        latency_est=0.0,
                        rho=ResourceProfile.zero(),
                        conf=1.0,
                    )
                )
            step_nodes.append(tool_node)

            new_chain = chain_nodes + step_nodes
            new_q = q * pattern.confidence
            gap = head_gap if chain_nodes else pattern.gap_ms
            hyp = _assemble(new_chain, new_q, gap, horizon_h, gen_len, tuple(base_sigs))
            key = hyp.graph_key()
            kept = out.get(key)
            if kept is None or hyp.q > kept.q:
                out[key] = hyp

            expand(
                entries + [(_NODE, tool_node)],
                sigs + [pattern.predicted],
                new_chain,
                new_q,
                gap,
                depth + 1,
                synthetic=True,
            )

    expand(base_entries, list(base_sigs), [], 1.0, 0.0, 0, synthetic=False)
    result = sorted(out.values(), key=lambda h: (-h.q, h.graph_key()))
    for i, h in enumerate(result):
        h.hid = f"h{i}"
    return result


def _assemble(
    nodes: list[FutureNode],
    q: float,
    head_gap: float,
    horizon: int,
    gen_len: int,
    window: tuple[EventSignature, ...] = (),
) -> BranchHypothesis:
    copies = [
        FutureNode(
            node_id=n.node_id,
            kind=n.kind,
            signature=n.signature,
            safety=n.safety,
            latency_est=n.latency_est,
            rho=n.rho,
            conf=n.conf,
            resolved_args=dict(n.resolved_args),
            late_bindings=dict(n.late_bindings),
        )
        for n in nodes
    ]
    edges = [(a.node_id, b.node_id) for a, b in zip(copies, copies[1:])]
    graph = FutureSubgraph(copies, edges, copies[0].node_id, horizon)
    rho = ResourceProfile.zero()
    for n in copies:
        rho = rho.combine_max(n.rho)
    safety = max((n.safety for n in copies), default=SafetyLevel.LEVEL0_PREP)
    bindings = tuple(
        (n.node_id, fn) for n in copies for _, fn in sorted(n.late_bindings.items())
    )
    return BranchHypothesis(
        graph=graph,
        q=q,
        bindings=bindings,
        rho=rho,
        safety=safety,
        chain=[n.node_id for n in copies],
        head_gap_ms=head_gap,
        gen_stream_len=gen_len,
        window=window,
    )


def refresh_beam(
    old: Beam | None,
    fresh: Sequence[BranchHypothesis],
    k: int,
    scorer: Callable[[BranchHypothesis], float],
    stream: Sequence[StreamItem],
) -> Beam:
    """Merge surviving old hypotheses with fresh ones and keep the top K.

    An old hypothesis survives only if the stream has not advanced past its
    generation point by anything but reasoning marks (a new tool observation
    either consumed or contradicted its prediction).
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    window = tuple(it.signature for it in stream)
    survivors: list[BranchHypothesis] = []
    if old is not None:
        for h in old.hypotheses:
            tail = stream[h.gen_stream_len :]
            if all(it.signature.is_reason for it in tail):
                survivors.append(h)

    merged: dict[tuple, BranchHypothesis] = {}
    for h in list(survivors) + list(fresh):
        key = h.graph_key()
        kept = merged.get(key)
        if kept is None or h.q > kept.q:
            merged[key] = h

    ranked = sorted(
        merged.values(),
        key=lambda h: (-scorer(h), -h.q, h.total_latency_est(), h.entry_signature()),
    )
    return Beam(hypotheses=ranked[:k], generation_state=window)


# --- matching authoritative invocations against speculative work ----------

MATCH_COMPLETED = "completed"
MATCH_RUNNING = "running"
MATCH_PREFIX = "prefix"
MATCH_NONE = "none"

NODE_PENDING = "pending"
NODE_RUNNING = "running"
NODE_DONE = "done"


class SpeculativeExecution(Protocol):
    """What matching needs to know about an in-flight speculative branch."""

    eid: str
    sandbox: SandboxState

    def next_unconfirmed_node(self) -> FutureNode | None: ...

    def state_of(self, node_id: str) -> str: ...

    def node_result(self, node_id: str) -> dict[str, str]: ...

    def has_useful_prefix(self) -> bool: ...


@dataclass(frozen=True)
class AuthoritativeCall:
    tool: str
    args: dict[str, str]


@dataclass
class MatchOutcome:
    status: str
    execution: object | None = None
    result: dict[str, str] | None = None
    resume_node_id: str | None = None
    sandbox: SandboxState | None = None


def node_matches_call(node: FutureNode, call: AuthoritativeCall, dispatched: bool) -> bool:
    """A node matches iff tool names agree and every argument either equals
    the speculative binding or was unresolvable and the node has not yet
    used it (i.e. it was never dispatched)."""
    if node.kind != NODE_TOOL or node.tool != call.tool:
        return False
    if set(node.arg_fields) != set(call.args):
        return False
    for name, value in call.args.items():
        bound = node.resolved_args.get(name)
        if bound is not None:
            if bound != value:
                return False
        elif dispatched:
            return False
    return True


_STRENGTH = {MATCH_COMPLETED: 0, MATCH_RUNNING: 1, MATCH_PREFIX: 2}


def match_authoritative(
    beam: Beam | None,
    executions: Sequence[SpeculativeExecution],
    call: AuthoritativeCall,
) -> MatchOutcome:
    """Strongest reconciliation of an authoritative call with speculation.

    Only work that actually ran can help: hypotheses still sitting in the
    beam carry no results, so with no matching execution the outcome is
    ``none`` and the call proceeds fully authoritatively.
    """
    best: tuple[int, str] | None = None
    outcome = MatchOutcome(MATCH_NONE)
    for ex in sorted(executions, key=lambda e: e.eid):
        node = ex.next_unconfirmed_node()
        if node is None:
            continue
        state = ex.state_of(node.node_id)
        if not node_matches_call(node, call, dispatched=state != NODE_PENDING):
            continue
        if state == NODE_DONE:
            cand = MatchOutcome(
                MATCH_COMPLETED, ex, ex.node_result(node.node_id), node.node_id, ex.sandbox
            )
        elif state == NODE_RUNNING:
            cand = MatchOutcome(MATCH_RUNNING, ex, None, node.node_id, ex.sandbox)
        elif ex.has_useful_prefix():
            cand = MatchOutcome(MATCH_PREFIX, ex, None, node.node_id, ex.sandbox)
        else:
            continue
        rank = (_STRENGTH[cand.status], ex.eid)
        if best is None or rank < best:
            best = rank
            outcome = cand
    return outcome
