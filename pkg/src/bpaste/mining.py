"""Offline mining of tool-call regularities from agent traces.

A mined pattern maps a contiguous signature-stream context to the next tool
invoked after that context (reasoning boundaries may sit between the two).
Confidence is a Laplace-smoothed successor frequency:

    p = (support(context -> tool) + 1) / (support(context) + distinct successors)

so a single observation never yields certainty. Each pattern also records
the mean observed delay from the moment its context becomes observable to
the predicted call, which the scheduler uses as its speculation-window
estimate.

Argument bindings are recovered per target field by searching, in order of
increasing complexity: copying a prior argument (identity), extracting a
prior result field (field_extract), or substituting a prior result field
into a textual template (template_substitute). A binding is kept only if it
reproduces the observed argument in at least ``binding_threshold`` of the
pattern's occurrences.
"""

from __future__ import annotations

import urllib.parse
from collections import defaultdict
from dataclasses import dataclass, field, replace

from .trace import AgentTrace, EventSignature, StreamItem, TraceError, signature_stream

IDENTITY = "identity"
FIELD_EXTRACT = "field_extract"
TEMPLATE_SUBSTITUTE = "template_substitute"
TRANSFORMS = (IDENTITY, FIELD_EXTRACT, TEMPLATE_SUBSTITUTE)

DEFAULT_BINDING_THRESHOLD = 0.8


@dataclass(frozen=True)
class BindingFn:
    """Derives one argument of a predicted tool from a prior event.

    ``source_pos`` indexes into the pattern context (0 = oldest item).
    identity reads the source event's argument map; the other transforms
    read its result map. Application never raises: a missing source field
    yields ``None`` (the unresolved marker).
    """

    arg: str
    transform: str
    source_pos: int
    source_field: str
    template: str = ""

    def apply_to(self, args: dict[str, str], result: dict[str, str]) -> str | None:
        """Apply the transform to one source event's values."""
        if self.transform == IDENTITY:
            return args.get(self.source_field)
        value = result.get(self.source_field)
        if value is None:
            return None
        if self.transform == FIELD_EXTRACT:
            return value
        return self.template.replace("{x}", value)

    def apply(self, context_values: list[tuple[dict[str, str], dict[str, str]]]) -> str | None:
        if not 0 <= self.source_pos < len(context_values):
            return None
        return self.apply_to(*context_values[self.source_pos])

    def encode(self) -> str:
        parts = [self.arg, self.transform, str(self.source_pos), self.source_field]
        if self.transform == TEMPLATE_SUBSTITUTE:
            parts.append(urllib.parse.quote(self.template, safe=""))
        return "<-".join(parts[:1]) + "<-" + ":".join(parts[1:])

    @classmethod
    def decode(cls, text: str) -> BindingFn:
        arg, _, rest = text.partition("<-")
        bits = rest.split(":")
        if len(bits) < 3:
            raise TraceError(f"bad binding encoding: {text!r}")
        transform, pos, src_field = bits[0], bits[1], bits[2]
        template = urllib.parse.unquote(bits[3]) if len(bits) > 3 else ""
        if transform not in TRANSFORMS:
            raise TraceError(f"unknown binding transform: {transform!r}")
        return cls(arg, transform, int(pos), src_field, template)


@dataclass(frozen=True)
class PatternTuple:
    """One mined (context, next tool, bindings, confidence) regularity."""

    context: tuple[EventSignature, ...]
    predicted: EventSignature
    bindings: tuple[BindingFn, ...]
    confidence: float
    support: int
    gap_ms: float

    def key(self) -> tuple[str, str]:
        return (";".join(s.encode() for s in self.context), self.predicted.encode())


@dataclass(frozen=True)
class ToolStat:
    calls: int
    mean_latency_ms: float


@dataclass
class PatternLibrary:
    patterns: list[PatternTuple]
    tool_stats: dict[str, ToolStat] = field(default_factory=dict)
    global_gap_ms: float = 0.0

    def latency_estimate(self, tool: str, fallback: float) -> float:
        stat = self.tool_stats.get(tool)
        return stat.mean_latency_ms if stat else fallback


# An occurrence pairs the concrete context items with the concrete next-tool
# item, so bindings can be verified against observed values.
_Occurrence = tuple[tuple[StreamItem, ...], StreamItem]


def _occurrences(
    corpus: list[AgentTrace], max_context_w: int
) -> dict[tuple[tuple[EventSignature, ...], EventSignature], list[_Occurrence]]:
    found: dict[tuple[tuple[EventSignature, ...], EventSignature], list[_Occurrence]] = (
        defaultdict(list)
    )
    for trace in corpus:
        stream = signature_stream(trace)
        sigs = [item.signature for item in stream]
        prev_tool = -1
        for i, item in enumerate(stream):
            if item.signature.is_reason:
                continue
            # The context may end at the previous tool or at any reasoning
            # boundary between it and this call.
            for end in range(max(prev_tool, 0), i):
                for width in range(1, max_context_w + 1):
                    start = end - width + 1
                    if start < 0:
                        break
                    ctx = tuple(sigs[start : end + 1])
                    found[(ctx, item.signature)].append(
                        (tuple(stream[start : end + 1]), item)
                    )
            prev_tool = i
    return found


def mine_patterns(
    corpus: list[AgentTrace], min_support: int, max_context_w: int
) -> list[PatternTuple]:
    """Mine every context-to-next-tool pattern meeting ``min_support``.

    Bindings are left empty; see ``infer_bindings`` / ``build_library``.
    """
    if not corpus:
        raise ValueError("corpus must be nonempty")
    if min_support < 1:
        raise ValueError("min_support must be >= 1")
    if not 1 <= max_context_w <= 8:
        raise ValueError("max_context_w must be in 1..8")

    occs = _occurrences(corpus, max_context_w)
    context_support: dict[tuple[EventSignature, ...], int] = defaultdict(int)
    successors: dict[tuple[EventSignature, ...], set[EventSignature]] = defaultdict(set)
    for (ctx, nxt), hits in occs.items():
        context_support[ctx] += len(hits)
        successors[ctx].add(nxt)

    patterns: list[PatternTuple] = []
    for (ctx, nxt), hits in occs.items():
        support = len(hits)
        if support < min_support:
            continue
        confidence = (support + 1) / (context_support[ctx] + len(successors[ctx]))
        gaps = [t_item.t_call - c_items[-1].t_trigger for c_items, t_item in hits]
        patterns.append(
            PatternTuple(
                context=ctx,
                predicted=nxt,
                bindings=(),
                confidence=confidence,
                support=support,
                gap_ms=sum(gaps) / len(gaps),
            )
        )
    patterns.sort(key=PatternTuple.key)
    return patterns


def _template_candidates(target: str, value: str) -> list[str]:
    if not value or value not in target:
        return []
    out = []
    start = 0
    while True:
        idx = target.find(value, start)
        if idx < 0:
            break
        tpl = target[:idx] + "{x}" + target[idx + len(value) :]
        if tpl != "{x}":  # plain extraction is handled by field_extract
            out.append(tpl)
        start = idx + 1
    return out


def infer_bindings(
    corpus: list[AgentTrace],
    pattern: PatternTuple,
    binding_threshold: float = DEFAULT_BINDING_THRESHOLD,
) -> list[BindingFn]:
    """Find, per argument field of the predicted tool, a binding that
    reproduces the observed value in >= binding_threshold of occurrences.

    Fields with no qualifying binding are omitted (late-unresolvable).
    """
    max_w = len(pattern.context)
    hits = _occurrences(corpus, max_w).get((pattern.context, pattern.predicted), [])
    if not hits:
        return []

    bindings: list[BindingFn] = []
    for target_field in pattern.predicted.arg_shape:
        observed = [(ctx_items, t_item.args.get(target_field)) for ctx_items, t_item in hits]
        chosen: BindingFn | None = None
        for transform in TRANSFORMS:
            candidates: list[BindingFn] = []
            for pos, ctx_sig in enumerate(pattern.context):
                if ctx_sig.is_reason:
                    continue
                if transform == IDENTITY:
                    fields = ctx_sig.arg_shape
                else:
                    fields = tuple(sorted({k for c, _ in hits for k in c[pos].result}))
                for src in fields:
                    if transform == TEMPLATE_SUBSTITUTE:
                        templates: set[str] = set()
                        for ctx_items, value in observed:
                            src_val = ctx_items[pos].result.get(src, "")
                            templates.update(_template_candidates(value or "", src_val))
                        for tpl in sorted(templates):
                            candidates.append(
                                BindingFn(target_field, transform, pos, src, tpl)
                            )
                    else:
                        candidates.append(BindingFn(target_field, transform, pos, src))
            scored: list[tuple[float, int, str, str, BindingFn]] = []
            for cand in candidates:
                ok = 0
                for ctx_items, value in observed:
                    ctx_values = [(it.args, it.result) for it in ctx_items]
                    if value is not None and cand.apply(ctx_values) == value:
                        ok += 1
                frac = ok / len(observed)
                if frac >= binding_threshold:
                    scored.append((-frac, cand.source_pos, cand.source_field, cand.template, cand))
            if scored:
                scored.sort(key=lambda s: s[:4])
                chosen = scored[0][4]
                break
        if chosen is not None:
            bindings.append(chosen)
    return bindings


def build_library(
    corpus: list[AgentTrace],
    min_support: int,
    max_context_w: int,
    binding_threshold: float = DEFAULT_BINDING_THRESHOLD,
) -> PatternLibrary:
    """Mine patterns, infer their bindings, and collect corpus statistics."""
    patterns = [
        replace(p, bindings=tuple(infer_bindings(corpus, p, binding_threshold)))
        for p in mine_patterns(corpus, min_support, max_context_w)
    ]

    latencies: dict[str, list[float]] = defaultdict(list)
    gaps: list[float] = []
    for trace in corpus:
        stream = signature_stream(trace)
        prev_tool_end: float | None = None
        for item in stream:
            if item.signature.is_reason:
                continue
            latencies[item.signature.tool].append(item.t_trigger - item.t_call)
            if prev_tool_end is not None:
                gaps.append(item.t_call - prev_tool_end)
            prev_tool_end = item.t_trigger
    tool_stats = {
        tool: ToolStat(len(vals), sum(vals) / len(vals))
        for tool, vals in sorted(latencies.items())
    }
    global_gap = sum(gaps) / len(gaps) if gaps else 0.0
    return PatternLibrary(patterns, tool_stats, global_gap)


def dump_library(library: PatternLibrary) -> str:
    """Serialize with a stable field order so re-export is byte-identical."""
    lines = ["format=bpaste-patterns-v1", f"global_gap_ms={library.global_gap_ms:.3f}"]
    for tool in sorted(library.tool_stats):
        stat = library.tool_stats[tool]
        lines.append(f"tool={tool} calls={stat.calls} mean_latency_ms={stat.mean_latency_ms:.3f}")
    for p in sorted(library.patterns, key=PatternTuple.key):
        ctx = ";".join(s.encode() for s in p.context)
        binds = "|".join(b.encode() for b in p.bindings) or "-"
        lines.append(
            f"pattern ctx={ctx} next={p.predicted.encode()} p={p.confidence:.6f} "
            f"support={p.support} gap_ms={p.gap_ms:.3f} bind={binds}"
        )
    return "".join(line + "\n" for line in lines)


def load_library(content: str) -> PatternLibrary:
    patterns: list[PatternTuple] = []
    tool_stats: dict[str, ToolStat] = {}
    global_gap = 0.0
    lines = content.splitlines()
    if not lines or lines[0].strip() != "format=bpaste-patterns-v1":
        raise TraceError("not a pattern library file (missing format header)")
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("global_gap_ms="):
            global_gap = float(line.split("=", 1)[1])
            continue
        fields = dict(token.split("=", 1) for token in line.split(" ") if "=" in token)
        if line.startswith("tool="):
            tool_stats[fields["tool"]] = ToolStat(
                int(fields["calls"]), float(fields["mean_latency_ms"])
            )
        elif line.startswith("pattern "):
            ctx = tuple(
                EventSignature.decode(tok) for tok in fields["ctx"].split(";") if tok
            )
            binds = tuple(
                BindingFn.decode(tok) for tok in fields["bind"].split("|") if tok != "-"
            )
            patterns.append(
                PatternTuple(
                    context=ctx,
                    predicted=EventSignature.decode(fields["next"]),
                    bindings=binds,
                    confidence=float(fields["p"]),
                    support=int(fields["support"]),
                    gap_ms=float(fields["gap_ms"]),
                )
            )
        else:
            raise TraceError(f"line {lineno}: unrecognized library record")
    return PatternLibrary(patterns, tool_stats, global_gap)
