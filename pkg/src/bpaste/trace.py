"""Agent execution traces: events, signatures, and the on-disk line format.

A trace file holds one event per line:

    t=<ms> kind=<k> tool=<name> outcome=<o> args={k:v,...} result={k:v,...}

Fields are omitted where not applicable (reasoning events carry no tool,
tool_call lines carry no outcome/result). Map values must not contain
``,`` or ``}``; keys must not contain ``:``.

Mining and online matching operate on the *signature stream* of a trace:
tool call/return pairs reduce to value-independent signatures, and
reasoning boundaries appear as a reserved marker so that patterns can
condition on them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

REASON_END = "reason_end"
REASON_START = "reason_start"
TOOL_CALL = "tool_call"
TOOL_RETURN = "tool_return"

EVENT_KINDS = (REASON_START, REASON_END, TOOL_CALL, TOOL_RETURN)

OUTCOME_SUCCESS = "success"
OUTCOME_FAILURE = "failure"
OUTCOME_EMPTY = "empty"
OUTCOMES = (OUTCOME_SUCCESS, OUTCOME_FAILURE, OUTCOME_EMPTY)

# Reserved tool name marking a reasoning boundary in signature streams.
REASON_TOOL = "__reason__"


class TraceError(ValueError):
    """Malformed or invariant-violating trace content."""


@dataclass(frozen=True)
class EventSignature:
    """Value-independent fingerprint of a tool event.

    ``arg_shape`` records argument field names only, never values, so two
    calls to the same tool with the same fields always share a signature.
    """

    tool: str
    outcome: str
    arg_shape: tuple[str, ...]

    def encode(self) -> str:
        return f"{self.tool}:{self.outcome}:{','.join(self.arg_shape)}"

    @classmethod
    def decode(cls, text: str) -> EventSignature:
        parts = text.split(":", 2)
        if len(parts) != 3:
            raise TraceError(f"bad signature encoding: {text!r}")
        tool, outcome, shape = parts
        fields = tuple(f for f in shape.split(",") if f)
        return cls(tool, outcome, fields)

    @property
    def is_reason(self) -> bool:
        return self.tool == REASON_TOOL


REASON_MARK = EventSignature(REASON_TOOL, OUTCOME_SUCCESS, ())


def signature_for(tool: str, outcome: str, args: dict[str, str]) -> EventSignature:
    return EventSignature(tool, outcome, tuple(sorted(args)))


@dataclass(frozen=True)
class TraceEvent:
    t_ms: float
    kind: str
    tool: str = ""
    outcome: str = ""
    args: dict[str, str] = field(default_factory=dict)
    result: dict[str, str] = field(default_factory=dict)


@dataclass
class AgentTrace:
    """Ordered, validated event list for one agent session."""

    events: list[TraceEvent]

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class StreamItem:
    """One entry of a signature stream, with timing anchors for mining.

    ``t_trigger`` is the instant the item becomes observable online (the
    tool_return time for tools, the reason_end time for reasoning marks);
    ``t_call`` is the tool_call time (tools only).
    """

    signature: EventSignature
    t_call: float
    t_trigger: float
    args: dict[str, str]
    result: dict[str, str]


def _format_map(entries: dict[str, str]) -> str:
    return "{" + ",".join(f"{k}:{v}" for k, v in entries.items()) + "}"


def format_event(ev: TraceEvent) -> str:
    parts = [f"t={ev.t_ms:g}", f"kind={ev.kind}"]
    if ev.kind in (TOOL_CALL, TOOL_RETURN):
        parts.append(f"tool={ev.tool}")
    if ev.kind == TOOL_RETURN:
        parts.append(f"outcome={ev.outcome}")
    if ev.kind == TOOL_CALL:
        parts.append(f"args={_format_map(ev.args)}")
    if ev.kind == TOOL_RETURN:
        parts.append(f"result={_format_map(ev.result)}")
    return " ".join(parts)


def format_trace(trace: AgentTrace) -> str:
    return "".join(format_event(ev) + "\n" for ev in trace.events)


def _parse_map(text: str, lineno: int, what: str) -> dict[str, str]:
    if not (text.startswith("{") and text.endswith("}")):
        raise TraceError(f"line {lineno}: {what} must be brace-delimited, got {text!r}")
    body = text[1:-1]
    out: dict[str, str] = {}
    if not body:
        return out
    for entry in body.split(","):
        if ":" not in entry:
            raise TraceError(f"line {lineno}: bad {what} entry {entry!r}")
        key, value = entry.split(":", 1)
        if not key:
            raise TraceError(f"line {lineno}: empty {what} key")
        out[key] = value
    return out


def _split_fields(line: str, lineno: int) -> dict[str, str]:
    # Splitting on " key=" boundaries keeps spaces inside values intact.
    fields: dict[str, str] = {}
    pos = 0
    tokens: list[tuple[str, int]] = []
    while pos < len(line):
        eq = line.find("=", pos)
        if eq < 0:
            break
        key_start = line.rfind(" ", 0, eq) + 1
        tokens.append((line[key_start:eq], key_start))
        pos = eq + 1
    if not tokens:
        raise TraceError(f"line {lineno}: no fields found")
    for i, (key, start) in enumerate(tokens):
        value_start = start + len(key) + 1
        value_end = tokens[i + 1][1] - 1 if i + 1 < len(tokens) else len(line)
        fields[key] = line[value_start:value_end]
    return fields


def parse_trace(content: str) -> AgentTrace:
    """Parse trace file content and validate ordering and call matching.

    Raises TraceError with the offending line number for malformed records,
    timestamp regressions, and unmatched tool calls.
    """
    events: list[TraceEvent] = []
    last_t = float("-inf")
    open_calls: dict[str, list[int]] = {}
    for lineno, raw in enumerate(content.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = _split_fields(line, lineno)
        missing = {"t", "kind"} - set(fields)
        if missing:
            raise TraceError(f"line {lineno}: missing fields {sorted(missing)}")
        try:
            t_ms = float(fields["t"])
        except ValueError:
            raise TraceError(f"line {lineno}: bad timestamp {fields['t']!r}") from None
        kind = fields["kind"]
        if kind not in EVENT_KINDS:
            raise TraceError(f"line {lineno}: unknown kind {kind!r}")
        if t_ms < last_t:
            raise TraceError(f"line {lineno}: timestamp regression ({t_ms} < {last_t})")
        last_t = t_ms

        tool = fields.get("tool", "")
        outcome = fields.get("outcome", "")
        args = _parse_map(fields["args"], lineno, "args") if "args" in fields else {}
        result = _parse_map(fields["result"], lineno, "result") if "result" in fields else {}

        if kind in (TOOL_CALL, TOOL_RETURN) and not tool:
            raise TraceError(f"line {lineno}: {kind} without tool name")
        if kind == TOOL_RETURN and outcome not in OUTCOMES:
            raise TraceError(f"line {lineno}: bad outcome {outcome!r}")

        if kind == TOOL_CALL:
            open_calls.setdefault(tool, []).append(len(events))
        elif kind == TOOL_RETURN:
            pending = open_calls.get(tool)
            if not pending:
                raise TraceError(f"line {lineno}: tool_return without matching call ({tool})")
            pending.pop(0)

        events.append(TraceEvent(t_ms, kind, tool, outcome, args, result))

    dangling = sorted(tool for tool, idxs in open_calls.items() if idxs)
    if dangling:
        raise TraceError(f"unmatched call: {', '.join(dangling)}")
    return AgentTrace(events)


def signature_stream(trace: AgentTrace) -> list[StreamItem]:
    """Reduce a trace to its signature stream.

    Tool items appear at call order with the outcome taken from the matching
    return; reasoning boundaries appear as REASON_MARK items.
    """
    items: list[StreamItem] = []
    pending: dict[str, list[int]] = {}
    for ev in trace.events:
        if ev.kind == REASON_END:
            items.append(StreamItem(REASON_MARK, ev.t_ms, ev.t_ms, {}, {}))
        elif ev.kind == TOOL_CALL:
            placeholder = StreamItem(
                signature_for(ev.tool, OUTCOME_SUCCESS, ev.args),
                ev.t_ms,
                ev.t_ms,
                dict(ev.args),
                {},
            )
            pending.setdefault(ev.tool, []).append(len(items))
            items.append(placeholder)
        elif ev.kind == TOOL_RETURN:
            idx = pending[ev.tool].pop(0)
            call_item = items[idx]
            items[idx] = StreamItem(
                signature_for(ev.tool, ev.outcome, call_item.args),
                call_item.t_call,
                ev.t_ms,
                call_item.args,
                dict(ev.result),
            )
    return items
