"""Synthetic agent workloads: motif libraries and deterministic sessions.

A workload is a set of tools plus a library of named motifs (short tool
chains with per-edge continuation probabilities, e.g. an edit step followed
by a verify step 85% of the time). A session samples motifs until the drawn
session length is reached. Argument data flow follows per-step rules (copy
a prior argument, extract a prior result field, or substitute one into a
template); ``binding_noise`` is the probability an argument is fresh and
hence unpredictable.

Everything observable is deterministic in (workload seed, session seed):
the tool sequence and gaps come from a seeded RNG, while per-call latency,
outcome, and result payloads are pure hashes of (tool, args), so a
speculative run of the same call reproduces the authoritative one exactly.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, field

from .hypotheses import ToolProfile
from .resources import ResourceProfile
from .sandbox import Effect, SafetyLevel
from .trace import OUTCOME_EMPTY, OUTCOME_SUCCESS


class WorkloadError(ValueError):
    """Invalid workload configuration; message names the offending field."""


@dataclass(frozen=True)
class Distribution:
    kind: str  # constant | uniform | uniform_int | lognormal
    a: float
    b: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "uniform", "uniform_int", "lognormal"):
            raise WorkloadError(f"unknown distribution kind {self.kind!r}")

    def sample(self, u1: float, u2: float) -> float:
        if self.kind == "constant":
            return self.a
        if self.kind == "uniform":
            return self.a + (self.b - self.a) * u1
        if self.kind == "uniform_int":
            return float(int(self.a) + int(u1 * (int(self.b) - int(self.a) + 1)))
        # lognormal(mu, sigma) via Box-Muller on the two uniforms
        z = math.sqrt(-2.0 * math.log(max(u1, 1e-12))) * math.cos(2.0 * math.pi * u2)
        return math.exp(self.a + self.b * z)

    def encode(self) -> str:
        if self.kind == "constant":
            return f"constant({self.a:g})"
        return f"{self.kind}({self.a:g},{self.b:g})"

    @classmethod
    def decode(cls, text: str) -> Distribution:
        if "(" not in text or not text.endswith(")"):
            raise WorkloadError(f"bad distribution {text!r}")
        kind, _, rest = text.partition("(")
        parts = rest[:-1].split(",")
        try:
            nums = [float(p) for p in parts]
        except ValueError:
            raise WorkloadError(f"bad distribution parameters in {text!r}") from None
        if kind == "constant":
            if len(nums) != 1:
                raise WorkloadError(f"constant() takes one parameter: {text!r}")
            return cls(kind, nums[0])
        if len(nums) != 2:
            raise WorkloadError(f"{kind}() takes two parameters: {text!r}")
        return cls(kind, nums[0], nums[1])


ARG_FRESH = "fresh"
ARG_COPY = "copy"
ARG_RESULT = "result"
ARG_TEMPLATE = "template"


@dataclass(frozen=True)
class ArgRule:
    """How one argument of a motif step derives from the previous step."""

    kind: str
    source_field: str = ""
    template: str = ""


@dataclass(frozen=True)
class ToolSpec:
    name: str
    args: tuple[str, ...]
    latency: Distribution
    demand: ResourceProfile
    safety: SafetyLevel = SafetyLevel.LEVEL1_READONLY
    warmup_ms: float = 0.0
    # result field -> "token" | "echo.<arg>" | "const.<value>"
    result_fields: tuple[tuple[str, str], ...] = ()
    outcomes: tuple[tuple[str, float], ...] = ((OUTCOME_SUCCESS, 1.0),)
    # optional authoritative effect: (target.op, key argname, value argname)
    effect: tuple[str, str, str] | None = None

    def profile(self) -> ToolProfile:
        return ToolProfile(self.demand, self.safety, self.warmup_ms)


@dataclass(frozen=True)
class MotifSpec:
    name: str
    steps: tuple[str, ...]
    cont: tuple[float, ...]  # continuation probability after step i
    weight: float = 1.0
    # (step index >= 1, arg name) -> rule
    arg_rules: tuple[tuple[int, str, ArgRule], ...] = ()

    def rule_for(self, step: int, arg: str) -> ArgRule:
        for s, a, rule in self.arg_rules:
            if s == step and a == arg:
                return rule
        return ArgRule(ARG_FRESH)


@dataclass
class WorkloadSpec:
    seed: int
    session_length: Distribution
    reasoning_gap: Distribution
    binding_noise: float
    motif_library: dict[str, MotifSpec]
    tools: dict[str, ToolSpec]

    def validate(self) -> None:
        if not self.motif_library:
            raise WorkloadError("motif_library: at least one motif required")
        if not 0.0 <= self.binding_noise <= 1.0:
            raise WorkloadError("binding_noise: must be in [0, 1]")
        for m in self.motif_library.values():
            if not m.steps:
                raise WorkloadError(f"motif_library.{m.name}.steps: empty")
            if len(m.cont) != max(0, len(m.steps) - 1):
                raise WorkloadError(
                    f"motif_library.{m.name}.cont: need {len(m.steps) - 1} probabilities"
                )
            for p in m.cont:
                if not 0.0 <= p <= 1.0:
                    raise WorkloadError(f"motif_library.{m.name}.cont: {p} outside [0, 1]")
            if m.weight <= 0:
                raise WorkloadError(f"motif_library.{m.name}.weight: must be positive")
            for step in m.steps:
                if step not in self.tools:
                    raise WorkloadError(f"motif_library.{m.name}.steps: unknown tool {step!r}")
        for t in self.tools.values():
            total = sum(p for _, p in t.outcomes)
            if abs(total - 1.0) > 1e-9:
                raise WorkloadError(f"tool.{t.name}.outcomes: probabilities sum to {total}")

    def catalog(self) -> dict[str, ToolProfile]:
        return {name: spec.profile() for name, spec in self.tools.items()}


def _hash_unit(*parts: object) -> float:
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:7], "big") / float(1 << 56)


def _token(*parts: object) -> str:
    return hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).hexdigest()[:8]


def _canonical_args(args: dict[str, str]) -> str:
    return ",".join(f"{k}={args[k]}" for k in sorted(args))


@dataclass(frozen=True)
class PlannedCall:
    index: int
    tool: str
    args: dict[str, str]
    gap_before_ms: float
    latency_ms: float
    outcome: str
    result: dict[str, str]


@dataclass
class SessionScript:
    """Fully determined ground truth for one agent session."""

    workload_seed: int
    session_seed: int
    calls: list[PlannedCall]
    spec: WorkloadSpec = field(repr=False, default=None)  # type: ignore[assignment]

    def digest(self) -> str:
        h = hashlib.sha256()
        for c in self.calls:
            h.update(
                f"{c.index}|{c.tool}|{_canonical_args(c.args)}|{c.gap_before_ms:.6f}|"
                f"{c.latency_ms:.6f}|{c.outcome}\n".encode()
            )
        return h.hexdigest()

    def latency_for(self, tool: str, args: dict[str, str]) -> float:
        spec = self.spec.tools[tool]
        key = (self.workload_seed, self.session_seed, tool, _canonical_args(args))
        return spec.latency.sample(_hash_unit(*key, "lat1"), _hash_unit(*key, "lat2"))

    def outcome_for(self, tool: str, args: dict[str, str]) -> str:
        spec = self.spec.tools[tool]
        key = (self.workload_seed, self.session_seed, tool, _canonical_args(args))
        u = _hash_unit(*key, "outcome")
        acc = 0.0
        for name, p in spec.outcomes:
            acc += p
            if u < acc:
                return name
        return spec.outcomes[-1][0]

    def result_for(self, tool: str, args: dict[str, str]) -> dict[str, str]:
        if self.outcome_for(tool, args) == OUTCOME_EMPTY:
            return {}
        spec = self.spec.tools[tool]
        key = (self.workload_seed, self.session_seed, tool, _canonical_args(args))
        out: dict[str, str] = {}
        for name, gen in spec.result_fields:
            if gen == "token":
                out[name] = _token(*key, name)
            elif gen.startswith("echo."):
                out[name] = args.get(gen[5:], "")
            elif gen.startswith("const."):
                out[name] = gen[6:]
            else:
                raise WorkloadError(f"tool.{tool}.result: bad generator {gen!r}")
        return out

    def effect_for(self, tool: str, args: dict[str, str]) -> Effect | None:
        spec = self.spec.tools[tool]
        if spec.effect is None:
            return None
        target_op, key_arg, value_arg = spec.effect
        target, _, op = target_op.partition(".")
        return Effect(target, op, args.get(key_arg, ""), args.get(value_arg, ""))


def generate_session(spec: WorkloadSpec, session_seed: int) -> SessionScript:
    """Sample the ground-truth session for one seed (same seed, same session)."""
    spec.validate()
    rng = random.Random(f"{spec.seed}:{session_seed}")
    length = max(1, int(spec.session_length.sample(rng.random(), rng.random())))

    motifs = sorted(spec.motif_library.values(), key=lambda m: m.name)
    weights = [m.weight for m in motifs]

    script = SessionScript(spec.seed, session_seed, [], spec)
    prev_args: dict[str, str] = {}
    prev_result: dict[str, str] = {}
    while len(script.calls) < length:
        motif = rng.choices(motifs, weights=weights)[0]
        for step_idx, tool_name in enumerate(motif.steps):
            if len(script.calls) >= length:
                break
            tool = spec.tools[tool_name]
            args: dict[str, str] = {}
            for arg in tool.args:
                rule = motif.rule_for(step_idx + 1, arg) if step_idx > 0 else ArgRule(ARG_FRESH)
                noisy = rng.random() < spec.binding_noise
                if step_idx == 0 or rule.kind == ARG_FRESH or noisy:
                    args[arg] = _fresh_value(arg, rng)
                elif rule.kind == ARG_COPY:
                    args[arg] = prev_args.get(rule.source_field) or _fresh_value(arg, rng)
                elif rule.kind == ARG_RESULT:
                    args[arg] = prev_result.get(rule.source_field) or _fresh_value(arg, rng)
                elif rule.kind == ARG_TEMPLATE:
                    src = prev_result.get(rule.source_field)
                    args[arg] = (
                        rule.template.replace("{x}", src) if src else _fresh_value(arg, rng)
                    )
                else:
                    raise WorkloadError(f"unknown arg rule {rule.kind!r}")
            gap = spec.reasoning_gap.sample(rng.random(), rng.random())
            script.calls.append(
                PlannedCall(
                    index=len(script.calls),
                    tool=tool_name,
                    args=args,
                    gap_before_ms=gap,
                    latency_ms=script.latency_for(tool_name, args),
                    outcome=script.outcome_for(tool_name, args),
                    result=script.result_for(tool_name, args),
                )
            )
            prev_args = args
            prev_result = script.calls[-1].result
            if step_idx + 1 < len(motif.steps) and rng.random() >= motif.cont[step_idx]:
                break
    return script


def _fresh_value(arg: str, rng: random.Random) -> str:
    return f"{arg}_{rng.getrandbits(32):08x}"
