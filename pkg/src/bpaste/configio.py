"""Config file parsing (policy, workload) and result serialization.

Both config kinds are flat ``key=value`` text with ``#`` comments. Policy
files carry the scheduler knobs plus the device capacity and interference
mode; workload files describe tools, motifs, and the sampling
distributions. Unknown keys are rejected with the offending key named, so
typos fail loudly instead of silently running defaults.

Result files are canonical JSON (sorted keys, fixed separators) so repeated
runs with identical inputs are byte-identical.
"""

from __future__ import annotations

import json

from .mining import DEFAULT_BINDING_THRESHOLD
from .resources import DIMENSIONS, InterferenceModel, ResourceProfile
from .sandbox import SAFETY_BY_NAME
from .scheduler import Policy, parse_safety_map
from .sim import Metrics, SimResult
from .workload import (
    ARG_COPY,
    ARG_FRESH,
    ARG_RESULT,
    ARG_TEMPLATE,
    ArgRule,
    Distribution,
    MotifSpec,
    ToolSpec,
    WorkloadSpec,
)


class ConfigError(ValueError):
    """Invalid configuration; the message names the failing field."""


def _parse_lines(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def parse_profile(text: str, field: str) -> ResourceProfile:
    entries: dict[str, float] = {}
    for token in text.split(","):
        if not token:
            continue
        name, _, value = token.partition(":")
        if name not in DIMENSIONS:
            raise ConfigError(f"{field}: unknown dimension {name!r}")
        try:
            entries[name] = float(value)
        except ValueError:
            raise ConfigError(f"{field}: bad number {value!r}") from None
    try:
        return ResourceProfile.from_mapping(entries)
    except ValueError as exc:
        raise ConfigError(f"{field}: {exc}") from None


_POLICY_KEYS = {
    "beam_K",
    "budget_B",
    "lambda",
    "mu",
    "horizon_h",
    "fanout_limit",
    "max_safety",
    "preempt_cost_eps",
    "binding_threshold",
    "capacity",
    "interference",
    "gap_fallback_ms",
    "latency_fallback_ms",
}


def load_policy(text: str) -> tuple[Policy, InterferenceModel]:
    fields = _parse_lines(text)
    unknown = set(fields) - _POLICY_KEYS
    if unknown:
        raise ConfigError(f"unknown policy key: {sorted(unknown)[0]}")
    for required in ("budget_B", "capacity"):
        if required not in fields:
            raise ConfigError(f"{required}: required")

    def num(key: str, default: float) -> float:
        if key not in fields:
            return default
        try:
            return float(fields[key])
        except ValueError:
            raise ConfigError(f"{key}: bad number {fields[key]!r}") from None

    capacity = parse_profile(fields["capacity"], "capacity")
    mode_text = fields.get("interference", "proportional_share")
    if mode_text == "proportional_share":
        model = InterferenceModel(capacity)
    elif mode_text.startswith("linear_coefficient:"):
        nums = [float(v) for v in mode_text.split(":", 1)[1].split(",")]
        n = len(DIMENSIONS)
        if len(nums) != n * n:
            raise ConfigError(f"interference: need {n * n} matrix entries")
        matrix = tuple(tuple(nums[i * n : (i + 1) * n]) for i in range(n))
        model = InterferenceModel(capacity, "linear_coefficient", matrix)
    else:
        raise ConfigError(f"interference: unknown mode {mode_text!r}")

    try:
        policy = Policy(
            beam_k=int(num("beam_K", 4)),
            budget=parse_profile(fields["budget_B"], "budget_B"),
            lam=num("lambda", 1.0),
            mu=num("mu", 1.0),
            horizon_h=int(num("horizon_h", 2)),
            fanout_limit=int(num("fanout_limit", 3)),
            max_safety=(
                parse_safety_map(fields["max_safety"])
                if "max_safety" in fields
                else {"default": SAFETY_BY_NAME["level1_readonly"]}
            ),
            preempt_cost_eps=num("preempt_cost_eps", 0.0),
            binding_threshold=num("binding_threshold", DEFAULT_BINDING_THRESHOLD),
            gap_fallback_ms=num("gap_fallback_ms", 200.0),
            latency_fallback_ms=num("latency_fallback_ms", 120.0),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not policy.budget.fits_within(capacity):
        raise ConfigError("budget_B: exceeds capacity")
    return policy, model


_WORKLOAD_SCALARS = {"seed", "session_length", "reasoning_gap", "binding_noise"}
_TOOL_ATTRS = {"args", "demand", "safety", "warmup", "result", "outcomes", "effect"}
_MOTIF_ATTRS = {"steps", "cont", "weight"}


def _parse_arg_rule(value: str, field: str) -> ArgRule:
    kind, _, rest = value.partition(":")
    if kind == ARG_FRESH:
        return ArgRule(ARG_FRESH)
    if kind == ARG_COPY:
        return ArgRule(ARG_COPY, rest)
    if kind == ARG_RESULT:
        return ArgRule(ARG_RESULT, rest)
    if kind == ARG_TEMPLATE:
        src, _, tpl = rest.partition(":")
        if not src or "{x}" not in tpl:
            raise ConfigError(f"{field}: template rules need <field>:<text with {{x}}>")
        return ArgRule(ARG_TEMPLATE, src, tpl)
    raise ConfigError(f"{field}: unknown arg rule {kind!r}")


def load_workload(text: str) -> WorkloadSpec:
    fields = _parse_lines(text)
    tools: dict[str, dict[str, str]] = {}
    latencies: dict[str, str] = {}
    motifs: dict[str, dict[str, str]] = {}
    motif_rules: dict[str, list[tuple[int, str, ArgRule]]] = {}
    scalars: dict[str, str] = {}

    for key, value in fields.items():
        if key in _WORKLOAD_SCALARS:
            scalars[key] = value
        elif key.startswith("tool_latency."):
            latencies[key.split(".", 1)[1]] = value
        elif key.startswith("tool."):
            parts = key.split(".")
            if len(parts) != 3 or parts[2] not in _TOOL_ATTRS:
                raise ConfigError(f"unknown workload key: {key}")
            tools.setdefault(parts[1], {})[parts[2]] = value
        elif key.startswith("motif_library."):
            parts = key.split(".")
            if len(parts) == 3 and parts[2] in _MOTIF_ATTRS:
                motifs.setdefault(parts[1], {})[parts[2]] = value
            elif len(parts) == 5 and parts[2] == "arg":
                try:
                    step = int(parts[3])
                except ValueError:
                    raise ConfigError(f"{key}: step index must be an integer") from None
                motif_rules.setdefault(parts[1], []).append(
                    (step, parts[4], _parse_arg_rule(value, key))
                )
            else:
                raise ConfigError(f"unknown workload key: {key}")
        else:
            raise ConfigError(f"unknown workload key: {key}")

    for required in ("seed", "session_length", "reasoning_gap"):
        if required not in scalars:
            raise ConfigError(f"{required}: required")

    tool_specs: dict[str, ToolSpec] = {}
    for name, attrs in sorted(tools.items()):
        if name not in latencies:
            raise ConfigError(f"tool_latency.{name}: required")
        try:
            latency = Distribution.decode(latencies[name])
        except Exception as exc:
            raise ConfigError(f"tool_latency.{name}: {exc}") from None
        safety_name = attrs.get("safety", "level1_readonly")
        if safety_name not in SAFETY_BY_NAME:
            raise ConfigError(f"tool.{name}.safety: unknown level {safety_name!r}")
        result_fields: list[tuple[str, str]] = []
        for token in filter(None, attrs.get("result", "").split(",")):
            fname, _, gen = token.partition(":")
            result_fields.append((fname, gen or "token"))
        outcomes: list[tuple[str, float]] = []
        for token in filter(None, attrs.get("outcomes", "success:1.0").split(",")):
            oname, _, prob = token.partition(":")
            try:
                outcomes.append((oname, float(prob)))
            except ValueError:
                raise ConfigError(f"tool.{name}.outcomes: bad probability {prob!r}") from None
        effect = None
        if "effect" in attrs:
            bits = attrs["effect"].split(":")
            if len(bits) != 3 or "." not in bits[0]:
                raise ConfigError(
                    f"tool.{name}.effect: expected <target>.<op>:<key_arg>:<value_arg>"
                )
            effect = (bits[0], bits[1], bits[2])
        tool_specs[name] = ToolSpec(
            name=name,
            args=tuple(filter(None, attrs.get("args", "").split(","))),
            latency=latency,
            demand=parse_profile(attrs.get("demand", ""), f"tool.{name}.demand"),
            safety=SAFETY_BY_NAME[safety_name],
            warmup_ms=float(attrs.get("warmup", "0")),
            result_fields=tuple(result_fields),
            outcomes=tuple(outcomes),
            effect=effect,
        )

    motif_specs: dict[str, MotifSpec] = {}
    for name, attrs in sorted(motifs.items()):
        if "steps" not in attrs:
            raise ConfigError(f"motif_library.{name}.steps: required")
        steps = tuple(filter(None, attrs["steps"].split(",")))
        cont_raw = attrs.get("cont", "")
        cont_vals = [float(v) for v in filter(None, cont_raw.split(","))]
        if len(cont_vals) == 1 and len(steps) > 2:
            cont_vals = cont_vals * (len(steps) - 1)
        motif_specs[name] = MotifSpec(
            name=name,
            steps=steps,
            cont=tuple(cont_vals),
            weight=float(attrs.get("weight", "1.0")),
            arg_rules=tuple(sorted(motif_rules.get(name, []))),
        )

    try:
        spec = WorkloadSpec(
            seed=int(scalars["seed"]),
            session_length=Distribution.decode(scalars["session_length"]),
            reasoning_gap=Distribution.decode(scalars["reasoning_gap"]),
            binding_noise=float(scalars.get("binding_noise", "0.0")),
            motif_library=motif_specs,
            tools=tool_specs,
        )
        spec.validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return spec


def result_payload(result: SimResult, metrics: Metrics | None = None) -> dict:
    payload = {
        "mode": result.mode,
        "workload_seed": result.workload_seed,
        "session_seed": result.session_seed,
        "script_digest": result.script_digest,
        "makespan_ms": result.makespan,
        "job_completions_ms": result.job_completions,
        "job_served": result.job_served,
        "spec_launched": result.spec_launched,
        "promoted": result.promoted,
        "reused": result.reused,
        "prefix_resumed": result.prefix_resumed,
        "matches": result.matches,
        "squashed": result.squashed,
        "wasted_spec_ms": result.wasted_spec_ms,
        "auth_work_ms": result.auth_work_ms,
        "corun_slowdown": result.corun_slowdown_mean(),
        "state_digest": result.state_digest,
        "decision_log": result.decision_log,
    }
    if metrics is not None:
        payload["metrics"] = metrics.as_dict()
    return payload


def dump_result(result: SimResult, metrics: Metrics | None = None) -> str:
    return json.dumps(result_payload(result, metrics), sort_keys=True, indent=2) + "\n"
