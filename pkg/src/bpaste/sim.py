"""Deterministic discrete-event simulator of agent sessions.

One simulation owns a fully determined session script (tool sequence, gaps,
latencies, results) and replays it under one of three modes:

  serial   the plain agent loop, no speculation;
  bpaste   the four-phase speculative protocol driven by mined patterns;
  oracle   speculation fed the true future as a single certain hypothesis
           (an upper bound that bypasses mining).

Events process in (time, kind priority, sequence) order; authoritative
kinds outrank speculative kinds at equal times. All state updates happen
inside event handlers, so identical inputs yield identical results
regardless of host or thread count.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

from .hypotheses import (
    NODE_BARRIER,
    NODE_MODEL,
    NODE_PREP,
    NODE_TOOL,
    AuthoritativeCall,
    Beam,
    BranchHypothesis,
    FutureNode,
    FutureSubgraph,
    MATCH_COMPLETED,
    MATCH_PREFIX,
    MATCH_RUNNING,
    NODE_DONE,
    NODE_PENDING,
    NODE_RUNNING,
    generate_hypotheses,
    match_authoritative,
    refresh_beam,
)
from .mining import PatternLibrary
from .resources import InterferenceModel, ResourceProfile, total_demand
from .sandbox import (
    ACTIVE,
    AuthoritativeState,
    COMMITTED,
    DivergenceError,
    Effect,
    OP_SET,
    PREEMPTED,
    SafetyLevel,
    SandboxState,
    apply_effect,
    commit,
    fork,
    has_staged_writes,
    merge_warmups,
    squash,
)
from .scheduler import (
    Admission,
    MISS,
    PREFIX_RESUMED,
    PROMOTED,
    Policy,
    REUSED,
    greedy_admit,
    node_key,
    preemption_order,
)
from .trace import (
    AgentTrace,
    REASON_END,
    REASON_MARK,
    REASON_START,
    StreamItem,
    TOOL_CALL,
    TOOL_RETURN,
    TraceEvent,
    signature_for,
)
from .utility import UtilityBreakdown, expected_utility
from .workload import SessionScript

SERIAL = "serial"
BPASTE = "bpaste"
ORACLE = "oracle"
MODES = (SERIAL, BPASTE, ORACLE)

SPEC_NODE_DONE = "spec_node_done"
PREEMPT_DONE = "preempt_done"

# Authoritative kinds before speculative kinds at equal timestamps.
_PRIORITY = {TOOL_RETURN: 0, REASON_END: 1, TOOL_CALL: 2, SPEC_NODE_DONE: 3, PREEMPT_DONE: 4}

_WARM_PREFIX = "warm:"

EX_RUNNING = "running"
EX_STALLED = "stalled"
EX_PREEMPTED = "preempted"
EX_FINISHED = "finished"
EX_RETIRED = "retired"
EX_SQUASHED = "squashed"

_EPS = 1e-9


class SimulationError(RuntimeError):
    pass


@dataclass
class _AuthJob:
    call_idx: int
    tool: str
    args: dict[str, str]
    demand: ResourceProfile
    arrival: float
    resume_ex: "Execution | None" = None
    resume_node: str | None = None


class Execution:
    """One admitted speculative branch prefix and its runtime bookkeeping."""

    def __init__(
        self,
        eid: str,
        admission: Admission,
        sandbox: SandboxState,
        stream_len: int,
        now: float,
    ):
        self.eid = eid
        self.hypothesis = admission.prefix
        self.breakdown = admission.breakdown
        self.sandbox = sandbox
        self.chain = list(admission.prefix.chain)
        self.graph = admission.prefix.graph
        self.cursor = 0
        self.confirmed = 0
        self.status = EX_RUNNING
        self.reserved: ResourceProfile | None = admission.prefix.rho
        self.ghost_until: float | None = None
        self.node_state: dict[str, str] = {n: NODE_PENDING for n in self.chain}
        self.node_remaining: dict[str, float] = {}
        self.node_wall: dict[str, float] = {n: 0.0 for n in self.chain}
        self.node_solo: dict[str, float] = {n: 0.0 for n in self.chain}
        self.node_args: dict[str, dict[str, str]] = {}
        self.node_results: dict[str, dict[str, str]] = {}
        self.node_outcome: dict[str, str] = {}
        self.running_node: str | None = None
        self.last_progress_t = now
        self.slowdown = 1.0
        self.token = 0
        self.truncated_at: int | None = None
        self.promoted = False
        self.promoted_node: str | None = None
        self.expect_len = stream_len
        self.launched_at = now

    # --- matching protocol -------------------------------------------------

    def next_unconfirmed_node(self) -> FutureNode | None:
        for nid in self.chain[self.confirmed :]:
            node = self.graph.node(nid)
            if node.kind == NODE_TOOL:
                return node
        return None

    def state_of(self, node_id: str) -> str:
        return self.node_state[node_id]

    def node_result(self, node_id: str) -> dict[str, str]:
        return self.node_results[node_id]

    def has_useful_prefix(self) -> bool:
        return any(s == NODE_DONE for s in self.node_state.values()) or bool(
            self.sandbox.history
        )

    # --- accounting ---------------------------------------------------------

    def node(self, node_id: str) -> FutureNode:
        return self.graph.node(node_id)

    def holds_reservation(self) -> bool:
        return self.reserved is not None and self.status == EX_RUNNING and not self.promoted

    def confirmed_node_ids(self) -> set[str]:
        return set(self.chain[: self.confirmed])

    def wasted_wall_ms(self) -> float:
        confirmed = self.confirmed_node_ids()
        return sum(w for nid, w in self.node_wall.items() if nid not in confirmed)

    def remaining_hypothesis(self) -> BranchHypothesis | None:
        """The not-yet-finished tail, for preemption-time utility scoring.

        The running node sits at the cursor, so the tail slice already
        includes it; its latency is replaced by the remaining solo time.
        """
        node_ids = list(self.chain[self.cursor :])
        nodes = []
        for nid in node_ids:
            base = self.graph.node(nid)
            lat = self.node_remaining.get(nid, base.latency_est)
            nodes.append(
                FutureNode(
                    node_id=base.node_id,
                    kind=base.kind,
                    signature=base.signature,
                    safety=base.safety,
                    latency_est=lat,
                    rho=base.rho,
                    conf=base.conf,
                    resolved_args=dict(base.resolved_args),
                    late_bindings=dict(base.late_bindings),
                )
            )
        if not nodes:
            return None
        edges = [(a.node_id, b.node_id) for a, b in zip(nodes, nodes[1:])]
        graph = FutureSubgraph(nodes, edges, nodes[0].node_id, self.graph.depth_bound)
        rho = ResourceProfile.zero()
        q = 1.0
        for n in nodes:
            rho = rho.combine_max(n.rho)
            if n.kind == NODE_TOOL:
                q *= n.conf
        return BranchHypothesis(
            graph=graph,
            q=q,
            bindings=(),
            rho=self.reserved if self.reserved is not None else rho,
            safety=max((n.safety for n in nodes), default=SafetyLevel.LEVEL0_PREP),
            chain=[n.node_id for n in nodes],
            head_gap_ms=0.0,
            gen_stream_len=self.hypothesis.gen_stream_len,
            window=self.hypothesis.window,
            hid=self.hypothesis.hid,
        )


@dataclass
class SimResult:
    mode: str
    workload_seed: int
    session_seed: int
    script_digest: str
    makespan: float
    job_completions: list[float]
    job_served: list[str]
    spec_launched: int
    promoted: int
    reused: int
    prefix_resumed: int
    matches: int
    squashed: int
    wasted_spec_ms: float
    corun_samples: list[tuple[float, float]]  # (wall, solo) per execution
    auth_work_ms: float
    decision_log: list[str]
    state_digest: str
    trace: AgentTrace | None = None

    def corun_slowdown_mean(self) -> float:
        rates = [w / s for w, s in self.corun_samples if s > _EPS]
        return sum(rates) / len(rates) if rates else 1.0


@dataclass
class Metrics:
    makespan: float
    serial_makespan: float
    speedup_vs_serial: float
    promotion_rate: float
    prefix_reuse_rate: float
    wasted_spec_ms: float
    auth_qos_violations: int
    corun_slowdown: float

    def as_dict(self) -> dict[str, float]:
        return {
            "makespan": self.makespan,
            "serial_makespan": self.serial_makespan,
            "speedup_vs_serial": self.speedup_vs_serial,
            "promotion_rate": self.promotion_rate,
            "prefix_reuse_rate": self.prefix_reuse_rate,
            "wasted_spec_ms": self.wasted_spec_ms,
            "auth_qos_violations": self.auth_qos_violations,
            "corun_slowdown": self.corun_slowdown,
        }


def compute_metrics(result: SimResult, serial_twin: SimResult) -> Metrics:
    """Pair a run with its serial twin (identical session required)."""
    if (
        serial_twin.mode != SERIAL
        or serial_twin.session_seed != result.session_seed
        or serial_twin.workload_seed != result.workload_seed
        or serial_twin.script_digest != result.script_digest
    ):
        raise SimulationError("serial twin ran a different session")
    violations = sum(
        1
        for mine, theirs in zip(result.job_completions, serial_twin.job_completions)
        if mine > theirs + _EPS
    )
    return Metrics(
        makespan=result.makespan,
        serial_makespan=serial_twin.makespan,
        speedup_vs_serial=(serial_twin.makespan / result.makespan) if result.makespan else 1.0,
        promotion_rate=(result.promoted / result.spec_launched) if result.spec_launched else 0.0,
        prefix_reuse_rate=(result.prefix_resumed / result.matches) if result.matches else 0.0,
        wasted_spec_ms=result.wasted_spec_ms,
        auth_qos_violations=violations,
        corun_slowdown=result.corun_slowdown_mean(),
    )


class Simulator:
    """Single-session, single-threaded deterministic simulation."""

    def __init__(
        self,
        script: SessionScript,
        library: PatternLibrary,
        policy: Policy,
        model: InterferenceModel,
        mode: str,
        check_invariants: bool = True,
    ):
        if mode not in MODES:
            raise SimulationError(f"unknown mode {mode!r}")
        self.script = script
        self.library = library
        self.policy = policy
        self.model = model
        self.mode = mode
        self.check = check_invariants
        self.catalog = script.spec.catalog()
        for name, spec in script.spec.tools.items():
            if not spec.demand.fits_within(model.capacity):
                raise SimulationError(f"tool.{name}.demand exceeds device capacity")

        self.clock = 0.0
        self._seq = 0
        self._heap: list[tuple[float, int, int, str, tuple]] = []

        self.auth_state = AuthoritativeState()
        self.stream: list[StreamItem] = []
        self.beam: Beam | None = None
        self.executions: list[Execution] = []
        self._eid_counter = 0
        self.auth_running: list[_AuthJob] = []
        self.auth_queue: list[_AuthJob] = []
        self.next_call = 0
        self.session_over = False
        self._unlock_memo: dict = {}

        self.trace_events: list[TraceEvent] = []
        self.job_completions: list[float] = [0.0] * len(script.calls)
        self.job_calls: list[float] = [0.0] * len(script.calls)
        self.job_served: list[str] = [""] * len(script.calls)
        self.spec_launched = 0
        self.promoted_count = 0
        self.reused_count = 0
        self.prefix_count = 0
        self.match_count = 0
        self.squashed_count = 0
        self.wasted_ms = 0.0
        self.auth_work_ms = 0.0
        self.corun_samples: list[tuple[float, float]] = []
        self.decision_log: list[str] = []

    # --- event machinery ----------------------------------------------------

    def _push(self, time: float, kind: str, payload: tuple) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (time, _PRIORITY[kind], self._seq, kind, payload))

    def run(self) -> SimResult:
        if not self.script.calls:
            return self._result(0.0)
        first_gap = self.script.calls[0].gap_before_ms
        self._emit_trace(TraceEvent(0.0, REASON_START))
        self._push(first_gap, REASON_END, (0,))
        makespan = 0.0
        seen_keys: set[tuple[float, int, int]] = set()
        while self._heap:
            time, prio, seq, kind, payload = heapq.heappop(self._heap)
            key = (time, prio, seq)
            if self.check:
                if time + _EPS < self.clock or key in seen_keys:
                    raise AssertionError("event order violated")
                seen_keys.add(key)
            self.clock = time
            if kind == REASON_END:
                self._on_reason_end(*payload)
            elif kind == TOOL_CALL:
                self._on_tool_call(*payload)
            elif kind == TOOL_RETURN:
                self._on_tool_return(*payload)
            elif kind == SPEC_NODE_DONE:
                self._on_spec_node_done(*payload)
            elif kind == PREEMPT_DONE:
                self._on_preempt_done(*payload)
            if self.check:
                self._assert_invariants()
            if self.session_over and not self.auth_running and not self.auth_queue:
                makespan = max(makespan, self.clock)
                break
            makespan = max(makespan, self.clock)
        self._drain_speculation()
        return self._result(makespan)

    # --- session handlers ----------------------------------------------------

    def _on_reason_end(self, idx: int) -> None:
        self._emit_trace(TraceEvent(self.clock, REASON_END))
        self.stream.append(StreamItem(REASON_MARK, self.clock, self.clock, {}, {}))
        self._push(self.clock, TOOL_CALL, (idx,))
        self._refresh_and_admit()

    def _on_tool_call(self, idx: int) -> None:
        call = self.script.calls[idx]
        self.job_calls[idx] = self.clock
        self._emit_trace(TraceEvent(self.clock, TOOL_CALL, call.tool, "", dict(call.args), {}))

        if self.mode != SERIAL and self._phase1_confirm_promote(idx) != MISS:
            return

        self.job_served[idx] = MISS
        job = _AuthJob(idx, call.tool, dict(call.args), self._tool_demand(call.tool), self.clock)
        self.auth_queue.append(job)
        self._phase2_protect()
        self._phase3_run_authoritative()

    def _phase1_confirm_promote(self, idx: int) -> str:
        """Reconcile the arriving call with speculative work: reuse finished
        results, promote in-flight nodes, resume useful prefixes."""
        call = self.script.calls[idx]
        auth_call = AuthoritativeCall(call.tool, dict(call.args))
        while True:
            outcome = match_authoritative(self.beam, self._live_executions(), auth_call)
            if outcome.status == MATCH_COMPLETED:
                ex: Execution = outcome.execution  # type: ignore[assignment]
                if not self._confirm_completed(ex, outcome.resume_node_id, idx):
                    continue  # diverged; execution squashed, rematch
                return REUSED
            if outcome.status == MATCH_RUNNING:
                self._promote(outcome.execution, outcome.resume_node_id, idx)  # type: ignore[arg-type]
                return PROMOTED
            if outcome.status == MATCH_PREFIX:
                self._prefix_resume(outcome.execution, outcome.resume_node_id, idx)  # type: ignore[arg-type]
                return PREFIX_RESUMED
            return MISS

    def _on_tool_return(self, idx: int, served: str, eid: str | None) -> None:
        call = self.script.calls[idx]
        ex = self._execution(eid) if eid else None
        job = next((j for j in self.auth_running if j.call_idx == idx), None)
        result = dict(call.result)

        if served != REUSED:
            # Authoritative completion: apply the tool's effect to live state.
            effect = self.script.effect_for(call.tool, call.args)
            if effect is not None:
                self.auth_state.apply(effect)
            spec_tool = self.script.spec.tools[call.tool]
            warm_key = _WARM_PREFIX + call.tool
            if spec_tool.warmup_ms > 0 and self.auth_state.env.get(warm_key) != "1":
                self.auth_state.apply(Effect("env", OP_SET, warm_key, "1"))
            self.auth_running = [j for j in self.auth_running if j.call_idx != idx]

        if ex is not None:
            self._confirm_return(ex, served, idx, job.resume_node if job else None)

        self._emit_trace(
            TraceEvent(self.clock, TOOL_RETURN, call.tool, call.outcome, {}, result)
        )
        self.stream.append(
            StreamItem(
                signature_for(call.tool, call.outcome, call.args),
                self.job_calls[idx],
                self.clock,
                dict(call.args),
                result,
            )
        )
        if ex is not None:
            ex.expect_len = len(self.stream)
        self.job_completions[idx] = self.clock

        self.next_call = idx + 1
        if self.next_call < len(self.script.calls):
            gap = self.script.calls[self.next_call].gap_before_ms
            self._emit_trace(TraceEvent(self.clock, REASON_START))
            self._push(self.clock + gap, REASON_END, (self.next_call,))
        else:
            self.session_over = True

        self._rescale_running()
        self._phase3_run_authoritative()
        self._refresh_and_admit()

    # --- phase 1 -------------------------------------------------------------

    def _confirm_completed(self, ex: Execution, node_id: str, idx: int) -> bool:
        """Reuse a finished speculative node; returns False on divergence."""
        if self.check:
            # conservative matching: the speculative result must be exactly
            # what the authoritative run would have produced
            call = self.script.calls[idx]
            assert ex.node_results[node_id] == call.result, "speculative result mismatch"
        if has_staged_writes(ex.sandbox):
            ex.sandbox.promoted = True
            try:
                commit(ex.sandbox, self.auth_state)
            except DivergenceError:
                self._squash_execution(ex, "diverged")
                return False
        else:
            merge_warmups(ex.sandbox, self.auth_state)
        pos = ex.chain.index(node_id)
        self._extend_confirmed(ex, pos)
        self.match_count += 1
        self.reused_count += 1
        self.job_served[idx] = REUSED
        self._log(1, "reuse", ex)
        if ex.sandbox.status == COMMITTED:
            ex.sandbox = fork(self.auth_state)
        else:
            # keep the sandbox; refresh its fork point after the warm merge
            ex.sandbox.base_epoch = self.auth_state.epoch
        self._push(self.clock, TOOL_RETURN, (idx, REUSED, ex.eid))
        return True

    def _promote(self, ex: Execution, node_id: str, idx: int) -> None:
        self._progress_execution(ex)
        remaining = ex.node_remaining.get(node_id, 0.0)
        ex.promoted = True
        ex.promoted_node = node_id
        ex.token += 1  # cancel the speculative completion event
        merge_warmups(ex.sandbox, self.auth_state)
        ex.sandbox.base_epoch = self.auth_state.epoch
        node = ex.node(node_id)
        job = _AuthJob(idx, node.tool, ex.node_args[node_id], node.rho, self.clock, ex, node_id)
        self.auth_running.append(job)
        self.match_count += 1
        self.promoted_count += 1
        self.job_served[idx] = PROMOTED
        self._log(1, "promote", ex)
        auth_slow = self.model.slowdown(node.rho, self._auth_corunners(exclude_idx=idx))
        self.auth_work_ms += remaining
        self._push(self.clock + remaining * auth_slow, TOOL_RETURN, (idx, PROMOTED, ex.eid))
        self._rescale_running()

    def _prefix_resume(self, ex: Execution, node_id: str, idx: int) -> None:
        merge_warmups(ex.sandbox, self.auth_state)
        ex.sandbox.base_epoch = self.auth_state.epoch
        self.match_count += 1
        self.prefix_count += 1
        self.job_served[idx] = PREFIX_RESUMED
        self._log(1, "reuse", ex)
        call = self.script.calls[idx]
        job = _AuthJob(
            idx, call.tool, dict(call.args), self._tool_demand(call.tool), self.clock, ex, node_id
        )
        self.auth_queue.append(job)
        self._phase2_protect()
        self._phase3_run_authoritative()

    def _confirm_return(
        self, ex: Execution, served: str, idx: int, resume_node: str | None
    ) -> None:
        """Advance the confirmed boundary when an authoritative return lands
        on a promoted or prefix-resumed node; deeper nodes may then resume."""
        if served == PROMOTED and ex.promoted_node is not None:
            nid = ex.promoted_node
            call = self.script.calls[idx]
            ex.node_state[nid] = NODE_DONE
            ex.node_results[nid] = dict(call.result)
            ex.node_outcome[nid] = call.outcome
            ex.node_remaining[nid] = 0.0
            ex.running_node = None
            ex.promoted = False
            ex.promoted_node = None
            pos = ex.chain.index(nid)
            ex.cursor = pos + 1
            self._extend_confirmed(ex, pos)
            ex.reserved = None
            ex.status = EX_STALLED
            self._check_outcome_truncation(ex, nid, call.outcome)
        elif served == PREFIX_RESUMED:
            nid = resume_node
            if nid is None:
                node = ex.next_unconfirmed_node()
                nid = node.node_id if node else None
            if nid is not None and nid in ex.node_state:
                call = self.script.calls[idx]
                ex.node_state[nid] = NODE_DONE
                ex.node_results[nid] = dict(call.result)
                ex.node_outcome[nid] = call.outcome
                pos = ex.chain.index(nid)
                ex.cursor = max(ex.cursor, pos + 1)
                self._extend_confirmed(ex, pos)
                self._check_outcome_truncation(ex, nid, call.outcome)
        self._maybe_retire(ex)

    def _check_outcome_truncation(self, ex: Execution, nid: str, outcome: str) -> None:
        node = ex.node(nid)
        if node.signature is not None and node.signature.outcome != outcome:
            ex.truncated_at = ex.chain.index(nid) + 1

    def _extend_confirmed(self, ex: Execution, pos: int) -> None:
        """Confirm through ``pos`` plus any trailing non-tool nodes that were
        already passed (preps and barriers confirm with their tool)."""
        ex.confirmed = max(ex.confirmed, pos + 1)
        while ex.confirmed < len(ex.chain):
            node = ex.node(ex.chain[ex.confirmed])
            if node.kind == NODE_TOOL or ex.node_state[node.node_id] != NODE_DONE:
                break
            ex.confirmed += 1

    def _maybe_retire(self, ex: Execution) -> None:
        if ex.confirmed >= len(ex.chain) and ex.status not in (EX_RETIRED, EX_SQUASHED):
            self._release_reservation(ex)
            ex.status = EX_RETIRED

    # --- phase 2 -------------------------------------------------------------

    def _phase2_protect(self) -> None:
        """Preempt speculation (ascending utility) until pending authoritative
        demand fits and the speculation budget constraint holds again."""
        pending = total_demand([j.demand for j in self.auth_queue])
        auth_after = self._auth_demand() + pending
        budget_cap = self.policy.budget.combine_min(self.model.capacity - auth_after)
        while True:
            reserved = self._spec_reserved()
            if reserved.fits_within(budget_cap):
                return
            victims = [ex for ex in self.executions if ex.holds_reservation()]
            if not victims:
                return
            order = preemption_order(victims, self._execution_eu)
            victim = order[0]
            self._preempt(victim)

    def _execution_eu(self, ex: Execution, others: list[Execution]) -> float:
        rem = ex.remaining_hypothesis()
        if rem is None:
            return 0.0
        admitted = [o.hypothesis for o in others]
        bd = self._evaluate(rem, admitted, gap_est=0.0)
        return bd.eu

    def _preempt(self, ex: Execution) -> None:
        self._progress_execution(ex)
        ex.token += 1  # cancel in-flight completion
        if ex.running_node is not None:
            ex.node_state[ex.running_node] = NODE_PENDING
            # remaining solo time is kept in node_remaining for resumption
        ex.status = EX_PREEMPTED
        ex.sandbox.status = PREEMPTED
        eps = self.policy.preempt_cost_eps
        if eps > 0:
            ex.ghost_until = self.clock + eps
            self._push(self.clock + eps, PREEMPT_DONE, (ex.eid,))
        else:
            ex.reserved = None
        self._log(2, "preempt", ex)
        self._rescale_running()

    def _on_preempt_done(self, eid: str) -> None:
        ex = self._execution(eid)
        if ex is not None and ex.ghost_until is not None and ex.ghost_until <= self.clock:
            ex.ghost_until = None
            ex.reserved = None
        self._phase3_run_authoritative()
        self._phase4_admit()

    # --- phase 3 -------------------------------------------------------------

    def _phase3_run_authoritative(self) -> None:
        """FIFO dispatch of queued authoritative jobs at full priority."""
        progressed = True
        while progressed and self.auth_queue:
            progressed = False
            job = self.auth_queue[0]
            occupied = self._auth_demand() + self._spec_reserved(include_ghosts=True)
            if not (occupied + job.demand).fits_within(self.model.capacity):
                return
            self.auth_queue.pop(0)
            self.auth_running.append(job)
            latency = self.script.latency_for(job.tool, job.args)
            spec_tool = self.script.spec.tools[job.tool]
            if (
                spec_tool.warmup_ms > 0
                and self.auth_state.env.get(_WARM_PREFIX + job.tool) != "1"
            ):
                latency += spec_tool.warmup_ms
            slow = self.model.slowdown(job.demand, self._auth_corunners(exclude_idx=job.call_idx))
            self.auth_work_ms += latency
            served = PREFIX_RESUMED if job.resume_ex is not None else MISS
            eid = job.resume_ex.eid if job.resume_ex is not None else None
            self._push(self.clock + latency * slow, TOOL_RETURN, (job.call_idx, served, eid))
            self._rescale_running()
            progressed = True

    def _auth_corunners(self, exclude_idx: int) -> list[ResourceProfile]:
        return [j.demand for j in self.auth_running if j.call_idx != exclude_idx]

    # --- phase 4 -------------------------------------------------------------

    def _refresh_and_admit(self) -> None:
        if self.mode == SERIAL:
            return
        self._squash_dead()
        fresh = self._fresh_hypotheses()
        self.beam = refresh_beam(
            self.beam,
            fresh,
            self.policy.beam_k,
            lambda h: self._evaluate(h, [], gap_est=self._gap_estimate(h)).eu,
            self.stream,
        )
        self._phase4_admit()

    def _fresh_hypotheses(self) -> list[BranchHypothesis]:
        if self.mode == ORACLE:
            return self._oracle_hypothesis()
        window = self.stream[-10:]
        warm = {
            k[len(_WARM_PREFIX) :]
            for k, v in self.auth_state.env.items()
            if k.startswith(_WARM_PREFIX) and v == "1"
        }
        return generate_hypotheses(
            window,
            self.library,
            self.catalog,
            self.policy.horizon_h,
            self.policy.fanout_limit,
            self.policy.latency_fallback_ms,
            warm_tools=warm,
            stream_len=len(self.stream),
        )

    def _oracle_hypothesis(self) -> list[BranchHypothesis]:
        if self.next_call >= len(self.script.calls):
            return []
        nodes: list[FutureNode] = []
        counter = 0
        warm = {
            k[len(_WARM_PREFIX) :]
            for k, v in self.auth_state.env.items()
            if k.startswith(_WARM_PREFIX) and v == "1"
        }
        upcoming = self.script.calls[self.next_call : self.next_call + self.policy.horizon_h]
        for call in upcoming:
            spec_tool = self.script.spec.tools[call.tool]
            profile = self.catalog[call.tool]
            if profile.warmup_ms > 0 and call.tool not in warm:
                counter += 1
                nodes.append(
                    FutureNode(
                        node_id=f"op{counter}",
                        kind=NODE_PREP,
                        signature=signature_for(call.tool, call.outcome, call.args),
                        safety=SafetyLevel.LEVEL0_PREP,
                        latency_est=profile.warmup_ms,
                        rho=profile.demand,
                        conf=1.0,
                    )
                )
                warm.add(call.tool)
            if profile.safety == SafetyLevel.LEVEL2_STAGED:
                counter += 1
                nodes.append(
                    FutureNode(
                        node_id=f"ob{counter}",
                        kind=NODE_BARRIER,
                        signature=None,
                        safety=SafetyLevel.LEVEL0_PREP,
                        latency_est=0.0,
                        rho=ResourceProfile.zero(),
                        conf=1.0,
                    )
                )
            counter += 1
            nodes.append(
                FutureNode(
                    node_id=f"on{counter}",
                    kind=NODE_TOOL,
                    signature=signature_for(call.tool, call.outcome, call.args),
                    safety=profile.safety,
                    latency_est=call.latency_ms,
                    rho=profile.demand,
                    conf=1.0,
                    resolved_args=dict(call.args),
                )
            )
        if not nodes:
            return []
        edges = [(a.node_id, b.node_id) for a, b in zip(nodes, nodes[1:])]
        graph = FutureSubgraph(nodes, edges, nodes[0].node_id, self.policy.horizon_h)
        rho = ResourceProfile.zero()
        for n in nodes:
            rho = rho.combine_max(n.rho)
        gap = max(0.0, self._next_call_time() - self.clock)
        hyp = BranchHypothesis(
            graph=graph,
            q=1.0,
            bindings=(),
            rho=rho,
            safety=max(n.safety for n in nodes),
            chain=[n.node_id for n in nodes],
            head_gap_ms=gap,
            gen_stream_len=len(self.stream),
            window=tuple(it.signature for it in self.stream[-10:]),
            hid="oracle",
        )
        return [hyp]

    def _next_call_time(self) -> float:
        # At a tool_return the next reasoning gap is still ahead of us; at a
        # reason_end the call arrives at the current instant.
        if self.next_call >= len(self.script.calls):
            return self.clock
        for t, _, _, kind, payload in self._heap:
            if kind in (TOOL_CALL, REASON_END) and payload and payload[0] == self.next_call:
                return t
        return self.clock + self.script.calls[self.next_call].gap_before_ms

    def _gap_estimate(self, h: BranchHypothesis) -> float:
        if h.head_gap_ms > 0:
            return h.head_gap_ms
        if self.mode == ORACLE:
            return h.head_gap_ms
        if self.library.global_gap_ms > 0:
            return self.library.global_gap_ms
        return self.policy.gap_fallback_ms

    def _evaluate(
        self,
        h: BranchHypothesis,
        admitted: list[BranchHypothesis],
        gap_est: float,
    ) -> UtilityBreakdown:
        return expected_utility(
            h,
            admitted,
            self.model,
            gap_est,
            self.library,
            self.policy.lam,
            self.policy.mu,
            unlock_horizon=self.policy.horizon_h,
            latency_fallback_ms=self.policy.latency_fallback_ms,
            _unlock_memo=self._unlock_memo,
        )

    def _phase4_admit(self) -> None:
        if self.mode == SERIAL or self.beam is None or self.session_over:
            return
        if self.policy.budget.is_zero():
            return
        self._resume_continuations()
        slack = self.model.capacity - self._auth_demand()
        cap = slack.combine_min(self.policy.budget)
        admitted = [ex.hypothesis for ex in self.executions if ex.holds_reservation()]
        covered = self._covered_work_keys()
        ghosts = self._spec_reserved(include_ghosts=True) - self._spec_reserved()
        cap = cap - ghosts
        selected = greedy_admit(
            self.beam.hypotheses,
            admitted,
            cap,
            self.policy,
            lambda ph, cur: self._evaluate(ph, list(cur), self._gap_estimate(ph)),
            covered_keys=covered,
        )
        for adm in selected:
            self._launch(adm)

    def _covered_work_keys(self) -> set[tuple]:
        """(tool, args) pairs some live branch already covers: anything at or
        past its confirmed boundary that it can still run or has run."""
        keys: set[tuple] = set()
        for ex in self._live_executions():
            stop = ex.truncated_at if ex.truncated_at is not None else len(ex.chain)
            for nid in ex.chain[:stop]:
                node = ex.node(nid)
                if node.kind == NODE_TOOL:
                    keys.add(node_key(node))
        return keys

    def _resume_continuations(self) -> None:
        """Let stalled executions with dispatchable remaining work re-reserve."""
        for ex in sorted(self.executions, key=lambda e: e.eid):
            if ex.status not in (EX_STALLED, EX_PREEMPTED) or ex.reserved is not None:
                continue
            if ex.ghost_until is not None:
                continue
            if ex.cursor >= len(ex.chain):
                continue
            if ex.truncated_at is not None and ex.cursor >= ex.truncated_at:
                continue
            if not self._dispatchable(ex, ex.chain[ex.cursor]):
                continue
            peak = ResourceProfile.zero()
            for nid in ex.chain[ex.cursor :]:
                peak = peak.combine_max(ex.node(nid).rho)
            slack = self.model.capacity - self._auth_demand()
            cap = slack.combine_min(self.policy.budget)
            used = self._spec_reserved(include_ghosts=True)
            if not (used + peak).fits_within(cap):
                continue
            ex.reserved = peak
            ex.status = EX_RUNNING
            if ex.sandbox.status == PREEMPTED:
                ex.sandbox.status = ACTIVE
            self._advance_execution(ex)

    def _launch(self, adm: Admission) -> None:
        self._eid_counter += 1
        eid = f"b{self._eid_counter:04d}"
        sandbox = fork(self.auth_state)
        sandbox.reserved = adm.prefix.rho
        ex = Execution(eid, adm, sandbox, len(self.stream), self.clock)
        self.executions.append(ex)
        self.spec_launched += 1
        self._log(4, "admit", ex)
        self._advance_execution(ex)

    # --- speculative execution engine ----------------------------------------

    def _dispatchable(self, ex: Execution, node_id: str) -> bool:
        node = ex.node(node_id)
        if node.kind == NODE_BARRIER:
            return not self._barrier_blocked(ex, ex.chain.index(node_id))
        if node.kind == NODE_PREP:
            return True
        args = self._resolve_args(ex, node)
        return args is not None

    def _barrier_blocked(self, ex: Execution, pos: int) -> bool:
        unconfirmed_tool = any(
            ex.node(i).kind == NODE_TOOL for i in ex.chain[ex.confirmed : pos]
        )
        return unconfirmed_tool or has_staged_writes(ex.sandbox)

    def _resolve_args(self, ex: Execution, node: FutureNode) -> dict[str, str] | None:
        args = dict(node.resolved_args)
        for arg, (src_id, fn) in sorted(node.late_bindings.items()):
            src_result = ex.node_results.get(src_id)
            src_args = ex.node_args.get(src_id)
            if src_result is None and src_args is None:
                return None
            value = fn.apply_to(src_args or {}, src_result or {})
            if value is None:
                return None
            args[arg] = value
        if set(args) != set(node.arg_fields):
            return None
        return args

    def _advance_execution(self, ex: Execution) -> None:
        while ex.cursor < len(ex.chain):
            if ex.truncated_at is not None and ex.cursor >= ex.truncated_at:
                self._stall(ex)
                return
            nid = ex.chain[ex.cursor]
            node = ex.node(nid)
            if node.kind == NODE_BARRIER:
                # Staged work may only start once everything ahead of the
                # barrier is authoritatively confirmed; otherwise an early
                # commit could publish unconfirmed writes.
                if self._barrier_blocked(ex, ex.cursor):
                    self._stall(ex)
                    return
                ex.node_state[nid] = NODE_DONE
                ex.cursor += 1
                continue
            if node.kind == NODE_MODEL:
                # reasoning placeholders weight estimates but never execute
                ex.node_state[nid] = NODE_DONE
                ex.cursor += 1
                continue
            if node.kind == NODE_PREP:
                if self._is_warm(ex, node.tool):
                    ex.node_state[nid] = NODE_DONE
                    ex.cursor += 1
                    continue
                self._start_node(ex, nid, node.latency_est)
                return
            args = self._resolve_args(ex, node)
            if args is None:
                self._stall(ex)
                return
            ex.node_args[nid] = args
            latency = self.script.latency_for(node.tool, args)
            spec_tool = self.script.spec.tools[node.tool]
            if spec_tool.warmup_ms > 0 and not self._is_warm(ex, node.tool):
                latency += spec_tool.warmup_ms
            self._start_node(ex, nid, latency)
            return
        # prefix complete: results stay available, resources return to slack
        self._release_reservation(ex)
        if ex.status == EX_RUNNING:
            ex.status = EX_FINISHED

    def _is_warm(self, ex: Execution, tool: str) -> bool:
        key = _WARM_PREFIX + tool
        return ex.sandbox.read("env", key) == "1"

    def _start_node(self, ex: Execution, nid: str, solo_ms: float) -> None:
        node = ex.node(nid)
        ex.node_state[nid] = NODE_RUNNING
        ex.node_remaining[nid] = (
            ex.node_remaining.get(nid, solo_ms) if ex.node_wall[nid] > 0 else solo_ms
        )
        ex.running_node = nid
        ex.last_progress_t = self.clock
        ex.token += 1
        ex.slowdown = self._spec_slowdown(ex, node)
        self._push(
            self.clock + ex.node_remaining[nid] * ex.slowdown,
            SPEC_NODE_DONE,
            (ex.eid, nid, ex.token),
        )
        self._rescale_running(exclude=ex)

    def _spec_slowdown(self, ex: Execution, node: FutureNode) -> float:
        others = [j.demand for j in self.auth_running]
        for other in self.executions:
            if other is ex or other.running_node is None:
                continue
            if other.status != EX_RUNNING:
                continue
            others.append(other.node(other.running_node).rho)
        return self.model.slowdown(node.rho, others)

    def _progress_execution(self, ex: Execution) -> None:
        if ex.running_node is None:
            return
        elapsed = self.clock - ex.last_progress_t
        if elapsed <= 0:
            ex.last_progress_t = self.clock
            return
        nid = ex.running_node
        solo = elapsed / ex.slowdown
        ex.node_remaining[nid] = max(0.0, ex.node_remaining[nid] - solo)
        ex.node_wall[nid] += elapsed
        ex.node_solo[nid] += solo
        ex.last_progress_t = self.clock

    def _rescale_running(self, exclude: Execution | None = None) -> None:
        """Re-derive every running speculative node's completion time after a
        co-run set change."""
        for ex in self.executions:
            if ex is exclude or ex.running_node is None or ex.promoted:
                continue
            if ex.status != EX_RUNNING:
                continue
            self._progress_execution(ex)
            node = ex.node(ex.running_node)
            new_slow = self._spec_slowdown(ex, node)
            if abs(new_slow - ex.slowdown) < 1e-12:
                continue
            ex.slowdown = new_slow
            ex.token += 1
            self._push(
                self.clock + ex.node_remaining[ex.running_node] * new_slow,
                SPEC_NODE_DONE,
                (ex.eid, ex.running_node, ex.token),
            )

    def _on_spec_node_done(self, eid: str, nid: str, token: int) -> None:
        ex = self._execution(eid)
        if ex is None or ex.token != token or ex.running_node != nid:
            return
        self._progress_execution(ex)
        ex.node_remaining[nid] = 0.0
        ex.node_state[nid] = NODE_DONE
        ex.running_node = None
        node = ex.node(nid)

        if node.kind == NODE_PREP:
            apply_effect(
                ex.sandbox,
                Effect("env", OP_SET, _WARM_PREFIX + node.tool, "1"),
                SafetyLevel.LEVEL0_PREP,
            )
        else:
            args = ex.node_args[nid]
            outcome = self.script.outcome_for(node.tool, args)
            result = self.script.result_for(node.tool, args)
            ex.node_results[nid] = result
            ex.node_outcome[nid] = outcome
            spec_tool = self.script.spec.tools[node.tool]
            if spec_tool.warmup_ms > 0 and not self._is_warm(ex, node.tool):
                apply_effect(
                    ex.sandbox,
                    Effect("env", OP_SET, _WARM_PREFIX + node.tool, "1"),
                    SafetyLevel.LEVEL0_PREP,
                )
            if node.safety == SafetyLevel.LEVEL2_STAGED:
                effect = self.script.effect_for(node.tool, args)
                if effect is not None:
                    apply_effect(ex.sandbox, effect, SafetyLevel.LEVEL2_STAGED)
            else:
                apply_effect(
                    ex.sandbox,
                    Effect("env", "read", f"ran:{node.tool}", ""),
                    SafetyLevel.LEVEL1_READONLY,
                )
            self._check_outcome_truncation(ex, nid, outcome)

        ex.cursor += 1
        self._advance_execution(ex)
        self._rescale_running()
        self._phase4_admit()

    def _stall(self, ex: Execution) -> None:
        self._release_reservation(ex)
        if ex.status == EX_RUNNING:
            ex.status = EX_STALLED

    def _release_reservation(self, ex: Execution) -> None:
        if ex.reserved is not None and ex.ghost_until is None:
            ex.reserved = None
            self._rescale_running()

    def _squash_dead(self) -> None:
        for ex in list(self.executions):
            if ex.status in (EX_RETIRED, EX_SQUASHED) or ex.promoted:
                continue
            tail = self.stream[ex.expect_len :]
            if any(not it.signature.is_reason for it in tail):
                self._squash_execution(ex, "stale")

    def _squash_execution(self, ex: Execution, reason: str) -> None:
        self._progress_execution(ex)
        ex.token += 1
        if ex.running_node is not None:
            ex.node_state[ex.running_node] = NODE_PENDING
            ex.running_node = None
        self.wasted_ms += ex.wasted_wall_ms()
        wall = sum(ex.node_wall.values())
        solo = sum(ex.node_solo.values())
        if solo > _EPS:
            self.corun_samples.append((wall, solo))
        ex.reserved = None
        ex.ghost_until = None
        if ex.sandbox.status in (ACTIVE, PREEMPTED):
            squash(ex.sandbox)
        ex.status = EX_SQUASHED
        self.squashed_count += 1
        self._log(4, "squash", ex)
        self.executions.remove(ex)
        self._rescale_running()

    def _drain_speculation(self) -> None:
        for ex in list(self.executions):
            if ex.status in (EX_RETIRED, EX_SQUASHED):
                continue
            if ex.confirmed >= len(ex.chain):
                self._maybe_retire(ex)
                continue
            self._squash_execution(ex, "session_end")
        for ex in self.executions:
            wall = sum(ex.node_wall.values())
            solo = sum(ex.node_solo.values())
            if solo > _EPS and ex.status == EX_RETIRED:
                self.corun_samples.append((wall, solo))

    # --- accounting helpers ---------------------------------------------------

    def _live_executions(self) -> list[Execution]:
        return [ex for ex in self.executions if ex.status not in (EX_RETIRED, EX_SQUASHED)]

    def _execution(self, eid: str | None) -> Execution | None:
        for ex in self.executions:
            if ex.eid == eid:
                return ex
        return None

    def _tool_demand(self, tool: str) -> ResourceProfile:
        return self.script.spec.tools[tool].demand

    def _auth_demand(self) -> ResourceProfile:
        demands = [j.demand for j in self.auth_running]
        return total_demand(demands)

    def _spec_reserved(self, include_ghosts: bool = False) -> ResourceProfile:
        demands = []
        for ex in self.executions:
            if ex.reserved is None:
                continue
            if ex.ghost_until is not None and not include_ghosts:
                continue
            if ex.promoted:
                continue
            demands.append(ex.reserved)
        return total_demand(demands)

    def _assert_invariants(self) -> None:
        if self.beam is not None:
            assert len(self.beam.hypotheses) <= self.policy.beam_k, "beam exceeded K"
        slack = self.model.capacity - self._auth_demand()
        cap = slack.combine_min(self.policy.budget)
        assert self._spec_reserved().fits_within(cap, tol=1e-6), (
            "speculative reservations exceed min(slack, budget)"
        )

    def _log(self, phase: int, action: str, ex: Execution) -> None:
        bd = ex.breakdown
        self.decision_log.append(
            f"t={self.clock:.3f} phase={phase} action={action} branch={ex.eid} "
            f"eu={bd.eu:.3f} dO={bd.overlap_ms:.3f} dU={bd.unlock_ms:.3f} dI={bd.interference_ms:.3f}"
        )

    def _emit_trace(self, ev: TraceEvent) -> None:
        self.trace_events.append(ev)

    def _result(self, makespan: float) -> SimResult:
        return SimResult(
            mode=self.mode,
            workload_seed=self.script.workload_seed,
            session_seed=self.script.session_seed,
            script_digest=self.script.digest(),
            makespan=makespan,
            job_completions=list(self.job_completions),
            job_served=list(self.job_served),
            spec_launched=self.spec_launched,
            promoted=self.promoted_count,
            reused=self.reused_count,
            prefix_resumed=self.prefix_count,
            matches=self.match_count,
            squashed=self.squashed_count,
            wasted_spec_ms=self.wasted_ms,
            corun_samples=list(self.corun_samples),
            auth_work_ms=self.auth_work_ms,
            decision_log=list(self.decision_log),
            state_digest=self.auth_state.digest(),
            trace=AgentTrace(list(self.trace_events)),
        )


def run_simulation(
    script: SessionScript,
    library: PatternLibrary,
    policy: Policy,
    model: InterferenceModel,
    mode: str,
    check_invariants: bool = True,
) -> SimResult:
    sim = Simulator(script, library, policy, model, mode, check_invariants)
    return sim.run()
