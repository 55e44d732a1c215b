import json
from pathlib import Path

import pytest

from bpaste.configio import dump_result, load_policy, load_workload
from bpaste.mining import PatternLibrary, build_library
from bpaste.resources import ResourceProfile
from bpaste.sandbox import SafetyLevel
from bpaste.scheduler import MISS, PREFIX_RESUMED, PROMOTED, REUSED
from bpaste.sim import (
    BPASTE,
    ORACLE,
    SERIAL,
    SimulationError,
    Simulator,
    _AuthJob,
    compute_metrics,
)
from bpaste.trace import format_trace, parse_trace
from bpaste.workload import (
    ARG_RESULT,
    ArgRule,
    Distribution,
    MotifSpec,
    ToolSpec,
    WorkloadSpec,
    generate_session,
)
from conftest import profile

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

EMPTY = PatternLibrary([], {}, 0.0)


def _tool(name, args=("k",), latency=100.0, demand=None, result=(("out", "token"),), **kw):
    return ToolSpec(
        name=name,
        args=tuple(args),
        latency=Distribution("constant", latency),
        demand=demand or profile(cpu=0.2, mem=0.1, io=0.1, slots=0.5),
        result_fields=tuple(result),
        **kw,
    )


def _workload(tools, motifs, gap=300.0, length=2, noise=0.0, seed=5):
    return WorkloadSpec(
        seed=seed,
        session_length=Distribution("constant", length),
        reasoning_gap=Distribution("constant", gap),
        binding_noise=noise,
        motif_library=motifs,
        tools=tools,
    )


def _mine(spec, policy, model, seeds=range(900, 910), min_support=2, window=3):
    corpus = []
    for s in seeds:
        script = generate_session(spec, s)
        res = Simulator(script, EMPTY, policy, model, SERIAL).run()
        corpus.append(parse_trace(format_trace(res.trace)))
    return build_library(corpus, min_support, window)


def _edge_policy():
    policy, model = load_policy((CONFIGS / "edge.policy.cfg").read_text())
    return policy, model


def _locate_examine(gap=300.0, examine_latency=100.0, noise=0.0):
    tools = {
        "locate": _tool("locate", args=("name",), latency=80.0, result=(("path", "token"),)),
        "examine": _tool("examine", args=("path",), latency=examine_latency,
                         result=(("content", "token"),)),
    }
    motifs = {
        "le": MotifSpec("le", ("locate", "examine"), (1.0,), 1.0,
                        ((2, "path", ArgRule(ARG_RESULT, "path")),)),
    }
    return _workload(tools, motifs, gap=gap, noise=noise)


def test_reuse_returns_with_zero_tool_latency():
    policy, model = _edge_policy()
    spec = _locate_examine(gap=300.0, examine_latency=100.0)
    lib = _mine(spec, policy, model)
    script = generate_session(spec, 1)
    res = Simulator(script, lib, policy, model, BPASTE).run()
    # locate: 300 gap + 80 run; speculation finishes at 480 < call at 680
    assert res.job_served == [MISS, REUSED]
    assert res.job_completions == [380.0, 680.0]
    serial = Simulator(script, lib, policy, model, SERIAL).run()
    assert serial.job_completions == [380.0, 780.0]
    assert res.makespan == 680.0


def test_promotion_charges_only_remaining_corun_time():
    policy, model = _edge_policy()
    spec = _locate_examine(gap=60.0, examine_latency=100.0)
    lib = _mine(spec, policy, model)
    script = generate_session(spec, 1)
    res = Simulator(script, lib, policy, model, BPASTE).run()
    # speculation starts at the locate return (t=140), call lands at t=200
    # with 60% done; the remaining 40 ms completes authoritatively.
    assert res.job_served == [MISS, PROMOTED]
    assert res.job_completions == [140.0, 240.0]
    serial = Simulator(script, lib, policy, model, SERIAL).run()
    assert serial.job_completions[1] == 300.0


def test_prefix_resume_reuses_warmup_from_sandbox():
    policy, model = _edge_policy()
    tools = {
        "locate": _tool("locate", args=("name",), latency=80.0, result=(("path", "token"),)),
        "probe": _tool("probe", args=("path",), latency=120.0, warmup_ms=100.0),
    }
    motifs = {"lp": MotifSpec("lp", ("locate", "probe"), (1.0,))}  # probe args fresh
    spec = _workload(tools, motifs, gap=250.0)
    lib = _mine(spec, policy, model)
    script = generate_session(spec, 1)
    res = Simulator(script, lib, policy, model, BPASTE).run()
    serial = Simulator(script, lib, policy, model, SERIAL).run()
    # prep warmed the session speculatively; the call still runs the tool
    # authoritatively but skips the 100 ms warm-up the serial twin pays.
    assert res.job_served == [MISS, PREFIX_RESUMED]
    assert serial.job_completions[1] - res.job_completions[1] == pytest.approx(100.0)
    assert res.prefix_resumed == 1 and res.matches == 1


def test_staged_write_commits_only_at_reuse():
    policy, model = _edge_policy()
    tools = {
        "locate": _tool("locate", args=("name",), latency=80.0,
                        result=(("path", "token"), ("content", "token"))),
        "edit": _tool("edit", args=("path", "content"), latency=100.0,
                      safety=SafetyLevel.LEVEL2_STAGED,
                      result=(("file", "echo.path"),),
                      effect=("files.set", "path", "content")),
    }
    motifs = {
        "le": MotifSpec("le", ("locate", "edit"), (1.0,), 1.0,
                        ((2, "path", ArgRule(ARG_RESULT, "path")),
                         (2, "content", ArgRule(ARG_RESULT, "content")),)),
    }
    spec = _workload(tools, motifs, gap=300.0)
    lib = _mine(spec, policy, model)
    script = generate_session(spec, 1)
    res = Simulator(script, lib, policy, model, BPASTE).run()
    serial = Simulator(script, lib, policy, model, SERIAL).run()
    assert res.job_served == [MISS, REUSED]
    assert res.job_completions[1] < serial.job_completions[1]
    # externally visible state is identical to the serial run
    assert res.state_digest == serial.state_digest


def test_mispredicted_branch_wall_time_counts_as_waste():
    policy, model = _edge_policy()
    tools = {
        "A": _tool("A", args=("k",), latency=100.0),
        "B": _tool("B", args=("k",), latency=500.0),
        "C": _tool("C", args=("k",), latency=20.0),
    }
    motifs = {
        "ab": MotifSpec("ab", ("A", "B"), (1.0,), 9.0,
                        ((2, "k", ArgRule(ARG_RESULT, "out")),)),
        "ac": MotifSpec("ac", ("A", "C"), (1.0,), 1.0,
                        ((2, "k", ArgRule(ARG_RESULT, "out")),)),
    }
    spec = _workload(tools, motifs, gap=10.0)
    lib = _mine(spec, policy, model, seeds=range(900, 940))
    seed = next(
        s for s in range(200)
        if [c.tool for c in generate_session(spec, s).calls] == ["A", "C"]
    )
    script = generate_session(spec, seed)
    res = Simulator(script, lib, policy, model, BPASTE).run()
    # branch B ran from A's return until C's return: 10 gap + 20 run = 30 ms
    assert res.job_served == [MISS, MISS]
    assert res.wasted_spec_ms == pytest.approx(30.0)
    assert res.squashed >= 1


def test_contention_preempts_speculation_without_harming_authoritative():
    policy, model = _edge_policy()
    # speculation may reserve up to the full budget; the big authoritative
    # call then needs its share back immediately
    big = profile(cpu=0.75, mem=0.2, io=0.1, slots=0.5)
    policy = type(policy)(
        beam_k=policy.beam_k,
        budget=profile(cpu=0.9, mem=0.9, io=0.9, slots=1.8),
        lam=policy.lam, mu=policy.mu, horizon_h=1, fanout_limit=3,
        max_safety=policy.max_safety, preempt_cost_eps=0.0,
        binding_threshold=0.8, gap_fallback_ms=200.0, latency_fallback_ms=120.0,
    )
    tools = {
        "A": _tool("A", args=("k",), latency=100.0),
        "B": _tool("B", args=("k",), latency=2000.0, demand=big),
        "C": _tool("C", args=("k",), latency=150.0, demand=big),
    }
    motifs = {
        "ab": MotifSpec("ab", ("A", "B"), (1.0,), 9.0,
                        ((2, "k", ArgRule(ARG_RESULT, "out")),)),
        "ac": MotifSpec("ac", ("A", "C"), (1.0,), 1.0,
                        ((2, "k", ArgRule(ARG_RESULT, "out")),)),
    }
    spec = _workload(tools, motifs, gap=50.0)
    lib = _mine(spec, policy, model, seeds=range(900, 940))
    seed = next(
        s for s in range(200)
        if [c.tool for c in generate_session(spec, s).calls] == ["A", "C"]
    )
    script = generate_session(spec, seed)
    res = Simulator(script, lib, policy, model, BPASTE).run()
    serial = Simulator(script, lib, policy, model, SERIAL).run()
    assert any("action=preempt" in line for line in res.decision_log)
    # with zero preemption cost the authoritative job is not delayed
    assert res.job_completions[1] == serial.job_completions[1]


def test_preemption_log_eu_is_nondecreasing_per_event():
    # preemption order within one protection pass never decreases in eu
    policy, model = _edge_policy()
    spec = _locate_examine()
    lib = _mine(spec, policy, model)
    script = generate_session(spec, 1)
    res = Simulator(script, lib, policy, model, BPASTE).run()
    by_time: dict[str, list[float]] = {}
    for line in res.decision_log:
        if "action=preempt" in line:
            fields = dict(tok.split("=") for tok in line.split())
            by_time.setdefault(fields["t"], []).append(float(fields["eu"]))
    for values in by_time.values():
        assert values == sorted(values)


def test_promoted_execution_is_never_preempted():
    policy, model = _edge_policy()
    spec = _locate_examine()
    lib = _mine(spec, policy, model)
    script = generate_session(spec, 1)
    sim = Simulator(script, lib, policy, model, BPASTE)

    from bpaste.scheduler import Admission
    from bpaste.utility import UtilityBreakdown

    # build two executions by hand: one promoted, one speculative
    from conftest import chain_hypothesis, make_node

    def mk_exec(tag, promoted):
        h = chain_hypothesis(
            [make_node(f"{tag}n", tool="examine", latency=100, rho=profile(cpu=0.3, slots=0.5),
                       arg_shape=("path",), resolved={"path": tag})],
            q=0.9, hid=tag)
        adm = Admission(h, h, UtilityBreakdown(0.9, 100, 0, 0, 1, 1))
        sim._launch(adm)
        ex = sim.executions[-1]
        ex.promoted = promoted
        return ex

    promoted = mk_exec("p", True)
    speculative = mk_exec("s", False)
    sim.auth_queue.append(
        _AuthJob(0, "locate", {"name": "x"}, profile(cpu=0.9, slots=0.5), 0.0)
    )
    sim._phase2_protect()
    assert speculative.status == "preempted"
    assert promoted.status != "preempted"


def test_two_authoritative_jobs_fifo_on_one_slot():
    policy, model = _edge_policy()
    spec = _locate_examine()
    script = generate_session(spec, 1)
    sim = Simulator(script, EMPTY, policy, model, SERIAL)
    slot = profile(cpu=0.2, slots=2.0)  # saturates the slots dimension
    first = _AuthJob(0, "locate", {"name": "a"}, slot, 0.0)
    second = _AuthJob(1, "examine", {"path": "b"}, slot, 0.0)
    sim.auth_queue = [first, second]
    sim._phase3_run_authoritative()
    assert sim.auth_running == [first]
    assert sim.auth_queue == [second]


def test_zero_budget_matches_serial_exactly():
    policy, model = _edge_policy()
    zero = type(policy)(
        beam_k=policy.beam_k, budget=ResourceProfile.zero(), lam=1.0, mu=1.0,
        horizon_h=2, fanout_limit=3, max_safety=policy.max_safety,
        preempt_cost_eps=0.0, binding_threshold=0.8,
        gap_fallback_ms=200.0, latency_fallback_ms=120.0,
    )
    wl = load_workload((CONFIGS / "highreg.workload.cfg").read_text())
    lib = _mine(wl, policy, model, seeds=range(900, 905))
    for seed in range(8):
        script = generate_session(wl, seed)
        serial = Simulator(script, lib, zero, model, SERIAL).run()
        spec_run = Simulator(script, lib, zero, model, BPASTE).run()
        assert spec_run.makespan == serial.makespan
        assert spec_run.spec_launched == 0


def test_oracle_three_step_chain_closed_form():
    wl = load_workload((CONFIGS / "chain3.workload.cfg").read_text())
    policy, model = load_policy((CONFIGS / "abundant.policy.cfg").read_text())
    script = generate_session(wl, 42)
    serial = Simulator(script, EMPTY, policy, model, SERIAL).run()
    oracle = Simulator(script, EMPTY, policy, model, ORACLE).run()
    # serial: 3 * (200 + 100); oracle hides both later tools fully:
    # 900 - 2 * min(100, 200 + 100)
    assert serial.makespan == 900.0
    assert oracle.makespan == 700.0


def test_conservation_no_job_both_reused_and_rerun():
    policy, model = _edge_policy()
    wl = load_workload((CONFIGS / "highreg.workload.cfg").read_text())
    lib = _mine(wl, policy, model, seeds=range(900, 910))
    for seed in range(6):
        script = generate_session(wl, seed)
        serial = Simulator(script, lib, policy, model, SERIAL).run()
        res = Simulator(script, lib, policy, model, BPASTE).run()
        assert all(s in (MISS, REUSED, PROMOTED, PREFIX_RESUMED) for s in res.job_served)
        reused_work = sum(
            c.latency_ms for c, s in zip(script.calls, res.job_served) if s == REUSED
        )
        # authoritative execution shrank by at least the fully reused work
        assert serial.auth_work_ms >= res.auth_work_ms
        assert serial.auth_work_ms - res.auth_work_ms >= reused_work - 1e-6
        # externally visible state identical
        assert res.state_digest == serial.state_digest


def test_repeat_run_byte_identical():
    policy, model = _edge_policy()
    wl = load_workload((CONFIGS / "highreg.workload.cfg").read_text())
    lib = _mine(wl, policy, model, seeds=range(900, 905))
    script = generate_session(wl, 7)
    a = dump_result(Simulator(script, lib, policy, model, BPASTE).run())
    b = dump_result(Simulator(script, lib, policy, model, BPASTE).run())
    assert a == b
    payload = json.loads(a)
    assert payload["mode"] == BPASTE


def test_compute_metrics_rejects_mismatched_sessions():
    policy, model = _edge_policy()
    spec = _locate_examine()
    r1 = Simulator(generate_session(spec, 1), EMPTY, policy, model, SERIAL).run()
    r2 = Simulator(generate_session(spec, 2), EMPTY, policy, model, SERIAL).run()
    with pytest.raises(SimulationError):
        compute_metrics(r1, r2)


def test_metrics_with_zero_admissions():
    policy, model = _edge_policy()
    spec = _locate_examine()
    script = generate_session(spec, 1)
    serial = Simulator(script, EMPTY, policy, model, SERIAL).run()
    res = Simulator(script, EMPTY, policy, model, BPASTE).run()  # no patterns
    m = compute_metrics(res, serial)
    assert m.promotion_rate == 0.0
    assert m.wasted_spec_ms == 0.0
    assert m.speedup_vs_serial == pytest.approx(1.0)


def test_tool_demand_must_fit_capacity():
    policy, model = _edge_policy()
    tools = {"huge": _tool("huge", demand=profile(cpu=2.0))}
    motifs = {"m": MotifSpec("m", ("huge",), ())}
    spec = _workload(tools, motifs, length=1)
    with pytest.raises(SimulationError, match="huge"):
        Simulator(generate_session(spec, 1), EMPTY, policy, model, SERIAL)
