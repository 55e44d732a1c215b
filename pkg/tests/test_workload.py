import pytest

from bpaste.workload import (
    ARG_RESULT,
    ArgRule,
    Distribution,
    MotifSpec,
    ToolSpec,
    WorkloadError,
    WorkloadSpec,
    generate_session,
)
from conftest import profile


def _tool(name, args=("k",), latency=100.0, **kw):
    return ToolSpec(
        name=name,
        args=tuple(args),
        latency=Distribution("constant", latency),
        demand=profile(cpu=0.2, slots=0.5),
        result_fields=(("out", "token"),),
        **kw,
    )


def _spec(motifs=None, tools=None, **kw):
    tools = tools or {"a": _tool("a"), "b": _tool("b")}
    motifs = motifs or {
        "ab": MotifSpec("ab", ("a", "b"), (0.8,), 1.0,
                        ((2, "k", ArgRule(ARG_RESULT, "out")),))
    }
    defaults = dict(
        seed=5,
        session_length=Distribution("constant", 6),
        reasoning_gap=Distribution("constant", 150),
        binding_noise=0.0,
        motif_library=motifs,
        tools=tools,
    )
    defaults.update(kw)
    return WorkloadSpec(**defaults)


def test_same_seed_same_session():
    spec = _spec()
    a = generate_session(spec, 42)
    b = generate_session(spec, 42)
    assert a.digest() == b.digest()
    assert [c.args for c in a.calls] == [c.args for c in b.calls]


def test_different_seeds_differ():
    spec = _spec()
    assert generate_session(spec, 1).digest() != generate_session(spec, 2).digest()


def test_validation_names_offending_field():
    with pytest.raises(WorkloadError, match="motif_library.ab.cont"):
        _spec(motifs={"ab": MotifSpec("ab", ("a", "b"), (1.5,))}).validate()
    with pytest.raises(WorkloadError, match="binding_noise"):
        _spec(binding_noise=1.5).validate()
    with pytest.raises(WorkloadError, match="unknown tool"):
        _spec(motifs={"ab": MotifSpec("ab", ("a", "zz"), (0.5,))}).validate()
    bad_tool = _tool("a", outcomes=(("success", 0.5), ("failure", 0.4)))
    with pytest.raises(WorkloadError, match="tool.a.outcomes"):
        _spec(tools={"a": bad_tool, "b": _tool("b")}).validate()


def test_branching_probabilities_sum_to_one_by_construction():
    # continuation p and exit 1-p; validation only needs p in [0, 1]
    spec = _spec(motifs={"ab": MotifSpec("ab", ("a", "b"), (0.8,))})
    spec.validate()


def test_empirical_transition_frequency():
    spec = _spec(session_length=Distribution("constant", 12))
    follows = total = 0
    for seed in range(800):
        calls = generate_session(spec, seed).calls
        for i, call in enumerate(calls[:-1]):
            if call.tool == "a":
                total += 1
                follows += calls[i + 1].tool == "b"
    assert total > 2000
    assert follows / total == pytest.approx(0.8, abs=0.02)


def test_latency_outcome_result_are_pure_in_args():
    spec = _spec()
    s1 = generate_session(spec, 9)
    s2 = generate_session(spec, 9)
    args = {"k": "whatever"}
    assert s1.latency_for("a", args) == s2.latency_for("a", args)
    assert s1.result_for("a", args) == s2.result_for("a", args)
    assert s1.outcome_for("a", args) == s2.outcome_for("a", args)
    # and the planned calls carry exactly the model's values
    for c in s1.calls:
        assert c.latency_ms == s1.latency_for(c.tool, c.args)
        assert c.result == s1.result_for(c.tool, c.args)


def test_derived_arguments_follow_rules_without_noise():
    spec = _spec()
    found = 0
    for seed in range(40):
        calls = generate_session(spec, seed).calls
        for i in range(1, len(calls)):
            if calls[i].tool == "b" and calls[i - 1].tool == "a":
                assert calls[i].args["k"] == calls[i - 1].result["out"]
                found += 1
    assert found > 20


def test_binding_noise_makes_arguments_fresh():
    spec = _spec(binding_noise=1.0)
    for seed in range(10):
        calls = generate_session(spec, seed).calls
        for i in range(1, len(calls)):
            if calls[i].tool == "b" and calls[i - 1].tool == "a":
                assert calls[i].args["k"] != calls[i - 1].result["out"]


def test_empty_outcome_empties_result():
    tool = _tool("a", outcomes=(("empty", 1.0),))
    spec = _spec(tools={"a": tool, "b": _tool("b")},
                 motifs={"ab": MotifSpec("ab", ("a", "b"), (0.5,))})
    s = generate_session(spec, 3)
    for c in s.calls:
        if c.tool == "a":
            assert c.outcome == "empty" and c.result == {}


def test_session_length_honored():
    spec = _spec(session_length=Distribution("constant", 9))
    assert len(generate_session(spec, 4).calls) == 9


def test_distribution_decode_validation():
    assert Distribution.decode("constant(5)").sample(0.3, 0.7) == 5.0
    d = Distribution.decode("uniform(10,20)")
    assert 10 <= d.sample(0.5, 0.0) <= 20
    with pytest.raises(WorkloadError):
        Distribution.decode("gaussian(1,2)")
    with pytest.raises(WorkloadError):
        Distribution.decode("uniform(1)")
    with pytest.raises(WorkloadError):
        Distribution.decode("nonsense")


def test_lognormal_sampling_positive():
    d = Distribution("lognormal", 5.0, 0.4)
    for u in (0.01, 0.5, 0.99):
        assert d.sample(u, 0.3) > 0
