"""Command-line harness: mine, simulate, sweep, compare.

Typical closed loop:

    bpaste sweep --workload w.cfg --policy p.cfg --mode serial \
        --seeds 20 --seed-base 1000 --emit-trace-dir corpus/ -o out/
    bpaste mine corpus/ -o patterns.out --min-support 3 --window 4
    bpaste simulate --workload w.cfg --policy p.cfg --patterns patterns.out \
        --mode bpaste --seed 1 -o result.json
    bpaste compare --workload w.cfg --policy p.cfg --patterns patterns.out --seed 1

All outputs are byte-stable for identical inputs, including parallel sweeps.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .configio import ConfigError, dump_result, load_policy, load_workload
from .mining import PatternLibrary, build_library, dump_library, load_library
from .sim import BPASTE, MODES, SERIAL, Metrics, Simulator, compute_metrics
from .trace import TraceError, format_trace, parse_trace
from .workload import generate_session


def _read(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None


def _load_inputs(args: argparse.Namespace):
    workload = load_workload(_read(args.workload))
    policy, model = load_policy(_read(args.policy))
    if getattr(args, "patterns", None):
        library = load_library(_read(args.patterns))
    else:
        library = PatternLibrary([], {}, 0.0)
    return workload, policy, model, library


def _run_one(workload, policy, model, library, mode: str, seed: int):
    script = generate_session(workload, seed)
    serial = Simulator(script, library, policy, model, SERIAL).run()
    if mode == SERIAL:
        return serial, serial, compute_metrics(serial, serial)
    result = Simulator(script, library, policy, model, mode).run()
    return result, serial, compute_metrics(result, serial)


def cmd_mine(args: argparse.Namespace) -> int:
    corpus_dir = Path(args.corpus_dir)
    if not corpus_dir.is_dir():
        raise ConfigError(f"corpus directory not found: {corpus_dir}")
    paths = sorted(corpus_dir.glob("*.trace"))
    if not paths:
        raise ConfigError(f"no .trace files in {corpus_dir}")
    corpus = [parse_trace(p.read_text(encoding="utf-8")) for p in paths]
    library = build_library(corpus, args.min_support, args.window, args.binding_threshold)
    Path(args.output).write_text(dump_library(library), encoding="utf-8")
    print(f"mined {len(library.patterns)} patterns from {len(corpus)} traces -> {args.output}")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    workload, policy, model, library = _load_inputs(args)
    result, serial, metrics = _run_one(workload, policy, model, library, args.mode, args.seed)
    payload = dump_result(result, metrics)
    if args.output:
        Path(args.output).write_text(payload, encoding="utf-8")
    else:
        sys.stdout.write(payload)
    if args.emit_trace:
        if result.trace is None:
            raise ConfigError("no trace captured for this run")
        Path(args.emit_trace).write_text(format_trace(result.trace), encoding="utf-8")
    print(
        f"mode={args.mode} seed={args.seed} makespan={result.makespan:.3f} "
        f"speedup={metrics.speedup_vs_serial:.4f}"
    )
    return 0


def _aggregate_lines(args, rows: list[tuple[int, Metrics]]) -> str:
    speedups = sorted(m.speedup_vs_serial for _, m in rows)
    makespans = sorted(m.makespan for _, m in rows)
    n = len(speedups)
    p95 = lambda xs: xs[min(n - 1, int(0.95 * (n - 1)))]  # noqa: E731
    mean = lambda xs: sum(xs) / len(xs)  # noqa: E731
    lines = [
        f"# sweep mode={args.mode} seeds={args.seeds} base={args.seed_base}",
        f"seeds={n}",
        f"mean_speedup={mean([m.speedup_vs_serial for _, m in rows]):.6f}",
        f"min_speedup={speedups[0]:.6f}",
        f"p95_speedup={p95(speedups):.6f}",
        f"mean_makespan_ms={mean([m.makespan for _, m in rows]):.6f}",
        f"p95_makespan_ms={p95(makespans):.6f}",
        f"mean_serial_makespan_ms={mean([m.serial_makespan for _, m in rows]):.6f}",
        f"qos_violations_total={sum(m.auth_qos_violations for _, m in rows)}",
        f"mean_promotion_rate={mean([m.promotion_rate for _, m in rows]):.6f}",
        f"mean_prefix_reuse_rate={mean([m.prefix_reuse_rate for _, m in rows]):.6f}",
        f"mean_wasted_spec_ms={mean([m.wasted_spec_ms for _, m in rows]):.6f}",
        f"mean_corun_slowdown={mean([m.corun_slowdown for _, m in rows]):.6f}",
    ]
    return "".join(line + "\n" for line in lines)


def cmd_sweep(args: argparse.Namespace) -> int:
    workload, policy, model, library = _load_inputs(args)
    seeds = list(range(args.seed_base, args.seed_base + args.seeds))

    def job(seed: int):
        return seed, _run_one(workload, policy, model, library, args.mode, seed)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(job, seeds))
    else:
        outcomes = [job(s) for s in seeds]

    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[tuple[int, Metrics]] = []
    for seed, (result, serial, metrics) in outcomes:
        rows.append((seed, metrics))
        if args.per_seed:
            (out_dir / f"result_{seed}.json").write_text(
                dump_result(result, metrics), encoding="utf-8"
            )
        if args.emit_trace_dir:
            trace_dir = Path(args.emit_trace_dir)
            trace_dir.mkdir(parents=True, exist_ok=True)
            assert serial.trace is not None
            (trace_dir / f"trace_{seed}.trace").write_text(
                format_trace(serial.trace), encoding="utf-8"
            )
    table = _aggregate_lines(args, rows)
    (out_dir / "aggregate.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    workload, policy, model, library = _load_inputs(args)
    result, serial, metrics = _run_one(workload, policy, model, library, BPASTE, args.seed)
    lines = [
        f"# compare seed={args.seed}",
        f"serial_makespan_ms={serial.makespan:.3f}",
        f"bpaste_makespan_ms={result.makespan:.3f}",
        f"speedup={metrics.speedup_vs_serial:.4f}",
        f"qos_violations={metrics.auth_qos_violations}",
        f"promotion_rate={metrics.promotion_rate:.4f}",
        f"prefix_reuse_rate={metrics.prefix_reuse_rate:.4f}",
        f"wasted_spec_ms={metrics.wasted_spec_ms:.3f}",
        "job tool serial_ms bpaste_ms served",
    ]
    for i, call in enumerate(generate_session(workload, args.seed).calls):
        lines.append(
            f"{i} {call.tool} {serial.job_completions[i]:.1f} "
            f"{result.job_completions[i]:.1f} {result.job_served[i]}"
        )
    text = "".join(line + "\n" for line in lines)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bpaste", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_mine = sub.add_parser("mine", help="mine a pattern library from trace files")
    p_mine.add_argument("corpus_dir")
    p_mine.add_argument("-o", "--output", required=True)
    p_mine.add_argument("--min-support", type=int, default=2)
    p_mine.add_argument("--window", type=int, default=4)
    p_mine.add_argument("--binding-threshold", type=float, default=0.8)
    p_mine.set_defaults(func=cmd_mine)

    p_sim = sub.add_parser("simulate", help="run one seeded simulation")
    p_sim.add_argument("--workload", required=True)
    p_sim.add_argument("--policy", required=True)
    p_sim.add_argument("--patterns")
    p_sim.add_argument("--mode", choices=MODES, required=True)
    p_sim.add_argument("--seed", type=int, required=True)
    p_sim.add_argument("-o", "--output")
    p_sim.add_argument("--emit-trace")
    p_sim.set_defaults(func=cmd_simulate)

    p_sweep = sub.add_parser("sweep", help="multi-seed batch with aggregate table")
    p_sweep.add_argument("--workload", required=True)
    p_sweep.add_argument("--policy", required=True)
    p_sweep.add_argument("--patterns")
    p_sweep.add_argument("--mode", choices=MODES, required=True)
    p_sweep.add_argument("--seeds", type=int, required=True)
    p_sweep.add_argument("--seed-base", type=int, default=0)
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.add_argument("--per-seed", action="store_true")
    p_sweep.add_argument("--emit-trace-dir")
    p_sweep.add_argument("-o", "--output", required=True)
    p_sweep.set_defaults(func=cmd_sweep)

    p_cmp = sub.add_parser("compare", help="paired serial/bpaste diff for one seed")
    p_cmp.add_argument("--workload", required=True)
    p_cmp.add_argument("--policy", required=True)
    p_cmp.add_argument("--patterns")
    p_cmp.add_argument("--seed", type=int, required=True)
    p_cmp.add_argument("-o", "--output")
    p_cmp.set_defaults(func=cmd_compare)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TraceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
