#!/usr/bin/env python3
"""End-to-end edge experiment: mine patterns from a training split, then
sweep the speculative scheduler against its serial twin on held-out seeds.

Usage: python scripts/run_edge_experiment.py [out_dir]
"""

import sys
from pathlib import Path

from bpaste.cli import main

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"


def run(out_dir: Path) -> int:
    workload = str(CONFIGS / "highreg.workload.cfg")
    policy = str(CONFIGS / "edge.policy.cfg")
    corpus = out_dir / "corpus"
    patterns = out_dir / "patterns.out"

    steps = [
        ["sweep", "--workload", workload, "--policy", policy, "--mode", "serial",
         "--seeds", "20", "--seed-base", "1000",
         "--emit-trace-dir", str(corpus), "-o", str(out_dir / "train")],
        ["mine", str(corpus), "-o", str(patterns), "--min-support", "3", "--window", "4"],
        ["sweep", "--workload", workload, "--policy", policy, "--mode", "bpaste",
         "--patterns", str(patterns), "--seeds", "100", "--seed-base", "0",
         "--jobs", "4", "-o", str(out_dir / "edge_bpaste")],
        ["compare", "--workload", workload, "--policy", policy,
         "--patterns", str(patterns), "--seed", "7",
         "-o", str(out_dir / "compare_seed7.txt")],
    ]
    for argv in steps:
        code = main(argv)
        if code != 0:
            return code
    return 0


if __name__ == "__main__":
    target = Path(sys.argv[1]) if len(sys.argv) > 1 else ROOT / "out" / "edge"
    target.mkdir(parents=True, exist_ok=True)
    sys.exit(run(target))
