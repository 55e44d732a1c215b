#!/usr/bin/env python3
"""Oracle-mode upper bounds: abundant-slack sweep on the high-regularity
workload, plus the hand-checkable three-step chain timeline.

Usage: python scripts/run_oracle_bound.py [out_dir]
"""

import sys
from pathlib import Path

from bpaste.cli import main

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"


def run(out_dir: Path) -> int:
    steps = [
        ["sweep", "--workload", str(CONFIGS / "highreg.workload.cfg"),
         "--policy", str(CONFIGS / "abundant.policy.cfg"), "--mode", "oracle",
         "--seeds", "100", "--seed-base", "0", "--jobs", "4",
         "-o", str(out_dir / "oracle_abundant")],
        ["simulate", "--workload", str(CONFIGS / "chain3.workload.cfg"),
         "--policy", str(CONFIGS / "abundant.policy.cfg"), "--mode", "oracle",
         "--seed", "42", "-o", str(out_dir / "chain3_oracle.json")],
        ["simulate", "--workload", str(CONFIGS / "chain3.workload.cfg"),
         "--policy", str(CONFIGS / "abundant.policy.cfg"), "--mode", "serial",
         "--seed", "42", "-o", str(out_dir / "chain3_serial.json")],
    ]
    for argv in steps:
        code = main(argv)
        if code != 0:
            return code
    return 0


if __name__ == "__main__":
    target = Path(sys.argv[1]) if len(sys.argv) > 1 else ROOT / "out" / "oracle"
    target.mkdir(parents=True, exist_ok=True)
    sys.exit(run(target))
