"""Run the default synthetic suite and print pose recall and timing.

    python scripts/run_suite.py --n-instances 100 --out results/bench.json
"""
import argparse
import json
import sys
import time
from pathlib import Path

from pose_match import harness
from pose_match.cli import dumps
from pose_match.synth import SuiteConfig


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-instances", type=int, default=100)
    ap.add_argument("--n-points", type=int, default=4096)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    cfg = harness.StudyConfig(SuiteConfig(n_instances=args.n_instances, n_points=args.n_points,
                                          seed=args.seed))
    t0 = time.perf_counter()
    rows = harness.run_study(cfg, ("bench",),
                             progress=lambda i, row: print(f"{i + 1}/{args.n_instances}", file=sys.stderr))
    elapsed = time.perf_counter() - t0
    agg = harness.summarize(rows, "bench")
    print(json.dumps({"pose_recall": agg["pose_recall"], "mean_add": agg["mean_add"],
                      "mean_recovery": agg["mean_recovery"], "seconds": round(elapsed, 1)}, indent=2))
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(dumps(harness.results_document("synth-bench", cfg, rows, agg)))


if __name__ == "__main__":
    main()
