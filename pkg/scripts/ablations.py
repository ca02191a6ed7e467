"""Run the stage, assignment and transformer ablations with timings.

    python scripts/ablations.py --n-instances 20
"""
import argparse
import json
import sys

from pose_match import harness
from pose_match import network as nn
from pose_match.synth import SuiteConfig


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-instances", type=int, default=100)
    ap.add_argument("--n-points", type=int, default=4096)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--parts", nargs="+", default=["stages", "assignment", "transformer"],
                    choices=["stages", "assignment", "transformer"])
    args = ap.parse_args()

    cfg = harness.StudyConfig(SuiteConfig(n_instances=args.n_instances, n_points=args.n_points,
                                          seed=args.seed))
    rows = harness.run_study(cfg, args.parts,
                             progress=lambda i, row: print(f"{i + 1}/{args.n_instances}", file=sys.stderr))
    report = {part: harness.summarize(rows, part) for part in args.parts}

    weights = nn.init_weights(cfg.weights_seed)
    inst = harness.suite_instance(cfg.suite, 0)
    if "assignment" in args.parts:
        a = harness.fine_attention_matrix(inst, weights, cfg.pipeline)
        report["assignment"]["timing"] = harness.assignment_timing(a, cfg.pipeline)
    if "transformer" in args.parts:
        report["transformer"]["timing"] = harness.transformer_timing(inst, weights, cfg.pipeline, repeats=3)
    print(json.dumps(report, indent=2, sort_keys=True, default=float))


if __name__ == "__main__":
    main()
