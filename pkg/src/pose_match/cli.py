"""Command-line entry point: ``pose-match <command> [flags]``.

Each command writes one JSON document ``{config, seeds, per_instance,
aggregates}`` to stdout (or ``--out``). Equal flags give byte-identical
output; wall-clock timings appear only with ``--timing`` and go in a separate
``timing`` key. Failures print ``{"error": ..., "message": ...}`` and exit 1.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import harness
from .datafiles import load_instance, load_score_scene, make_score_scene, save_instance, save_score_scene
from .errors import PoseMatchError
from .losses import gradcheck
from .network import ModelConfig, init_or_load_weights
from .pipeline import PipelineConfig, estimate_pose
from .scoring import filter_proposals, score_proposal
from .synth import FAMILIES, SuiteConfig, aggregate_report, evaluate_pose, make_instance


def _clean(obj):
    """JSON-safe copy: numpy scalars and arrays to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def dumps(doc) -> str:
    return json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n"


def _emit(doc, out: Optional[str]) -> None:
    text = dumps(doc)
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _document(command: str, config: dict, seeds: dict, per_instance, aggregates) -> dict:
    return {"config": {"command": command, **config}, "seeds": seeds,
            "per_instance": per_instance, "aggregates": aggregates}


# ---------------------------------------------------------------------------
# commands


def _pipeline_config(args) -> PipelineConfig:
    return PipelineConfig(seed=args.pipeline_seed, transformer=args.transformer,
                          assignment=args.assignment, stages=args.stages,
                          n_fine=args.n_fine, n_coarse=args.n_coarse)


def _study_config(args) -> harness.StudyConfig:
    suite = SuiteConfig(n_instances=args.n_instances, n_points=args.n_points, seed=args.seed,
                        occlusion=args.occlusion, noise=args.noise, outliers=args.outliers,
                        corruption=args.corruption)
    return harness.StudyConfig(suite=suite, pipeline=_pipeline_config(args), weights_seed=args.weights_seed)


def _progress(args):
    if not getattr(args, "verbose", False):
        return None
    return lambda i, row: print(f"instance {i} done", file=sys.stderr, flush=True)


def cmd_study(args, part: str) -> dict:
    cfg = _study_config(args)
    weights = init_or_load_weights(args.weights, ModelConfig()) if args.weights else None
    rows = harness.run_study(cfg, (part,), weights=weights, progress=_progress(args))
    per_instance = [{"seed": r["seed"], "family": r["family"], **({part: r[part]})} for r in rows]
    extra = {"weights": args.weights}
    if weights is not None:
        extra["model"] = weights.config.to_dict()
    doc = harness.results_document(args.command, cfg, per_instance, harness.summarize(rows, part), extra)
    if getattr(args, "timing", False):
        weights = weights or init_or_load_weights(args.weights_seed)
        inst = harness.suite_instance(cfg.suite, 0)
        if part == "assignment":
            a = harness.fine_attention_matrix(inst, weights, cfg.pipeline)
            doc["timing"] = harness.assignment_timing(a, cfg.pipeline)
        elif part == "transformer":
            doc["timing"] = harness.transformer_timing(inst, weights, cfg.pipeline)
    return doc


def cmd_score(args) -> dict:
    scene = load_score_scene(args.input)
    rows = []
    for rec in scene.proposals:
        score_proposal(rec, scene.bank, scene.model, scene.camera, args.top_k, args.delta_vis)
        rows.append(rec.to_dict())
    kept = filter_proposals(scene.proposals, args.delta_m)
    config = {"input": str(args.input), "top_k": args.top_k, "delta_vis": args.delta_vis,
              "delta_m": args.delta_m}
    return _document("score", config, {}, rows, {"kept": kept, "n_proposals": len(rows)})


def cmd_estimate(args) -> dict:
    cfg = _pipeline_config(args)
    weights = init_or_load_weights(args.weights or args.weights_seed, ModelConfig())
    rows = []
    for path in args.inputs:
        inst = load_instance(path)
        try:
            est = estimate_pose(inst.proposal, inst.model, inst.info, weights, cfg)
        except PoseMatchError as exc:
            rows.append({"input": str(path), "error": exc.code, "message": str(exc)})
            continue
        row = {"input": str(path), **est.to_dict()}
        if inst.gt_pose is not None:
            sym = inst.meta.get("family") == "sphere-cap-union"
            row["eval"] = evaluate_pose(est.pose, inst.gt_pose, inst.model, sym, inst.info.radius)
        rows.append(row)
    evals = [r["eval"] for r in rows if "eval" in r]
    agg = {"n": len(rows), "failures": sum("error" in r for r in rows)}
    if evals:
        agg["eval"] = aggregate_report(evals)
    config = {"pipeline": cfg.to_dict(), "model": weights.config.to_dict(), "weights": args.weights,
              "weights_seed": args.weights_seed}
    return _document("estimate", config, {"pipeline": cfg.seed, "weights": args.weights_seed}, rows, agg)


def cmd_gradcheck(args) -> dict:
    rep = gradcheck(args.n_instances, args.seed, (args.n_m, args.n_o), args.h)
    rows = [{"index": i, "max_rel_err": e} for i, e in enumerate(rep["per_instance_max_rel_err"])]
    agg = {"max_rel_err": rep["max_rel_err"], "tolerance": args.tolerance,
           "passed": rep["max_rel_err"] < args.tolerance}
    print(f"max relative error {rep['max_rel_err']:.3e}", file=sys.stderr)
    config = {"n_instances": args.n_instances, "shape": [args.n_m, args.n_o], "h": args.h}
    return _document("gradcheck", config, {"gradcheck": args.seed}, rows, agg)


def cmd_train_toy(args) -> dict:
    weights = init_or_load_weights(args.weights or args.seed, ModelConfig())
    rep, updated = harness.train_toy(args.seed, args.steps, args.lr, args.n_points, weights)
    if args.save_weights:
        updated.save(args.save_weights)
    agg = {"initial_loss": rep["initial_loss"], "final_loss": rep["final_loss"],
           "improved": rep["final_loss"] < rep["initial_loss"]}
    config = {"steps": args.steps, "lr": args.lr, "n_points": args.n_points, "weights": args.weights}
    return _document("train-toy", config, {"instance": args.seed, "weights": args.seed}, [rep], agg)


def cmd_synth_instance(args) -> dict:
    inst = make_instance(args.seed, args.family, args.n_points, args.occlusion, args.noise,
                         args.outliers, args.corruption)
    save_instance(args.output, inst)
    row = {"path": str(args.output), "n_model": len(inst.model), "n_proposal": len(inst.proposal),
           "n_inliers": inst.n_inliers, "gt_pose": inst.gt_pose.to_dict(), "radius": inst.info.radius}
    return _document("synth-instance", inst.params, {"instance": args.seed}, [row], {})


def cmd_synth_scene(args) -> dict:
    scene = make_score_scene(args.seed, args.n_templates, args.n_proposals)
    save_score_scene(args.output, scene)
    config = {"n_templates": args.n_templates, "n_proposals": args.n_proposals}
    return _document("synth-scene", config, {"scene": args.seed}, [{"path": str(args.output)}], {})


# ---------------------------------------------------------------------------
# parser


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    d = PipelineConfig()
    p.add_argument("--weights", help="TNSR weight collection (default: seeded init)")
    p.add_argument("--weights-seed", type=int, default=0)
    p.add_argument("--pipeline-seed", type=int, default=d.seed)
    p.add_argument("--transformer", choices=("sdpt", "full", "linear"), default=d.transformer)
    p.add_argument("--assignment", choices=("background", "sinkhorn"), default=d.assignment)
    p.add_argument("--stages", choices=("both", "coarse", "fine"), default=d.stages)
    p.add_argument("--n-fine", type=int, default=d.n_fine)
    p.add_argument("--n-coarse", type=int, default=d.n_coarse)


def _add_suite_flags(p: argparse.ArgumentParser, n_default: int = 100) -> None:
    d = SuiteConfig()
    p.add_argument("--seed", type=int, default=0, help="suite seed")
    p.add_argument("--n-instances", type=int, default=n_default)
    p.add_argument("--n-points", type=int, default=d.n_points)
    p.add_argument("--occlusion", type=float, default=d.occlusion)
    p.add_argument("--noise", type=float, default=d.noise)
    p.add_argument("--outliers", type=float, default=d.outliers)
    p.add_argument("--corruption", type=float, default=d.corruption)
    p.add_argument("-v", "--verbose", action="store_true", help="progress on stderr")
    _add_pipeline_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pose-match", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out", help="write the JSON document here instead of stdout")
        return p

    p = command("score", "score proposals of a scene file against its template bank")
    p.add_argument("--input", required=True)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--delta-vis", type=float, default=0.5)
    p.add_argument("--delta-m", type=float, default=0.5)

    p = command("estimate", "estimate poses for instance files")
    p.add_argument("inputs", nargs="+")
    _add_pipeline_flags(p)

    command_help = {
        "synth-bench": "run the pipeline on the seeded synthetic suite",
        "ablate-assignment": "background tokens vs Sinkhorn on identical attention matrices",
        "ablate-stages": "coarse only vs fine only vs both",
        "ablate-transformer": "sparse-to-dense vs full geometric vs linear-only fine blocks",
    }
    for name, help_ in command_help.items():
        p = command(name, help_)
        _add_suite_flags(p)
        if name in ("ablate-assignment", "ablate-transformer"):
            p.add_argument("--timing", action="store_true",
                           help="add wall-clock timings (not reproducible byte for byte)")

    p = command("gradcheck", "finite-difference check of the matching loss gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-instances", type=int, default=50)
    p.add_argument("--n-m", type=int, default=5)
    p.add_argument("--n-o", type=int, default=4)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-5)

    p = command("train-toy", "fit the coarse output projection on one synthetic instance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--n-points", type=int, default=1024)
    p.add_argument("--weights")
    p.add_argument("--save-weights")

    p = command("synth-instance", "write one synthetic pose instance as a TNSR collection")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--family", choices=FAMILIES, default="box-cluster")
    p.add_argument("--n-points", type=int, default=4096)
    p.add_argument("--occlusion", type=float, default=0.3)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--outliers", type=float, default=0.05)
    p.add_argument("--corruption", type=float, default=0.1)
    p.add_argument("--output", required=True)

    p = command("synth-scene", "write a synthetic scoring scene as a TNSR collection")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-templates", type=int, default=42)
    p.add_argument("--n-proposals", type=int, default=6)
    p.add_argument("--output", required=True)
    return parser


HANDLERS = {
    "score": cmd_score,
    "estimate": cmd_estimate,
    "synth-bench": lambda a: cmd_study(a, "bench"),
    "ablate-assignment": lambda a: cmd_study(a, "assignment"),
    "ablate-stages": lambda a: cmd_study(a, "stages"),
    "ablate-transformer": lambda a: cmd_study(a, "transformer"),
    "gradcheck": cmd_gradcheck,
    "train-toy": cmd_train_toy,
    "synth-instance": cmd_synth_instance,
    "synth-scene": cmd_synth_scene,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        doc = HANDLERS[args.command](args)
    except Exception as exc:  # reported as JSON, never as a traceback
        err = {"error": getattr(exc, "code", type(exc).__name__), "message": str(exc),
               "command": args.command}
        sys.stdout.write(dumps(err))
        return 1
    _emit(doc, args.out)
    if args.command == "gradcheck" and not doc["aggregates"]["passed"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
