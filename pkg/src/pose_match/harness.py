"""Experiment drivers for the synthetic suite: benchmark, ablations, toy fitting.

Every driver returns plain JSON-ready structures. Wall-clock timings are kept
apart from those results (see :func:`time_call`) so that reruns with equal
seeds produce identical documents.
"""

from __future__ import annotations

import os
import statistics
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import network as nn
from .assignment import hard_matches, sinkhorn_assignment, soft_assignment
from .errors import NonConvergenceWarning, PoseMatchError
from .geometry import PointCloud, Pose, farthest_point_sample
from .losses import correspondence_labels, fit_head
from .pipeline import (PipelineConfig, coarse_stage, estimate_pose, fine_attention,
                       fine_from_attention, fine_stage, match_confidence, to_internal,
                       to_reported)
from .synth import SuiteConfig, SyntheticInstance, aggregate_report, evaluate_pose, make_instance

RECOVERY_THRESHOLD = 0.05
PARTS = ("bench", "stages", "assignment", "transformer")


@dataclass(frozen=True)
class StudyConfig:
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    weights_seed: int = 0
    recovery_threshold: float = RECOVERY_THRESHOLD

    def to_dict(self) -> dict:
        return {"suite": self.suite.to_dict(), "pipeline": self.pipeline.to_dict(),
                "model": nn.ModelConfig().to_dict(), "weights_seed": self.weights_seed,
                "recovery_threshold": self.recovery_threshold}


def thread_count() -> int:
    """Worker cap from ``POSE_MATCH_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("POSE_MATCH_THREADS", "1")))
    except ValueError:
        return 1


def instance_seeds(suite: SuiteConfig) -> List[int]:
    return [suite.seed * 100003 + i for i in range(suite.n_instances)]


def suite_instance(suite: SuiteConfig, i: int) -> SyntheticInstance:
    fams = suite.families
    return make_instance(instance_seeds(suite)[i], fams[i % len(fams)], suite.n_points,
                         suite.occlusion, suite.noise, suite.outliers, suite.corruption,
                         suite.desc_dim)


@dataclass
class NormalizedInstance:
    """An instance in matching coordinates plus what is needed to map back."""

    inst: SyntheticInstance
    pc_m: PointCloud
    pc_o: PointCloud
    gt: Pose
    center_m: np.ndarray

    @classmethod
    def of(cls, inst: SyntheticInstance) -> "NormalizedInstance":
        c_m = inst.proposal.points.mean(axis=0)
        r = inst.info.radius
        pc_m = PointCloud((inst.proposal.points - c_m) / r, inst.proposal.descriptors)
        pc_o = PointCloud((inst.model.points - inst.info.center) / r, inst.model.descriptors)
        return cls(inst, pc_m, pc_o, to_internal(inst.gt_pose, c_m, inst.info.center, r), c_m)

    def evaluate(self, internal: Pose) -> Dict[str, float]:
        est = to_reported(internal, self.center_m, self.inst.info.center, self.inst.info.radius)
        return evaluate_pose(est, self.inst.gt_pose, self.inst.model, self.inst.symmetric,
                             self.inst.info.radius)

    def recovery(self, a_tilde: np.ndarray, idx_m: np.ndarray, idx_o: np.ndarray,
                 threshold: float = RECOVERY_THRESHOLD) -> float:
        """Share of sampled inlier proposal points whose hard match lands within
        ``threshold`` (normalized units) of their planted counterpart."""
        inl = idx_m < self.inst.n_inliers
        if not np.any(inl):
            return 0.0
        hm = hard_matches(a_tilde)
        target = self.gt.apply(self.pc_m.points[idx_m])
        matched = self.pc_o.points[idx_o][np.maximum(hm - 1, 0)]
        ok = (hm > 0) & (np.linalg.norm(matched - target, axis=1) < threshold)
        return float(ok[inl].mean())


def _error_row(exc: Exception) -> dict:
    return {"error": getattr(exc, "code", type(exc).__name__), "message": str(exc)}


def _guard(fn: Callable[[], dict]) -> dict:
    try:
        return fn()
    except PoseMatchError as exc:
        return _error_row(exc)


def study_instance(inst: SyntheticInstance, weights: nn.ModelWeights, cfg: StudyConfig,
                   parts: Sequence[str] = PARTS) -> dict:
    """Every requested measurement on one instance, sharing the coarse stage and
    the default fine pass between parts."""
    pipe = cfg.pipeline
    ni = NormalizedInstance.of(inst)
    out: dict = {"seed": inst.params["seed"], "family": inst.family}
    cache: dict = {}

    def coarse():
        if "coarse" not in cache:
            cache["coarse"] = coarse_stage(ni.pc_m, ni.pc_o, weights, pipe)
        return cache["coarse"]

    def fine(variant: str):
        key = ("fine", variant)
        if key not in cache:
            cache[key] = fine_stage(ni.pc_m, ni.pc_o, coarse().pose, weights,
                                    replace(pipe, transformer=variant))
        return cache[key]

    def with_metrics(stage_pose, a_tilde, idx_m, idx_o, probs) -> dict:
        row = ni.evaluate(stage_pose)
        row["recovery"] = ni.recovery(a_tilde, idx_m, idx_o, cfg.recovery_threshold)
        row["confidence"] = match_confidence(probs)
        return row

    if "bench" in parts:
        def bench():
            st = fine(pipe.transformer)
            return with_metrics(st.pose, st.a_tilde, st.idx_m, st.idx_o, st.probabilities)
        out["bench"] = _guard(bench)

    if "stages" in parts:
        def coarse_only():
            c = coarse()
            return with_metrics(c.pose, c.a_tilde, c.idx_m, c.idx_o, c.probabilities)

        def fine_only():
            st = fine_stage(ni.pc_m, ni.pc_o, Pose.identity(), weights, pipe)
            return with_metrics(st.pose, st.a_tilde, st.idx_m, st.idx_o, st.probabilities)

        def both():
            st = fine(pipe.transformer)
            return with_metrics(st.pose, st.a_tilde, st.idx_m, st.idx_o, st.probabilities)
        out["stages"] = {"coarse": _guard(coarse_only), "fine": _guard(fine_only), "both": _guard(both)}

    if "assignment" in parts:
        def assignment() -> dict:
            st = fine(pipe.transformer)
            pts_m, pts_o = ni.pc_m.points[st.idx_m], ni.pc_o.points[st.idx_o]
            a = st.attention
            res = {}
            for mode in ("background", "sinkhorn"):
                def run(mode=mode):
                    with warnings.catch_warnings(record=True) as caught:
                        warnings.simplefilter("always", NonConvergenceWarning)
                        pose, a_t, p, *_ = fine_from_attention(a, pts_m, pts_o,
                                                               replace(pipe, assignment=mode))
                    row = with_metrics(pose, a_t, st.idx_m, st.idx_o, p)
                    row["converged"] = not any(issubclass(w.category, NonConvergenceWarning) for w in caught)
                    return row
                res[mode] = _guard(run)
            return res
        out["assignment"] = _guard(assignment)

    if "transformer" in parts:
        res = {}
        for variant in ("sdpt", "full", "linear"):
            def run(variant=variant):
                st = fine(variant)
                return with_metrics(st.pose, st.a_tilde, st.idx_m, st.idx_o, st.probabilities)
            res[variant] = _guard(run)
        out["transformer"] = res
    return out


def _study_worker(args):
    cfg, i, parts = args
    weights = nn.init_weights(cfg.weights_seed)
    return study_instance(suite_instance(cfg.suite, i), weights, cfg, parts)


def run_study(cfg: StudyConfig, parts: Sequence[str] = PARTS, weights: Optional[nn.ModelWeights] = None,
              threads: Optional[int] = None,
              progress: Optional[Callable[[int, dict], None]] = None) -> List[dict]:
    """Per-instance study rows over the suite, in instance order.

    With more than one worker, instances are spread over processes; results
    do not depend on the worker count.
    """
    threads = thread_count() if threads is None else threads
    n = cfg.suite.n_instances
    if threads > 1 and weights is None and n > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            rows = list(ex.map(_study_worker, [(cfg, i, tuple(parts)) for i in range(n)]))
        if progress:
            for i, row in enumerate(rows):
                progress(i, row)
        return rows
    weights = weights or nn.init_weights(cfg.weights_seed)
    rows = []
    for i in range(n):
        rows.append(study_instance(suite_instance(cfg.suite, i), weights, cfg, parts))
        if progress:
            progress(i, rows[-1])
    return rows


def _mean_key(rows: Sequence[dict], key: str) -> Optional[float]:
    vals = [r[key] for r in rows if "error" not in r]
    return float(np.mean(vals)) if vals else None


def summarize(rows: Sequence[dict], part: str) -> dict:
    """Aggregates for one part of :func:`run_study` output."""
    if part == "bench":
        sub = [r["bench"] for r in rows]
        agg = aggregate_report(sub)
        agg["mean_recovery"] = _mean_key(sub, "recovery")
        return agg
    groups = {"stages": ("coarse", "fine", "both"), "assignment": ("background", "sinkhorn"),
              "transformer": ("sdpt", "full", "linear")}[part]
    out = {}
    for g in groups:
        sub = [r[part].get(g, r[part]) if "error" not in r[part] else r[part] for r in rows]
        agg = aggregate_report(sub)
        agg["mean_recovery"] = _mean_key(sub, "recovery")
        out[g] = agg
    if part == "stages":
        both, coarse_, fine_ = out["both"]["mean_add"], out["coarse"]["mean_add"], out["fine"]["mean_add"]
        out["fine_to_both_add_ratio"] = float(fine_ / both) if both else None
        out["both_le_coarse"] = bool(both <= coarse_)
    if part == "assignment":
        out["recovery_gap_points"] = 100.0 * (out["background"]["mean_recovery"]
                                              - out["sinkhorn"]["mean_recovery"])
        out["sinkhorn_converged"] = int(sum(1 for r in rows if "error" not in r["assignment"]
                                            and r["assignment"]["sinkhorn"].get("converged")))
    return out


def results_document(command: str, cfg: StudyConfig, rows: Sequence[dict], aggregates: dict,
                     extra_config: Optional[dict] = None) -> dict:
    """The one-document result schema ``{config, seeds, per_instance, aggregates}``."""
    config = {"command": command, **cfg.to_dict(), **(extra_config or {})}
    return {"config": config,
            "seeds": {"suite": cfg.suite.seed, "weights": cfg.weights_seed,
                      "pipeline": cfg.pipeline.seed, "instances": instance_seeds(cfg.suite)},
            "per_instance": list(rows), "aggregates": aggregates}


# ---------------------------------------------------------------------------
# timing (never part of deterministic results)


def time_call(fn: Callable[[], object], repeats: int = 3) -> float:
    """Median wall time in seconds over ``repeats`` calls."""
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def assignment_timing(a: np.ndarray, pipe: PipelineConfig = PipelineConfig(), repeats: int = 3) -> dict:
    """Seconds for background-token assignment vs Sinkhorn on the same matrix."""
    def sink():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NonConvergenceWarning)
            sinkhorn_assignment(a, pipe.sinkhorn_iters, pipe.tau)
    t_bg = time_call(lambda: soft_assignment(a, pipe.tau), repeats)
    t_sk = time_call(sink, repeats)
    return {"background_s": t_bg, "sinkhorn_s": t_sk, "speedup": t_sk / t_bg}


def transformer_timing(inst: SyntheticInstance, weights: nn.ModelWeights,
                       pipe: PipelineConfig = PipelineConfig(), repeats: int = 1) -> dict:
    """Seconds for one fine block of each variant at the configured sizes."""
    ni = NormalizedInstance.of(inst)
    im = farthest_point_sample(ni.pc_m.points, min(pipe.n_fine, len(ni.pc_m)), pipe.seed + 2)
    io = farthest_point_sample(ni.pc_o.points, min(pipe.n_fine, len(ni.pc_o)), pipe.seed + 3)
    pts_m, pts_o = ni.pc_m.points[im], ni.pc_o.points[io]
    fm = nn.embed(ni.pc_m.descriptors[im], weights, "fine", "m")
    fo = nn.embed(ni.pc_o.descriptors[io], weights, "fine", "o")
    sm = np.concatenate([[0], 1 + farthest_point_sample(pts_m, min(pipe.n_sparse, len(pts_m)), pipe.seed + 4)])
    so = np.concatenate([[0], 1 + farthest_point_sample(pts_o, min(pipe.n_sparse, len(pts_o)), pipe.seed + 5)])
    calls = {
        "sdpt": lambda: nn.sdpt_block((pts_m, fm), (pts_o, fo), sm, so, weights, "fine/sdpt0"),
        "full": lambda: nn.full_geometric_block((pts_m, fm), (pts_o, fo), weights, "fine/sdpt0"),
        "linear": lambda: nn.linear_only_block((pts_m, fm), (pts_o, fo), weights, "fine/sdpt0"),
    }
    out = {f"{k}_s": time_call(fn, repeats) for k, fn in calls.items()}
    out.update({"n_dense": len(pts_m), "n_sparse": len(sm) - 1})
    return out


def fine_attention_matrix(inst: SyntheticInstance, weights: nn.ModelWeights,
                          pipe: PipelineConfig = PipelineConfig()) -> np.ndarray:
    """The fine attention matrix the assignment ablation operates on."""
    ni = NormalizedInstance.of(inst)
    init = coarse_stage(ni.pc_m, ni.pc_o, weights, pipe).pose
    im = farthest_point_sample(ni.pc_m.points, min(pipe.n_fine, len(ni.pc_m)), pipe.seed + 2)
    io = farthest_point_sample(ni.pc_o.points, min(pipe.n_fine, len(ni.pc_o)), pipe.seed + 3)
    return fine_attention(ni.pc_m.points[im], ni.pc_m.descriptors[im], ni.pc_o.points[io],
                          ni.pc_o.descriptors[io], init, weights, pipe)


# ---------------------------------------------------------------------------
# last-layer fitting


def train_toy(seed: int = 0, steps: int = 50, lr: float = 0.5, n_points: int = 1024,
              weights: Optional[nn.ModelWeights] = None, pipe: PipelineConfig = PipelineConfig()):
    """Fit the coarse output projection on one synthetic instance.

    Features come from the coarse blocks under the current weights; labels
    come from the planted pose. Returns ``(report, updated_weights)``.
    """
    weights = weights or nn.init_weights(seed)
    inst = make_instance(seed, "box-cluster", n_points=n_points)
    ni = NormalizedInstance.of(inst)
    im = farthest_point_sample(ni.pc_m.points, min(pipe.n_coarse, len(ni.pc_m)), pipe.seed)
    io = farthest_point_sample(ni.pc_o.points, min(pipe.n_coarse, len(ni.pc_o)), pipe.seed + 1)
    pts_m, pts_o = ni.pc_m.points[im], ni.pc_o.points[io]
    fm = nn.embed(ni.pc_m.descriptors[im], weights, "coarse", "m")
    fo = nn.embed(ni.pc_o.descriptors[io], weights, "coarse", "o")
    for l in range(weights.config.coarse_blocks):
        fm, fo = nn.geometric_transformer_block(pts_m, pts_o, fm, fo, weights, f"coarse/gt{l}")
    labels = correspondence_labels(pts_m, pts_o, ni.gt)
    w, b, losses = fit_head(fm, fo, weights["coarse/out_proj/w"], weights["coarse/out_proj/b"],
                            labels, steps, lr)
    updated = weights.replace(**{"coarse/out_proj/w": w, "coarse/out_proj/b": b})
    report = {"seed": seed, "steps": steps, "lr": lr, "n_points": n_points,
              "n_matched": [int(np.count_nonzero(labels.y_m)), int(np.count_nonzero(labels.y_o))],
              "initial_loss": losses[0], "final_loss": losses[-1], "losses": losses}
    return report, updated
