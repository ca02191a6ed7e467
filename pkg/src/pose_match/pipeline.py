"""Coarse-to-fine point matching for one proposal against one object.

Internally every pose maps normalized proposal points onto normalized object
points, ``p_o = R p_m + t``. :func:`estimate_pose` reports the inverse,
de-normalized, i.e. the model-to-camera pose.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from . import network as nn
from .assignment import (foreground_masks, match_probabilities, sample_hypothesis_arrays,
                         select_best_arrays, sinkhorn_assignment, soft_assignment)
from .errors import InsufficientCorrespondence, TooFewPoints
from .geometry import (NormalizationInfo, PointCloud, Pose, farthest_point_sample,
                       kabsch_weighted)

TRANSFORMERS = ("sdpt", "full", "linear")
STAGES = ("both", "coarse", "fine")


@dataclass(frozen=True)
class PipelineConfig:
    n_coarse: int = 196
    n_fine: int = 2048
    n_sparse: int = 196
    tau: float = 0.05
    gamma_coarse: float = 1.5
    gamma_fine: float = 1.0
    n_hyp: int = 6000
    keep: int = 300
    eps: float = 1e-6
    min_points: int = 32
    seed: int = 0
    transformer: str = "sdpt"
    assignment: str = "background"
    sinkhorn_iters: int = 100
    stages: str = "both"

    def __post_init__(self):
        if self.transformer not in TRANSFORMERS:
            raise ValueError(f"transformer must be one of {TRANSFORMERS}")
        if self.stages not in STAGES:
            raise ValueError(f"stages must be one of {STAGES}")
        if self.assignment not in ("background", "sinkhorn"):
            raise ValueError("assignment must be 'background' or 'sinkhorn'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StageResult:
    pose: Pose
    a_tilde: np.ndarray
    probabilities: np.ndarray
    idx_m: np.ndarray
    idx_o: np.ndarray
    # fine stage only: correspondences used by the final weighted solve
    src: Optional[np.ndarray] = None
    dst: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    attention: Optional[np.ndarray] = None

    @property
    def foreground_counts(self) -> Tuple[int, int]:
        p = self.probabilities
        return int(np.count_nonzero(p.sum(axis=1))), int(np.count_nonzero(p.sum(axis=0)))


@dataclass
class PoseEstimate:
    pose: Pose
    confidence: float
    initial_pose: Pose
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"pose": self.pose.to_dict(), "initial_pose": self.initial_pose.to_dict(),
                "confidence": self.confidence, "diagnostics": self.diagnostics}


def _sample(pc: PointCloud, n: int, seed: int) -> np.ndarray:
    return farthest_point_sample(pc.points, min(n, len(pc)), seed)


def _assign(a: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    if cfg.assignment == "sinkhorn":
        return sinkhorn_assignment(a, cfg.sinkhorn_iters, cfg.tau)
    return soft_assignment(a, cfg.tau)


def _require_desc(pc: PointCloud, name: str) -> None:
    if pc.descriptors is None:
        raise ValueError(f"{name} needs descriptors")


def coarse_attention(pts_m, desc_m, pts_o, desc_o, weights: nn.ModelWeights, all_blocks: bool = False):
    """Attention matrices after the coarse geometric transformers.

    Returns the last block's matrix, or one per block when ``all_blocks``.
    """
    fm = nn.embed(desc_m, weights, "coarse", "m")
    fo = nn.embed(desc_o, weights, "coarse", "o")
    mats = []
    for l in range(weights.config.coarse_blocks):
        fm, fo = nn.geometric_transformer_block(pts_m, pts_o, fm, fo, weights, f"coarse/gt{l}")
        if all_blocks or l == weights.config.coarse_blocks - 1:
            mats.append(nn.matching_head(fm, weights, "coarse") @ nn.matching_head(fo, weights, "coarse").T)
    return mats if all_blocks else mats[-1]


def coarse_stage(pc_m: PointCloud, pc_o: PointCloud, weights: nn.ModelWeights,
                 cfg: PipelineConfig = PipelineConfig()) -> StageResult:
    _require_desc(pc_m, "proposal")
    _require_desc(pc_o, "object")
    im = _sample(pc_m, cfg.n_coarse, cfg.seed)
    io = _sample(pc_o, cfg.n_coarse, cfg.seed + 1)
    pts_m, pts_o = pc_m.points[im], pc_o.points[io]
    a = coarse_attention(pts_m, pc_m.descriptors[im], pts_o, pc_o.descriptors[io], weights)
    a_tilde = _assign(a, cfg)
    p = match_probabilities(a_tilde, foreground_masks(a_tilde), cfg.gamma_coarse)
    r, t, dist = sample_hypothesis_arrays(p, pts_m, pts_o, cfg.n_hyp, cfg.seed + 6)
    best, _, _ = select_best_arrays(r, t, dist, pts_m, pts_o, cfg.keep, cfg.eps)
    return StageResult(Pose(r[best], t[best]), a_tilde, p, im, io, attention=a)


def coarse_point_matching(pc_m: PointCloud, pc_o: PointCloud, weights: nn.ModelWeights,
                          cfg: PipelineConfig = PipelineConfig()) -> Pose:
    """Initial pose from sparse matching and hypothesis voting (normalized frames)."""
    return coarse_stage(pc_m, pc_o, weights, cfg).pose


def fine_attention(pts_m, desc_m, pts_o, desc_o, init: Pose, weights: nn.ModelWeights,
                   cfg: PipelineConfig = PipelineConfig(), all_blocks: bool = False):
    """Attention matrices after the fine blocks; the proposal's positional
    encoding is computed on its points moved by ``init``."""
    enc_m = nn.positional_encoding(init.apply(pts_m), weights)
    enc_o = nn.positional_encoding(pts_o, weights)
    fm = nn.with_background(nn.project_descriptors(desc_m, weights, "fine") + enc_m, weights, "fine", "m")
    fo = nn.with_background(nn.project_descriptors(desc_o, weights, "fine") + enc_o, weights, "fine", "o")
    sm = np.concatenate([[0], 1 + farthest_point_sample(pts_m, min(cfg.n_sparse, len(pts_m)), cfg.seed + 4)])
    so = np.concatenate([[0], 1 + farthest_point_sample(pts_o, min(cfg.n_sparse, len(pts_o)), cfg.seed + 5)])
    mats = []
    n_blocks = weights.config.fine_blocks
    for l in range(n_blocks):
        path = f"fine/sdpt{l}"
        if cfg.transformer == "sdpt":
            fm, fo = nn.sdpt_block((pts_m, fm), (pts_o, fo), sm, so, weights, path)
        elif cfg.transformer == "full":
            fm, fo = nn.full_geometric_block((pts_m, fm), (pts_o, fo), weights, path)
        else:
            fm, fo = nn.linear_only_block((pts_m, fm), (pts_o, fo), weights, path)
        if all_blocks or l == n_blocks - 1:
            mats.append(nn.matching_head(fm, weights, "fine") @ nn.matching_head(fo, weights, "fine").T)
    return mats if all_blocks else mats[-1]


def fine_from_attention(a: np.ndarray, pts_m: np.ndarray, pts_o: np.ndarray,
                        cfg: PipelineConfig = PipelineConfig()):
    """Assignment, masking and weighted solve on a precomputed fine attention matrix.

    Each foreground proposal point is paired with its most probable object
    point, weighted by that probability. Returns ``(pose, A~, P, src, dst, w)``.
    """
    a_tilde = _assign(a, cfg)
    p = match_probabilities(a_tilde, foreground_masks(a_tilde), cfg.gamma_fine)
    best = np.argmax(p, axis=1)
    w = p[np.arange(p.shape[0]), best]
    used = w > 0
    if np.count_nonzero(used) < 3:
        raise InsufficientCorrespondence("fewer than 3 foreground correspondences in the fine stage")
    src, dst, w = pts_m[used], pts_o[best[used]], w[used]
    return kabsch_weighted(src, dst, w), a_tilde, p, src, dst, w


def fine_stage(pc_m: PointCloud, pc_o: PointCloud, init: Pose, weights: nn.ModelWeights,
               cfg: PipelineConfig = PipelineConfig()) -> StageResult:
    _require_desc(pc_m, "proposal")
    _require_desc(pc_o, "object")
    im = _sample(pc_m, cfg.n_fine, cfg.seed + 2)
    io = _sample(pc_o, cfg.n_fine, cfg.seed + 3)
    pts_m, pts_o = pc_m.points[im], pc_o.points[io]
    a = fine_attention(pts_m, pc_m.descriptors[im], pts_o, pc_o.descriptors[io], init, weights, cfg)
    pose, a_tilde, p, src, dst, w = fine_from_attention(a, pts_m, pts_o, cfg)
    return StageResult(pose, a_tilde, p, im, io, src, dst, w, a)


def fine_point_matching(pc_m: PointCloud, pc_o: PointCloud, init: Pose, weights: nn.ModelWeights,
                        cfg: PipelineConfig = PipelineConfig()):
    """Refined pose from dense matching conditioned on ``init``; returns ``(pose, P)``."""
    res = fine_stage(pc_m, pc_o, init, weights, cfg)
    return res.pose, res.probabilities


def correspondence_residual(pose: Pose, src: np.ndarray, dst: np.ndarray, w: np.ndarray) -> float:
    """Weighted mean squared pair residual, the quantity the final solve minimizes."""
    r = np.sum((pose.apply(src) - dst) ** 2, axis=1)
    return float(np.sum(w * r) / np.sum(w))


def to_reported(internal: Pose, center_m: np.ndarray, center_o: np.ndarray, radius: float) -> Pose:
    """Model-to-camera pose from an internal normalized proposal-to-object pose.

    With ``p_m = (x_cam - c_m)/r`` and ``p_o = (x_model - c_o)/r``,
    ``x_cam = R^T x_model + c_m - R^T (c_o + r t)``.
    """
    rt = internal.rotation.T
    return Pose(rt, center_m - rt @ (center_o + radius * internal.translation))


def to_internal(reported: Pose, center_m: np.ndarray, center_o: np.ndarray, radius: float) -> Pose:
    r = reported.rotation.T
    return Pose(r, (r @ (center_m - reported.translation) - center_o) / radius)


def estimate_pose(proposal: PointCloud, object_model: PointCloud, info: NormalizationInfo,
                  weights: nn.ModelWeights, cfg: PipelineConfig = PipelineConfig()) -> PoseEstimate:
    """End-to-end pose of ``object_model`` in the proposal's (camera) frame.

    Both clouds carry descriptors. The proposal is centered on its centroid
    and both are scaled by the model radius before matching.
    """
    if len(proposal) < max(cfg.min_points, 3):
        raise TooFewPoints(f"proposal has {len(proposal)} points, need {cfg.min_points}")
    _require_desc(proposal, "proposal")
    _require_desc(object_model, "object")
    c_m = proposal.points.mean(axis=0)
    pc_m = PointCloud((proposal.points - c_m) / info.radius, proposal.descriptors)
    pc_o = PointCloud((object_model.points - info.center) / info.radius, object_model.descriptors)

    diag = {}
    if cfg.stages == "fine":
        init = Pose.identity()
    else:
        coarse = coarse_stage(pc_m, pc_o, weights, cfg)
        init = coarse.pose
        diag["coarse_foreground"] = list(coarse.foreground_counts)
    if cfg.stages == "coarse":
        internal, used = init, coarse
    else:
        used = fine_stage(pc_m, pc_o, init, weights, cfg)
        internal = used.pose
        diag["fine_foreground"] = list(used.foreground_counts)
        diag["fine_correspondences"] = int(len(used.weights))
    conf = match_confidence(used.probabilities)
    return PoseEstimate(to_reported(internal, c_m, info.center, info.radius), conf,
                        to_reported(init, c_m, info.center, info.radius), diag)


def match_confidence(p: np.ndarray) -> float:
    """Mean best-match probability over proposal points that kept a match."""
    best = p.max(axis=1) if p.shape[1] else np.zeros(p.shape[0])
    best = best[best > 0]
    return float(np.clip(best.mean(), 0.0, 1.0)) if best.size else 0.0
