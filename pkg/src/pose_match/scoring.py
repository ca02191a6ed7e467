"""Proposal scoring against an object's template bank.

All similarities are raw cosines and may be negative. Embeddings are
validated on construction; zero-norm vectors are rejected instead of skipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateInput, EmptyBank, EmptyPatches, UnscoredRecord
from .geometry import BBox2D, Camera, Pose, bbox_iou, project_points_bbox

DEFAULT_TOP_K = 5
DEFAULT_DELTA_M = 0.5
DEFAULT_DELTA_VIS = 0.5


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / n


@dataclass(frozen=True)
class EmbeddingSet:
    cls: np.ndarray
    patches: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.cls, dtype=np.float64).reshape(-1)
        p = np.asarray(self.patches, dtype=np.float64)
        if p.size == 0:
            p = p.reshape(0, c.shape[0])
        if p.ndim != 2 or p.shape[1] != c.shape[0]:
            raise DegenerateInput("patch embeddings must be (P, C) matching the class embedding")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(p))):
            raise DegenerateInput("embeddings must be finite")
        if np.linalg.norm(c) == 0:
            raise DegenerateInput("class embedding has zero norm")
        if p.shape[0] and np.any(np.linalg.norm(p, axis=1) == 0):
            raise DegenerateInput("zero-norm patch embedding")
        object.__setattr__(self, "cls", c)
        object.__setattr__(self, "patches", p)


@dataclass(frozen=True)
class TemplateBank:
    embeddings: Tuple[EmbeddingSet, ...]
    rotations: np.ndarray  # (T, 3, 3)

    def __post_init__(self):
        emb = tuple(self.embeddings)
        rot = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3, 3)
        if len(emb) == 0:
            raise EmptyBank("template bank is empty")
        if rot.shape[0] != len(emb):
            raise DegenerateInput("one rotation per template required")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "rotations", rot)

    def __len__(self) -> int:
        return len(self.embeddings)

    @property
    def cls_matrix(self) -> np.ndarray:
        return np.stack([e.cls for e in self.embeddings])


@dataclass
class ProposalRecord:
    embedding: EmbeddingSet
    bbox: BBox2D
    points_mean: np.ndarray
    s_sem: Optional[float] = None
    s_appe: Optional[float] = None
    s_geo: Optional[float] = None
    r_vis: Optional[float] = None
    s_m: Optional[float] = None
    best_index: Optional[int] = None

    @property
    def scored(self) -> bool:
        return self.s_m is not None

    def to_dict(self) -> dict:
        return {
            "bbox": self.bbox.as_list(),
            "points_mean": np.asarray(self.points_mean, dtype=float).tolist(),
            "best_template": self.best_index,
            "s_sem": self.s_sem,
            "s_appe": self.s_appe,
            "s_geo": self.s_geo,
            "r_vis": self.r_vis,
            "s_m": self.s_m,
        }


def semantic_score(proposal: EmbeddingSet, bank: TemplateBank, k: int = DEFAULT_TOP_K):
    """Mean of the top-``k`` class-embedding cosines, plus the argmax template.

    ``k`` is clamped to the bank size; ties for the best template go to the
    lowest index.
    """
    if len(bank) == 0:
        raise EmptyBank("template bank is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    sims = _unit_rows(bank.cls_matrix) @ (proposal.cls / np.linalg.norm(proposal.cls))
    k = min(k, sims.shape[0])
    top = np.sort(sims)[::-1][:k]
    return float(top.mean()), int(np.argmax(sims))


def _patch_cosines(proposal: EmbeddingSet, template: EmbeddingSet) -> np.ndarray:
    if proposal.patches.shape[0] == 0 or template.patches.shape[0] == 0:
        raise EmptyPatches("both embedding sets need at least one patch")
    return _unit_rows(proposal.patches) @ _unit_rows(template.patches).T


def appearance_score(proposal: EmbeddingSet, best_template: EmbeddingSet) -> float:
    """Average over proposal patches of the best cosine to any template patch."""
    return float(_patch_cosines(proposal, best_template).max(axis=1).mean())


def visible_ratio(proposal: EmbeddingSet, best_template: EmbeddingSet,
                  delta_vis: float = DEFAULT_DELTA_VIS) -> float:
    """Fraction of template patches whose best proposal match reaches ``delta_vis``."""
    best = _patch_cosines(proposal, best_template).max(axis=0)
    return float(np.mean(best >= delta_vis))


def geometric_score(best_rotation, points_mean, model, cam: Camera, proposal_bbox: BBox2D) -> float:
    """IoU between the proposal box and the model projected under a coarse pose.

    The coarse pose uses the best template's rotation and the mean location of
    the proposal's points as translation.
    """
    pose = Pose(best_rotation, points_mean)
    pts = np.asarray(getattr(model, "points", model), dtype=np.float64)
    return bbox_iou(proposal_bbox, project_points_bbox(pose.apply(pts), cam))


def object_matching_score(s_sem: float, s_appe: float, s_geo: float, r_vis: float) -> float:
    if not 0.0 <= r_vis <= 1.0:
        raise ValueError("r_vis must lie in [0, 1]")
    return (s_sem + s_appe + r_vis * s_geo) / (2.0 + r_vis)


def score_proposal(record: ProposalRecord, bank: TemplateBank, model, cam: Camera,
                   k: int = DEFAULT_TOP_K, delta_vis: float = DEFAULT_DELTA_VIS) -> ProposalRecord:
    """Fill every score term of ``record`` in place and return it."""
    s_sem, best = semantic_score(record.embedding, bank, k)
    tmpl = bank.embeddings[best]
    record.best_index = best
    record.s_sem = s_sem
    record.s_appe = appearance_score(record.embedding, tmpl)
    record.r_vis = visible_ratio(record.embedding, tmpl, delta_vis)
    record.s_geo = geometric_score(bank.rotations[best], record.points_mean, model, cam, record.bbox)
    record.s_m = object_matching_score(record.s_sem, record.s_appe, record.s_geo, record.r_vis)
    return record


def filter_proposals(records: Sequence[ProposalRecord], delta_m: float = DEFAULT_DELTA_M) -> List[int]:
    """Indices of records with ``s_m >= delta_m``, best first (stable on ties)."""
    for i, r in enumerate(records):
        if not r.scored:
            raise UnscoredRecord(f"record {i} has no matching score")
    keep = [i for i, r in enumerate(records) if r.s_m >= delta_m]
    return sorted(keep, key=lambda i: -records[i].s_m)
