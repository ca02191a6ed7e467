"""On-disk layouts (TNSR collections) for pose instances and scoring scenes.

Pose instance tensors::

    model/points (N, 3)   model/descriptors (N, C)
    proposal/points (M, 3)   proposal/descriptors (M, C)
    info/center (3,)   gt/rotation (3, 3)   gt/translation (3,)   [gt optional]

with ``meta = {"kind": "pose_instance", "radius": r, "params": {...}}``.

Scoring scene tensors::

    templates/cls (T, D)   templates/rotations (T, 3, 3)   templates/{t}/patches (P_t, D)
    proposals/{i}/cls (D,)   proposals/{i}/patches (Q_i, D)
    proposals/{i}/bbox (4,)   proposals/{i}/points_mean (3,)
    model/points (N, 3)

with ``meta = {"kind": "score_scene", "camera": {...}, "n_templates": T, "n_proposals": n}``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import CorruptFile
from .geometry import BBox2D, Camera, NormalizationInfo, PointCloud, Pose, project_points_bbox, random_rotation
from .scoring import EmbeddingSet, ProposalRecord, TemplateBank
from .synth import SyntheticInstance, generate_object
from .tensorio import load_collection, save_collection


def save_instance(path, inst: SyntheticInstance) -> None:
    tensors = {
        "model/points": inst.model.points,
        "model/descriptors": inst.model.descriptors,
        "proposal/points": inst.proposal.points,
        "proposal/descriptors": inst.proposal.descriptors,
        "info/center": inst.info.center,
        "gt/rotation": inst.gt_pose.rotation,
        "gt/translation": inst.gt_pose.translation,
    }
    meta = {"kind": "pose_instance", "radius": inst.info.radius, "params": inst.params,
            "n_inliers": inst.n_inliers, "family": inst.family}
    save_collection(path, tensors, meta)


@dataclass
class LoadedInstance:
    model: PointCloud
    proposal: PointCloud
    info: NormalizationInfo
    gt_pose: Optional[Pose]
    meta: dict


def _need(tensors: Dict[str, np.ndarray], name: str) -> np.ndarray:
    if name not in tensors:
        raise CorruptFile(f"missing tensor {name}")
    return tensors[name]


def load_instance(path) -> LoadedInstance:
    tensors, meta = load_collection(path)
    if meta.get("kind") != "pose_instance":
        raise CorruptFile("not a pose instance file")
    model = PointCloud(_need(tensors, "model/points"), _need(tensors, "model/descriptors"))
    proposal = PointCloud(_need(tensors, "proposal/points"), _need(tensors, "proposal/descriptors"))
    info = NormalizationInfo(_need(tensors, "info/center"), meta["radius"])
    gt = None
    if "gt/rotation" in tensors:
        gt = Pose(tensors["gt/rotation"], _need(tensors, "gt/translation"))
    return LoadedInstance(model, proposal, info, gt, meta)


# ---------------------------------------------------------------------------
# scoring scenes


@dataclass
class ScoreScene:
    bank: TemplateBank
    proposals: List[ProposalRecord]
    model: PointCloud
    camera: Camera


def make_score_scene(seed: int = 0, n_templates: int = 42, n_proposals: int = 6, dim: int = 64,
                     n_patches: int = 32) -> ScoreScene:
    """Seeded toy scene: a template bank for one object and a mix of proposals.

    Even-indexed proposals are views of the object (noisy copies of one
    template's embeddings, boxed by the model's projection); odd-indexed
    proposals are unrelated random embeddings with random boxes.
    """
    rng = np.random.default_rng([seed, 606])
    model, _ = generate_object("box-cluster", 512, seed)
    cam = Camera(600.0, 600.0, 320.0, 240.0, 640, 480)
    rots = np.stack([random_rotation(rng) for _ in range(n_templates)])
    templates = [EmbeddingSet(rng.normal(size=dim), rng.normal(size=(n_patches, dim)))
                 for _ in range(n_templates)]
    bank = TemplateBank(tuple(templates), rots)
    proposals = []
    for i in range(n_proposals):
        t = np.array([rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(0.6, 1.0)])
        if i % 2 == 0:
            k = int(rng.integers(n_templates))
            src = templates[k]
            keep = np.sort(rng.choice(n_patches, size=n_patches * 3 // 4, replace=False))
            emb = EmbeddingSet(src.cls + 0.3 * rng.normal(size=dim),
                               src.patches[keep] + 0.3 * rng.normal(size=(len(keep), dim)))
            bbox = project_points_bbox(Pose(rots[k], t).apply(model.points), cam).shifted(
                rng.uniform(-3, 3), rng.uniform(-3, 3))
        else:
            emb = EmbeddingSet(rng.normal(size=dim), rng.normal(size=(n_patches // 2, dim)))
            x0, y0 = rng.uniform(0, 500), rng.uniform(0, 350)
            bbox = BBox2D(x0, y0, x0 + rng.uniform(20, 120), y0 + rng.uniform(20, 120))
        proposals.append(ProposalRecord(emb, bbox, t))
    return ScoreScene(bank, proposals, model, cam)


def save_score_scene(path, scene: ScoreScene) -> None:
    tensors = {
        "templates/cls": scene.bank.cls_matrix,
        "templates/rotations": scene.bank.rotations,
    }
    for t, e in enumerate(scene.bank.embeddings):
        tensors[f"templates/{t}/patches"] = e.patches
    for i, rec in enumerate(scene.proposals):
        tensors[f"proposals/{i}/cls"] = rec.embedding.cls
        tensors[f"proposals/{i}/patches"] = rec.embedding.patches
        tensors[f"proposals/{i}/bbox"] = np.array(rec.bbox.as_list())
        tensors[f"proposals/{i}/points_mean"] = np.asarray(rec.points_mean, dtype=np.float64)
    tensors["model/points"] = scene.model.points
    meta = {"kind": "score_scene", "camera": asdict(scene.camera),
            "n_templates": len(scene.bank), "n_proposals": len(scene.proposals)}
    save_collection(path, tensors, meta)


def load_score_scene(path) -> ScoreScene:
    tensors, meta = load_collection(path)
    if meta.get("kind") != "score_scene":
        raise CorruptFile("not a scoring scene file")
    cls = _need(tensors, "templates/cls")
    n_t = int(meta["n_templates"])
    if cls.shape[0] != n_t:
        raise CorruptFile("template count disagrees with the manifest")
    bank = TemplateBank(tuple(EmbeddingSet(cls[t], _need(tensors, f"templates/{t}/patches"))
                              for t in range(n_t)), _need(tensors, "templates/rotations"))
    proposals = []
    for i in range(int(meta["n_proposals"])):
        emb = EmbeddingSet(_need(tensors, f"proposals/{i}/cls"), _need(tensors, f"proposals/{i}/patches"))
        proposals.append(ProposalRecord(emb, BBox2D(*_need(tensors, f"proposals/{i}/bbox").tolist()),
                                        _need(tensors, f"proposals/{i}/points_mean")))
    return ScoreScene(bank, proposals, PointCloud(_need(tensors, "model/points")), Camera(**meta["camera"]))
