"""Synthetic objects and scenes with controllable oracle descriptors, plus pose metrics.

Lengths passed as ``noise_sigma`` are in units of the model radius so the same
settings work for any object size.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (NormalizationInfo, PointCloud, Pose, random_rotation,
                       rotation_angle)

FAMILIES = ("sphere-cap-union", "box-cluster", "random-blob")


# ---------------------------------------------------------------------------
# objects


def _sphere_points(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _box_surface(rng, n, half):
    """Uniform samples on the surface of an axis-aligned box with half-extents ``half``."""
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1, 1, size=(n, 3)) * half
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    u[np.arange(n), axis] = sign * np.asarray(half)[axis]
    return u


def _box_cluster(rng, n):
    specs = [
        (np.array([0.0, 0.0, 0.0]), np.array([0.55, 0.35, 0.25])),
        (np.array([0.45, 0.45, 0.15]), np.array([0.2, 0.3, 0.15])),
        (np.array([-0.35, 0.1, 0.4]), np.array([0.15, 0.15, 0.3])),
        (np.array([0.1, -0.45, -0.2]), np.array([0.3, 0.12, 0.1])),
    ]
    jitter = rng.uniform(0.85, 1.15, size=(len(specs), 3))
    areas = np.array([(h * j)[0] * (h * j)[1] + (h * j)[1] * (h * j)[2] + (h * j)[0] * (h * j)[2]
                      for (_, h), j in zip(specs, jitter)])
    counts = rng.multinomial(n, areas / areas.sum())
    parts = [_box_surface(rng, k, h * j) + c for (c, h), j, k in zip(specs, jitter, counts)]
    return np.concatenate(parts)


def _random_blob(rng, n):
    dirs = _sphere_points(rng, n)
    # low-order radial perturbation, made asymmetric with odd and mixed terms
    coef = rng.normal(scale=0.25, size=10)
    x, y, z = dirs.T
    basis = np.stack([x, y, z, x * y, y * z, x * z, x * x - y * y, x * y * z, x ** 3, z * z * y], axis=1)
    r = 1.0 + basis @ coef
    return dirs * np.clip(r, 0.4, None)[:, None]


def generate_object(family: str, n_points: int = 4096, seed: int = 0):
    """Seeded object cloud in meters, centered on its centroid.

    Returns ``(PointCloud, NormalizationInfo)`` where the radius is the max
    distance from the center. ``sphere-cap-union`` is rotationally symmetric;
    the other families are not.
    """
    if n_points < 64:
        raise ValueError("n_points must be >= 64")
    rng = np.random.default_rng([seed, 101])
    if family == "sphere-cap-union":
        pts = _sphere_points(rng, n_points)
    elif family == "box-cluster":
        pts = _box_cluster(rng, n_points)
    elif family == "random-blob":
        pts = _random_blob(rng, n_points)
    else:
        raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}")
    size = rng.uniform(0.05, 0.15)
    pts = pts * size
    pts = pts - pts.mean(axis=0)
    info = NormalizationInfo.bounding(pts)
    return PointCloud(pts), info


# ---------------------------------------------------------------------------
# scenes


def random_gt_pose(seed: int) -> Pose:
    rng = np.random.default_rng([seed, 202])
    t = np.array([rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(0.6, 1.2)])
    return Pose(random_rotation(rng), t)


def proposal_inlier_count(n_model: int, occlusion_frac: float) -> int:
    return int(math.ceil((1.0 - occlusion_frac) * n_model - 1e-9))


def _make_proposal(model: PointCloud, gt: Pose, occlusion_frac: float, noise_sigma: float,
                   outlier_frac: float, seed: int):
    for name, v in (("occlusion_frac", occlusion_frac), ("outlier_frac", outlier_frac)):
        if not 0.0 <= v < 1.0:
            raise ValueError(f"{name} must lie in [0, 1)")
    rng = np.random.default_rng([seed, 303])
    radius = NormalizationInfo.bounding(model.points).radius
    pts = gt.apply(model.points)
    n_keep = proposal_inlier_count(len(model), occlusion_frac)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    proj = (pts - pts.mean(axis=0)) @ direction
    kept = np.sort(np.argsort(proj, kind="stable")[:n_keep])
    inliers = pts[kept] + rng.normal(scale=noise_sigma * radius, size=(n_keep, 3))
    n_out = int(round(outlier_frac * n_keep))
    center = gt.apply(model.points.mean(axis=0)[None, :])[0]
    d = rng.normal(size=(n_out, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    outliers = center + d * (radius * rng.uniform(size=(n_out, 1)) ** (1.0 / 3.0))
    return PointCloud(np.vstack([inliers, outliers])), kept


def make_proposal(model: PointCloud, gt: Pose, occlusion_frac: float = 0.0,
                  noise_sigma: float = 0.0, outlier_frac: float = 0.0, seed: int = 0) -> PointCloud:
    """Observed partial cloud: transform, half-space cut, Gaussian noise, outliers.

    The cut removes the points furthest along a seeded random direction,
    keeping ``ceil((1 - occlusion_frac) * N)``. Outliers (``round(outlier_frac
    * kept)`` of them) are uniform in the model's bounding ball and appended
    after the inliers.
    """
    return _make_proposal(model, gt, occlusion_frac, noise_sigma, outlier_frac, seed)[0]


def _feature_map(canon: np.ndarray, dim: int, seed: int, bandwidth: float, hidden: int = 256):
    rng = np.random.default_rng([seed, 404])
    w1 = rng.normal(scale=bandwidth, size=(3, hidden))
    b1 = rng.uniform(0, 2 * np.pi, size=hidden)
    w2 = rng.normal(scale=1.0 / np.sqrt(hidden), size=(hidden, dim))
    h = np.sqrt(2.0) * np.cos(canon @ w1 + b1)
    d = h @ w2
    return d / np.sqrt(np.mean(d ** 2, axis=1, keepdims=True))


def oracle_descriptors(model: PointCloud, proposal: PointCloud, gt: Pose, dim: int = 256,
                       corruption: float = 0.0, seed: int = 0, n_inliers: Optional[int] = None,
                       bandwidth: float = 4.0):
    """Descriptors that are a smooth function of canonical object coordinates.

    Model points go through a seeded two-layer random feature map (random
    Fourier features, then a random linear projection) of their coordinates
    normalized by the model's bounding sphere; rows are scaled to unit RMS.
    Inlier proposal points get the descriptor of their pre-image under ``gt``
    plus ``corruption``-scaled Gaussian noise; the trailing outliers get
    fresh random descriptors.

    Returns ``(descriptors_o, descriptors_m)``.
    """
    if dim < 8:
        raise ValueError("descriptor width must be >= 8")
    info = NormalizationInfo.bounding(model.points)
    n_in = len(proposal) if n_inliers is None else int(n_inliers)
    desc_o = _feature_map((model.points - info.center) / info.radius, dim, seed, bandwidth)
    pre = gt.inverse().apply(proposal.points[:n_in])
    desc_m = np.empty((len(proposal), dim))
    desc_m[:n_in] = _feature_map((pre - info.center) / info.radius, dim, seed, bandwidth)
    rng = np.random.default_rng([seed, 505])
    if corruption:
        desc_m[:n_in] += corruption * rng.normal(size=(n_in, dim))
    desc_m[n_in:] = rng.normal(size=(len(proposal) - n_in, dim))
    return desc_o, desc_m


@dataclass
class SyntheticInstance:
    model: PointCloud
    info: NormalizationInfo
    gt_pose: Pose
    proposal: PointCloud
    n_inliers: int
    kept_index: np.ndarray
    params: dict
    family: str = "box-cluster"

    @property
    def symmetric(self) -> bool:
        return self.family == "sphere-cap-union"


@dataclass(frozen=True)
class SuiteConfig:
    n_instances: int = 100
    n_points: int = 4096
    occlusion: float = 0.3
    noise: float = 0.01
    outliers: float = 0.05
    corruption: float = 0.1
    desc_dim: int = 256
    families: Tuple[str, ...] = ("box-cluster", "random-blob")
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["families"] = list(self.families)
        return d


def make_instance(seed: int, family: str = "box-cluster", n_points: int = 4096, occlusion: float = 0.3,
                  noise: float = 0.01, outliers: float = 0.05, corruption: float = 0.1,
                  desc_dim: int = 256) -> SyntheticInstance:
    """One fully seeded scene: object, ground truth, observed proposal, descriptors."""
    model, info = generate_object(family, n_points, seed)
    gt = random_gt_pose(seed)
    proposal, kept = _make_proposal(model, gt, occlusion, noise, outliers, seed)
    desc_o, desc_m = oracle_descriptors(model, proposal, gt, desc_dim, corruption, seed,
                                        n_inliers=len(kept))
    params = {"seed": seed, "family": family, "n_points": n_points, "occlusion": occlusion,
              "noise": noise, "outliers": outliers, "corruption": corruption, "desc_dim": desc_dim}
    return SyntheticInstance(PointCloud(model.points, desc_o), info, gt,
                             PointCloud(proposal.points, desc_m), len(kept), kept, params, family)


def suite_instances(cfg: SuiteConfig) -> List[SyntheticInstance]:
    fams = cfg.families
    return [make_instance(cfg.seed * 100003 + i, fams[i % len(fams)], cfg.n_points, cfg.occlusion,
                          cfg.noise, cfg.outliers, cfg.corruption, cfg.desc_dim)
            for i in range(cfg.n_instances)]


# ---------------------------------------------------------------------------
# metrics

RECALL_THRESHOLDS = (0.02, 0.05, 0.1, 0.2)


def evaluate_pose(estimate: Pose, gt: Pose, model, symmetric: bool = False,
                  radius: Optional[float] = None) -> Dict[str, float]:
    """Rotation error (deg), translation error, ADD and ADD-S as fractions of the radius."""
    pts = np.asarray(getattr(model, "points", model), dtype=np.float64)
    if radius is None:
        radius = NormalizationInfo.bounding(pts).radius
    est = estimate.apply(pts)
    ref = gt.apply(pts)
    add = float(np.linalg.norm(est - ref, axis=1).mean() / radius)
    d, _ = cKDTree(est).query(ref)
    add_s = float(d.mean() / radius)
    return {
        "rot_err_deg": float(np.degrees(rotation_angle(estimate.rotation, gt.rotation))),
        "trans_err": float(np.linalg.norm(estimate.translation - gt.translation) / radius),
        "add": add,
        "add_s": min(add_s, add),
        "symmetric": bool(symmetric),
    }


def aggregate_report(rows: Sequence[Dict[str, float]], rot_thr: float = 5.0,
                     trans_thr: float = 0.05) -> Dict[str, object]:
    """Mean errors, pose recall at (``rot_thr`` deg, ``trans_thr``) and ADD(-S) recall curve."""
    ok_rows = [r for r in rows if "error" not in r]
    n = len(rows)
    if n == 0:
        return {"n": 0}
    metric = [r["add_s"] if r.get("symmetric") else r["add"] for r in ok_rows]
    recall = {f"{t:g}": float(sum(m < t for m in metric) / n) for t in RECALL_THRESHOLDS}
    pose_ok = sum(r["rot_err_deg"] < rot_thr and r["trans_err"] < trans_thr for r in ok_rows)
    mean = lambda k: float(np.mean([r[k] for r in ok_rows])) if ok_rows else float("nan")
    return {
        "n": n,
        "failures": n - len(ok_rows),
        "pose_recall": float(pose_ok / n),
        "pose_recall_thresholds": {"rot_deg": rot_thr, "trans": trans_thr},
        "add_recall": recall,
        "mean_rot_err_deg": mean("rot_err_deg"),
        "mean_trans_err": mean("trans_err"),
        "mean_add": mean("add"),
        "mean_add_s": mean("add_s"),
    }
