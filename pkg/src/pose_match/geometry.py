"""Rigid-transform algebra, pinhole projection, point sampling and weighted Kabsch.

Conventions: a :class:`Pose` acts on column vectors, ``p' = R @ p + t``. Point
clouds are ``(N, 3)`` row-major arrays, so the batched form is ``P @ R.T + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import BehindCamera, DegenerateInput, InvalidCount, ShapeMismatch

ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise DegenerateInput("pose has non-finite entries")
        if np.max(np.abs(r.T @ r - np.eye(3))) >= ORTHO_TOL:
            raise DegenerateInput("rotation is not orthonormal")
        if np.linalg.det(r) <= 0:
            raise DegenerateInput("rotation is a reflection")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}


@dataclass
class PointCloud:
    points: np.ndarray
    descriptors: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeMismatch(f"points must be (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise DegenerateInput("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise DegenerateInput("point cloud has non-finite coordinates")
        self.points = pts
        if self.descriptors is not None:
            d = np.asarray(self.descriptors, dtype=np.float64)
            if d.ndim != 2 or d.shape[0] != pts.shape[0]:
                raise ShapeMismatch("descriptor rows must match point count")
            self.descriptors = d

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.int64)
        desc = None if self.descriptors is None else self.descriptors[idx]
        return PointCloud(self.points[idx], desc)


@dataclass(frozen=True)
class NormalizationInfo:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "radius", float(self.radius))
        if not self.radius > 0:
            raise DegenerateInput("normalization radius must be positive")

    @classmethod
    def bounding(cls, points: np.ndarray, center=None) -> "NormalizationInfo":
        """Center (default: centroid) and the max distance from it."""
        points = np.asarray(points, dtype=np.float64)
        c = points.mean(axis=0) if center is None else np.asarray(center, dtype=np.float64)
        return cls(c, float(np.max(np.linalg.norm(points - c, axis=1))))


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DegenerateInput("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise DegenerateInput("image size must be at least 1x1")


@dataclass(frozen=True)
class BBox2D:
    """Axis-aligned pixel box, half-open ``[x_min, x_max) x [y_min, y_max)``."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise DegenerateInput("box corners out of order")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def shifted(self, dx: float = 0.0, dy: float = 0.0) -> "BBox2D":
        return BBox2D(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def as_list(self) -> list:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


# ---------------------------------------------------------------------------
# rotations


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_to_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues' formula; ``axis`` need not be normalized."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0 or angle == 0:
        return np.eye(3)
    k = skew(axis / n)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation from a normalized random quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotation_angle(r_a: np.ndarray, r_b: np.ndarray) -> float:
    """Geodesic distance between two rotations, in radians."""
    m = np.asarray(r_a).T @ np.asarray(r_b)
    # atan2 form stays accurate near 0 where arccos loses half the digits
    s = 0.5 * np.linalg.norm([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    c = (np.trace(m) - 1.0) / 2.0
    return float(np.arctan2(s, c))


# ---------------------------------------------------------------------------
# 3x3 SVD (one-sided Jacobi, batched)


def svd3(m: np.ndarray, tol: float = 1e-15, max_sweeps: int = 30):
    """SVD of one or many 3x3 matrices by one-sided Jacobi rotations.

    Returns ``(U, s, V)`` with ``m = U @ diag(s) @ V.T``, singular values
    sorted in descending order. ``U`` and ``V`` are orthogonal; when the third
    singular value is (numerically) zero the last column of ``U`` is completed
    as ``u1 x u2``.
    """
    m = np.asarray(m, dtype=np.float64)
    single = m.ndim == 2
    a = np.array(m.reshape(-1, 3, 3), copy=True)
    b = a.shape[0]
    v = np.broadcast_to(np.eye(3), (b, 3, 3)).copy()

    for _ in range(max_sweeps):
        rotated = False
        for p, q in ((0, 1), (0, 2), (1, 2)):
            ap = a[:, :, p]
            aq = a[:, :, q]
            alpha = np.einsum("bi,bi->b", ap, ap)
            beta = np.einsum("bi,bi->b", aq, aq)
            gamma = np.einsum("bi,bi->b", ap, aq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not np.any(active):
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            # near-orthogonal pairs overflow zeta to inf, which correctly gives t = 0
            with np.errstate(over="ignore", divide="ignore"):
                zeta = (beta - alpha) / (2.0 * g)
                sgn = np.where(zeta >= 0, 1.0, -1.0)
                t = sgn / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.hypot(1.0, t)
            s = c * t
            c = np.where(active, c, 1.0)[:, None]
            s = np.where(active, s, 0.0)[:, None]
            new_p = c * ap - s * aq
            new_q = s * ap + c * aq
            a[:, :, p] = new_p
            a[:, :, q] = new_q
            vp = v[:, :, p].copy()
            vq = v[:, :, q]
            v[:, :, p] = c * vp - s * vq
            v[:, :, q] = s * vp + c * vq
        if not rotated:
            break

    sv = np.linalg.norm(a, axis=1)
    order = np.argsort(-sv, axis=1, kind="stable")
    sv = np.take_along_axis(sv, order, axis=1)
    a = np.take_along_axis(a, order[:, None, :], axis=2)
    v = np.take_along_axis(v, order[:, None, :], axis=2)

    u = np.empty_like(a)
    scale = np.maximum(sv[:, :1], np.finfo(float).tiny)
    tiny = sv <= 1e-13 * scale
    # first column; an all-zero matrix gets an arbitrary basis
    u1 = np.where(tiny[:, 0:1], np.array([1.0, 0.0, 0.0]), a[:, :, 0] / np.where(tiny[:, 0:1], 1.0, sv[:, 0:1]))
    u2 = a[:, :, 1] / np.where(tiny[:, 1:2], 1.0, sv[:, 1:2])
    if np.any(tiny[:, 1]):
        # rank-1: any unit vector orthogonal to u1
        alt = np.where(np.abs(u1[:, :1]) < 0.9, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
        w = np.cross(u1, alt)
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        u2 = np.where(tiny[:, 1:2], w, u2)
    # re-orthogonalize u2 against u1 to clean up rounding
    u2 = u2 - np.einsum("bi,bi->b", u1, u2)[:, None] * u1
    u2 /= np.linalg.norm(u2, axis=1, keepdims=True)
    u3 = np.cross(u1, u2)
    sign = np.sign(np.einsum("bi,bi->b", u3, a[:, :, 2]))
    sign = np.where(tiny[:, 2] | (sign == 0), 1.0, sign)
    u[:, :, 0] = u1
    u[:, :, 1] = u2
    u[:, :, 2] = u3 * sign[:, None]

    if single:
        return u[0], sv[0], v[0]
    return u, sv, v


# ---------------------------------------------------------------------------
# weighted Kabsch


def _kabsch_from_cov(h: np.ndarray) -> np.ndarray:
    """Proper rotation maximizing ``trace(R @ H)`` for ``H = sum w src dst^T``."""
    u, _, v = svd3(h)
    d = np.sign(np.linalg.det(v @ np.swapaxes(u, -1, -2)))
    d = np.where(d == 0, 1.0, d)
    corr = np.broadcast_to(np.eye(3), u.shape).copy()
    corr[..., 2, 2] = d
    return v @ corr @ np.swapaxes(u, -1, -2)


def kabsch_weighted(src, dst, weights=None, rank_tol: float = 1e-12) -> Pose:
    """Weighted least-squares rigid alignment mapping ``src`` onto ``dst``.

    Minimizes ``sum_i w_i * ||R @ src_i + t - dst_i||^2`` over proper
    rotations. ``src``/``dst`` may be :class:`PointCloud` or ``(N, 3)`` arrays.

    Raises:
        DegenerateInput: fewer than 3 pairs, all-zero weights, or a weighted
            source spread of rank < 2.
    """
    src = np.asarray(getattr(src, "points", src), dtype=np.float64)
    dst = np.asarray(getattr(dst, "points", dst), dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ShapeMismatch("src and dst must both be (N, 3) with equal N")
    n = src.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != n:
        raise ShapeMismatch("weights length must equal N")
    if n < 3:
        raise DegenerateInput("need at least 3 correspondences")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DegenerateInput("weights must be finite and nonnegative")
    wsum = w.sum()
    if wsum <= 0:
        raise DegenerateInput("all weights are zero")
    w = w / wsum
    cs = w @ src
    cd = w @ dst
    xs = src - cs
    xd = dst - cd
    _, spread, _ = svd3(np.einsum("n,ni,nj->ij", w, xs, xs))
    if spread[0] <= 0 or spread[1] <= rank_tol * spread[0]:
        raise DegenerateInput("weighted source points are collinear")
    h = np.einsum("n,ni,nj->ij", w, xs, xd)
    r = _kabsch_from_cov(h)
    return Pose(r, cd - r @ cs)


def kabsch_batch(src: np.ndarray, dst: np.ndarray):
    """Uniform-weight Kabsch over a batch ``(B, K, 3)``; returns ``(R, t)`` arrays.

    No degeneracy checks; callers screen their inputs.
    """
    cs = src.mean(axis=1, keepdims=True)
    cd = dst.mean(axis=1, keepdims=True)
    h = np.einsum("bki,bkj->bij", src - cs, dst - cd)
    r = _kabsch_from_cov(h)
    t = cd[:, 0] - np.einsum("bij,bj->bi", r, cs[:, 0])
    return r, t


# ---------------------------------------------------------------------------
# point cloud plumbing


def transform_points(pose: Pose, pc: PointCloud) -> PointCloud:
    return PointCloud(pose.apply(pc.points), pc.descriptors)


def normalize_to_unit_sphere(pc: PointCloud, info: NormalizationInfo) -> PointCloud:
    if not info.radius > 0:
        raise DegenerateInput("normalization radius must be positive")
    return PointCloud((pc.points - info.center) / info.radius, pc.descriptors)


def denormalize(pc: PointCloud, info: NormalizationInfo) -> PointCloud:
    return PointCloud(pc.points * info.radius + info.center, pc.descriptors)


def project_points_bbox(pc, cam: Camera) -> BBox2D:
    """Tight pixel box around the pinhole projections, clamped to the image."""
    pts = np.asarray(getattr(pc, "points", pc), dtype=np.float64).reshape(-1, 3)
    z = pts[:, 2]
    if np.any(z <= 0):
        raise BehindCamera("points with z <= 0 cannot be projected")
    u = cam.fx * pts[:, 0] / z + cam.cx
    v = cam.fy * pts[:, 1] / z + cam.cy
    x0 = float(np.clip(u.min(), 0, cam.width))
    x1 = float(np.clip(u.max(), 0, cam.width))
    y0 = float(np.clip(v.min(), 0, cam.height))
    y1 = float(np.clip(v.max(), 0, cam.height))
    return BBox2D(x0, y0, x1, y1)


def bbox_iou(a: BBox2D, b: BBox2D) -> float:
    iw = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    ih = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def farthest_point_sample(pc, n: int, seed: int = 0, start: Optional[int] = None) -> np.ndarray:
    """Greedy max-min subset of ``n`` indices.

    The first index is drawn from ``default_rng(seed)`` unless ``start`` is
    given. Ties go to the lowest index.
    """
    pts = np.asarray(getattr(pc, "points", pc), dtype=np.float64)
    total = pts.shape[0]
    if n < 1 or n > total:
        raise InvalidCount(f"cannot sample {n} of {total} points")
    first = int(np.random.default_rng(seed).integers(total)) if start is None else int(start)
    out = np.empty(n, dtype=np.int64)
    out[0] = first
    d = np.sum((pts - pts[first]) ** 2, axis=1)
    d[first] = -1.0
    for k in range(1, n):
        nxt = int(np.argmax(d))
        out[k] = nxt
        np.minimum(d, np.sum((pts - pts[nxt]) ** 2, axis=1), out=d)
        d[nxt] = -1.0
    return out
