"""Correspondence labels, the cross-entropy matching loss and its gradient.

Labels use class 0 for the background and ``j + 1`` for point ``j``, so they
index columns (or rows) of an attention matrix that carries the background in
row/column 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import log_softmax

from .errors import ShapeMismatch
from .geometry import Pose, axis_angle_to_matrix

DELTA_DIS = 0.15


@dataclass(frozen=True)
class CorrespondenceLabels:
    y_m: np.ndarray
    y_o: np.ndarray

    def __post_init__(self):
        for name in ("y_m", "y_o"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if arr.ndim != 1:
                raise ShapeMismatch(f"{name} must be a vector")
            object.__setattr__(self, name, arr)

    @property
    def counts(self) -> Tuple[int, int]:
        return len(self.y_m), len(self.y_o)


def _nearest_labels(queries: np.ndarray, targets: np.ndarray, delta: float) -> np.ndarray:
    if len(targets) == 0:
        return np.zeros(len(queries), dtype=np.int64)
    d = cdist(queries, targets)
    k = np.argmin(d, axis=1)  # first minimum, i.e. lowest index on ties
    near = d[np.arange(len(queries)), k] < delta
    return np.where(near, k + 1, 0).astype(np.int64)


def correspondence_labels(pc_m, pc_o, gt: Pose, delta_dis: float = DELTA_DIS) -> CorrespondenceLabels:
    """Nearest-neighbor labels under ``gt`` (which maps ``pc_m`` onto ``pc_o``).

    A proposal point takes the 1-based index of the closest object point to
    ``gt.apply(p_m)`` when that distance is below ``delta_dis``, else 0.
    Object points are labeled the same way through ``gt.inverse()``.
    """
    pts_m = np.asarray(getattr(pc_m, "points", pc_m), dtype=np.float64)
    pts_o = np.asarray(getattr(pc_o, "points", pc_o), dtype=np.float64)
    y_m = _nearest_labels(gt.apply(pts_m), pts_o, delta_dis)
    y_o = _nearest_labels(gt.inverse().apply(pts_o), pts_m, delta_dis)
    return CorrespondenceLabels(y_m, y_o)


def _ce_rows(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over rows and its gradient."""
    n = logits.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(logits)
    logp = log_softmax(logits, axis=1)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


def matching_loss(a: np.ndarray, labels: CorrespondenceLabels) -> Tuple[float, np.ndarray]:
    """``CE(A[1:, :], y_m) + CE(A[:, 1:]^T, y_o)`` with mean reduction per term.

    Returns the loss and its gradient with respect to every entry of ``a``.
    ``A[0, 0]`` takes part in neither term, so its gradient is zero.
    """
    a = np.asarray(a, dtype=np.float64)
    n_m, n_o = labels.counts
    if a.ndim != 2 or a.shape != (n_m + 1, n_o + 1):
        raise ShapeMismatch(f"attention matrix {a.shape} does not fit labels ({n_m}, {n_o})")
    if np.any(labels.y_m < 0) or np.any(labels.y_m > n_o) or np.any(labels.y_o < 0) or np.any(labels.y_o > n_m):
        raise ShapeMismatch("label out of range")
    loss_m, g_m = _ce_rows(a[1:, :], labels.y_m)
    loss_o, g_o = _ce_rows(a[:, 1:].T, labels.y_o)
    grad = np.zeros_like(a)
    grad[1:, :] += g_m
    grad[:, 1:] += g_o.T
    return loss_m + loss_o, grad


def total_objective(per_block_losses_coarse: Sequence[float], per_block_losses_fine: Sequence[float]) -> float:
    """Sum of the per-block losses of both stages."""
    return float(sum(per_block_losses_coarse) + sum(per_block_losses_fine))


def perturb_gt_pose(gt: Pose, rot_deg_max: float, trans_max: float, seed: int) -> Pose:
    """Noisy copy of ``gt``: ``R' = R_noise R`` and ``t' = t + dt``.

    The noise axis is uniform on the sphere with angle uniform in
    ``[0, rot_deg_max]``; ``dt`` is uniform in the ball of radius ``trans_max``.
    """
    if rot_deg_max < 0 or trans_max < 0:
        raise ValueError("perturbation bounds must be nonnegative")
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rot_deg_max) * rng.uniform()
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    dt = direction * trans_max * rng.uniform() ** (1.0 / 3.0)
    r_noise = axis_angle_to_matrix(axis, angle)
    return Pose.from_matrix(np.block([[r_noise @ gt.rotation, (gt.translation + dt)[:, None]],
                                      [np.zeros((1, 3)), np.ones((1, 1))]]))


# ---------------------------------------------------------------------------
# finite-difference harness


def numerical_gradient(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function, one entry at a time."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = fn(x)
        x[idx] = old - h
        down = fn(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """``|a - b| / max(|a|, |b|)`` entrywise, 0 where both are exactly 0."""
    num = np.abs(analytic - numeric)
    den = np.maximum(np.abs(analytic), np.abs(numeric))
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def random_loss_instance(seed: int, n_m: int = 5, n_o: int = 4, scale: float = 1.0):
    """Seeded logits of shape ``(n_m + 1, n_o + 1)`` and random labels."""
    rng = np.random.default_rng(seed)
    a = rng.normal(scale=scale, size=(n_m + 1, n_o + 1))
    labels = CorrespondenceLabels(rng.integers(0, n_o + 1, size=n_m), rng.integers(0, n_m + 1, size=n_o))
    return a, labels


def gradcheck(n_instances: int = 50, seed: int = 0, shape: Tuple[int, int] = (5, 4),
              h: float = 1e-5) -> Dict[str, object]:
    """Compare :func:`matching_loss` gradients with central differences."""
    per_instance: List[float] = []
    for i in range(n_instances):
        a, labels = random_loss_instance(seed * 1000003 + i, *shape)
        _, grad = matching_loss(a, labels)
        num = numerical_gradient(lambda x: matching_loss(x, labels)[0], a, h)
        per_instance.append(float(relative_error(grad, num).max()))
    return {"n_instances": n_instances, "shape": list(shape), "h": h,
            "per_instance_max_rel_err": per_instance,
            "max_rel_err": max(per_instance) if per_instance else 0.0}


# ---------------------------------------------------------------------------
# last-layer fitting


def head_gradients(x_m: np.ndarray, x_o: np.ndarray, w: np.ndarray, b: np.ndarray,
                   labels: CorrespondenceLabels):
    """Loss and gradients of the matching head ``f = (x W + b)/sqrt(C)``, ``A = f_m f_o^T``."""
    c = np.sqrt(w.shape[1])
    f_m = (x_m @ w + b) / c
    f_o = (x_o @ w + b) / c
    loss, g = matching_loss(f_m @ f_o.T, labels)
    d_fm = g @ f_o
    d_fo = g.T @ f_m
    d_w = (x_m.T @ d_fm + x_o.T @ d_fo) / c
    d_b = (d_fm.sum(axis=0) + d_fo.sum(axis=0)) / c
    return loss, d_w, d_b


def fit_head(x_m: np.ndarray, x_o: np.ndarray, w: np.ndarray, b: np.ndarray,
             labels: CorrespondenceLabels, steps: int = 50, lr: float = 0.5):
    """Plain gradient descent on the head parameters; returns ``(w, b, losses)``."""
    w = np.array(w, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    losses = []
    for _ in range(steps):
        loss, d_w, d_b = head_gradients(x_m, x_o, w, b, labels)
        losses.append(loss)
        w -= lr * d_w
        b -= lr * d_b
    losses.append(head_gradients(x_m, x_o, w, b, labels)[0])
    return w, b, losses
