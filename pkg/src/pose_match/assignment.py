"""Background-token soft assignment, pose hypotheses, and a Sinkhorn baseline.

Every assignment matrix here carries the background in row 0 and column 0;
point ``i`` of a set lives at index ``i + 1``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from .errors import (AllBackground, EmptyHypotheses, InsufficientCorrespondence,
                     InvalidTemperature, NonConvergenceWarning, RetryExhausted,
                     ShapeMismatch)
from .geometry import Pose, kabsch_batch

DEFAULT_TAU = 0.05
S_HYP_EPS = 1e-6
COLLINEAR_TOL = 1e-9


@dataclass(frozen=True)
class ForegroundMasks:
    mask_m: np.ndarray
    mask_o: np.ndarray

    @property
    def counts(self) -> Tuple[int, int]:
        return int(self.mask_m.sum()), int(self.mask_o.sum())


@dataclass
class PoseHypothesis:
    pose: Pose
    mean_pair_distance: float
    s_hyp: Optional[float] = None


def attention_matrix(feats_m: np.ndarray, feats_o: np.ndarray) -> np.ndarray:
    """Inner products between two feature blocks whose row 0 is the background token."""
    feats_m = np.asarray(feats_m, dtype=np.float64)
    feats_o = np.asarray(feats_o, dtype=np.float64)
    if feats_m.ndim != 2 or feats_o.ndim != 2 or feats_m.shape[1] != feats_o.shape[1]:
        raise ShapeMismatch(f"feature widths differ: {feats_m.shape} vs {feats_o.shape}")
    return feats_m @ feats_o.T


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def soft_assignment(a: np.ndarray, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Product of row-wise and column-wise softmaxes of ``a / tau``."""
    if not tau > 0:
        raise InvalidTemperature("tau must be positive")
    z = np.asarray(a, dtype=np.float64) / tau
    return _softmax(z, axis=1) * _softmax(z, axis=0)


def foreground_masks(a_tilde: np.ndarray) -> ForegroundMasks:
    """Points whose argmax lands on the background are marked 0.

    A tie between the background and a point goes to the point.
    """
    inner = a_tilde[1:, 1:]
    row_best = inner.max(axis=1) if inner.shape[1] else np.full(inner.shape[0], -np.inf)
    col_best = inner.max(axis=0) if inner.shape[0] else np.full(inner.shape[1], -np.inf)
    mask_m = (a_tilde[1:, 0] <= row_best).astype(np.int8)
    mask_o = (a_tilde[0, 1:] <= col_best).astype(np.int8)
    return ForegroundMasks(mask_m, mask_o)


def match_probabilities(a_tilde: np.ndarray, masks: ForegroundMasks, gamma: float = 1.0,
                        normalize: bool = False) -> np.ndarray:
    """Masked, sharpened inner block ``mask_m * A~[1:,1:]**gamma * mask_o``.

    With ``normalize`` the result sums to 1 so it can drive sampling.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    p = np.power(a_tilde[1:, 1:], gamma)
    p = p * masks.mask_m[:, None] * masks.mask_o[None, :]
    total = p.sum()
    if not total > 0:
        raise AllBackground("every point was assigned to the background")
    return p / total if normalize else p


# ---------------------------------------------------------------------------
# hypotheses


def _triplet_spread(pts: np.ndarray) -> np.ndarray:
    """Second-largest eigenvalue of each triplet's covariance (0 when collinear)."""
    x = pts - pts.mean(axis=1, keepdims=True)
    cov = np.einsum("bki,bkj->bij", x, x) / 3.0
    return np.linalg.eigvalsh(cov)[:, 1]


def sample_triplet_pairs(p: np.ndarray, pts_m: np.ndarray, pts_o: np.ndarray, n_hyp: int,
                         seed: int, max_retries: int = 20) -> np.ndarray:
    """``(n_hyp, 3)`` flat indices into ``p`` (row ``i``, column ``j`` -> ``i * N_o + j``).

    Pairs are drawn with probability proportional to ``p``. A triplet that is
    near-collinear on either side is redrawn, at most ``max_retries`` times.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (pts_m.shape[0], pts_o.shape[0]):
        raise ShapeMismatch("probability matrix does not match the point sets")
    if n_hyp == 0:
        return np.zeros((0, 3), dtype=np.int64)
    flat = p.ravel()
    if np.count_nonzero(flat > 0) < 3:
        raise InsufficientCorrespondence("fewer than 3 candidate pairs")
    flat = flat / flat.sum()
    rng = np.random.default_rng(seed)
    n_o = p.shape[1]
    picks = rng.choice(flat.size, size=(n_hyp, 3), p=flat)
    for _ in range(max_retries + 1):
        bad = (_triplet_spread(pts_m[picks // n_o]) < COLLINEAR_TOL) | \
              (_triplet_spread(pts_o[picks % n_o]) < COLLINEAR_TOL)
        if not np.any(bad):
            return picks
        picks[bad] = rng.choice(flat.size, size=(int(bad.sum()), 3), p=flat)
    raise RetryExhausted(f"{int(bad.sum())} triplets stayed degenerate after {max_retries} retries")


def sample_hypothesis_arrays(p: np.ndarray, pts_m: np.ndarray, pts_o: np.ndarray, n_hyp: int,
                             seed: int, max_retries: int = 20):
    """Array form of :func:`sample_pose_hypotheses`: returns ``(R, t, mean_pair_distance)``."""
    picks = sample_triplet_pairs(p, pts_m, pts_o, n_hyp, seed, max_retries)
    if len(picks) == 0:
        return np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros(0)
    n_o = pts_o.shape[0]
    src = pts_m[picks // n_o]
    dst = pts_o[picks % n_o]
    r, t = kabsch_batch(src, dst)
    moved = np.einsum("bij,bkj->bki", r, src) + t[:, None, :]
    dist = np.linalg.norm(moved - dst, axis=2).mean(axis=1)
    return r, t, dist


def sample_pose_hypotheses(p: np.ndarray, pc_m, pc_o, n_hyp: int = 6000, seed: int = 0,
                           max_retries: int = 20) -> List[PoseHypothesis]:
    """Draw ``n_hyp`` triplets of pairs with probability proportional to ``p``.

    Each triplet is solved with uniform-weight Kabsch. Near-collinear triplets
    are redrawn up to ``max_retries`` times.
    """
    pts_m = np.asarray(getattr(pc_m, "points", pc_m), dtype=np.float64)
    pts_o = np.asarray(getattr(pc_o, "points", pc_o), dtype=np.float64)
    r, t, d = sample_hypothesis_arrays(p, pts_m, pts_o, n_hyp, seed, max_retries)
    return [PoseHypothesis(Pose(r[i], t[i]), float(d[i])) for i in range(len(d))]


def hypothesis_scores(r: np.ndarray, t: np.ndarray, pts_m: np.ndarray, pts_o: np.ndarray,
                      eps: float = S_HYP_EPS, tree: Optional[cKDTree] = None) -> np.ndarray:
    """``N_m / (eps + sum_m min_o ||R^T (p_o - t) - p_m||)`` for each pose.

    The inner distance equals ``||p_o - (R p_m + t)||``, so a KD-tree over
    ``pts_o`` answers the min for forward-mapped proposal points.
    """
    tree = cKDTree(pts_o) if tree is None else tree
    out = np.empty(r.shape[0])
    for i in range(r.shape[0]):
        d, _ = tree.query(pts_m @ r[i].T + t[i])
        out[i] = pts_m.shape[0] / (eps + d.sum())
    return out


def select_best_arrays(r, t, dist, pts_m, pts_o, keep: int = 300, eps: float = S_HYP_EPS):
    """Keep the ``keep`` smallest pair distances, return ``(index, scores_of_kept, kept)``."""
    if len(dist) == 0:
        raise EmptyHypotheses("no hypotheses to select from")
    kept = np.argsort(dist, kind="stable")[:keep]
    scores = hypothesis_scores(r[kept], t[kept], pts_m, pts_o, eps)
    return int(kept[int(np.argmax(scores))]), scores, kept


def score_and_select_pose(hyps: List[PoseHypothesis], pc_m, pc_o, keep: int = 300,
                          eps: float = S_HYP_EPS) -> Pose:
    """Best pose by matching score among the ``keep`` tightest hypotheses.

    Scores are written back onto the kept hypotheses.
    """
    if not hyps:
        raise EmptyHypotheses("no hypotheses to select from")
    pts_m = np.asarray(getattr(pc_m, "points", pc_m), dtype=np.float64)
    pts_o = np.asarray(getattr(pc_o, "points", pc_o), dtype=np.float64)
    r = np.stack([h.pose.rotation for h in hyps])
    t = np.stack([h.pose.translation for h in hyps])
    dist = np.array([h.mean_pair_distance for h in hyps])
    best, scores, kept = select_best_arrays(r, t, dist, pts_m, pts_o, keep, eps)
    for k, s in zip(kept, scores):
        hyps[k].s_hyp = float(s)
    return hyps[best].pose


# ---------------------------------------------------------------------------
# optimal-transport baseline


def _log_update(log_marginal, z, kernel, z_max, other, axis):
    """``log_marginal - logsumexp(z + other)`` along ``axis``."""
    shift = other.max()
    w = np.exp(other - shift)
    sums = kernel @ w if axis == 1 else w @ kernel
    with np.errstate(divide="ignore"):
        out = log_marginal - (np.log(sums) + z_max + shift)
    if np.all(np.isfinite(out)):
        return out
    other_b = other[None, :] if axis == 1 else other[:, None]
    return log_marginal - logsumexp(z + other_b, axis=axis)


def sinkhorn_assignment(a: np.ndarray, iterations: int = 100, epsilon: float = DEFAULT_TAU,
                        tol: float = 1e-6) -> np.ndarray:
    """Entropic OT over ``a / epsilon`` with row 0 / column 0 as slack bins.

    Point rows and columns carry unit mass; the slack row holds ``N_o`` and
    the slack column ``N_m``, so every point's mass (matches + slack) sums to
    one. Runs in log space. If the row marginals still miss ``tol`` after the
    last iteration a :class:`NonConvergenceWarning` is emitted and the current
    plan is returned anyway.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not epsilon > 0:
        raise InvalidTemperature("epsilon must be positive")
    z = np.asarray(a, dtype=np.float64) / epsilon
    n_m, n_o = z.shape[0] - 1, z.shape[1] - 1
    log_mu = np.zeros(n_m + 1)
    log_nu = np.zeros(n_o + 1)
    log_mu[0] = np.log(max(n_o, 1))
    log_nu[0] = np.log(max(n_m, 1))
    u = np.zeros(n_m + 1)
    v = np.zeros(n_o + 1)
    # Potentials stay in log space; the kernel is exponentiated once and each
    # half-step shifts by the max potential. Falls back to full logsumexp if
    # the kernel underflows.
    z_max = z.max()
    kernel = np.exp(z - z_max)
    for _ in range(iterations):
        u = _log_update(log_mu, z, kernel, z_max, v, axis=1)
        v = _log_update(log_nu, z, kernel, z_max, u, axis=0)
    plan = np.exp(z + u[:, None] + v[None, :])
    row_err = np.max(np.abs(plan[1:].sum(axis=1) - 1.0)) if n_m else 0.0
    if row_err > tol:
        warnings.warn(f"sinkhorn row marginals off by {row_err:.2e}", NonConvergenceWarning,
                      stacklevel=2)
    return plan


def hard_matches(m: np.ndarray) -> np.ndarray:
    """Row-wise argmax over an assignment matrix: 0 = background, j = point j - 1."""
    return np.argmax(m[1:], axis=1)
