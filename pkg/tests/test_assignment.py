import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pose_match.assignment import (ForegroundMasks, PoseHypothesis, attention_matrix,
                                   foreground_masks, hard_matches, hypothesis_scores,
                                   match_probabilities, sample_hypothesis_arrays,
                                   sample_pose_hypotheses, sample_triplet_pairs,
                                   score_and_select_pose, sinkhorn_assignment, soft_assignment)
from pose_match.errors import (AllBackground, EmptyHypotheses, InsufficientCorrespondence,
                               InvalidTemperature, NonConvergenceWarning, RetryExhausted,
                               ShapeMismatch)
from pose_match.geometry import Pose, axis_angle_to_matrix

from conftest import random_pose

seeds = st.integers(0, 2**31 - 1)


def brute_soft(a, tau):
    """Per-entry double loop: exp-normalized along the row times along the column."""
    n, m = a.shape
    out = np.empty_like(a)
    for i in range(n):
        for j in range(m):
            row = sum(np.exp((a[i, k] - a[i, j]) / tau) for k in range(m))
            col = sum(np.exp((a[k, j] - a[i, j]) / tau) for k in range(n))
            out[i, j] = 1.0 / (row * col)
    return out


# --- attention matrix ----------------------------------------------------------

def test_attention_matrix_examples():
    assert np.array_equal(attention_matrix(np.zeros((4, 5)), np.zeros((3, 5))), np.zeros((4, 3)))
    fm = np.array([[1.0, 2.0], [3.0, -1.0]])
    fo = np.array([[0.5, 0.5], [2.0, 1.0]])
    assert attention_matrix(fm, fo).tolist() == [[1.5, 4.0], [1.0, 5.0]]
    with pytest.raises(ShapeMismatch):
        attention_matrix(np.zeros((2, 3)), np.zeros((2, 4)))


# --- soft assignment -----------------------------------------------------------

def test_soft_assignment_uniform_and_dominant():
    out = soft_assignment(np.zeros((4, 3)), 0.05)
    assert np.allclose(out, 1.0 / 12, atol=1e-15)
    a = np.zeros((3, 3))
    a[1, 2] = 1.0
    assert soft_assignment(a, 0.01)[1, 2] > 0.99
    with pytest.raises(InvalidTemperature):
        soft_assignment(a, 0.0)


@given(seeds)
def test_soft_assignment_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 3))
    assert np.abs(soft_assignment(a, 0.3) - brute_soft(a, 0.3)).max() < 1e-12


@given(seeds, st.floats(0.01, 100.0), st.floats(-50, 50))
def test_soft_assignment_invariances(seed, c, shift):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(5, 4))
    base = soft_assignment(a, 0.5)
    assert np.all(base > 0) and np.all(base <= 1)
    assert np.abs(soft_assignment(a * c, 0.5 * c) - base).max() < 1e-12
    shifted = soft_assignment(a + shift, 0.5)
    assert np.abs(shifted - base).max() < 1e-12
    assert np.array_equal(foreground_masks(shifted).mask_m, foreground_masks(base).mask_m)


# --- masks and probabilities ---------------------------------------------------

def test_masks_all_background_and_identity():
    at = np.full((4, 4), 0.01)
    at[1:, 0] = 0.5
    assert foreground_masks(at).mask_m.tolist() == [0, 0, 0]
    at = np.full((4, 4), 0.01)
    at[1:, 1:] += np.eye(3)
    m = foreground_masks(at)
    assert m.mask_m.tolist() == [1, 1, 1] and m.mask_o.tolist() == [1, 1, 1]


def test_masks_hand_built_mixed_case():
    at = np.array([
        [0.00, 0.30, 0.10, 0.20],
        [0.40, 0.10, 0.05, 0.05],   # row 1 -> background
        [0.10, 0.10, 0.60, 0.10],   # row 2 -> foreground
        [0.20, 0.05, 0.05, 0.20],   # row 3 tie -> foreground
    ])
    m = foreground_masks(at)
    for i in range(3):
        assert m.mask_m[i] == int(np.argmax(at[i + 1]) != 0 or at[i + 1, 0] == at[i + 1, 1:].max())
    assert m.mask_m.tolist() == [0, 1, 1]
    # columns: col 1 best is row 0 (0.30) -> background; col 2 foreground; col 3 tie -> foreground
    assert m.mask_o.tolist() == [0, 1, 1]


def test_match_probabilities_examples():
    at = np.full((3, 3), 0.25)
    masks = ForegroundMasks(np.ones(2, dtype=np.int8), np.ones(2, dtype=np.int8))
    p = match_probabilities(at, masks, normalize=True)
    assert np.allclose(p, 0.25)
    at = np.array([[0, 0, 0], [0, 0.04, 0.01], [0, 0.02, 0.03]], dtype=float)
    p1 = match_probabilities(at, masks, 1.0)
    assert np.array_equal(p1, at[1:, 1:])
    p15 = match_probabilities(at, masks, 1.5)
    assert p15[0, 0] / p15[0, 1] == pytest.approx(8.0, rel=1e-12)
    with pytest.raises(AllBackground):
        match_probabilities(at, ForegroundMasks(np.zeros(2, np.int8), np.ones(2, np.int8)))


@given(seeds)
def test_match_probabilities_zero_on_background(seed):
    rng = np.random.default_rng(seed)
    at = soft_assignment(rng.normal(size=(6, 5)), 0.2)
    masks = foreground_masks(at)
    if masks.mask_m.sum() == 0 or masks.mask_o.sum() == 0:
        return
    try:
        p = match_probabilities(at, masks, 1.5)
    except AllBackground:
        return
    assert np.all(p >= 0)
    assert np.all(p[masks.mask_m == 0] == 0) and np.all(p[:, masks.mask_o == 0] == 0)


# --- hypotheses ------------------------------------------------------------------

def planted(seed, n=12):
    rng = np.random.default_rng(seed)
    pts_m = rng.normal(size=(n, 3))
    gt = random_pose(seed + 1)
    return pts_m, gt.apply(pts_m), gt


def test_one_hot_planted_hypotheses_equal_gt():
    pts_m, pts_o, gt = planted(0)
    p = np.eye(len(pts_m))
    hyps = sample_pose_hypotheses(p, pts_m, pts_o, 50, seed=1)
    for h in hyps:
        assert np.abs(h.pose.rotation - gt.rotation).max() < 1e-6
        assert np.abs(h.pose.translation - gt.translation).max() < 1e-6


def test_zero_hypotheses_and_determinism():
    pts_m, pts_o, _ = planted(2)
    p = np.random.default_rng(0).uniform(size=(12, 12))
    assert sample_pose_hypotheses(p, pts_m, pts_o, 0, seed=0) == []
    a = sample_hypothesis_arrays(p, pts_m, pts_o, 40, 5)
    b = sample_hypothesis_arrays(p, pts_m, pts_o, 40, 5)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_insufficient_and_degenerate():
    pts_m, pts_o, _ = planted(3)
    p = np.zeros((12, 12))
    p[0, 0] = p[1, 1] = 1.0
    with pytest.raises(InsufficientCorrespondence):
        sample_pose_hypotheses(p, pts_m, pts_o, 5)
    line = np.outer(np.arange(12.0), [1.0, 0.5, 0.2])
    with pytest.raises(RetryExhausted):
        sample_pose_hypotheses(np.eye(12), line, line, 5, max_retries=3)


def test_triplet_frequencies_follow_p():
    # repeated points make a triplet collinear, so a small P would be
    # reshaped by rejections; with 64 points per side they are rare
    rng = np.random.default_rng(11)
    k = 64
    pts_m, pts_o = rng.normal(size=(k, 3)), rng.normal(size=(k, 3))
    p = rng.uniform(0.5, 1.5, size=(k, k))
    n = 100_000
    picks = sample_triplet_pairs(p, pts_m, pts_o, n, seed=3).ravel()
    expected = 3 * n * (p / p.sum()).ravel()
    counts = np.bincount(picks, minlength=k * k)
    # chi-square over all pair cells, held within 3 sigma of its mean
    chi2 = np.sum((counts - expected) ** 2 / expected)
    dof = k * k - 1
    assert abs(chi2 - dof) <= 3 * np.sqrt(2 * dof)


def test_select_single_and_empty():
    pts_m, pts_o, gt = planted(4)
    h = PoseHypothesis(random_pose(99), 0.5)
    assert score_and_select_pose([h], pts_m, pts_o) is h.pose
    with pytest.raises(EmptyHypotheses):
        score_and_select_pose([], pts_m, pts_o)


def test_perfect_pose_score_and_selection():
    pts_m, pts_o, gt = planted(5)
    s = hypothesis_scores(gt.rotation[None], gt.translation[None], pts_m, pts_o, 1e-6)
    assert s[0] == pytest.approx(len(pts_m) / 1e-6, rel=1e-6)
    off = Pose(axis_angle_to_matrix([1, 1, 0], np.deg2rad(30)) @ gt.rotation, gt.translation)
    hyps = [PoseHypothesis(off, 0.1), PoseHypothesis(gt, 0.2)]
    chosen = score_and_select_pose(hyps, pts_m, pts_o, keep=2)
    assert chosen is gt
    assert hyps[1].s_hyp > hyps[0].s_hyp


def test_keep_filters_by_pair_distance():
    pts_m, pts_o, gt = planted(6)
    bad = Pose(axis_angle_to_matrix([0, 0, 1], 1.0), gt.translation)
    hyps = [PoseHypothesis(bad, 0.01), PoseHypothesis(gt, 0.5)]
    assert score_and_select_pose(hyps, pts_m, pts_o, keep=1) is bad


@given(seeds)
def test_s_hyp_decreases_with_residual(seed):
    pts_m, pts_o, gt = planted(seed % 1000)
    scores = []
    for shift in (0.0, 0.1, 0.3, 0.9):
        t = gt.translation + np.array([shift, 0, 0])
        scores.append(hypothesis_scores(gt.rotation[None], t[None], pts_m, pts_o)[0])
    assert all(a > b for a, b in zip(scores, scores[1:]))


# --- sinkhorn ----------------------------------------------------------------------

def test_sinkhorn_uniform_input_gives_uniform_inner_block():
    plan = sinkhorn_assignment(np.zeros((5, 4)), 100, 0.05)
    inner = plan[1:, 1:]
    assert np.allclose(inner, inner[0, 0], rtol=1e-12)
    assert np.allclose(plan[1:].sum(axis=1), 1.0, atol=1e-6)
    assert np.allclose(plan[:, 1:].sum(axis=0), 1.0, atol=1e-6)


def test_sinkhorn_marginals_after_100_iterations():
    a = np.random.default_rng(0).normal(scale=0.05, size=(9, 7))
    with warnings.catch_warnings():
        warnings.simplefilter("error", NonConvergenceWarning)
        plan = sinkhorn_assignment(a, 100, 0.05)
    assert np.abs(plan[1:].sum(axis=1) - 1).max() < 1e-6
    assert np.abs(plan[:, 1:].sum(axis=0) - 1).max() < 1e-6
    assert plan[0].sum() == pytest.approx(6.0, rel=1e-6)


def test_sinkhorn_flags_nonconvergence():
    a = np.random.default_rng(1).normal(scale=3.0, size=(30, 30))
    with pytest.warns(NonConvergenceWarning):
        plan = sinkhorn_assignment(a, 1, 0.05)
    assert np.all(np.isfinite(plan))
    with pytest.raises(ValueError):
        sinkhorn_assignment(a, 0)


def test_sinkhorn_matches_textbook_log_domain():
    from scipy.special import logsumexp
    a = np.random.default_rng(2).normal(size=(20, 15))
    z = a / 0.05
    lm, ln = np.zeros(20), np.zeros(15)
    lm[0], ln[0] = np.log(14), np.log(19)
    u, v = np.zeros(20), np.zeros(15)
    for _ in range(100):
        u = lm - logsumexp(z + v[None], axis=1)
        v = ln - logsumexp(z + u[:, None], axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergenceWarning)
        plan = sinkhorn_assignment(a, 100, 0.05)
    assert np.abs(plan - np.exp(z + u[:, None] + v[None])).max() < 1e-12


def test_sinkhorn_survives_extreme_logits():
    from scipy.special import logsumexp
    a = np.zeros((4, 4))
    a[1, 1] = 80.0  # z spread of 1600 underflows the shared kernel
    z = a / 0.05
    lm, ln = np.log([3.0, 1, 1, 1]), np.log([3.0, 1, 1, 1])
    u, v = np.zeros(4), np.zeros(4)
    for _ in range(50):
        u = lm - logsumexp(z + v[None], axis=1)
        v = ln - logsumexp(z + u[:, None], axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergenceWarning)
        plan = sinkhorn_assignment(a, 50, 0.05)
    assert np.all(np.isfinite(plan))
    assert np.abs(plan - np.exp(z + u[:, None] + v[None])).max() < 1e-12


@given(seeds)
def test_wide_margin_hard_matches_agree_with_sinkhorn(seed):
    rng = np.random.default_rng(seed)
    n = 8
    perm = rng.permutation(n)
    a = rng.uniform(-0.02, 0.02, size=(n + 1, n + 1))
    a[1 + np.arange(n), 1 + perm] += 1.0  # margin ~1 >> 2 tau
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergenceWarning)
        sk = sinkhorn_assignment(a, 100, 0.05)
    assert np.array_equal(hard_matches(soft_assignment(a, 0.05)), hard_matches(sk))
    assert np.array_equal(hard_matches(sk), 1 + perm)
