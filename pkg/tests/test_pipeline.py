import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pose_match import network as nn
from pose_match.errors import InsufficientCorrespondence, TooFewPoints
from pose_match.geometry import NormalizationInfo, PointCloud, Pose, axis_angle_to_matrix
from pose_match.pipeline import (PipelineConfig, coarse_point_matching, coarse_stage,
                                 correspondence_residual, estimate_pose, fine_from_attention,
                                 fine_point_matching, fine_stage, match_confidence, to_internal,
                                 to_reported)
from pose_match.synth import evaluate_pose, make_instance

from conftest import random_pose

FAST = PipelineConfig(n_coarse=96, n_fine=512, n_sparse=96, n_hyp=1000, keep=100)


@pytest.fixture(scope="module")
def weights():
    return nn.init_weights(0)


def normalized(inst):
    c_m = inst.proposal.points.mean(axis=0)
    pm = PointCloud((inst.proposal.points - c_m) / inst.info.radius, inst.proposal.descriptors)
    po = PointCloud((inst.model.points - inst.info.center) / inst.info.radius, inst.model.descriptors)
    gt = to_internal(inst.gt_pose, c_m, inst.info.center, inst.info.radius)
    return pm, po, gt, c_m


def clean_instance(seed, n=2048):
    return make_instance(seed, n_points=n, occlusion=0.0, noise=0.0, outliers=0.0, corruption=0.0)


def move_instance(inst, motion: Pose, scale: float = 1.0):
    """Proposal moved by ``motion`` (camera frame); everything scaled by ``scale``."""
    prop = PointCloud(scale * motion.apply(inst.proposal.points), inst.proposal.descriptors)
    model = PointCloud(scale * inst.model.points, inst.model.descriptors)
    info = NormalizationInfo(scale * inst.info.center, scale * inst.info.radius)
    return prop, model, info


# --- conventions ---------------------------------------------------------------------

@given(st.integers(0, 2**31 - 1), st.floats(0.01, 10.0))
def test_convention_round_trip(seed, radius):
    rng = np.random.default_rng(seed)
    internal = random_pose(seed, 0.5)
    c_m, c_o = rng.normal(size=3), rng.normal(size=3)
    rep = to_reported(internal, c_m, c_o, radius)
    back = to_internal(rep, c_m, c_o, radius)
    assert np.abs(back.rotation - internal.rotation).max() < 1e-9
    assert np.abs(back.translation - internal.translation).max() < 1e-9
    # composing the internal pose with the inverse of its reported form is the identity map
    x_model = rng.normal(size=(10, 3))
    x_cam = rep.apply(x_model)
    p_o = internal.apply((x_cam - c_m) / radius)
    assert np.abs(p_o * radius + c_o - x_model).max() < 1e-9


def test_config_validation():
    for bad in ({"transformer": "x"}, {"stages": "x"}, {"assignment": "x"}):
        with pytest.raises(ValueError):
            PipelineConfig(**bad)


def test_match_confidence():
    p = np.array([[0.2, 0.1], [0.0, 0.0], [0.05, 0.6]])
    assert match_confidence(p) == pytest.approx(0.4)
    assert match_confidence(np.zeros((3, 2))) == 0.0


# --- coarse stage --------------------------------------------------------------------

def test_coarse_identity_self_match(weights):
    inst = clean_instance(5)
    po = PointCloud((inst.model.points - inst.info.center) / inst.info.radius, inst.model.descriptors)
    pose = coarse_point_matching(po, po, weights)
    assert np.degrees(np.arccos(np.clip((np.trace(pose.rotation) - 1) / 2, -1, 1))) < 2.0
    assert np.linalg.norm(pose.translation) < 0.02


def test_coarse_all_background_raises(weights):
    inst = clean_instance(3)
    pm, po, _, _ = normalized(inst)
    adversarial = np.tile(weights["coarse/bg_o"], (len(pm), 1))
    with pytest.raises(InsufficientCorrespondence):
        coarse_stage(PointCloud(pm.points, adversarial), po, weights)


def test_coarse_is_deterministic(weights):
    pm, po, _, _ = normalized(make_instance(2, n_points=1024))
    a = coarse_stage(pm, po, weights, FAST)
    b = coarse_stage(pm, po, weights, FAST)
    assert np.array_equal(a.pose.rotation, b.pose.rotation)
    assert np.array_equal(a.a_tilde, b.a_tilde)


# --- fine stage ----------------------------------------------------------------------

def test_fine_from_gt_does_not_increase_residual(weights):
    pm, po, gt, _ = normalized(clean_instance(7))
    res = fine_stage(pm, po, gt, weights)
    assert correspondence_residual(res.pose, res.src, res.dst, res.weights) <= \
        correspondence_residual(gt, res.src, res.dst, res.weights)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fine_never_increases_its_residual(weights, seed):
    pm, po, gt, _ = normalized(clean_instance(seed, 1024))
    init = Pose(axis_angle_to_matrix([1, 2, 3], 0.15) @ gt.rotation, gt.translation + 0.05)
    res = fine_stage(pm, po, init, weights, FAST)
    assert correspondence_residual(res.pose, res.src, res.dst, res.weights) <= \
        correspondence_residual(init, res.src, res.dst, res.weights) + 1e-15


def test_fine_rejects_all_background():
    a = np.zeros((6, 5))
    a[:, 0] = 10.0
    a[0, :] = 10.0
    pts = np.random.default_rng(0).normal(size=(5, 3))
    with pytest.raises(InsufficientCorrespondence):
        fine_from_attention(a, pts, pts[:4])


@pytest.mark.slow
def test_fine_refines_perturbed_init(weights):
    better = 0
    for s in range(100):
        inst = make_instance(1000 + s, family=("box-cluster", "random-blob")[s % 2])
        pm, po, gt, c_m = normalized(inst)
        rng = np.random.default_rng(s)
        dt = rng.normal(size=3)
        dt *= 0.1 / np.linalg.norm(dt)
        init = Pose(axis_angle_to_matrix(rng.normal(size=3), np.deg2rad(10.0)) @ gt.rotation,
                    gt.translation + dt)
        pose, _ = fine_point_matching(pm, po, init, weights)
        err = lambda p: evaluate_pose(to_reported(p, c_m, inst.info.center, inst.info.radius),
                                      inst.gt_pose, inst.model)["add"]
        better += err(pose) < err(init)
    print(f"fine refinement improved {better}/100 trials")
    assert better >= 90


# --- end to end ------------------------------------------------------------------------

def test_estimate_clean_planted_pose(weights):
    inst = clean_instance(3)
    est = estimate_pose(inst.proposal, inst.model, inst.info, weights)
    r = evaluate_pose(est.pose, inst.gt_pose, inst.model)
    assert r["rot_err_deg"] < 2.0 and r["trans_err"] < 0.02
    assert 0.0 <= est.confidence <= 1.0
    assert set(est.diagnostics) == {"coarse_foreground", "fine_foreground", "fine_correspondences"}
    d = est.to_dict()
    assert set(d) == {"pose", "initial_pose", "confidence", "diagnostics"}


def test_estimate_too_few_points(weights):
    inst = clean_instance(0, 256)
    tiny = PointCloud(inst.proposal.points[:2], inst.proposal.descriptors[:2])
    with pytest.raises(TooFewPoints):
        estimate_pose(tiny, inst.model, inst.info, weights)


@settings(max_examples=3)
@given(st.integers(0, 1000))
def test_frame_equivariance(weights, seed):
    inst = make_instance(seed, n_points=1024)
    base = estimate_pose(inst.proposal, inst.model, inst.info, weights, FAST).pose
    motion = random_pose(seed + 7, 0.3)
    prop, model, info = move_instance(inst, motion)
    moved = estimate_pose(prop, model, info, weights, FAST).pose
    expect = motion.compose(base)
    assert np.abs(moved.rotation - expect.rotation).max() < 1e-6
    assert np.abs(moved.translation - expect.translation).max() < 1e-6


@pytest.mark.parametrize("scale", [0.1, 3.0])
def test_scale_invariance(weights, scale):
    inst = make_instance(4, n_points=1024)
    base = estimate_pose(inst.proposal, inst.model, inst.info, weights, FAST).pose
    prop, model, info = move_instance(inst, Pose.identity(), scale)
    scaled = estimate_pose(prop, model, info, weights, FAST).pose
    assert np.abs(scaled.rotation - base.rotation).max() < 1e-9
    assert np.abs(scaled.translation - scale * base.translation).max() < 1e-9 * scale


@pytest.mark.parametrize("overrides", [
    {"stages": "coarse"}, {"stages": "fine"}, {"transformer": "full"}, {"transformer": "linear"},
    {"assignment": "sinkhorn"},
])
def test_variants_run(weights, overrides):
    inst = make_instance(6, n_points=1024)
    cfg = PipelineConfig(**{**FAST.to_dict(), **overrides})
    est = estimate_pose(inst.proposal, inst.model, inst.info, weights, cfg)
    assert np.all(np.isfinite(est.pose.as_matrix()))
    assert 0.0 <= est.confidence <= 1.0
    if overrides.get("stages") == "fine":
        # identity init, reported in the camera frame
        assert np.allclose(est.initial_pose.rotation, np.eye(3))
