import numpy as np
import pytest

from masklift.geometry import (SimilarityTransform, align_depth_pose,
                               align_two_poses, apply_similarity_to_pose,
                               camera_center)

from fixture_utils import random_pose, random_rotation


def _perturb_scene(rng, gt_pose, gt_depth, scale):
    """Build the 'predicted' twin of a ground-truth view under a known
    similarity q: X_pred = q * R_q X_gt + t_q."""
    sim = SimilarityTransform(scale=scale, rotation=random_rotation(rng),
                              translation=rng.uniform(-2, 2, 3))
    pred_pose = apply_similarity_to_pose(gt_pose, sim)
    pred_depth = gt_depth * scale
    return sim, pred_pose, pred_depth


def test_identity_alignment():
    depth = np.full((20, 20), 2.0)
    pose = np.eye(4)
    sim = align_depth_pose(pose, pose, depth, depth)
    assert sim.scale == 1.0
    assert np.allclose(sim.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(sim.translation, 0, atol=1e-12)


def test_depth_ratio_scale():
    rng = np.random.default_rng(0)
    gt = rng.uniform(1, 5, (30, 30))
    pose = np.eye(4)
    sim = align_depth_pose(pose, pose, gt / 2.0, gt)
    assert abs(sim.scale - 2.0) < 1e-12
    assert np.allclose(sim.rotation, np.eye(3), atol=1e-12)


def test_depth_pose_recovers_known_similarity():
    rng = np.random.default_rng(1)
    for _ in range(20):
        gt_pose = random_pose(rng)
        gt_depth = rng.uniform(0.5, 6.0, (40, 50))
        forward, pred_pose, pred_depth = _perturb_scene(
            rng, gt_pose, gt_depth, scale=1.0 / 0.7)
        est = align_depth_pose(pred_pose, gt_pose, pred_depth, gt_depth)
        # est must invert the perturbation: est(pred points) = gt points
        pts = rng.uniform(-3, 3, (50, 3))
        assert np.allclose(est.apply(forward.apply(pts)), pts, atol=1e-6)
        assert abs(est.scale - 0.7) < 1e-9


def test_depth_pose_scale_under_multiplicative_noise():
    rng = np.random.default_rng(2)
    gt_pose = random_pose(rng)
    gt_depth = rng.uniform(0.5, 6.0, (60, 80))
    _, pred_pose, pred_depth = _perturb_scene(rng, gt_pose, gt_depth,
                                              scale=1.0 / 0.7)
    noise = 1.0 + rng.uniform(-0.01, 0.01, gt_depth.shape)
    est = align_depth_pose(pred_pose, gt_pose, pred_depth * noise, gt_depth)
    assert abs(est.scale - 0.7) / 0.7 < 0.02


def test_pose0_alignment_exact_by_construction():
    rng = np.random.default_rng(3)
    for _ in range(20):
        gt_pose = random_pose(rng)
        gt_depth = rng.uniform(0.5, 4.0, (20, 20))
        _, pred_pose, pred_depth = _perturb_scene(rng, gt_pose, gt_depth, 1.7)
        est = align_depth_pose(pred_pose, gt_pose, pred_depth, gt_depth)
        realigned = apply_similarity_to_pose(pred_pose, est)
        assert np.max(np.abs(realigned - gt_pose)) < 1e-12


def test_depth_pose_requires_overlap():
    pose = np.eye(4)
    depth = np.zeros((30, 30))
    depth[0, :10] = 1.0  # only 10 shared valid pixels
    with pytest.raises(ValueError, match="valid"):
        align_depth_pose(pose, pose, depth, depth)


def test_depth_pose_ignores_invalid_pixels():
    rng = np.random.default_rng(4)
    gt = rng.uniform(1, 5, (30, 30))
    pred = gt / 3.0
    gt_masked = gt.copy()
    gt_masked[:5] = 0.0  # invalid in gt only
    pred_masked = pred.copy()
    pred_masked[5:8] = 0.0  # invalid in pred only
    sim = align_depth_pose(np.eye(4), np.eye(4), pred_masked, gt_masked)
    assert abs(sim.scale - 3.0) < 1e-12


def test_two_poses_identity():
    pose0 = np.eye(4)
    pose1 = np.eye(4)
    pose1[:3, 3] = (1.0, 0.0, 0.0)
    sim = align_two_poses(pose0, pose1, pose0, pose1)
    assert sim.scale == 1.0
    assert np.allclose(sim.rotation, np.eye(3))
    assert np.allclose(sim.translation, 0)


def test_two_poses_distance_ratio():
    pred0, pred1 = np.eye(4), np.eye(4)
    pred1[:3, 3] = (1.0, 0.0, 0.0)  # centers 1 m apart
    gt0, gt1 = np.eye(4), np.eye(4)
    gt1[:3, 3] = (2.0, 0.0, 0.0)  # centers 2 m apart
    sim = align_two_poses(pred0, pred1, gt0, gt1)
    assert abs(sim.scale - 2.0) < 1e-12


def test_two_poses_recovers_random_similarity():
    rng = np.random.default_rng(5)
    for _ in range(30):
        gt0 = random_pose(rng)
        gt1 = random_pose(rng)
        forward = SimilarityTransform(scale=float(rng.uniform(0.3, 3.0)),
                                      rotation=random_rotation(rng),
                                      translation=rng.uniform(-2, 2, 3))
        pred0 = apply_similarity_to_pose(gt0, forward)
        pred1 = apply_similarity_to_pose(gt1, forward)
        est = align_two_poses(pred0, pred1, gt0, gt1)
        assert abs(est.scale - 1.0 / forward.scale) < 1e-9
        realigned = apply_similarity_to_pose(pred0, est)
        assert np.max(np.abs(realigned - gt0)) < 1e-9


def test_two_poses_coincident_centers_rejected():
    pose = np.eye(4)
    with pytest.raises(ValueError, match="coincident"):
        align_two_poses(pose, pose, pose, pose)


def test_camera_center():
    rng = np.random.default_rng(6)
    pose = random_pose(rng)
    center = camera_center(pose)
    # projecting the center yields the origin in camera space
    cam = pose[:3, :3] @ center + pose[:3, 3]
    assert np.allclose(cam, 0, atol=1e-12)
