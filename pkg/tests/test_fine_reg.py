import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree

from forest_coreg.errors import NoCorrespondences
from forest_coreg.fine_reg import RegistrationResult, filter_matches, icp, umeyama_3d, voxel_subsample
from forest_coreg.geometry import PointCloud, Pose, se3_exp, se3_log
from forest_coreg.synthetic import forest_scene, generate_forest

from conftest import random_pose


@pytest.fixture(scope="module")
def scene():
    forest = generate_forest(30, 40.0, seed=21)
    return forest_scene(forest, (20.0, 20.0), 20.0, density=150.0, seed=21)


def _payload(scene, rng, center=(20.0, 20.0), radius=10.0, noise=0.01):
    sub = scene[np.hypot(scene[:, 0] - center[0], scene[:, 1] - center[1]) < radius]
    return sub + rng.normal(0, noise, sub.shape) if noise else sub.copy()


def test_self_registration_is_identity(scene):
    c = PointCloud(scene[:20000])
    r = icp(c, c, Pose.identity())
    assert np.allclose(r.transform.matrix(), np.eye(4), atol=1e-9)
    assert r.fitness == 1.0
    assert r.inlier_rmse < 1e-12


def test_recovers_small_shift(scene):
    src = scene[:30000]
    tgt = src + [0.1, 0.0, 0.0]
    r = icp(PointCloud(src), PointCloud(tgt), Pose.identity(), max_corr_dist=0.5)
    assert np.allclose(r.transform.t, [0.1, 0.0, 0.0], atol=1e-6)
    assert np.allclose(r.transform.R, np.eye(3), atol=1e-6)


def test_monte_carlo_offset_and_noise(scene):
    target = PointCloud(scene)
    tree = cKDTree(scene)
    ok = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        T = Pose.from_rotvec([0, 0, rng.uniform(-np.pi, np.pi)], rng.normal(0, 5, 3))
        src = PointCloud(T.inverse().apply(_payload(scene, rng)))
        d = rng.normal(size=3)
        init = Pose.from_rotvec([0, 0, 0], 0.2 * d / np.linalg.norm(d)) @ T
        r = icp(src, target, init, target_tree=tree)
        ok += r.inlier_rmse < 0.02 and np.linalg.norm((r.transform.inverse() @ T).t) < 0.05
    assert ok >= 19  # 95% of seeds


def test_no_correspondences(rng):
    a = PointCloud(rng.uniform(0, 1, (100, 3)))
    b = PointCloud(rng.uniform(0, 1, (100, 3)) + 50.0)
    with pytest.raises(NoCorrespondences):
        icp(a, b, Pose.identity())


def test_empty_cloud_rejected(rng):
    with pytest.raises(ValueError):
        icp(PointCloud(np.empty((0, 3))), PointCloud(rng.normal(size=(10, 3))))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(10, 400))
def test_self_match_identity_property(seed, n):
    pts = np.random.default_rng(seed).uniform(-5, 5, (n, 3))
    r = icp(PointCloud(pts), PointCloud(pts), Pose.identity(), voxel_size=0.0)
    assert np.allclose(r.transform.matrix(), np.eye(4), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_umeyama_update_does_not_increase_objective(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(60, 3))
    dst = se3_exp(rng.normal(0, 0.3, 6)).apply(src) + rng.normal(0, 0.05, src.shape)
    before = np.mean(np.sum((src - dst) ** 2, axis=1))
    step = umeyama_3d(src, dst)
    after = np.mean(np.sum((step.apply(src) - dst) ** 2, axis=1))
    assert after <= before + 1e-12


def test_umeyama_exact(rng):
    src = rng.normal(size=(20, 3))
    T = random_pose(rng)
    est = umeyama_3d(src, T.apply(src))
    assert np.linalg.norm(se3_log(est.inverse() @ T)) < 1e-9


def test_voxel_subsample_keeps_measured_points(rng):
    pts = rng.uniform(0, 1, (2000, 3))
    sub = voxel_subsample(pts, 0.25)
    assert len(sub) == len(np.unique(np.floor(pts / 0.25), axis=0))
    assert set(map(tuple, sub)) <= set(map(tuple, pts))


# --- filtering -------------------------------------------------------------

def _result(fitness, n, cid="x"):
    return RegistrationResult(cid, Pose.identity(), fitness, 0.01, n)


def test_all_good_accepted():
    out = filter_matches([_result(0.9, 1000), _result(0.5, 800)])
    assert all(r.accepted for r in out)


def test_zero_inliers_rejected():
    out = filter_matches([_result(0.9, 1000), _result(0.0, 0)])
    assert [r.accepted for r in out] == [True, False]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 2000)), max_size=20),
       st.integers(0, 1000), st.floats(0, 1))
def test_filter_idempotent(items, min_inliers, min_fitness):
    rs = [_result(f, n) for f, n in items]
    once = filter_matches(rs, min_inliers, min_fitness)
    assert filter_matches(once, min_inliers, min_fitness) == once


def test_labeled_good_and_bad_registrations(scene):
    target = PointCloud(scene)
    tree = cKDTree(scene)
    rng = np.random.default_rng(5)
    results, labels = [], []
    for k in range(8):
        good = k % 2 == 0
        T = Pose.from_rotvec([0, 0, rng.uniform(-3, 3)], rng.normal(0, 3, 3))
        if good:
            src = PointCloud(T.inverse().apply(_payload(scene, rng, radius=8.0)))
            init = Pose.from_rotvec([0, 0, 0.01], [0.15, -0.1, 0.05]) @ T
        else:
            # a scan of somewhere else: random clutter placed over the scene
            clutter = rng.uniform([12, 12, 0], [28, 28, 25], (20000, 3))
            src = PointCloud(T.inverse().apply(clutter))
            init = T
        results.append(dataclasses.replace(icp(src, target, init, target_tree=tree), cloud_id=str(k)))
        labels.append(good)
    accepted = [r.accepted for r in filter_matches(results, min_inliers=500, min_fitness=0.3)]
    assert accepted == labels


def test_result_validation_and_serialization():
    with pytest.raises(ValueError):
        RegistrationResult("a", Pose.identity(), 1.5, 0.0, 1)
    with pytest.raises(ValueError):
        RegistrationResult("a", Pose.identity(), 0.5, -1.0, 1)
    r = RegistrationResult("p3", Pose.from_rotvec([0.1, 0.2, 0.3], [1, 2, 3]), 0.7, 0.02, 900, True)
    back = RegistrationResult.from_dict(r.to_dict())
    assert back.cloud_id == "p3" and back.accepted and back.num_inliers == 900
    assert np.allclose(back.transform.matrix(), r.transform.matrix(), atol=1e-12)
