import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from forest_coreg.errors import FitFailed, NonPositiveResolution
from forest_coreg.features import (
    MAX_AXIS_TILT_DEG,
    MAX_STEM_RADIUS,
    MIN_STEM_RADIUS,
    CanopyHeightMap,
    TreeFeature,
    extract_peaks,
    extract_stems,
    fit_cylinder,
    rasterize_chm,
)
from forest_coreg.geometry import PointCloud, Pose, Source
from forest_coreg.preprocess import Plane


def cylinder_points(rng, center_xy, radius, z=(0.0, 6.0), n=800, noise=0.0, axis=(0, 0, 1)):
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    helper = np.array([1.0, 0, 0]) if abs(axis[0]) < 0.9 else np.array([0, 1.0, 0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    a = rng.uniform(0, 2 * np.pi, n)
    s = rng.uniform(*z, n)
    r = radius + (rng.normal(0, noise, n) if noise else 0.0)
    base = np.array([center_xy[0], center_xy[1], 0.0])
    return base + s[:, None] * axis + (r * np.cos(a))[:, None] * e1 + (r * np.sin(a))[:, None] * e2


def cone_tree(rng, apex=18.0, radius=3.0, center=(0.0, 0.0), n=20000):
    h = apex * (1 - np.sqrt(rng.uniform(0, 1, n)))
    r = radius * (1 - h / apex)
    a = rng.uniform(0, 2 * np.pi, n)
    pts = np.column_stack([center[0] + r * np.cos(a), center[1] + r * np.sin(a), h])
    return np.vstack([pts, [[center[0], center[1], apex]]])


def brute_force_peaks(cells, w):
    out = []
    nr, nc = cells.shape
    for r in range(nr):
        for c in range(nc):
            v = cells[r, c]
            if not np.isfinite(v):
                continue
            strict = True
            for dr in range(-w, w + 1):
                for dc in range(-w, w + 1):
                    if (dr or dc) and 0 <= r + dr < nr and 0 <= c + dc < nc:
                        u = cells[r + dr, c + dc]
                        if np.isfinite(u) and u >= v:
                            strict = False
            if strict:
                out.append((r, c))
    return out


# --- CHM -------------------------------------------------------------------

def test_one_point_per_cell():
    pts = np.array([[0.1, 0.1, 3.0], [0.6, 0.1, 5.0], [0.1, 0.6, 7.0], [0.6, 0.6, 1.0]])
    chm = rasterize_chm(PointCloud(pts), 0.5)
    assert np.array_equal(chm.cells, [[3.0, 5.0], [7.0, 1.0]])


def test_stacked_points_keep_max():
    pts = np.array([[0.2, 0.2, 1.0], [0.3, 0.3, 9.0], [0.25, 0.2, 4.0]])
    chm = rasterize_chm(PointCloud(pts), 1.0)
    assert chm.cells.shape == (1, 1) and chm.cells[0, 0] == 9.0


def test_chm_bad_resolution():
    with pytest.raises(NonPositiveResolution):
        rasterize_chm(PointCloud(np.zeros((3, 3))), 0.0)


def test_cone_apex_height(rng):
    chm = rasterize_chm(PointCloud(cone_tree(rng)), 0.5)
    assert np.nanmax(chm.cells) == pytest.approx(18.0, abs=1e-9)


# --- peaks -----------------------------------------------------------------

def test_single_tree_one_peak(rng):
    chm = rasterize_chm(PointCloud(np.vstack([cone_tree(rng, center=(5.0, 5.0)),
                                              np.column_stack([rng.uniform(0, 10, (3000, 2)), np.zeros(3000)])])),
                        0.5)
    peaks = extract_peaks(chm, 4, 5.0, Plane.horizontal(0.0))
    assert len(peaks) == 1
    assert np.linalg.norm(peaks[0].position_xy - [5.0, 5.0]) <= 0.5 * np.sqrt(2) + 1e-9
    assert peaks[0].height == pytest.approx(18.0, abs=1e-9)
    assert peaks[0].source is Source.ALS


def test_two_trees_ten_metres_apart(rng):
    pts = np.vstack([cone_tree(rng, center=(5.0, 5.0)), cone_tree(rng, 15.0, center=(15.0, 5.0)),
                     np.column_stack([rng.uniform(0, 20, (5000, 2)), np.zeros(5000)])])
    peaks = extract_peaks(rasterize_chm(PointCloud(pts), 0.5), 4, 5.0, Plane.horizontal(0.0))
    assert len(peaks) == 2
    d = np.linalg.norm(peaks[0].position_xy - peaks[1].position_xy)
    assert d == pytest.approx(10.0, abs=1.0)


def test_flat_chm_has_no_peaks():
    chm = CanopyHeightMap(np.zeros(2), 0.5, np.full((20, 20), 12.0))
    assert extract_peaks(chm, 2, 0.0) == []


def test_peak_window_must_be_positive():
    with pytest.raises(ValueError):
        extract_peaks(CanopyHeightMap(np.zeros(2), 0.5, np.ones((3, 3))), 0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
              elements=st.one_of(st.integers(0, 6).map(float), st.just(np.nan))),
       st.integers(1, 3))
def test_peaks_match_brute_force(cells, w):
    chm = CanopyHeightMap(np.zeros(2), 1.0, cells)
    got = [(int(round(p.position_xy[1] - 0.5)), int(round(p.position_xy[0] - 0.5)))
           for p in extract_peaks(chm, w, -np.inf)]
    assert got == brute_force_peaks(cells, w)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 15), st.integers(2, 15)), elements=st.floats(0, 30)))
def test_peak_count_non_increasing_in_window(cells):
    chm = CanopyHeightMap(np.zeros(2), 0.5, cells)
    counts = [len(extract_peaks(chm, w, 0.0)) for w in range(1, 6)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


# --- cylinders -------------------------------------------------------------

def test_noiseless_cylinder_exact(rng):
    pts = cylinder_points(rng, (1.0, -2.0), 0.23, n=500)
    fit = fit_cylinder(pts)
    assert abs(fit.radius - 0.23) < 1e-6
    assert np.allclose(fit.axis, [0, 0, 1], atol=1e-6)
    assert fit.inliers == 500


def test_tilted_noiseless_cylinder(rng):
    axis = np.array([np.sin(np.deg2rad(10)), 0.0, np.cos(np.deg2rad(10))])
    pts = cylinder_points(rng, (0.0, 0.0), 0.3, n=600, axis=axis)
    fit = fit_cylinder(pts)
    assert abs(fit.radius - 0.3) < 1e-6
    assert fit.tilt_deg() == pytest.approx(10.0, abs=1e-4)


def test_cylinder_with_outliers_monte_carlo():
    ok = 0
    for seed in range(40):
        rng = np.random.default_rng(seed)
        inl = cylinder_points(rng, (0.0, 0.0), 0.2, n=400, noise=0.01)
        out = np.column_stack([rng.uniform(-1, 1, (100, 2)), rng.uniform(0, 6, 100)])
        try:
            fit = fit_cylinder(np.vstack([inl, out]), seed=seed)
        except FitFailed:
            continue
        ok += abs(fit.radius - 0.2) < 0.02
    assert ok >= 38  # 95% of seeds


def test_planar_points_fail(rng):
    pts = np.column_stack([rng.uniform(-1, 1, (300, 2)), np.zeros(300)])
    with pytest.raises(FitFailed):
        fit_cylinder(pts)


def test_too_few_points(rng):
    with pytest.raises(FitFailed):
        fit_cylinder(cylinder_points(rng, (0, 0), 0.2, n=10))


# --- stems -----------------------------------------------------------------

def _stand(rng, centers, radius=0.2, noise=0.01):
    ground = np.column_stack([rng.uniform(-10, 10, (3000, 2)), rng.normal(0, noise, 3000)])
    stems = [cylinder_points(rng, c, radius, z=(0.0, 8.0), n=1500, noise=noise) for c in centers]
    return np.vstack([ground] + stems)


def test_single_stem(rng):
    feats = extract_stems(PointCloud(_stand(rng, [(1.0, 2.0)])), Plane.horizontal(0.0))
    assert len(feats) == 1
    f = feats[0]
    assert f.radius == pytest.approx(0.2, abs=0.02)
    assert np.linalg.norm(f.position_xy - [1.0, 2.0]) < 0.03
    assert f.source is Source.MLS


def test_empty_slice(rng):
    pts = cylinder_points(rng, (0, 0), 0.2, z=(6.0, 10.0))
    assert extract_stems(PointCloud(pts), Plane.horizontal(0.0)) == []


def test_two_stems_four_metres_apart(rng):
    feats = extract_stems(PointCloud(_stand(rng, [(0.0, 0.0), (4.0, 0.0)])), Plane.horizontal(0.0), eps=0.5)
    assert len(feats) == 2
    d = np.linalg.norm(feats[0].position_xy - feats[1].position_xy)
    assert d == pytest.approx(4.0, abs=0.05)


def test_stems_equivariant_under_planar_motion(rng):
    centers = [(-4.0, -3.0), (0.5, 4.0), (5.0, -1.0), (-1.0, 0.5)]
    pts = _stand(rng, centers)
    a = extract_stems(PointCloud(pts), Plane.horizontal(0.0))
    T = Pose.from_rotvec([0, 0, 0.7], [12.0, -30.0, 0.0])
    b = extract_stems(PointCloud(T.apply(pts)), Plane.horizontal(0.0))
    assert len(a) == len(b) == 4
    moved = np.array([T.apply(np.r_[f.position_xy, 0.0])[:2] for f in a])
    for f in b:
        assert np.min(np.linalg.norm(moved - f.position_xy, axis=1)) < 0.02


def test_stem_features_respect_invariants(rng):
    centers = rng.uniform(-8, 8, (6, 2))
    centers = centers[np.all(np.linalg.norm(centers[:, None] - centers[None], axis=2) + np.eye(6) * 9 > 2, axis=1)]
    feats = extract_stems(PointCloud(_stand(rng, centers, radius=0.3)), Plane.horizontal(0.0))
    assert feats
    for f in feats:
        assert MIN_STEM_RADIUS <= f.radius <= MAX_STEM_RADIUS
        assert np.degrees(np.arccos(f.axis[2])) <= MAX_AXIS_TILT_DEG


def test_tree_feature_validation():
    with pytest.raises(ValueError):
        TreeFeature([0, 0], radius=1.5)
    with pytest.raises(ValueError):
        TreeFeature([0, 0], axis=[1, 0, 0.2])
    f = TreeFeature([1, 2], axis=[0, 0, -1])
    assert np.allclose(f.axis, [0, 0, 1])
