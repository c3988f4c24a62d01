import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from forest_coreg.analysis import (
    cloud_to_cloud_error,
    extract_tree_traits,
    read_csv,
    segment_trees,
    voxel_occupancy_profile,
    write_errors_csv,
    write_occupancy_csv,
)
from forest_coreg.errors import NonPositiveResolution, NoOverlap
from forest_coreg.features import TreeFeature
from forest_coreg.geometry import PointCloud, Pose
from forest_coreg.preprocess import Plane
from forest_coreg.synthetic import ForestModel, Tree, forest_scene, make_dataset


def grid_plane(step=0.02, size=2.0):
    g = np.arange(0.0, size, step)
    x, y = np.meshgrid(g, g)
    return np.column_stack([x.ravel(), y.ravel(), np.zeros(x.size)])


def single_tree_forest(height=18.0):
    tree = Tree(np.array([10.0, 10.0]), height, 2.0, 0.2, np.array([0.0, 0.0, 1.0]), 9.0)
    return ForestModel((tree,), 20.0, [0.0, 0.0, 0.0])


# --- cloud to cloud --------------------------------------------------------

def test_identical_clouds_zero_error(rng):
    c = PointCloud(rng.normal(size=(5000, 3)))
    e = cloud_to_cloud_error(c, c)
    assert (e.mean, e.rmse, e.std) == (0.0, 0.0, 0.0)


def test_vertical_shift_of_plane():
    p = grid_plane()
    e = cloud_to_cloud_error(PointCloud(p), PointCloud(p + [0, 0, 0.1]))
    assert e.mean == pytest.approx(0.1, abs=1e-12)
    assert e.rmse == pytest.approx(0.1, abs=1e-12)


def test_no_overlap(rng):
    with pytest.raises(NoOverlap):
        cloud_to_cloud_error(PointCloud(rng.normal(size=(10, 3))), PointCloud(rng.normal(size=(10, 3)) + 100))
    with pytest.raises(NoOverlap):
        cloud_to_cloud_error(PointCloud(np.empty((0, 3))), PointCloud(rng.normal(size=(10, 3))))


def test_misaligned_scan_has_larger_error():
    forest = single_tree_forest()
    scene = forest_scene(forest, (10.0, 10.0), 10.0, density=40.0, seed=1)
    other = forest_scene(forest, (10.0, 10.0), 10.0, density=40.0, seed=2)
    pre = cloud_to_cloud_error(PointCloud(Pose.from_rotvec([0, 0, 0.02], [0.3, -0.2, 0.1]).apply(other)),
                               PointCloud(scene))
    post = cloud_to_cloud_error(PointCloud(other), PointCloud(scene))
    assert post.mean < pre.mean


# --- occupancy -------------------------------------------------------------

def test_empty_cloud_profile():
    hist = voxel_occupancy_profile(PointCloud(np.empty((0, 3))), ground=Plane.horizontal(0.0))
    assert hist.sum() == 0 and len(hist) == 40


def test_single_point_profile():
    hist = voxel_occupancy_profile(PointCloud(np.array([[1.0, 2.0, 3.5]])), ground=Plane.horizontal(0.0))
    assert hist.sum() == 1 and hist[3] == 1


def test_bad_resolution():
    with pytest.raises(NonPositiveResolution):
        voxel_occupancy_profile(PointCloud(np.zeros((1, 3))), 0.0, ground=Plane.horizontal(0.0))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(0, 80), st.just(3)), elements=st.floats(-2, 12)),
       arrays(np.float64, st.tuples(st.integers(0, 80), st.just(3)), elements=st.floats(-2, 12)),
       st.sampled_from([0.05, 0.3, 1.0]))
def test_union_dominates_each_part(a, b, res):
    ground = Plane.horizontal(0.0)
    pa = voxel_occupancy_profile(PointCloud(a), res, ground=ground, max_height=10.0)
    pb = voxel_occupancy_profile(PointCloud(b), res, ground=ground, max_height=10.0)
    pu = voxel_occupancy_profile(PointCloud(np.vstack([a, b])), res, ground=ground, max_height=10.0)
    assert np.all(pu >= np.maximum(pa, pb))
    assert np.all(pu <= pa + pb)


def test_als_and_mls_profiles_cross():
    forest, als, sim = make_dataset(25, 50.0, 0.0, seed=4)
    mls = np.vstack([sim.true_poses[k].apply(c.points) for k, c in enumerate(sim.clouds)])

    def footprint(p):
        return PointCloud(p[np.all((p[:, :2] >= 10.0) & (p[:, :2] <= 40.0), axis=1)])

    als, mls = footprint(als.points), footprint(mls)
    # level the sloped terrain so one plane serves all clouds
    a, b, c = forest.terrain
    ground = Plane([-a, -b, 1.0], -c / np.linalg.norm([-a, -b, 1.0]))
    p_als = voxel_occupancy_profile(als, 0.1, ground=ground)
    p_mls = voxel_occupancy_profile(mls, 0.1, ground=ground)
    p_all = voxel_occupancy_profile(PointCloud(np.vstack([als.points, mls.points])), 0.1, ground=ground)
    assert p_mls[:5].sum() > p_als[:5].sum()
    assert p_als[12:].sum() > p_mls[12:].sum()
    assert np.all(p_all >= np.maximum(p_als, p_mls))


# --- traits ----------------------------------------------------------------

def test_full_cloud_height():
    forest = single_tree_forest(18.0)
    pts = forest_scene(forest, (10.0, 10.0), 8.0, density=200.0, stem_top=18.0, seed=3)
    res = extract_tree_traits(PointCloud(pts), [TreeFeature([10.0, 10.0])], Plane.horizontal(0.0))
    assert res.skipped == 0
    assert res.traits[0].height == pytest.approx(18.0, abs=0.5)
    assert res.traits[0].canopy_volume > 0


def test_stem_only_cloud_underestimates():
    forest = single_tree_forest(18.0)
    pts = forest_scene(forest, (10.0, 10.0), 8.0, density=200.0, stem_top=18.0, seed=3)
    low = pts[pts[:, 2] < 8.0]
    res = extract_tree_traits(PointCloud(low), [TreeFeature([10.0, 10.0])], Plane.horizontal(0.0))
    assert res.traits[0].height < 18.0 - 5.0


def test_tree_without_stem_points_is_skipped(rng):
    crown = rng.normal(0, 1, (500, 3)) + [0, 0, 12]
    res = extract_tree_traits(PointCloud(crown), [TreeFeature([0.0, 0.0])], Plane.horizontal(0.0))
    assert res.skipped == 1 and res.traits == []


@settings(max_examples=10, deadline=None)
@given(st.floats(0.05, 0.95), st.integers(0, 1000))
def test_height_non_decreasing_when_points_added(frac, seed):
    forest = single_tree_forest(18.0)
    pts = forest_scene(forest, (10.0, 10.0), 8.0, density=80.0, stem_top=18.0, seed=3)
    rng = np.random.default_rng(seed)
    stem = np.hypot(pts[:, 0] - 10, pts[:, 1] - 10) < 0.3
    base = pts[stem & (pts[:, 2] < 6)]
    rest = pts[~(stem & (pts[:, 2] < 6))]
    extra = rest[rng.uniform(size=len(rest)) < frac]
    feats = [TreeFeature([10.0, 10.0])]
    h0 = extract_tree_traits(PointCloud(base), feats, Plane.horizontal(0.0)).heights
    h1 = extract_tree_traits(PointCloud(np.vstack([base, extra])), feats, Plane.horizontal(0.0)).heights
    assert len(h0) == len(h1) == 1
    assert h1[0] >= h0[0]


def test_segmentation_radius():
    pts = np.array([[0.0, 0.0, 1.0], [3.9, 0.0, 1.0], [4.1, 0.0, 1.0], [9.0, 0.0, 1.0]])
    labels = segment_trees(pts, [TreeFeature([0.0, 0.0]), TreeFeature([10.0, 0.0])], 4.0)
    assert labels.tolist() == [0, 0, -1, 1]


def test_csv_canonical_format(tmp_path):
    write_errors_csv([{"cloud_id": "all", "pre_mean": 0.5, "post_mean": 0.25, "rmse": 1 / 3, "std": None}],
                     tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == "cloud_id,pre_mean,post_mean,rmse,std\nall,0.500000,0.250000,0.333333,\n"
    write_occupancy_csv({"als": [1, 2], "mls": [3, 0], "combined": [4, 2]}, 1.0, tmp_path / "o.csv")
    rows = read_csv(tmp_path / "o.csv")
    assert rows[1] == {"height_bin": "1.000000", "als": "2", "mls": "0", "combined": "2"}
