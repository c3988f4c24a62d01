import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forest_coreg.errors import (
    DanglingEdge,
    DuplicateNodeId,
    EmptyMission,
    NonSPDInformation,
    ParseError,
    UnsupportedProperty,
)
from forest_coreg.geometry import PointCloud, Pose, Source
from forest_coreg.ingest import (
    Mission,
    MissionEdge,
    MissionNode,
    load_cloud,
    load_mission,
    load_tiles,
    merge_mission,
    partition_tiles,
    save_cloud,
    save_mission,
    save_tiles,
)

from conftest import random_pose


def _chain_mission(rng, n=2, payload_pts=0):
    poses = [random_pose(rng, max_angle=1.0) for _ in range(n)]
    nodes = [MissionNode(k, float(k), p) for k, p in enumerate(poses)]
    edges = [MissionEdge(k, k + 1, poses[k].inverse() @ poses[k + 1], np.eye(6) * (k + 1)) for k in range(n - 1)]
    payloads = {}
    if payload_pts:
        payloads = {k: PointCloud(rng.normal(size=(payload_pts, 3)), source=Source.MLS) for k in range(n)}
    return Mission(nodes, payloads, edges, [])


# --- PLY -------------------------------------------------------------------

def test_cloud_roundtrip_three_points(tmp_path):
    pts = np.array([[0.1, 0.2, 0.3], [1e6 + 0.123456789, -2.5, 3.0], [np.pi, np.e, -1e-9]])
    save_cloud(PointCloud(pts, source=Source.ALS), tmp_path / "c.ply")
    back = load_cloud(tmp_path / "c.ply")
    assert np.array_equal(back.points, pts)
    assert back.source is Source.ALS


def test_ascii_ply_with_normals(tmp_path):
    text = "\n".join([
        "ply", "format ascii 1.0", "element vertex 2",
        "property double x", "property double y", "property double z",
        "property float nx", "property float ny", "property float nz",
        "end_header", "0 0 0 0 0 2", "1 2 3 3 0 4", "",
    ])
    (tmp_path / "a.ply").write_text(text)
    c = load_cloud(tmp_path / "a.ply")
    assert c.normals is not None
    assert np.allclose(np.linalg.norm(c.normals, axis=1), 1.0, atol=1e-12)
    assert np.allclose(c.normals[1], [0.6, 0.0, 0.8])


def test_binary_million_point_checksum(tmp_path):
    pts = np.random.default_rng(0).uniform(-500, 500, size=(1_000_000, 3))
    digest = hashlib.sha256(np.ascontiguousarray(pts).tobytes()).hexdigest()
    save_cloud(PointCloud(pts), tmp_path / "big.ply", binary=True)
    back = load_cloud(tmp_path / "big.ply")
    assert hashlib.sha256(np.ascontiguousarray(back.points).tobytes()).hexdigest() == digest


def test_extra_property_warns(tmp_path):
    text = "\n".join([
        "ply", "format ascii 1.0", "element vertex 1",
        "property float x", "property float y", "property float z", "property uchar intensity",
        "end_header", "1 2 3 7", "",
    ])
    (tmp_path / "i.ply").write_text(text)
    with pytest.warns(UnsupportedProperty):
        c = load_cloud(tmp_path / "i.ply")
    assert np.allclose(c.points, [[1, 2, 3]])


def test_malformed_ply_raises(tmp_path):
    (tmp_path / "bad.ply").write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nend_header\n1\n")
    with pytest.raises(ParseError):
        load_cloud(tmp_path / "bad.ply")
    (tmp_path / "junk.ply").write_bytes(b"not a ply at all")
    with pytest.raises(ParseError):
        load_cloud(tmp_path / "junk.ply")


# --- Mission ---------------------------------------------------------------

def test_two_node_mission(tmp_path, rng):
    m = _chain_mission(rng, 2)
    save_mission(m, tmp_path / "m.txt")
    back = load_mission(tmp_path / "m.txt")
    assert len(back.nodes) == 2
    assert len(back.odometry_edges) == 1
    assert back.loop_edges == []


def test_dangling_edge(tmp_path):
    ident = "0 0 0 0 0 0 1"
    info = " ".join("1" if i == j else "0" for i in range(6) for j in range(i, 6))
    (tmp_path / "m.txt").write_text(
        f"NODE 0 0.0 {ident} -\nNODE 1 1.0 {ident} -\nEDGE_ODOM 0 99 {ident} {info}\n"
    )
    with pytest.raises(DanglingEdge):
        load_mission(tmp_path / "m.txt")


def test_duplicate_node_and_non_spd(tmp_path):
    ident = "0 0 0 0 0 0 1"
    (tmp_path / "d.txt").write_text(f"NODE 0 0.0 {ident} -\nNODE 0 1.0 {ident} -\n")
    with pytest.raises(DuplicateNodeId):
        load_mission(tmp_path / "d.txt")
    info = " ".join("-1" if i == j else "0" for i in range(6) for j in range(i, 6))
    (tmp_path / "n.txt").write_text(f"NODE 0 0.0 {ident} -\nNODE 1 1.0 {ident} -\nEDGE_ODOM 0 1 {ident} {info}\n")
    with pytest.raises(NonSPDInformation):
        load_mission(tmp_path / "n.txt")


def test_bad_record_is_parse_error(tmp_path):
    (tmp_path / "m.txt").write_text("NODE 0 0.0 1 2\n")
    with pytest.raises(ParseError):
        load_mission(tmp_path / "m.txt")
    (tmp_path / "u.txt").write_text("VERTEX 0\n")
    with pytest.raises(ParseError):
        load_mission(tmp_path / "u.txt")


def test_synthetic_mission_roundtrip(tmp_path):
    from forest_coreg.synthetic import apply_drift, chain, yaw_pose

    rng = np.random.default_rng(3)
    true = [yaw_pose(20.0 * k, 3.0 * np.sin(k / 7), 0.1 * k, 0.05 * k) for k in range(100)]
    drifted, inc, sigma = apply_drift(true, 2.0, rng)
    info = np.diag(sigma ** -2.0)
    m = Mission([MissionNode(k, float(k), p) for k, p in enumerate(drifted)], {},
                [MissionEdge(k, k + 1, d, info) for k, d in enumerate(inc)], [])
    save_mission(m, tmp_path / "m.txt")
    back = load_mission(tmp_path / "m.txt")
    assert [n.node_id for n in back.nodes] == list(range(100))
    for a, b in zip(m.nodes, back.nodes):
        assert np.abs(a.pose.matrix() - b.pose.matrix()).max() < 1e-12
    for a, b in zip(m.odometry_edges, back.odometry_edges):
        assert np.abs(a.measurement.matrix() - b.measurement.matrix()).max() < 1e-12
        assert np.allclose(a.information, b.information, rtol=1e-12)
    assert chain(back.nodes[0].pose, [e.measurement for e in back.odometry_edges])[-1].t == pytest.approx(
        drifted[-1].t, abs=1e-9)


def test_mission_payload_roundtrip(tmp_path, rng):
    m = _chain_mission(rng, 3, payload_pts=50)
    save_mission(m, tmp_path / "sub" / "m.txt")
    back = load_mission(tmp_path / "sub" / "m.txt")
    for k in range(3):
        assert np.array_equal(back.payloads[k].points, m.payloads[k].points)
    assert (tmp_path / "sub" / "payloads").is_dir()


# --- Tiles -----------------------------------------------------------------

def _single_payload_mission(points):
    return Mission([MissionNode(0, 0.0, Pose.identity())], {0: PointCloud(np.asarray(points, float))})


def test_partition_boundary_split():
    m = _single_payload_mission([[19.0, 1, 0], [19.5, 2, 0], [20.5, 1, 0], [21.0, 2, 0]])
    ts = partition_tiles(m, 20.0, origin_xy=(0.0, 0.0))
    assert len(ts) == 2
    assert sorted(len(c) for c in ts.tiles.values()) == [2, 2]
    assert set(ts.keys()) == {(0, 0), (0, 1)}


def test_partition_single_cell():
    m = _single_payload_mission([[1, 1, 0], [2, 3, 5], [4, 4, 1]])
    assert len(partition_tiles(m, 20.0)) == 1


def test_partition_empty_mission():
    with pytest.raises(EmptyMission):
        partition_tiles(Mission([MissionNode(0, 0.0, Pose.identity())]), 20.0)


def test_tiles_within_bounds_and_roundtrip(tmp_path, rng):
    m = _chain_mission(rng, 4, payload_pts=300)
    ts = partition_tiles(m, 2.0)
    for key, cloud in ts.tiles.items():
        x0, y0, x1, y1 = ts.bounds(key)
        assert np.all((cloud.points[:, 0] >= x0) & (cloud.points[:, 0] < x1))
        assert np.all((cloud.points[:, 1] >= y0) & (cloud.points[:, 1] < y1))
    save_tiles(ts, tmp_path / "tiles")
    back = load_tiles(tmp_path / "tiles")
    assert back.keys() == ts.keys()
    assert np.allclose(back.origin_xy, ts.origin_xy)
    for key in ts.keys():
        assert np.array_equal(back.tiles[key].points, ts.tiles[key].points)


def test_one_hectare_mission_tiles():
    from forest_coreg.synthetic import generate_forest, lawnmower, simulate_scans

    forest = generate_forest(120, 100.0, seed=5)
    sim = simulate_scans(forest, "MLS", lawnmower(100.0, 20.0, margin=16.0), 0.01, 2.0, seed=5)
    merged = merge_mission(sim.mission)
    ts = partition_tiles(sim.mission, 20.0)
    assert len(ts) <= 30
    assert sum(len(c) for c in ts.tiles.values()) == len(merged)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100), st.floats(-5, 5)), min_size=1, max_size=60),
       st.sampled_from([1.0, 5.0, 20.0]))
def test_partition_conserves_points(pts, size):
    m = _single_payload_mission(pts)
    ts = partition_tiles(m, size)
    assert sum(len(c) for c in ts.tiles.values()) == len(pts)
    assert all(len(c) > 0 for c in ts.tiles.values())
