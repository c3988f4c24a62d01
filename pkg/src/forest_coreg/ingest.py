"""Point-cloud and mission I/O, plus the tile representation of a mission.

Mission file (UTF-8, one record per line, ``#`` starts a comment)::

    NODE <id> <t> <x> <y> <z> <qx> <qy> <qz> <qw> <payload_relpath | ->
    EDGE_ODOM <i> <j> <x> <y> <z> <qx> <qy> <qz> <qw> <21 upper-triangular info entries>
    EDGE_LOOP <i> <j> ...same layout...

Information entries are listed row-major over the upper triangle of the 6x6
matrix, in the package's translation-first twist order.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from plyfile import PlyData, PlyElement

from .errors import (
    DanglingEdge,
    DuplicateNodeId,
    EmptyMission,
    NonPositiveResolution,
    NonSPDInformation,
    ParseError,
    UnsupportedProperty,
)
from .geometry import PointCloud, Pose, Source, transform_cloud

logger = logging.getLogger(__name__)

_TRIU = np.triu_indices(6)


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

def load_cloud(path) -> PointCloud:
    """Read a PLY file (ASCII or binary) with at least x, y, z vertex properties."""
    path = Path(path)
    try:
        ply = PlyData.read(str(path))
    except FileNotFoundError:
        raise
    except Exception as exc:  # plyfile raises a mix of PlyParseError/ValueError/struct errors
        raise ParseError(f"{path}: {exc}") from exc
    if "vertex" not in ply:
        raise ParseError(f"{path}: no 'vertex' element")
    data = ply["vertex"].data
    names = set(data.dtype.names or ())
    if not {"x", "y", "z"} <= names:
        raise ParseError(f"{path}: vertex element lacks x/y/z")
    ignored = sorted(names - {"x", "y", "z", "nx", "ny", "nz"})
    if ignored:
        warnings.warn(f"{path.name}: ignoring vertex properties {ignored}", UnsupportedProperty, stacklevel=2)
    pts = np.column_stack([np.asarray(data[k], dtype=np.float64) for k in "xyz"])
    normals = None
    if {"nx", "ny", "nz"} <= names:
        normals = np.column_stack([np.asarray(data[k], dtype=np.float64) for k in ("nx", "ny", "nz")])
        norm = np.linalg.norm(normals, axis=1, keepdims=True)
        if len(norm) and norm.min() < 1e-6:
            warnings.warn(f"{path.name}: zero-length normals; normals dropped", UnsupportedProperty, stacklevel=2)
            normals = None
        else:
            normals = normals / norm
    source = Source.UNKNOWN
    for comment in ply.comments:
        parts = comment.split()
        if len(parts) == 2 and parts[0] == "source":
            try:
                source = Source(parts[1])
            except ValueError:
                pass
    try:
        return PointCloud(pts, normals, source)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def save_cloud(cloud: PointCloud, path, binary: bool = True) -> None:
    """Write float64 x, y, z (and float32 normals when present)."""
    dtype = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if cloud.normals is not None:
        dtype += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    arr = np.empty(len(cloud), dtype=dtype)
    arr["x"], arr["y"], arr["z"] = cloud.points.T
    if cloud.normals is not None:
        arr["nx"], arr["ny"], arr["nz"] = cloud.normals.T
    el = PlyElement.describe(arr, "vertex")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PlyData([el], text=not binary, byte_order="<", comments=[f"source {cloud.source.value}"]).write(str(path))


# ---------------------------------------------------------------------------
# Mission
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MissionNode:
    node_id: int
    timestamp: float
    pose: Pose
    payload_path: Optional[str] = None


@dataclass(frozen=True)
class MissionEdge:
    i: int
    j: int
    measurement: Pose
    information: np.ndarray


def check_information(info: np.ndarray, what: str = "information matrix") -> np.ndarray:
    info = np.asarray(info, dtype=float)
    if info.shape != (6, 6):
        raise NonSPDInformation(f"{what} must be 6x6")
    if not np.allclose(info, info.T, rtol=1e-9, atol=1e-12):
        raise NonSPDInformation(f"{what} is not symmetric")
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise NonSPDInformation(f"{what} is not positive definite") from None
    return info


@dataclass
class Mission:
    """SLAM pose graph with a payload cloud (sensor frame) attached to each node."""

    nodes: list[MissionNode]
    payloads: dict[int, PointCloud] = field(default_factory=dict)
    odometry_edges: list[MissionEdge] = field(default_factory=list)
    loop_edges: list[MissionEdge] = field(default_factory=list)

    def __post_init__(self):
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DuplicateNodeId(f"duplicate node ids {dup}")
        stamps = [n.timestamp for n in self.nodes]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise ValueError("nodes must be strictly ordered by timestamp")
        known = set(ids)
        for e in self.odometry_edges + self.loop_edges:
            for k in (e.i, e.j):
                if k not in known:
                    raise DanglingEdge(f"edge ({e.i}, {e.j}) references unknown node {k}")
            check_information(e.information, f"edge ({e.i}, {e.j}) information")
        for k in self.payloads:
            if k not in known:
                raise DanglingEdge(f"payload for unknown node {k}")

    @property
    def node_ids(self) -> list[int]:
        return [n.node_id for n in self.nodes]

    def pose(self, node_id: int) -> Pose:
        for n in self.nodes:
            if n.node_id == node_id:
                return n.pose
        raise KeyError(node_id)

    def poses(self) -> dict[int, Pose]:
        return {n.node_id: n.pose for n in self.nodes}

    def world_payload(self, node_id: int, pose: Optional[Pose] = None) -> PointCloud:
        """Payload of ``node_id`` mapped into the mission frame."""
        return transform_cloud(self.payloads[node_id], pose or self.pose(node_id))

    def with_poses(self, poses: dict[int, Pose]) -> "Mission":
        nodes = [
            MissionNode(n.node_id, n.timestamp, poses.get(n.node_id, n.pose), n.payload_path)
            for n in self.nodes
        ]
        return Mission(nodes, self.payloads, self.odometry_edges, self.loop_edges)


def _fmt(x: float) -> str:
    return repr(float(x))


def _pose_fields(p: Pose) -> list[str]:
    return [_fmt(v) for v in p.t] + [_fmt(v) for v in p.quaternion()]


def save_mission(mission: Mission, path, payload_dir: str = "payloads", write_payloads: bool = True) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# forest-coreg mission v1"]
    for n in mission.nodes:
        rel = "-"
        if n.node_id in mission.payloads:
            rel = n.payload_path or f"{payload_dir}/node_{n.node_id:06d}.ply"
            if write_payloads:
                save_cloud(mission.payloads[n.node_id], path.parent / rel)
        lines.append(" ".join(["NODE", str(n.node_id), _fmt(n.timestamp), *_pose_fields(n.pose), rel]))
    for tag, edges in (("EDGE_ODOM", mission.odometry_edges), ("EDGE_LOOP", mission.loop_edges)):
        for e in edges:
            info = [_fmt(v) for v in np.asarray(e.information)[_TRIU]]
            lines.append(" ".join([tag, str(e.i), str(e.j), *_pose_fields(e.measurement), *info]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_pose(tok: list[str]) -> Pose:
    vals = [float(v) for v in tok]
    q = np.array(vals[3:7])
    if not np.isfinite(q).all() or np.linalg.norm(q) < 1e-12:
        raise ParseError("invalid quaternion")
    return Pose.from_translation_quaternion(vals[:3], q / np.linalg.norm(q))


def _parse_info(tok: list[str]) -> np.ndarray:
    info = np.zeros((6, 6))
    info[_TRIU] = [float(v) for v in tok]
    return info + np.triu(info, 1).T


def load_mission(path, load_payloads: bool = True) -> Mission:
    path = Path(path)
    nodes: list[MissionNode] = []
    odom: list[MissionEdge] = []
    loops: list[MissionEdge] = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "NODE":
                if len(tok) != 11:
                    raise ParseError(f"NODE expects 10 fields, got {len(tok) - 1}")
                rel = None if tok[10] == "-" else tok[10]
                nodes.append(MissionNode(int(tok[1]), float(tok[2]), _parse_pose(tok[3:10]), rel))
            elif tok[0] in ("EDGE_ODOM", "EDGE_LOOP"):
                if len(tok) != 31:
                    raise ParseError(f"{tok[0]} expects 30 fields, got {len(tok) - 1}")
                edge = MissionEdge(int(tok[1]), int(tok[2]), _parse_pose(tok[3:10]), _parse_info(tok[10:31]))
                (odom if tok[0] == "EDGE_ODOM" else loops).append(edge)
            else:
                raise ParseError(f"unknown record {tok[0]!r}")
        except ParseError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
    payloads = {}
    if load_payloads:
        for n in nodes:
            if n.payload_path is not None:
                payloads[n.node_id] = load_cloud(path.parent / n.payload_path)
    return Mission(nodes, payloads, odom, loops)


# ---------------------------------------------------------------------------
# Tiles
# ---------------------------------------------------------------------------

@dataclass
class TileSet:
    """Mission cloud bucketed into a gravity-aligned square grid.

    Tile ``(row, col)`` covers ``x in [ox + col*s, ox + (col+1)*s)`` and
    ``y in [oy + row*s, oy + (row+1)*s)``. Tile clouds are in the mission frame.
    """

    origin_xy: np.ndarray
    tile_size: float
    tiles: dict[tuple[int, int], PointCloud]

    def __post_init__(self):
        if not self.tile_size > 0:
            raise NonPositiveResolution(f"tile_size must be positive, got {self.tile_size}")
        self.origin_xy = np.asarray(self.origin_xy, dtype=float).reshape(2)

    def __len__(self) -> int:
        return len(self.tiles)

    def keys(self) -> list[tuple[int, int]]:
        return sorted(self.tiles)

    def grid_pose(self, key: tuple[int, int]) -> Pose:
        r, c = key
        s = self.tile_size
        return Pose(None, [self.origin_xy[0] + (c + 0.5) * s, self.origin_xy[1] + (r + 0.5) * s, 0.0])

    def bounds(self, key: tuple[int, int]) -> tuple[float, float, float, float]:
        r, c = key
        s = self.tile_size
        x0, y0 = self.origin_xy[0] + c * s, self.origin_xy[1] + r * s
        return x0, y0, x0 + s, y0 + s


def default_origin(points: np.ndarray, tile_size: float) -> np.ndarray:
    return np.floor(points[:, :2].min(axis=0) / tile_size) * tile_size


def partition_cloud(cloud: PointCloud, tile_size: float, origin_xy=None) -> TileSet:
    if not tile_size > 0:
        raise NonPositiveResolution(f"tile_size must be positive, got {tile_size}")
    if len(cloud) == 0:
        raise EmptyMission("nothing to partition")
    origin = default_origin(cloud.points, tile_size) if origin_xy is None else np.asarray(origin_xy, float)
    cells = np.floor((cloud.points[:, :2] - origin) / tile_size).astype(np.int64)
    keys, inverse = np.unique(cells[:, ::-1], axis=0, return_inverse=True)  # (row, col)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(keys) + 1))
    tiles = {}
    for k, (r, c) in enumerate(keys):
        tiles[(int(r), int(c))] = cloud.select(order[bounds[k]:bounds[k + 1]])
    return TileSet(origin, float(tile_size), tiles)


def merge_mission(mission: Mission, poses: Optional[dict[int, Pose]] = None) -> PointCloud:
    """All payloads mapped by their node poses and concatenated in node order."""
    poses = poses or mission.poses()
    clouds = [transform_cloud(mission.payloads[n], poses[n]) for n in mission.node_ids if n in mission.payloads]
    return PointCloud.concatenate(clouds, Source.MLS)


def partition_tiles(mission: Mission, tile_size: float = 20.0, origin_xy=None) -> TileSet:
    if not mission.nodes or not mission.payloads:
        raise EmptyMission("mission has no payloads")
    merged = merge_mission(mission)
    if len(merged) == 0:
        raise EmptyMission("mission payloads are empty")
    return partition_cloud(merged, tile_size, origin_xy)


def save_tiles(tiles: TileSet, directory) -> None:
    """Write ``tile_<row>_<col>.ply`` files plus a ``grid.txt`` manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "grid.txt").write_text(
        f"ORIGIN {_fmt(tiles.origin_xy[0])} {_fmt(tiles.origin_xy[1])}\nTILE_SIZE {_fmt(tiles.tile_size)}\n",
        encoding="utf-8",
    )
    for (r, c), cloud in sorted(tiles.tiles.items()):
        save_cloud(cloud, d / f"tile_{r}_{c}.ply")


def load_tiles(directory, tile_size: Optional[float] = None) -> TileSet:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"tiles directory {d} not found")
    origin = None
    manifest_size = None
    manifest = d / "grid.txt"
    if manifest.exists():
        for raw in manifest.read_text(encoding="utf-8").splitlines():
            tok = raw.split()
            if not tok:
                continue
            if tok[0] == "ORIGIN":
                origin = np.array([float(tok[1]), float(tok[2])])
            elif tok[0] == "TILE_SIZE":
                manifest_size = float(tok[1])
    tiles = {}
    for f in sorted(d.glob("tile_*_*.ply")):
        _, r, c = f.stem.split("_")
        tiles[(int(r), int(c))] = load_cloud(f)
    if not tiles:
        raise EmptyMission(f"no tile_<row>_<col>.ply files in {d}")
    size = tile_size if tile_size is not None else manifest_size
    if size is None:
        raise ParseError(f"{d}: tile size unknown (no grid.txt and no tile_size given)")
    if manifest_size is not None and size != manifest_size:
        merged = PointCloud.concatenate([tiles[k] for k in sorted(tiles)], Source.MLS)
        return partition_cloud(merged, size)
    if origin is None:
        allpts = np.concatenate([t.points for t in tiles.values()])
        origin = default_origin(allpts, size)
    return TileSet(origin, size, tiles)
