"""Synthetic forests, ALS/MLS scan simulation and drifted SLAM missions.

All randomness comes from numpy's PCG64 generator (``default_rng``) seeded
explicitly; payload ``k`` of a mission draws from ``default_rng([seed, k])``
so payloads can be generated in any order with identical results.

Tree model: a straight (slightly leaning) cylinder stem and an axis-aligned
ellipsoidal crown shell whose apex sits at the tree height above the stem base.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyTrajectory, PackingFailed
from .geometry import PointCloud, Pose, Source, se3_exp
from .ingest import Mission, MissionEdge, MissionNode, partition_tiles, save_cloud, save_mission, save_tiles

logger = logging.getLogger(__name__)

MIN_SPACING = 2.0
HEIGHT_RANGE = (12.0, 28.0)
CROWN_RADIUS_RANGE = (1.2, 2.5)
STEM_RADIUS_RANGE = (0.10, 0.35)
CROWN_BASE_FRACTION = (0.45, 0.6)
MIN_CROWN_BASE = 6.0
MAX_LEAN_DEG = 0.5
TERRAIN_SLOPE = 0.03


@dataclass(frozen=True)
class Tree:
    position_xy: np.ndarray
    height: float
    crown_radius: float
    stem_radius: float
    lean: np.ndarray
    crown_base: float

    @property
    def crown_half_height(self) -> float:
        return 0.5 * (self.height - self.crown_base)


@dataclass(frozen=True)
class ForestModel:
    trees: tuple
    extent: float
    terrain: np.ndarray  # z = a x + b y + c
    rng_seed: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "terrain", np.asarray(self.terrain, dtype=float).reshape(3))
        for t in self.trees:
            if not (np.all(t.position_xy >= 0) and np.all(t.position_xy <= self.extent)):
                raise ValueError("tree outside forest extent")
            if not 0.05 <= t.stem_radius <= 1.0:
                raise ValueError("stem radius out of range")
            if not 2.0 <= t.height <= 50.0:
                raise ValueError("tree height out of range")

    def __len__(self) -> int:
        return len(self.trees)

    @property
    def positions(self) -> np.ndarray:
        return np.array([t.position_xy for t in self.trees]).reshape(-1, 2)

    @property
    def heights(self) -> np.ndarray:
        return np.array([t.height for t in self.trees])

    def ground_z(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        a, b, c = self.terrain
        return a * xy[..., 0] + b * xy[..., 1] + c

    def ground_normal(self) -> np.ndarray:
        a, b, _ = self.terrain
        n = np.array([-a, -b, 1.0])
        return n / np.linalg.norm(n)

    def stem_base(self, tree: Tree) -> np.ndarray:
        return np.array([*tree.position_xy, float(self.ground_z(tree.position_xy))])

    def crown_center(self, tree: Tree) -> np.ndarray:
        base = self.stem_base(tree)
        rise = tree.height - tree.crown_half_height
        return base + tree.lean * (rise / tree.lean[2])

    def stem_point_at(self, tree: Tree, height: float) -> np.ndarray:
        base = self.stem_base(tree)
        return base + tree.lean * (height / tree.lean[2])

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        """Approximate distance from each point to the nearest modelled surface.

        Exact zero on every surface; used as a consistency oracle.
        """
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        n = self.ground_normal()
        a, b, c = self.terrain
        best = np.abs((p[:, 2] - (a * p[:, 0] + b * p[:, 1] + c)) * n[2])
        for t in self.trees:
            base = self.stem_base(t)
            rel = p - base
            along = rel @ t.lean
            radial = np.linalg.norm(rel - along[:, None] * t.lean, axis=1)
            top = t.height / t.lean[2]
            d_stem = np.where((along >= -1e-9) & (along <= top + 1e-9), np.abs(radial - t.stem_radius), np.inf)
            q = (p - self.crown_center(t)) / [t.crown_radius, t.crown_radius, t.crown_half_height]
            d_crown = np.abs(np.linalg.norm(q, axis=1) - 1.0) * min(t.crown_radius, t.crown_half_height)
            best = np.minimum(best, np.minimum(d_stem, d_crown))
        return best


def _poisson_disk(n: int, extent: float, spacing: float, rng: np.random.Generator, max_attempts: int = 200) -> np.ndarray:
    # hexagonal packing bound on how many disks of diameter ``spacing`` fit
    capacity = (extent / spacing + 1) ** 2 * 2 / np.sqrt(3)
    if n > capacity:
        raise PackingFailed(f"{n} trees cannot be {spacing} m apart within {extent} m")
    pts: list[np.ndarray] = []
    cell = spacing / np.sqrt(2)
    grid: dict[tuple[int, int], int] = {}
    for _ in range(n):
        for _attempt in range(max_attempts):
            cand = rng.uniform(0.0, extent, size=2)
            ci, cj = int(cand[0] // cell), int(cand[1] // cell)
            ok = True
            for di in range(-2, 3):
                for dj in range(-2, 3):
                    k = grid.get((ci + di, cj + dj))
                    if k is not None and np.hypot(*(pts[k] - cand)) < spacing:
                        ok = False
                        break
                if not ok:
                    break
            if ok:
                grid[(ci, cj)] = len(pts)
                pts.append(cand)
                break
        else:
            raise PackingFailed(f"placed only {len(pts)} of {n} trees at {spacing} m spacing")
    return np.array(pts).reshape(-1, 2)


def generate_forest(n_trees: int, extent: float, seed: int = 0, *, min_spacing: float = MIN_SPACING) -> ForestModel:
    """Random forest on ``[0, extent]^2`` with uniformly drawn tree parameters.

    Heights U[12, 28] m, crown radii U[1.2, 2.5] m, stem radii
    U[0.10, 0.35] m, crown base at U[0.45, 0.6] of the height (at least 6 m),
    lean up to 0.5 degrees, planar terrain with slopes up to 3 %.
    """
    if n_trees < 0:
        raise ValueError("n_trees must be non-negative")
    rng = np.random.default_rng(seed)
    slope = rng.uniform(-TERRAIN_SLOPE, TERRAIN_SLOPE, size=2)
    terrain = np.array([slope[0], slope[1], rng.uniform(0.0, 5.0)])
    xy = _poisson_disk(n_trees, extent, min_spacing, rng)
    trees = []
    for k in range(n_trees):
        h = rng.uniform(*HEIGHT_RANGE)
        tilt = np.deg2rad(rng.uniform(0.0, MAX_LEAN_DEG))
        az = rng.uniform(0.0, 2 * np.pi)
        lean = np.array([np.sin(tilt) * np.cos(az), np.sin(tilt) * np.sin(az), np.cos(tilt)])
        base = max(MIN_CROWN_BASE, h * rng.uniform(*CROWN_BASE_FRACTION))
        trees.append(Tree(xy[k], h, rng.uniform(*CROWN_RADIUS_RANGE), rng.uniform(*STEM_RADIUS_RANGE), lean, base))
    return ForestModel(tuple(trees), float(extent), terrain, seed)


# ---------------------------------------------------------------------------
# Surface sampling
# ---------------------------------------------------------------------------

@dataclass
class ScanDensity:
    """Sampling densities in points per square metre of surface."""

    ground: float
    stem: float
    crown_top: float
    crown_bottom: float
    stem_top: Optional[float] = None  # stems sampled up to this height (default: crown base)


ALS_DENSITY = ScanDensity(ground=10.0, stem=5.0, crown_top=60.0, crown_bottom=5.0)
MLS_DENSITY = ScanDensity(ground=30.0, stem=150.0, crown_top=0.0, crown_bottom=3.0, stem_top=8.0)


def _count(rng: np.random.Generator, expected: float) -> int:
    return int(rng.poisson(expected)) if expected > 0 else 0


def _sample_ground(forest: ForestModel, rng, density: float, lo, hi, center=None, radius=None) -> np.ndarray:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    n = _count(rng, density * np.prod(hi - lo))
    xy = rng.uniform(lo, hi, size=(n, 2))
    if center is not None:
        xy = xy[np.hypot(*(xy - center).T) <= radius]
    return np.column_stack([xy, forest.ground_z(xy)])


def _sample_stem(forest: ForestModel, tree: Tree, rng, density: float, top: Optional[float]) -> np.ndarray:
    top = min(tree.crown_base if top is None else top, tree.height)
    n = _count(rng, density * 2 * np.pi * tree.stem_radius * top)
    if n == 0:
        return np.empty((0, 3))
    h = rng.uniform(0.0, top, n)
    th = rng.uniform(0.0, 2 * np.pi, n)
    a = tree.lean
    u = np.cross(a, [1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.cross(a, [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(a, u)
    base = forest.stem_base(tree)
    ring = tree.stem_radius * (np.cos(th)[:, None] * u + np.sin(th)[:, None] * v)
    return base + (h / a[2])[:, None] * a + ring


def _sample_crown(forest: ForestModel, tree: Tree, rng, top_density: float, bottom_density: float) -> np.ndarray:
    a, c = tree.crown_radius, tree.crown_half_height
    # Thomsen's approximation of the spheroid area; half of it per hemisphere
    p = 1.6075
    area = 4 * np.pi * ((a ** (2 * p) + 2 * (a * c) ** p) / 3) ** (1 / p)
    out = []
    for density, sign in ((top_density, 1.0), (bottom_density, -1.0)):
        n = _count(rng, density * area / 2)
        if n == 0:
            continue
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        d[:, 2] = sign * np.abs(d[:, 2])
        out.append(forest.crown_center(tree) + d * [a, a, c])
    return np.vstack(out) if out else np.empty((0, 3))


def simulate_als(forest: ForestModel, *, noise: float = 0.02, margin: float = 30.0,
                 density: ScanDensity = ALS_DENSITY, seed=0) -> PointCloud:
    """Top-down scan: dense crown tops, sparse stems and ground."""
    rng = np.random.default_rng(seed)
    lo, hi = np.full(2, -margin), np.full(2, forest.extent + margin)
    parts = [_sample_ground(forest, rng, density.ground, lo, hi)]
    for t in forest.trees:
        parts.append(_sample_stem(forest, t, rng, density.stem, density.stem_top))
        parts.append(_sample_crown(forest, t, rng, density.crown_top, density.crown_bottom))
    pts = np.vstack(parts)
    if noise > 0:
        pts = pts + rng.normal(0.0, noise, pts.shape)
    return PointCloud(pts, source=Source.ALS)


def simulate_mls_view(forest: ForestModel, center_xy, radius: float, *, noise: float = 0.01,
                      density: ScanDensity = MLS_DENSITY, seed=0) -> np.ndarray:
    """World-frame points a ground sensor collects within ``radius`` of ``center_xy``."""
    rng = np.random.default_rng(seed)
    c = np.asarray(center_xy, dtype=float)
    parts = [_sample_ground(forest, rng, density.ground, c - radius, c + radius, c, radius)]
    near = [t for t in forest.trees if np.hypot(*(t.position_xy - c)) <= radius]
    for t in near:
        parts.append(_sample_stem(forest, t, rng, density.stem, density.stem_top))
        parts.append(_sample_crown(forest, t, rng, density.crown_top, density.crown_bottom))
    pts = np.vstack(parts)
    if noise > 0:
        pts = pts + rng.normal(0.0, noise, pts.shape)
    return pts


# ---------------------------------------------------------------------------
# Trajectories and drift
# ---------------------------------------------------------------------------

def lawnmower(extent: float, lane_spacing: float = 20.0, margin: float = 10.0,
              length: Optional[float] = None, origin=(0.0, 0.0)) -> np.ndarray:
    """Boustrophedon waypoints over a square, optionally cut at ``length`` metres."""
    x0, x1 = origin[0] + margin, origin[0] + extent - margin
    ys = np.arange(origin[1] + margin, origin[1] + extent - margin + 1e-9, lane_spacing)
    if x1 <= x0 or len(ys) == 0:
        raise EmptyTrajectory("extent too small for the requested margin")
    wp = []
    for k, y in enumerate(ys):
        wp.extend([(x0, y), (x1, y)] if k % 2 == 0 else [(x1, y), (x0, y)])
    wp = np.array(wp)
    if length is not None:
        wp = truncate_path(wp, length)
    return wp


def _arc_lengths(wp: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(wp, axis=0), axis=1))])


def truncate_path(wp: np.ndarray, length: float) -> np.ndarray:
    s = _arc_lengths(wp)
    if length >= s[-1]:
        return wp
    k = int(np.searchsorted(s, length, side="right"))
    f = (length - s[k - 1]) / (s[k] - s[k - 1])
    return np.vstack([wp[:k], wp[k - 1] + f * (wp[k] - wp[k - 1])])


def path_length(wp: np.ndarray) -> float:
    return float(_arc_lengths(np.asarray(wp, float))[-1])


def sample_path(wp: np.ndarray, spacing: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positions, headings and arc lengths every ``spacing`` metres along ``wp``."""
    wp = np.asarray(wp, dtype=float)
    if len(wp) < 2:
        raise EmptyTrajectory("trajectory needs at least two waypoints")
    s = _arc_lengths(wp)
    if s[-1] <= 0:
        raise EmptyTrajectory("trajectory has zero length")
    q = np.arange(0.0, s[-1] + 1e-9, spacing)
    seg = np.clip(np.searchsorted(s, q, side="right") - 1, 0, len(wp) - 2)
    f = (q - s[seg]) / np.maximum(s[seg + 1] - s[seg], 1e-12)
    pos = wp[seg] + f[:, None] * (wp[seg + 1] - wp[seg])
    d = wp[seg + 1] - wp[seg]
    heading = np.arctan2(d[:, 1], d[:, 0])
    return pos, heading, q


def yaw_pose(x: float, y: float, z: float, yaw: float) -> Pose:
    c, s = np.cos(yaw), np.sin(yaw)
    return Pose(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), [x, y, z])


def chain(start: Pose, increments: Sequence[Pose]) -> list[Pose]:
    out = [start]
    for d in increments:
        out.append(out[-1] @ d)
    return out


# relative scale of the drift random walk per twist component (rho, phi)
DRIFT_SHAPE = np.array([1.0, 1.0, 0.3, 0.002, 0.002, 0.01])


def apply_drift(true_poses: Sequence[Pose], drift_per_km: float, rng: np.random.Generator,
                path_len: Optional[float] = None) -> tuple[list[Pose], list[Pose], np.ndarray]:
    """Corrupt odometry with a smooth random walk and re-integrate.

    Each increment is perturbed on the right by ``exp(b_k)`` where ``b_k`` is
    a bias: a random initial offset plus a Gaussian random walk, so pose
    errors grow smoothly with distance. The walk is rescaled so the final translational error
    equals ``drift_per_km`` metres per kilometre of path.

    Returns ``(drifted_poses, drifted_increments, sigma)`` where ``sigma`` is
    the RMS of the injected increment error per twist component.
    """
    true_inc = [a.inverse() @ b for a, b in zip(true_poses, true_poses[1:])]
    n = len(true_inc)
    if n == 0:
        return list(true_poses), [], np.full(6, 1e-3)
    if path_len is None:
        path_len = float(sum(np.linalg.norm(d.t) for d in true_inc))
    target = drift_per_km * path_len / 1000.0
    steps = rng.normal(size=(n, 6))
    steps[0] *= n  # persistent initial bias, so errors do not cancel along the path
    walk = np.cumsum(steps, axis=0) * DRIFT_SHAPE

    def drifted(scale: float):
        inc = [d @ se3_exp(scale * w) for d, w in zip(true_inc, walk)]
        return chain(true_poses[0], inc), inc

    def final_error(scale: float) -> float:
        return float(np.linalg.norm(drifted(scale)[0][-1].t - true_poses[-1].t))

    if target <= 0:
        scale = 0.0
    else:
        lo, hi = 0.0, 1e-3
        while final_error(hi) < target and hi < 1e3:
            hi *= 2.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if final_error(mid) < target else (lo, mid)
        scale = 0.5 * (lo + hi)
    poses, inc = drifted(scale)
    sigma = np.sqrt(np.mean((scale * walk) ** 2, axis=0))
    return poses, inc, sigma


# ---------------------------------------------------------------------------
# Scan simulation
# ---------------------------------------------------------------------------

@dataclass
class SimulationResult:
    clouds: list
    true_poses: dict = field(default_factory=dict)
    mission: Optional[Mission] = None


def simulate_scans(
    forest: ForestModel,
    mode: str = "MLS",
    trajectory: Optional[np.ndarray] = None,
    noise: float = 0.01,
    drift: float = 0.0,
    *,
    seed: int = 0,
    node_spacing: float = 20.0,
    payload_radius: float = 15.0,
    sensor_height: float = 1.0,
    speed: float = 1.0,
    density: Optional[ScanDensity] = None,
    min_sigma: tuple = (1e-3, 1e-4),
) -> SimulationResult:
    """Simulate an ALS flight or an MLS mission over ``forest``.

    ALS: one world-frame cloud, no poses, no mission. MLS: one node every
    ``node_spacing`` metres of ``trajectory``; payload ``k`` holds the points
    within ``payload_radius`` of the node, expressed in the node's true
    (gravity-aligned, heading-following) sensor frame. The returned mission
    carries drifted poses and the matching drifted odometry.
    """
    mode = str(mode).upper()
    if mode == "ALS":
        cloud = simulate_als(forest, noise=noise, density=density or ALS_DENSITY, seed=seed)
        return SimulationResult([cloud])
    if mode != "MLS":
        raise ValueError(f"unknown scan mode {mode!r}")
    if trajectory is None or len(trajectory) < 2:
        raise EmptyTrajectory("MLS simulation needs a trajectory")
    pos, heading, arc = sample_path(trajectory, node_spacing)
    true_poses = [
        yaw_pose(x, y, float(forest.ground_z((x, y))) + sensor_height, h) for (x, y), h in zip(pos, heading)
    ]
    clouds = []
    for k, pose in enumerate(true_poses):
        world = simulate_mls_view(forest, pose.t[:2], payload_radius, noise=noise,
                                  density=density or MLS_DENSITY, seed=[seed, k])
        clouds.append(PointCloud(pose.inverse().apply(world), source=Source.MLS))

    rng = np.random.default_rng([seed, 1_000_003])
    drifted, inc, sigma = apply_drift(true_poses, drift, rng, path_len=float(arc[-1]))
    sigma = np.maximum(sigma, np.repeat(min_sigma, 3))
    info = np.diag(sigma**-2.0)
    nodes = [MissionNode(k, arc[k] / speed, p, None) for k, p in enumerate(drifted)]
    edges = [MissionEdge(k, k + 1, d, info) for k, d in enumerate(inc)]
    mission = Mission(nodes, {k: c for k, c in enumerate(clouds)}, edges, [])
    return SimulationResult(clouds, {k: p for k, p in enumerate(true_poses)}, mission)


def forest_scene(forest: ForestModel, center_xy, half_extent: float, *, density: float = 60.0,
                 stem_top: float = 8.0, seed=0) -> np.ndarray:
    """Dense noise-free sampling of every surface in a square window."""
    rng = np.random.default_rng(seed)
    c = np.asarray(center_xy, dtype=float)
    parts = [_sample_ground(forest, rng, density, c - half_extent, c + half_extent)]
    for t in forest.trees:
        if np.all(np.abs(t.position_xy - c) <= half_extent + t.crown_radius):
            parts.append(_sample_stem(forest, t, rng, density, stem_top))
            parts.append(_sample_crown(forest, t, rng, density, density / 4))
    pts = np.vstack(parts)
    inside = np.all(np.abs(pts[:, :2] - c) <= half_extent, axis=1)
    return pts[inside]


# ---------------------------------------------------------------------------
# Dataset output
# ---------------------------------------------------------------------------

def save_forest_csv(forest: ForestModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("tree_id,x,y,height,crown_radius,stem_radius\n")
        for k, t in enumerate(forest.trees):
            fh.write(f"{k},{t.position_xy[0]:.6f},{t.position_xy[1]:.6f},{t.height:.6f},"
                     f"{t.crown_radius:.6f},{t.stem_radius:.6f}\n")


def write_dataset(out_dir, forest: ForestModel, als: PointCloud, sim: SimulationResult,
                  tile_size: Optional[float] = None) -> dict:
    """Write ``als.ply``, ``mission.txt`` + payloads, ``truth.txt``, ``trees.csv``
    and optionally a ``tiles/`` directory built from the drifted mission."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_cloud(als, out / "als.ply")
    save_mission(sim.mission, out / "mission.txt")
    truth = sim.mission.with_poses(sim.true_poses)
    save_mission(truth, out / "truth.txt", write_payloads=False)
    save_forest_csv(forest, out / "trees.csv")
    paths = {"als": out / "als.ply", "mission": out / "mission.txt", "truth": out / "truth.txt"}
    if tile_size:
        save_tiles(partition_tiles(sim.mission, tile_size), out / "tiles")
        paths["tiles"] = out / "tiles"
    return paths


def make_dataset(n_trees: int = 200, extent: float = 150.0, drift: float = 2.0, seed: int = 0, *,
                 noise: float = 0.01, als_noise: float = 0.02, length: Optional[float] = None,
                 lane_spacing: float = 20.0, node_spacing: float = 20.0,
                 als_density: ScanDensity = ALS_DENSITY, mls_density: ScanDensity = MLS_DENSITY):
    """Forest, ALS cloud and drifted MLS mission from one seed."""
    forest = generate_forest(n_trees, extent, seed)
    als = simulate_als(forest, noise=als_noise, density=als_density, seed=[seed, 1])
    traj = lawnmower(extent, lane_spacing, length=length)
    sim = simulate_scans(forest, "MLS", traj, noise, drift, seed=seed + 2, node_spacing=node_spacing,
                         density=mls_density)
    return forest, als, sim
