"""End-to-end orchestration shared by the CLI subcommands."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .analysis import (
    cloud_to_cloud_error,
    extract_tree_traits,
    voxel_occupancy_profile,
    write_errors_csv,
    write_occupancy_csv,
    write_traits_csv,
)
from .coarse_reg import coarse_register
from .config import Config
from .errors import CoregError, MatchFailed, NoCorrespondences, NoOverlap
from .features import extract_stems
from .fine_reg import RegistrationResult, filter_matches, icp
from .geometry import PointCloud, Pose, Source, transform_cloud
from .graph_opt import (
    FactorGraph,
    add_aerial_factors,
    build_graph_from_mission,
    build_graph_from_tiles,
    node_label,
    optimize,
)
from .ingest import Mission, TileSet, save_cloud, save_mission, save_tiles
from .preprocess import crop_als, crop_half_extent, fit_ground_plane

logger = logging.getLogger(__name__)

THREADS_ENV = "FOREST_COREG_THREADS"


# ---------------------------------------------------------------------------
# Canonical serialisation
# ---------------------------------------------------------------------------

def canonical(obj, digits: int = 9):
    """Round floats and convert numpy types so JSON output is byte-stable."""
    if isinstance(obj, dict):
        return {str(k): canonical(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [canonical(v, digits) for v in obj]
    if isinstance(obj, np.ndarray):
        return canonical(obj.tolist(), digits)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return None
        x = round(x, digits)
        return 0.0 if x == 0 else x
    return obj


def write_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(canonical(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Registration of one MLS cloud
# ---------------------------------------------------------------------------

@dataclass
class CloudTask:
    cloud_id: str
    cloud: PointCloud  # in the mission frame
    center_xy: np.ndarray


_WORKER_ALS: Optional[PointCloud] = None


def _init_worker(als: PointCloud) -> None:
    global _WORKER_ALS
    _WORKER_ALS = als


def register_cloud(task: CloudTask, als: PointCloud, config: Config, seed) -> tuple[Optional[RegistrationResult], dict]:
    """Crop, coarse-register and refine one cloud. Never raises on per-cloud failures."""
    diag = {
        "cloud_id": task.cloud_id,
        "clique_size": 0,
        "n_aerial": 0,
        "n_terrestrial": 0,
        "residual_rms": None,
        "status": "ok",
    }
    pc = config.preprocess
    try:
        half = crop_half_extent(task.cloud, pc.crop_padding, pc.crop_max_half_extent)
        crop = crop_als(als, task.center_xy, half)
        coarse, cdiag = coarse_register(
            task.cloud, crop, task.center_xy, config.coarse,
            features=config.features, preprocess=pc, seed=seed, cloud_id=task.cloud_id,
        )
        diag.update({k: cdiag[k] for k in ("clique_size", "n_aerial", "n_terrestrial", "residual_rms")})
        fc = config.fine
        result = icp(task.cloud, crop, coarse, fc.max_corr_dist, fc.max_iter, voxel_size=fc.voxel_size,
                     cloud_id=task.cloud_id)
    except MatchFailed as exc:
        d = getattr(exc, "diagnostics", {}) or {}
        diag.update({k: d[k] for k in ("clique_size", "n_aerial", "n_terrestrial") if k in d})
        diag["status"] = "match_failed"
        logger.info("%s: %s", task.cloud_id, exc)
        return None, diag
    except (NoCorrespondences, CoregError) as exc:
        diag["status"] = type(exc).__name__
        logger.info("%s: %s: %s", task.cloud_id, type(exc).__name__, exc)
        return None, diag
    diag.update(result.to_dict())
    diag["status"] = "ok"
    return result, diag


def _register_job(args):
    task, config, seed = args
    return register_cloud(task, _WORKER_ALS, config, seed)


def worker_count(requested: int) -> int:
    n = max(1, int(requested))
    cap = os.environ.get(THREADS_ENV)
    if cap:
        n = min(n, max(1, int(cap)))
    return min(n, os.cpu_count() or 1)


def register_all(tasks: list[CloudTask], als: PointCloud, config: Config, workers: Optional[int] = None):
    """Register every task; results in task order, failures as ``None``."""
    seeds = [[config.seed, k] for k in range(len(tasks))]
    n = worker_count(config.workers if workers is None else workers)
    if n > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(n, initializer=_init_worker, initargs=(als,)) as pool:
            out = list(pool.map(_register_job, [(t, config, s) for t, s in zip(tasks, seeds)]))
    else:
        out = [register_cloud(t, als, config, s) for t, s in zip(tasks, seeds)]
    results = [r for r, _ in out]
    diags = [d for _, d in out]
    done = [r for r in results if r is not None]
    accepted = {r.cloud_id: r for r in filter_matches(done, config.fine.min_inliers, config.fine.min_fitness)}
    final = []
    for r, d in zip(results, diags):
        if r is not None:
            r = accepted[r.cloud_id]
            d["accepted"] = r.accepted
        else:
            d["accepted"] = False
        final.append(r)
    return final, diags


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------

@dataclass
class Inputs:
    als: PointCloud
    mission: Optional[Mission] = None
    tiles: Optional[TileSet] = None

    @property
    def mode(self) -> str:
        return "mission" if self.mission is not None else "tiles"


def make_tasks(inputs: Inputs) -> list[CloudTask]:
    tasks = []
    if inputs.mission is not None:
        m = inputs.mission
        for n in m.nodes:
            if n.node_id in m.payloads and len(m.payloads[n.node_id]) > 0:
                tasks.append(CloudTask(node_label(n.node_id), m.world_payload(n.node_id), n.pose.t[:2].copy()))
    else:
        t = inputs.tiles
        for key in t.keys():
            tasks.append(CloudTask(node_label(key), t.tiles[key], t.grid_pose(key).t[:2].copy()))
    return tasks


def build_graph(inputs: Inputs, config: Config) -> FactorGraph:
    if inputs.mission is not None:
        return build_graph_from_mission(inputs.mission, config.graph)
    return build_graph_from_tiles(inputs.tiles, config.graph)


# ---------------------------------------------------------------------------
# Applying optimized poses
# ---------------------------------------------------------------------------

def corrected_clouds(inputs: Inputs, poses: dict) -> dict:
    """cloud_id -> cloud in the ALS frame after optimization."""
    out = {}
    if inputs.mission is not None:
        m = inputs.mission
        for n in m.nodes:
            if n.node_id in m.payloads:
                out[node_label(n.node_id)] = transform_cloud(m.payloads[n.node_id], poses[n.node_id])
    else:
        t = inputs.tiles
        for key in t.keys():
            corr = poses[key] @ t.grid_pose(key).inverse()
            out[node_label(key)] = transform_cloud(t.tiles[key], corr)
    return out


def initial_clouds(inputs: Inputs) -> dict:
    if inputs.mission is not None:
        m = inputs.mission
        return {node_label(n): m.world_payload(n) for n in m.node_ids if n in m.payloads}
    return {node_label(k): c for k, c in sorted(inputs.tiles.tiles.items())}


def save_optimized(inputs: Inputs, graph: FactorGraph, out_dir: Path) -> Path:
    if inputs.mission is not None:
        path = out_dir / "optimized" / "mission.txt"
        save_mission(inputs.mission.with_poses(graph.nodes), path)
        return path
    t = inputs.tiles
    moved = {}
    for key in t.keys():
        moved[key] = transform_cloud(t.tiles[key], graph.nodes[key] @ t.grid_pose(key).inverse())
    path = out_dir / "optimized_tiles"
    save_tiles(TileSet(t.origin_xy, t.tile_size, moved), path)
    return path


# ---------------------------------------------------------------------------
# Analysis
# ---------------------------------------------------------------------------

def footprint_crop(als: PointCloud, mls: PointCloud, margin: float = 0.0) -> PointCloud:
    lo = mls.points[:, :2].min(axis=0) - margin
    hi = mls.points[:, :2].max(axis=0) + margin
    mask = np.all((als.points[:, :2] >= lo) & (als.points[:, :2] <= hi), axis=1)
    return als.select(mask)


def error_rows(als_tree: cKDTree, als: PointCloud, before: dict, after: dict, config: Config) -> list[dict]:
    ac = config.analysis
    rows = []

    def stats(cloud):
        try:
            return cloud_to_cloud_error(cloud, als, ac.max_dist, voxel=ac.error_voxel, target_tree=als_tree)
        except NoOverlap:
            return None

    for cid in before:
        pre, post = stats(before[cid]), stats(after[cid])
        rows.append({
            "cloud_id": cid,
            "pre_mean": pre.mean if pre else None,
            "post_mean": post.mean if post else None,
            "rmse": post.rmse if post else None,
            "std": post.std if post else None,
        })
    pre = stats(PointCloud.concatenate(list(before.values())))
    post = stats(PointCloud.concatenate(list(after.values())))
    rows.append({
        "cloud_id": "all",
        "pre_mean": pre.mean if pre else None,
        "post_mean": post.mean if post else None,
        "rmse": post.rmse if post else None,
        "std": post.std if post else None,
    })
    return rows


def run_analysis(als: PointCloud, before: dict, after: dict, config: Config, out_dir: Path) -> dict:
    """Write errors.csv, occupancy.csv and traits.csv; return a summary."""
    ac, fc = config.analysis, config.features
    out_dir.mkdir(parents=True, exist_ok=True)
    mls = PointCloud.concatenate(list(after.values()), Source.MLS)
    als_fp = footprint_crop(als, mls)
    tree = cKDTree(als.points)
    rows = error_rows(tree, als, before, after, config)
    write_errors_csv(rows, out_dir / "errors.csv")

    rng = np.random.default_rng([config.seed, 7])
    ground = fit_ground_plane(als_fp, seed=rng)
    combined = PointCloud.concatenate([als_fp, mls])
    profiles = {
        "als": voxel_occupancy_profile(als_fp, ac.occupancy_resolution, ac.occupancy_bin_height,
                                       ground=ground, max_height=ac.occupancy_max_height),
        "mls": voxel_occupancy_profile(mls, ac.occupancy_resolution, ac.occupancy_bin_height,
                                       ground=ground, max_height=ac.occupancy_max_height),
        "combined": voxel_occupancy_profile(combined, ac.occupancy_resolution, ac.occupancy_bin_height,
                                            ground=ground, max_height=ac.occupancy_max_height),
    }
    write_occupancy_csv(profiles, ac.occupancy_bin_height, out_dir / "occupancy.csv")

    summary = {"errors": rows[-1]}
    if ac.traits:
        stems = extract_stems(
            combined, ground, slice_low=fc.slice_low, slice_high=fc.slice_high, eps=fc.dbscan_eps,
            min_pts=fc.dbscan_min_pts, cluster_voxel=fc.cluster_voxel, threshold=fc.cylinder_threshold,
            min_inliers=fc.cylinder_min_inliers, iterations=fc.cylinder_iterations, seed=rng,
        )
        traits = {}
        for name, cloud in (("als", als_fp), ("mls", mls), ("combined", combined)):
            traits[name] = extract_tree_traits(cloud, stems, ground, radius=ac.segmentation_radius,
                                               threshold=fc.cylinder_threshold, seed=[config.seed, 11])
        write_traits_csv(traits, out_dir / "traits.csv")
        summary["traits"] = {k: {"trees": len(v.traits), "skipped": v.skipped} for k, v in traits.items()}
    else:
        write_traits_csv({}, out_dir / "traits.csv")
    return summary


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

@dataclass
class RunOutcome:
    exit_code: int
    message: str = ""
    artifacts: dict = field(default_factory=dict)


def stage_register(inputs: Inputs, config: Config, out_dir: Path, workers: Optional[int] = None):
    tasks = make_tasks(inputs)
    results, diags = register_all(tasks, inputs.als, config, workers)
    write_json({"mode": inputs.mode, "records": diags}, out_dir / "registration.json")
    return results, diags


def load_registration(path) -> list[RegistrationResult]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    out = []
    for rec in data.get("records", []):
        if rec.get("status") == "ok" and "translation" in rec:
            out.append(RegistrationResult.from_dict(rec))
    return out


def stage_optimize(inputs: Inputs, results, config: Config, out_dir: Path):
    graph = build_graph(inputs, config)
    add_aerial_factors(graph, [r for r in results if r is not None])
    optimized, report = optimize(graph, hold_unanchored=True)
    report["mode"] = inputs.mode
    report["accepted_registrations"] = sum(1 for r in results if r is not None and r.accepted)
    write_json(report, out_dir / "report.json")
    save_optimized(inputs, optimized, out_dir)
    return optimized, report
