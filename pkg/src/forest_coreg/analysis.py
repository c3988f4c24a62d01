"""Evaluation: cloud-to-cloud error, voxel occupancy by height, tree traits."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .errors import FitFailed, NoOverlap, NonPositiveResolution
from .features import TreeFeature, fit_cylinder
from .fine_reg import voxel_subsample
from .geometry import PointCloud, unique_rows, voxel_keys
from .preprocess import Plane, fit_ground_plane

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CloudError:
    mean: float
    rmse: float
    std: float
    count: int

    def __iter__(self):
        return iter((self.mean, self.rmse, self.std))


def cloud_to_cloud_error(source: PointCloud, target: PointCloud, max_dist: float = 1.0, *,
                         voxel: Optional[float] = None, target_tree: Optional[cKDTree] = None) -> CloudError:
    """Nearest-neighbour distances from ``source`` to ``target`` within ``max_dist``.

    With ``voxel`` the source is first thinned to one point per voxel.
    """
    if len(source) == 0 or len(target) == 0:
        raise NoOverlap("empty cloud")
    pts = voxel_subsample(source.points, voxel) if voxel else source.points
    tree = target_tree if target_tree is not None else cKDTree(target.points)
    d, _ = tree.query(pts, distance_upper_bound=max_dist)
    d = d[np.isfinite(d)]
    if len(d) == 0:
        raise NoOverlap(f"no source point within {max_dist} m of the target")
    return CloudError(float(d.mean()), float(np.sqrt(np.mean(d * d))), float(d.std()), int(len(d)))


def occupied_voxels(points: np.ndarray, resolution: float) -> np.ndarray:
    """Unique integer voxel keys on the global grid anchored at the origin."""
    if len(points) == 0:
        voxel_keys(np.zeros((1, 3)), resolution)  # validates the resolution
        return np.empty((0, 3), dtype=np.int64)
    return unique_rows(voxel_keys(points, resolution))


def voxel_occupancy_profile(cloud: PointCloud, resolution: float = 0.05, bin_height: float = 1.0, *,
                            ground: Optional[Plane] = None, max_height: float = 40.0) -> np.ndarray:
    """Number of occupied voxels per height bin above ``ground``.

    Voxel height is taken at the voxel centre. Heights below zero count in the
    first bin, heights at or above ``max_height`` in the last. When comparing
    clouds pass the same ``ground`` to all of them.
    """
    if not resolution > 0:
        raise NonPositiveResolution(f"resolution must be positive, got {resolution}")
    if not bin_height > 0:
        raise NonPositiveResolution(f"bin_height must be positive, got {bin_height}")
    nbins = int(np.ceil(max_height / bin_height))
    hist = np.zeros(nbins, dtype=np.int64)
    if len(cloud) == 0:
        return hist
    if ground is None:
        ground = fit_ground_plane(cloud)
    keys = occupied_voxels(cloud.points, resolution)
    centers = (keys + 0.5) * resolution
    h = ground.signed_distance(centers)
    bins = np.clip(np.floor(h / bin_height).astype(np.int64), 0, nbins - 1)
    np.add.at(hist, bins, 1)
    return hist


@dataclass(frozen=True)
class TreeTrait:
    tree_id: int
    position_xy: np.ndarray
    height: float
    canopy_volume: float
    stem_top: float
    n_points: int


@dataclass
class TraitResult:
    traits: list
    skipped: int

    @property
    def heights(self) -> np.ndarray:
        return np.array([t.height for t in self.traits])

    @property
    def volumes(self) -> np.ndarray:
        return np.array([t.canopy_volume for t in self.traits])


def segment_trees(points: np.ndarray, features: Sequence[TreeFeature], radius: float = 4.0) -> np.ndarray:
    """Index of the horizontally nearest feature within ``radius``, else -1."""
    if len(features) == 0:
        return np.full(len(points), -1)
    xy = np.array([f.position_xy for f in features])
    d, idx = cKDTree(xy).query(points[:, :2], distance_upper_bound=radius)
    return np.where(np.isfinite(d), idx, -1)


def _stem_model(pts: np.ndarray, h: np.ndarray, center_xy: np.ndarray, *, start: float, slab: float,
                search_radius: float, threshold: float, min_inliers: int, iterations: int, max_points: int, rng):
    """Stack cylinders in ``slab``-high layers from ``start`` while fits succeed.

    Returns ``(stem_top, stem_mask)`` or ``None`` when the first layer fails.
    """
    near = np.hypot(*(pts[:, :2] - center_xy).T) <= search_radius
    stem_mask = np.zeros(len(pts), dtype=bool)
    stem_top = None
    lo = start
    while True:
        sel = np.flatnonzero(near & (h >= lo) & (h < lo + slab))
        if len(sel) < min_inliers:
            break
        try:
            fit = fit_cylinder(pts[sel], threshold=threshold, iterations=iterations, max_points=max_points,
                               seed=rng)
        except FitFailed:
            break
        if fit.inliers < min_inliers:
            break
        q = pts[sel] - fit.center
        radial = np.linalg.norm(q - np.outer(q @ fit.axis, fit.axis), axis=1)
        stem_mask[sel[radial <= fit.radius + 3 * threshold]] = True
        stem_top = float(h[sel[fit.inlier_mask]].max())
        center_xy = fit.center[:2]
        lo += slab
    if stem_top is None:
        return None
    return stem_top, stem_mask


def extract_tree_traits(
    cloud: PointCloud,
    features: Sequence[TreeFeature],
    ground: Optional[Plane] = None,
    *,
    radius: float = 4.0,
    start: float = 0.5,
    slab: float = 1.0,
    search_radius: float = 1.0,
    threshold: float = 0.03,
    min_inliers: int = 20,
    iterations: int = 100,
    max_points: int = 400,
    seed=0,
) -> TraitResult:
    """Height and canopy volume per tree.

    Points are assigned to the nearest feature within ``radius``. The stem is
    modelled by cylinders stacked in ``slab`` layers from ``start`` metres
    above ground while fits succeed. Height is the highest point of the tree
    (at least the stem-model top) above ground; canopy volume is the convex
    hull of the tree's points outside the stem model. Trees whose first
    layer cannot be fitted are skipped. Each layer fit uses at most
    ``max_points`` points.
    """
    rng = np.random.default_rng(seed)
    if ground is None:
        ground = fit_ground_plane(cloud, seed=rng)
    pts = cloud.points
    h_all = ground.signed_distance(pts)
    above = h_all >= start
    pts, h_all = pts[above], h_all[above]
    labels = segment_trees(pts, features, radius)
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(len(features) + 1))
    traits, skipped = [], 0
    for k, feat in enumerate(features):
        idx = order[bounds[k]:bounds[k + 1]]
        tp, th = pts[idx], h_all[idx]
        model = None
        if len(idx) >= min_inliers:
            model = _stem_model(tp, th, feat.position_xy, start=start, slab=slab, search_radius=search_radius,
                                threshold=threshold, min_inliers=min_inliers, iterations=iterations,
                                max_points=max_points, rng=rng)
        if model is None:
            skipped += 1
            continue
        stem_top, stem_mask = model
        height = max(stem_top, float(th.max()))
        crown = tp[~stem_mask]
        volume = 0.0
        if len(crown) >= 4:
            try:
                volume = float(ConvexHull(crown).volume)
            except QhullError:
                volume = 0.0
        traits.append(TreeTrait(k, feat.position_xy, height, volume, stem_top, len(idx)))
    return TraitResult(traits, skipped)


def upper_tail_count(values: np.ndarray, threshold: float) -> int:
    return int(np.count_nonzero(np.asarray(values) > threshold))


# ---------------------------------------------------------------------------
# CSV output with canonical formatting
# ---------------------------------------------------------------------------

def _f(x) -> str:
    return "" if x is None or (isinstance(x, float) and not np.isfinite(x)) else f"{float(x):.6f}"


def write_errors_csv(rows: Sequence[dict], path) -> None:
    """Rows with keys cloud_id, pre_mean, post_mean, rmse, std."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cloud_id", "pre_mean", "post_mean", "rmse", "std"])
        for r in rows:
            w.writerow([r["cloud_id"], _f(r.get("pre_mean")), _f(r.get("post_mean")), _f(r.get("rmse")), _f(r.get("std"))])


def write_occupancy_csv(profiles: dict, bin_height: float, path) -> None:
    """``profiles`` maps als / mls / combined to equally long count arrays."""
    n = len(next(iter(profiles.values())))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["height_bin", "als", "mls", "combined"])
        for b in range(n):
            w.writerow([_f(b * bin_height), *(int(profiles[k][b]) for k in ("als", "mls", "combined"))])


def write_traits_csv(results: dict, path) -> None:
    """``results`` maps a source label to a :class:`TraitResult`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tree_id", "height_m", "canopy_volume_m3", "source"])
        for source, res in results.items():
            for t in res.traits:
                w.writerow([t.tree_id, _f(t.height), _f(t.canopy_volume), source])


def read_csv(path) -> list[dict]:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
