"""Point-to-point ICP refinement and inlier-based acceptance."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import NoCorrespondences
from .geometry import PointCloud, Pose, se3_log, unique_rows, voxel_keys

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegistrationResult:
    cloud_id: str
    transform: Pose
    fitness: float
    inlier_rmse: float
    num_inliers: int
    accepted: bool = False

    def __post_init__(self):
        if not 0.0 <= self.fitness <= 1.0:
            raise ValueError(f"fitness must lie in [0, 1], got {self.fitness}")
        if not self.inlier_rmse >= 0.0:
            raise ValueError("inlier_rmse must be non-negative")

    def to_dict(self) -> dict:
        return {
            "cloud_id": self.cloud_id,
            "translation": self.transform.t.tolist(),
            "quaternion_xyzw": self.transform.quaternion().tolist(),
            "fitness": self.fitness,
            "inlier_rmse": self.inlier_rmse,
            "num_inliers": self.num_inliers,
            "accepted": self.accepted,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationResult":
        pose = Pose.from_translation_quaternion(d["translation"], d["quaternion_xyzw"])
        return cls(str(d["cloud_id"]), pose, float(d["fitness"]), float(d["inlier_rmse"]),
                   int(d["num_inliers"]), bool(d.get("accepted", False)))


def umeyama_3d(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rigid transform (no scale) with ``dst ~ R @ src + t``."""
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    return Pose(R, mu_d - R @ mu_s)


def voxel_subsample(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """One original point per occupied voxel (the first in input order)."""
    if not voxel_size or voxel_size <= 0:
        return points
    _, first = unique_rows(voxel_keys(points, voxel_size), return_index=True)
    return points[np.sort(first)]


COARSE_TOL = 1e-3
COARSE_MIN_POINTS = 1000


def _score(points: np.ndarray, tree: cKDTree, pose: Pose, max_dist: float) -> tuple[float, float, int]:
    d, _ = tree.query(pose.apply(points), distance_upper_bound=max_dist)
    inl = np.isfinite(d)
    n = int(inl.sum())
    rmse = float(np.sqrt(np.mean(d[inl] ** 2))) if n else 0.0
    return n / len(points), rmse, n


def icp(
    source: PointCloud,
    target: PointCloud,
    init: Optional[Pose] = None,
    max_corr_dist: float = 0.5,
    max_iter: int = 50,
    *,
    voxel_size: float = 0.1,
    tol: float = 1e-6,
    target_tree: Optional[cKDTree] = None,
    cloud_id: str = "",
) -> RegistrationResult:
    """Point-to-point ICP of ``source`` onto ``target`` starting at ``init``.

    The source is thinned to one measured point per voxel (not centroids, so
    an exact self-match stays exact). Fitness, inlier RMSE and inlier count
    refer to the thinned source at the final transform.
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("icp needs non-empty clouds")
    pose = init if init is not None else Pose.identity()
    tree = target_tree if target_tree is not None else cKDTree(target.points)
    src = voxel_subsample(source.points, voxel_size)
    tgt = target.points

    # Coarse-to-fine: every ``stride``-th point until steps fall below
    # COARSE_TOL, then all points until ``tol``.
    stride = 4 if len(src) >= 4 * COARSE_MIN_POINTS else 1
    for it in range(max_iter):
        pts = src[::stride]
        d, idx = tree.query(pose.apply(pts), distance_upper_bound=max_corr_dist)
        inl = np.isfinite(d)
        if stride > 1 and inl.sum() < 3:
            stride, pts = 1, src
            d, idx = tree.query(pose.apply(pts), distance_upper_bound=max_corr_dist)
            inl = np.isfinite(d)
        if it == 0 and not inl.any():
            raise NoCorrespondences(f"{cloud_id}: no pairs within {max_corr_dist} m at init")
        if inl.sum() < 3:
            break
        step = umeyama_3d(pose.apply(pts[inl]), tgt[idx[inl]])
        pose = (step @ pose).normalized()
        if np.linalg.norm(se3_log(step)) < (COARSE_TOL if stride > 1 else tol):
            if stride == 1:
                break
            stride = 1

    fitness, rmse, n = _score(src, tree, pose, max_corr_dist)
    return RegistrationResult(cloud_id, pose, fitness, rmse, n)


def filter_matches(results: Sequence[RegistrationResult], min_inliers: int = 500,
                   min_fitness: float = 0.3) -> list[RegistrationResult]:
    """Set ``accepted`` on every result from its inlier count and fitness."""
    return [
        dataclasses.replace(r, accepted=bool(r.num_inliers >= min_inliers and r.fitness >= min_fitness))
        for r in results
    ]
