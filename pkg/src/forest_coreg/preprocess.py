"""ALS cropping around an MLS cloud and ground-plane based vertical alignment."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import AntiparallelNormals, DegenerateGround, EmptyCrop
from .geometry import PointCloud, Pose, so3_exp

logger = logging.getLogger(__name__)

Z = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class Plane:
    """Plane ``normal . x + d = 0`` with an upward unit normal."""

    normal: np.ndarray
    d: float
    inlier_count: int = 0
    inlier_rms: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValueError("plane normal must be non-zero")
        n, d = n / norm, float(self.d) / norm
        if n[2] < 0:
            n, d = -n, -d
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "d", d)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        """Height above the plane, measured along its normal."""
        return np.asarray(points) @ self.normal + self.d

    def z_at(self, xy) -> np.ndarray:
        """Plane elevation at horizontal position(s) ``xy``."""
        xy = np.asarray(xy, dtype=float)
        n = self.normal
        return -(n[0] * xy[..., 0] + n[1] * xy[..., 1] + self.d) / n[2]

    @classmethod
    def horizontal(cls, z0: float = 0.0) -> "Plane":
        return cls(Z.copy(), -z0)


def crop_als(als: PointCloud, center_xy, half_extent: float) -> PointCloud:
    """Axis-aligned square window of side ``2 * half_extent`` around ``center_xy``."""
    if not half_extent > 0:
        raise ValueError(f"half_extent must be positive, got {half_extent}")
    c = np.asarray(center_xy, dtype=float).reshape(2)
    xy = als.points[:, :2]
    mask = np.all(np.abs(xy - c) <= half_extent, axis=1)
    if not mask.any():
        raise EmptyCrop(f"no ALS points within {half_extent} m of {c.tolist()}")
    return als.select(mask)


def crop_half_extent(mls: PointCloud, padding: float = 10.0, cap: float = 25.0) -> float:
    """Crop radius from the MLS footprint: horizontal half-diagonal plus padding, capped."""
    lo, hi = mls.points[:, :2].min(axis=0), mls.points[:, :2].max(axis=0)
    half_diag = 0.5 * float(np.linalg.norm(hi - lo))
    return min(half_diag + padding, cap)


def estimate_normals(points: np.ndarray, k: int = 16) -> np.ndarray:
    """Unit normals from k-NN PCA, oriented towards +z."""
    n = len(points)
    if n < 3:
        return np.tile(Z, (n, 1))
    k = min(k, n)
    _, idx = cKDTree(points).query(points, k=k)
    nb = points[idx]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.matmul(nb.transpose(0, 2, 1), nb)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    normals[normals[:, 2] < 0] *= -1
    return normals


def _plane_from_points(p: np.ndarray) -> tuple[np.ndarray, float]:
    c = p.mean(axis=0)
    _, _, vt = np.linalg.svd(p - c, full_matrices=False)
    n = vt[-1]
    if n[2] < 0:
        n = -n
    return n, -float(n @ c)


def fit_ground_plane(
    cloud: PointCloud,
    *,
    k: int = 16,
    band_fraction: float = 0.3,
    max_normal_angle_deg: float = 30.0,
    threshold: float = 0.10,
    max_iterations: int = 1000,
    confidence: float = 0.99,
    max_candidates: int = 20_000,
    seed: int | np.random.Generator | None = 0,
) -> Plane:
    """RANSAC plane through near-vertical-normal points in the lowest height band.

    The band spans the lowest ``band_fraction`` of the robust (1st..99th
    percentile) height range. Cloud normals are used when present, otherwise
    estimated by k-NN PCA on the band points.
    """
    rng = np.random.default_rng(seed)
    pts = cloud.points
    if len(pts) < 100:
        raise DegenerateGround(f"need at least 100 points, got {len(pts)}")
    z_lo, z_hi = np.percentile(pts[:, 2], [1.0, 99.0])
    band = pts[:, 2] <= z_lo + band_fraction * max(z_hi - z_lo, 1e-6)
    idx = np.flatnonzero(band)
    if len(idx) > max_candidates:
        idx = np.sort(rng.choice(idx, max_candidates, replace=False))
    cand = pts[idx]
    if cloud.normals is not None:
        normals = cloud.normals[idx]
    else:
        normals = estimate_normals(cand, k)
    cos_max = np.cos(np.deg2rad(max_normal_angle_deg))
    cand = cand[np.abs(normals[:, 2]) >= cos_max]
    m = len(cand)
    if m < 3:
        raise DegenerateGround(f"only {m} ground candidates")

    best_count, best = -1, None
    needed = max_iterations
    it = 0
    while it < min(needed, max_iterations):
        it += 1
        s = cand[rng.choice(m, 3, replace=False)]
        n = np.cross(s[1] - s[0], s[2] - s[0])
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n /= norm
        d = -n @ s[0]
        count = int(np.count_nonzero(np.abs(cand @ n + d) < threshold))
        if count > best_count:
            best_count, best = count, (n, d)
            w = count / m
            if w >= 1.0:
                needed = it
            elif w > 0:
                needed = int(np.ceil(np.log(1 - confidence) / np.log(1 - w**3)))
    if best is None:
        raise DegenerateGround("all plane samples were degenerate")
    n, d = best
    # Least-squares refinement on the consensus set, twice.
    for _ in range(2):
        inl = np.abs(cand @ n + d) < threshold
        if inl.sum() < 3:
            break
        n, d = _plane_from_points(cand[inl])
    inl = np.abs(cand @ n + d) < threshold
    count = int(inl.sum())
    if count < 3 or count / m < 0.05:
        raise DegenerateGround(f"inlier ratio {count / m:.3f} below 5%")
    rms = float(np.sqrt(np.mean((cand[inl] @ n + d) ** 2)))
    return Plane(n, d, count, rms)


def vertical_alignment(mls_plane: Plane, als_plane: Plane, center_xy=(0.0, 0.0)) -> Pose:
    """Rigid correction making the MLS ground plane coincide with the ALS one.

    Rotates about the MLS ground point below ``center_xy`` by the minimal
    rotation taking the MLS normal onto the ALS normal, then shifts along z.
    Horizontal position and yaw are left to coarse registration.
    """
    a, b = mls_plane.normal, als_plane.normal
    cos_t = float(np.clip(a @ b, -1.0, 1.0))
    if cos_t <= 0.0:
        raise AntiparallelNormals("ground normals differ by 90 degrees or more")
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    if s < 1e-15:
        R = np.eye(3)
    else:
        R = so3_exp(axis / s * np.arctan2(s, cos_t))
    cxy = np.asarray(center_xy, dtype=float).reshape(2)
    c = np.array([cxy[0], cxy[1], float(mls_plane.z_at(cxy))])
    dz = float(als_plane.z_at(cxy)) - c[2]
    t = c - R @ c + np.array([0.0, 0.0, dz])
    return Pose(R, t)


def transform_plane(plane: Plane, p: Pose) -> Plane:
    """The plane's image under ``p``."""
    n = p.R @ plane.normal
    return Plane(n, plane.d - n @ p.t, plane.inlier_count, plane.inlier_rms)


def preprocess(
    mls: PointCloud,
    als: PointCloud,
    center_xy=None,
    *,
    padding: float = 10.0,
    cap: float = 25.0,
    als_plane: Optional[Plane] = None,
    seed=0,
    **plane_kwargs,
):
    """Crop the ALS cloud around ``mls`` and compute the vertical correction.

    Returns ``(als_crop, mls_plane, als_plane, correction)``.
    """
    if center_xy is None:
        lo, hi = mls.points[:, :2].min(axis=0), mls.points[:, :2].max(axis=0)
        center_xy = 0.5 * (lo + hi)
    half = crop_half_extent(mls, padding, cap)
    crop = crop_als(als, center_xy, half)
    rng = np.random.default_rng(seed)
    mls_plane = fit_ground_plane(mls, seed=rng, **plane_kwargs)
    if als_plane is None:
        als_plane = fit_ground_plane(crop, seed=rng, **plane_kwargs)
    correction = vertical_alignment(mls_plane, als_plane, center_xy)
    return crop, mls_plane, als_plane, correction
