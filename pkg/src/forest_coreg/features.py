"""Tree position features: canopy peaks from ALS, stem cylinders from MLS."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from sklearn.cluster import DBSCAN

from .errors import FitFailed, NonPositiveResolution
from .geometry import PointCloud, Source, voxel_downsample
from .preprocess import Plane

logger = logging.getLogger(__name__)

BREAST_HEIGHT = 1.3
MIN_STEM_RADIUS = 0.05
MAX_STEM_RADIUS = 1.0
MAX_AXIS_TILT_DEG = 30.0


@dataclass(frozen=True)
class CanopyHeightMap:
    """Max-z raster. Cell ``(row, col)`` spans ``origin + (col, row) * resolution``."""

    origin_xy: np.ndarray
    resolution: float
    cells: np.ndarray

    def cell_center(self, row, col) -> np.ndarray:
        r = np.asarray(row, dtype=float)
        c = np.asarray(col, dtype=float)
        return np.stack(
            [self.origin_xy[0] + (c + 0.5) * self.resolution, self.origin_xy[1] + (r + 0.5) * self.resolution],
            axis=-1,
        )


@dataclass(frozen=True)
class TreeFeature:
    position_xy: np.ndarray
    height: Optional[float] = None
    radius: Optional[float] = None
    axis: Optional[np.ndarray] = None
    source: Source = Source.UNKNOWN
    inliers: int = 0

    def __post_init__(self):
        object.__setattr__(self, "position_xy", np.asarray(self.position_xy, dtype=float).reshape(2))
        if self.radius is not None and not (MIN_STEM_RADIUS <= self.radius <= MAX_STEM_RADIUS):
            raise ValueError(f"stem radius {self.radius:.3f} m outside [{MIN_STEM_RADIUS}, {MAX_STEM_RADIUS}]")
        if self.axis is not None:
            a = np.asarray(self.axis, dtype=float).reshape(3)
            a = a / np.linalg.norm(a)
            if a[2] < 0:
                a = -a
            if np.degrees(np.arccos(np.clip(a[2], -1, 1))) > MAX_AXIS_TILT_DEG:
                raise ValueError("stem axis tilted more than 30 degrees")
            object.__setattr__(self, "axis", a)
        object.__setattr__(self, "source", Source(self.source))


@dataclass(frozen=True)
class CylinderFit:
    axis: np.ndarray
    center: np.ndarray
    radius: float
    inliers: int
    inlier_mask: np.ndarray
    rms: float

    def tilt_deg(self) -> float:
        return float(np.degrees(np.arccos(np.clip(abs(self.axis[2]), -1.0, 1.0))))


# ---------------------------------------------------------------------------
# ALS: canopy height map and peaks
# ---------------------------------------------------------------------------

def rasterize_chm(cloud: PointCloud, resolution: float = 0.5) -> CanopyHeightMap:
    if not resolution > 0:
        raise NonPositiveResolution(f"resolution must be positive, got {resolution}")
    pts = cloud.points
    if len(pts) == 0:
        return CanopyHeightMap(np.zeros(2), float(resolution), np.full((0, 0), np.nan))
    origin = pts[:, :2].min(axis=0)
    ij = np.floor((pts[:, :2] - origin) / resolution).astype(np.int64)
    ncols, nrows = ij.max(axis=0) + 1
    flat = ij[:, 1] * ncols + ij[:, 0]
    cells = np.full(nrows * ncols, -np.inf)
    np.maximum.at(cells, flat, pts[:, 2])
    cells[np.isneginf(cells)] = np.nan
    return CanopyHeightMap(origin, float(resolution), cells.reshape(nrows, ncols))


def extract_peaks(
    chm: CanopyHeightMap,
    window_radius: int = 4,
    min_height: float = 5.0,
    ground: Optional[Plane] = None,
) -> list[TreeFeature]:
    """Cells that are the strict maximum of their ``(2w+1)^2`` window.

    Heights are measured above ``ground`` at the cell center (or above the
    lowest CHM cell when no plane is given). Output is sorted by (row, col).
    """
    if window_radius < 1:
        raise ValueError("window_radius must be >= 1")
    cells = chm.cells
    if cells.size == 0:
        return []
    valid = np.isfinite(cells)
    filled = np.where(valid, cells, -np.inf)
    w = int(window_radius)
    footprint = np.ones((2 * w + 1, 2 * w + 1), dtype=bool)
    footprint[w, w] = False
    neigh_max = ndimage.maximum_filter(filled, footprint=footprint, mode="constant", cval=-np.inf)
    rows, cols = np.nonzero(valid & (filled > neigh_max))
    if len(rows) == 0:
        return []
    centers = chm.cell_center(rows, cols)
    if ground is not None:
        heights = cells[rows, cols] - ground.z_at(centers)
    else:
        heights = cells[rows, cols] - np.nanmin(cells)
    keep = heights >= min_height
    return [
        TreeFeature(centers[k], float(heights[k]), source=Source.ALS)
        for k in np.flatnonzero(keep)
    ]


def aerial_features(als_crop: PointCloud, ground: Optional[Plane] = None, *, resolution=0.5,
                    window_m=2.0, min_height=5.0) -> list[TreeFeature]:
    chm = rasterize_chm(als_crop, resolution)
    w = max(1, int(round(window_m / resolution)))
    return extract_peaks(chm, w, min_height, ground)


# ---------------------------------------------------------------------------
# MLS: cylinder fitting
# ---------------------------------------------------------------------------

def _orthobasis(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ax, ay, az = float(a[0]), float(a[1]), float(a[2])
    # cross with e_x or e_y, written out to avoid np.cross overhead in hot loops
    e1 = np.array([0.0, az, -ay]) if abs(ax) < 0.9 else np.array([-az, 0.0, ax])
    e1 /= np.sqrt(e1 @ e1)
    e2 = np.array([ay * e1[2] - az * e1[1], az * e1[0] - ax * e1[2], ax * e1[1] - ay * e1[0]])
    return e1, e2


def _orthobases(axes: np.ndarray) -> np.ndarray:
    """Row-wise ``_orthobasis`` for unit axes of shape (H, 3); returns (H, 2, 3)."""
    helper = np.zeros_like(axes)
    use_x = np.abs(axes[:, 0]) < 0.9
    helper[use_x, 0] = 1.0
    helper[~use_x, 1] = 1.0
    e1 = np.cross(axes, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    return np.stack([e1, np.cross(axes, e1)], axis=1)


def _circumcircles(p: np.ndarray):
    """Circles through point triples ``p`` of shape (H, 3, 2); returns centers, radii."""
    a, b, c = p[:, 0], p[:, 1], p[:, 2]
    bx, by = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
    cx, cy = c[:, 0] - a[:, 0], c[:, 1] - a[:, 1]
    d = 2.0 * (bx * cy - by * cx)
    ok = np.abs(d) > 1e-12
    d = np.where(ok, d, 1.0)
    b2, c2 = bx * bx + by * by, cx * cx + cy * cy
    ux = (cy * b2 - by * c2) / d
    uy = (bx * c2 - cx * b2) / d
    centers = a + np.stack([ux, uy], axis=1)
    radii = np.hypot(ux, uy)
    return centers, np.where(ok, radii, np.inf)


def _radial_state(points, axis, center):
    q = points - center
    along = q @ axis
    perp = q - along[:, None] * axis
    return along, perp, np.sqrt(np.einsum("ij,ij->i", perp, perp))


def _radial_residuals(points, axis, center, radius):
    return _radial_state(points, axis, center)[2] - radius


def _refine_cylinder(points, axis, center, radius, iterations=30):
    """Levenberg-Marquardt on (axis tilt 2, center offset 2, radius) for radial residuals."""
    lam = 1e-6
    along, perp, rho = _radial_state(points, axis, center)
    cost = float(np.sum((rho - radius) ** 2))
    diag = np.diag_indices(5)
    J = np.empty((len(points), 5))
    J[:, 4] = -1.0
    for _ in range(iterations):
        e1, e2 = _orthobasis(axis)
        inv = np.divide(1.0, rho, out=np.zeros_like(rho), where=rho > 1e-12)
        de = (perp @ np.column_stack([e1, e2])) * inv[:, None]
        r = rho - radius
        J[:, :2] = -along[:, None] * de
        J[:, 2:4] = -de
        H = J.T @ J
        g = J.T @ r
        damp = np.diag(H) + 1e-12
        while True:
            A = H.copy()
            A[diag] += lam * damp
            step = np.linalg.solve(A, -g)
            new_axis = axis + step[0] * e1 + step[1] * e2
            new_axis /= np.linalg.norm(new_axis)
            new_center = center + step[2] * e1 + step[3] * e2
            new_radius = radius + step[4]
            state = _radial_state(points, new_axis, new_center)
            new_cost = float(np.sum((state[2] - new_radius) ** 2))
            if new_cost <= cost:
                lam = max(lam / 10.0, 1e-12)
                break
            lam *= 10.0
            if lam > 1e8:
                return axis, center, radius
        converged = cost - new_cost <= 1e-12 * max(cost, 1e-30) or np.abs(step).max() < 1e-12
        axis, center, radius, cost = new_axis, new_center, new_radius, new_cost
        along, perp, rho = state
        if converged:
            break
    return axis, center, radius


def fit_cylinder(
    points,
    *,
    normals: Optional[np.ndarray] = None,
    axis_prior: Optional[np.ndarray] = None,
    threshold: float = 0.03,
    max_radius: float = MAX_STEM_RADIUS,
    max_tilt_deg: float = MAX_AXIS_TILT_DEG,
    iterations: int = 200,
    min_inlier_ratio: float = 0.3,
    max_points: int = 1500,
    seed: int | np.random.Generator | None = 0,
) -> CylinderFit:
    """RANSAC cylinder with least-squares refinement on the consensus set.

    Axis hypotheses come from the vertical (or ``axis_prior``), the cloud's
    principal direction, random draws inside the tilt cone, and, when
    ``normals`` are given, cross products of two point normals. Each axis is
    paired with a circle through three projected points.
    """
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=float)
    if normals is None and isinstance(points, PointCloud):
        normals = points.normals
    n = len(pts)
    if n < 20:
        raise FitFailed(f"need at least 20 points, got {n}")
    rng = np.random.default_rng(seed)
    full = pts
    if n > max_points:
        sub = np.sort(rng.choice(n, max_points, replace=False))
        pts = pts[sub]
        normals = None if normals is None else normals[sub]
    m = len(pts)
    cos_tilt = np.cos(np.deg2rad(max_tilt_deg))
    prior = np.array([0.0, 0.0, 1.0]) if axis_prior is None else np.asarray(axis_prior, float) / np.linalg.norm(axis_prior)

    centroid = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - centroid, full_matrices=False)
    # A quarter of the hypotheses each on the prior and the principal axis.
    n_fixed = max(iterations // 4, 1)
    axes = [prior] * n_fixed + [vt[0]] * n_fixed
    n_rest = max(iterations - 2 * n_fixed, 0)
    n_random = n_rest
    if normals is not None:
        pairs = rng.integers(0, m, size=(n_rest // 2, 2))
        cr = np.cross(normals[pairs[:, 0]], normals[pairs[:, 1]])
        nn = np.linalg.norm(cr, axis=1)
        cr = cr[nn > 0.2] / nn[nn > 0.2, None]
        axes.extend(cr)
        n_random = n_rest - len(cr)
    # Random directions in the tilt cone around the prior.
    e1, e2 = _orthobasis(prior)
    cz = rng.uniform(cos_tilt, 1.0, size=n_random)
    az = rng.uniform(0, 2 * np.pi, size=n_random)
    sz = np.sqrt(1 - cz**2)
    axes.extend(cz[:, None] * prior + sz[:, None] * (np.cos(az)[:, None] * e1 + np.sin(az)[:, None] * e2))
    axes = np.asarray(axes)
    axes[axes[:, 2] < 0] *= -1
    axes = axes[axes @ prior >= cos_tilt - 1e-12]
    if len(axes) == 0:
        raise FitFailed("no admissible axis hypothesis")
    h = len(axes)
    # Project points on the plane orthogonal to each axis hypothesis.
    basis = _orthobases(axes)  # (h, 2, 3)
    proj = (basis.reshape(-1, 3) @ pts.T).reshape(h, 2, m).transpose(0, 2, 1)  # (h, m, 2)
    tri = rng.integers(0, m, size=(h, 3))
    tri[:, 1] = (tri[:, 0] + 1 + rng.integers(0, m - 1, size=h)) % m
    tri[:, 2] = np.where(tri[:, 2] == tri[:, 0], (tri[:, 2] + 1) % m, tri[:, 2])
    sample = np.take_along_axis(proj, tri[:, :, None], axis=1)
    centers2, radii = _circumcircles(sample)
    ok = (radii <= max_radius) & (radii >= 1e-3)
    dist = np.abs(np.linalg.norm(proj - centers2[:, None, :], axis=2) - radii[:, None])
    counts = np.where(ok, (dist < threshold).sum(axis=1), -1)
    best = int(np.argmax(counts))
    if counts[best] <= 0:
        raise FitFailed("no cylinder hypothesis within radius bounds")
    axis = axes[best]
    center = basis[best].T @ centers2[best]
    radius = float(radii[best])
    inl = dist[best] < threshold
    for _ in range(3):
        if inl.sum() < 5:
            break
        axis, center, radius = _refine_cylinder(pts[inl], axis, center, radius)
        new_inl = np.abs(_radial_residuals(pts, axis, center, radius)) < threshold
        if np.array_equal(new_inl, inl):
            break
        inl = new_inl
    if axis[2] < 0:
        axis = -axis
    res_full = _radial_residuals(full, axis, center, radius)
    mask = np.abs(res_full) < threshold
    count = int(mask.sum())
    if not (0 < radius <= max_radius) or count / len(full) < min_inlier_ratio:
        raise FitFailed(f"inlier ratio {count / len(full):.2f}, radius {radius:.3f}")
    if axis @ prior < cos_tilt:
        raise FitFailed("refined axis leaves the tilt cone")
    # Report the axis point closest to the inlier centroid.
    c_in = full[mask].mean(axis=0)
    center = center + ((c_in - center) @ axis) * axis
    rms = float(np.sqrt(np.mean(res_full[mask] ** 2)))
    return CylinderFit(axis, center, radius, count, mask, rms)


# ---------------------------------------------------------------------------
# MLS: stems
# ---------------------------------------------------------------------------

def cluster_points(points: np.ndarray, eps: float = 0.5, min_pts: int = 20, voxel: float = 0.1):
    """DBSCAN on a voxel-thinned copy; labels are propagated back to every point."""
    if len(points) == 0:
        return np.empty(0, dtype=np.int64)
    if voxel:
        thin, inverse = voxel_downsample(PointCloud(points), voxel, return_inverse=True)
        labels = DBSCAN(eps=eps, min_samples=min_pts).fit_predict(thin.points)
        return labels[inverse]
    return DBSCAN(eps=eps, min_samples=min_pts).fit_predict(points)


def extract_stems(
    cloud: PointCloud,
    ground: Plane,
    *,
    slice_low: float = 0.5,
    slice_high: float = 5.0,
    eps: float = 0.5,
    min_pts: int = 20,
    cluster_voxel: float = 0.1,
    threshold: float = 0.03,
    min_inliers: int = 30,
    iterations: int = 200,
    seed: int | np.random.Generator | None = 0,
) -> list[TreeFeature]:
    """Stem positions at breast height from a slice above the ground plane.

    Clusters failing the cylinder fit, or whose radius/tilt fall outside the
    stem bounds, are dropped. Features are ordered by cluster label, which
    DBSCAN assigns in voxel order.
    """
    rng = np.random.default_rng(seed)
    h = ground.signed_distance(cloud.points)
    sl = (h >= slice_low) & (h <= slice_high)
    pts = cloud.points[sl]
    if len(pts) < min_pts:
        return []
    labels = cluster_points(pts, eps, min_pts, cluster_voxel)
    features = []
    for lab in np.unique(labels):
        if lab < 0:
            continue
        cpts = pts[labels == lab]
        if len(cpts) < max(20, min_inliers):
            continue
        try:
            fit = fit_cylinder(cpts, threshold=threshold, iterations=iterations, seed=rng)
        except FitFailed:
            continue
        if fit.inliers < min_inliers or not (MIN_STEM_RADIUS <= fit.radius <= MAX_STEM_RADIUS):
            continue
        if fit.tilt_deg() > MAX_AXIS_TILT_DEG:
            continue
        # Axis point at breast height above the plane.
        denom = float(ground.normal @ fit.axis)
        s = (BREAST_HEIGHT - ground.signed_distance(fit.center)) / denom
        bh = fit.center + s * fit.axis
        features.append(TreeFeature(bh[:2], None, fit.radius, fit.axis, Source.MLS, fit.inliers))
    return features


def save_features_csv(features: Sequence[TreeFeature], path) -> None:
    """Debug export ``x,y,height,radius,source``; empty fields for missing values."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "height", "radius", "source"])
        for f in features:
            w.writerow([
                f"{f.position_xy[0]:.6f}",
                f"{f.position_xy[1]:.6f}",
                "" if f.height is None else f"{f.height:.6f}",
                "" if f.radius is None else f"{f.radius:.6f}",
                f.source.value,
            ])


def save_chm(chm: CanopyHeightMap, path) -> None:
    """CHM as ``.npy`` with origin and resolution in a sibling text header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, chm.cells)
    path.with_suffix(".txt").write_text(
        f"origin_x {chm.origin_xy[0]!r}\norigin_y {chm.origin_xy[1]!r}\nresolution {chm.resolution!r}\n",
        encoding="utf-8",
    )
