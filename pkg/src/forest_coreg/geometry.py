"""Rigid transforms, SE(3) Lie maps and the point-cloud container.

Twists are 6-vectors ordered translation first: ``xi = (rho, phi)`` with
``rho`` in meters and ``phi`` the rotation vector in radians. Perturbations
are applied on the right, ``T <- T @ exp(delta)``, everywhere in the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import AngleAtCutLocus, NonPositiveResolution

# Below this rotation angle the closed forms switch to Taylor expansions.
SMALL_ANGLE = 1e-8
# Jacobian coefficients lose precision much earlier than exp/log do.
_JAC_SERIES_ANGLE = 1e-2
CUT_LOCUS_MARGIN = 1e-6


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that ``hat(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]]) * 0.5


def so3_exp(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    W = hat(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * (W @ W)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    s = 0.5 * vee(R - R.T)  # = sin(theta) * axis
    sin_t = float(np.linalg.norm(s))
    cos_t = 0.5 * (np.trace(R) - 1.0)
    theta = float(np.arctan2(sin_t, cos_t))
    if theta >= np.pi - CUT_LOCUS_MARGIN:
        raise AngleAtCutLocus(f"rotation angle {theta:.9f} rad is at the cut locus")
    if theta < SMALL_ANGLE:
        # theta / sin(theta) = 1 + theta^2 / 6 + ...
        return s * (1.0 + theta * theta / 6.0)
    return s * (theta / sin_t)


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    W = hat(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + (W @ W) / 6.0
    b = (1.0 - np.cos(theta)) / theta**2
    c = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + b * W + c * (W @ W)


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    W = hat(phi)
    if theta < _JAC_SERIES_ANGLE:
        t2 = theta * theta
        e = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        e = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * W + e * (W @ W)


def _q_matrix(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Upper-right block of the SE(3) left Jacobian (translation-first twist)."""
    theta = float(np.linalg.norm(phi))
    P, F = hat(rho), hat(phi)
    FP, PF = F @ P, P @ F
    FPF = F @ PF
    if theta < _JAC_SERIES_ANGLE:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
        c2 = 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0
        c3 = 1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        c1 = (theta - s) / theta**3
        c2 = (theta**2 + 2.0 * c - 2.0) / (2.0 * theta**4)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta**5)
    return (
        0.5 * P
        + c1 * (FP + PF + FPF)
        + c2 * (F @ FP + PF @ F - 3.0 * FPF)
        + c3 * (FPF @ F + F @ FPF)
    )


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    rho, phi = xi[:3], xi[3:]
    Jinv = so3_left_jacobian_inv(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[:3, 3:] = -Jinv @ _q_matrix(rho, phi) @ Jinv
    return out


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian: ``log(exp(xi) exp(d)) ~ xi + Jr^-1(xi) d``."""
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


class Pose:
    """Rigid transform ``x -> R x + t``. Immutable; compose with ``@``."""

    __slots__ = ("R", "t")

    def __init__(self, R: Optional[np.ndarray] = None, t: Optional[np.ndarray] = None):
        R = np.eye(3) if R is None else np.array(R, dtype=float)
        t = np.zeros(3) if t is None else np.array(t, dtype=float).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    def __setattr__(self, name, value):
        raise AttributeError("Pose is immutable")

    def __reduce__(self):
        # default slot unpickling goes through __setattr__
        return (Pose, (self.R, self.t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation_quaternion(cls, t, q_xyzw) -> "Pose":
        return cls(Rotation.from_quat(q_xyzw).as_matrix(), t)

    @classmethod
    def from_rotvec(cls, phi, t=None) -> "Pose":
        return cls(so3_exp(np.asarray(phi, dtype=float)), t)

    def quaternion(self) -> np.ndarray:
        """Unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
        q = Rotation.from_matrix(self.R).as_quat()
        return -q if q[3] < 0 else q

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose(Rt, -(Rt @ self.t))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.R.T + self.t

    def normalized(self) -> "Pose":
        """Project the rotation back onto SO(3) (polar decomposition)."""
        U, _, Vt = np.linalg.svd(self.R)
        R = U @ Vt
        if np.linalg.det(R) < 0:
            U[:, -1] *= -1
            R = U @ Vt
        return Pose(R, self.t)

    def adjoint(self) -> np.ndarray:
        out = np.zeros((6, 6))
        out[:3, :3] = self.R
        out[3:, 3:] = self.R
        out[:3, 3:] = hat(self.t) @ self.R
        return out

    def rotation_angle(self) -> float:
        cos_t = np.clip(0.5 * (np.trace(self.R) - 1.0), -1.0, 1.0)
        return float(np.arccos(cos_t))

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.R, other.R, rtol=0.0, atol=atol)
            and np.allclose(self.t, other.t, rtol=0.0, atol=atol)
        )

    def __repr__(self) -> str:
        rv = so3_log(self.R) if self.rotation_angle() < np.pi - 1e-3 else vee(self.R)
        return f"Pose(t={np.round(self.t, 6).tolist()}, rotvec={np.round(rv, 6).tolist()})"


def se3_exp(xi: np.ndarray) -> Pose:
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    return Pose(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def se3_log(p: Pose) -> np.ndarray:
    phi = so3_log(p.R)
    rho = so3_left_jacobian_inv(phi) @ p.t
    return np.concatenate([rho, phi])


def planar_pose(theta: float, tx: float, ty: float) -> Pose:
    """Rotation about +z by ``theta`` followed by a horizontal translation."""
    c, s = np.cos(theta), np.sin(theta)
    return Pose(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), [tx, ty, 0.0])


class Source(str, Enum):
    ALS = "ALS"
    MLS = "MLS"
    UNKNOWN = "UNKNOWN"


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N x 3 points in meters, optional unit normals, and an acquisition tag."""

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    source: Source = Source.UNKNOWN

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(pts).all():
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise ValueError("normals and points differ in length")
            if len(nrm) and np.abs(np.linalg.norm(nrm, axis=1) - 1.0).max() > 1e-6:
                raise ValueError("normals must have unit norm")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)
        object.__setattr__(self, "source", Source(self.source))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def select(self, mask_or_index) -> "PointCloud":
        nrm = None if self.normals is None else self.normals[mask_or_index]
        return PointCloud(self.points[mask_or_index], nrm, self.source)

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.normals, self.source)

    @staticmethod
    def concatenate(clouds: list["PointCloud"], source: Source | str | None = None) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud(np.empty((0, 3)), None, source or Source.UNKNOWN)
        pts = np.concatenate([c.points for c in clouds])
        nrm = None
        if all(c.normals is not None for c in clouds):
            nrm = np.concatenate([c.normals for c in clouds])
        if source is None:
            tags = {c.source for c in clouds}
            source = tags.pop() if len(tags) == 1 else Source.UNKNOWN
        return PointCloud(pts, nrm, source)


def transform_cloud(cloud: PointCloud, p: Pose) -> PointCloud:
    pts = cloud.points @ p.R.T + p.t
    nrm = None if cloud.normals is None else cloud.normals @ p.R.T
    if nrm is not None:
        nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(pts, nrm, cloud.source)


def voxel_keys(points: np.ndarray, resolution: float) -> np.ndarray:
    """Integer voxel index ``floor(x / resolution)`` per axis."""
    if not resolution > 0:
        raise NonPositiveResolution(f"resolution must be positive, got {resolution}")
    return np.floor(np.asarray(points) / resolution).astype(np.int64)


def unique_rows(keys: np.ndarray, return_index=False, return_inverse=False, return_counts=False):
    """``np.unique(keys, axis=0, ...)`` for integer (N, 3) keys, in the same
    lexicographic order, via a packed 1-D key when the span allows it."""
    keys = np.asarray(keys, dtype=np.int64)
    if len(keys) == 0:
        return np.unique(keys, axis=0, return_index=return_index, return_inverse=return_inverse,
                         return_counts=return_counts)
    lo = keys.min(axis=0)
    span = keys.max(axis=0) - lo + 1
    if float(span[0]) * float(span[1]) * float(span[2]) >= 2.0 ** 62:
        return np.unique(keys, axis=0, return_index=return_index, return_inverse=return_inverse,
                         return_counts=return_counts)
    k = keys - lo
    packed = (k[:, 0] * span[1] + k[:, 1]) * span[2] + k[:, 2]
    res = np.unique(packed, return_index=return_index, return_inverse=return_inverse,
                    return_counts=return_counts)
    if not isinstance(res, tuple):
        res = (res,)
    u = res[0]
    rows = np.column_stack([u // (span[1] * span[2]), (u // span[2]) % span[1], u % span[2]]) + lo
    out = (rows,) + tuple(r.reshape(-1) for r in res[1:])
    return out if len(out) > 1 else rows


def voxel_downsample(cloud: PointCloud, resolution: float, return_inverse: bool = False):
    """Replace the points of each occupied voxel by their centroid.

    Voxels are emitted in lexicographic order of their integer index, which
    makes the result independent of input ordering. With ``return_inverse``
    the voxel slot of every input point is returned as well.
    """
    keys = voxel_keys(cloud.points, resolution)
    if len(keys) == 0:
        out = PointCloud(np.empty((0, 3)), None if cloud.normals is None else np.empty((0, 3)), cloud.source)
        return (out, np.empty(0, dtype=np.int64)) if return_inverse else out
    _, inverse, counts = unique_rows(keys, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    # Sort points by voxel then accumulate: a fixed summation order per voxel.
    order = np.argsort(inverse, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    sums = np.add.reduceat(cloud.points[order], starts, axis=0)
    centroids = sums / counts[:, None]
    normals = None
    if cloud.normals is not None:
        nsum = np.add.reduceat(cloud.normals[order], starts, axis=0)
        norm = np.linalg.norm(nsum, axis=1, keepdims=True)
        # Opposed normals in one voxel cancel out; fall back to the first one.
        first = cloud.normals[order[starts]]
        normals = np.where(norm > 1e-9, nsum / np.maximum(norm, 1e-300), first)
    out = PointCloud(centroids, normals, cloud.source)
    return (out, inverse) if return_inverse else out
