"""Tree-to-tree matching by maximum clique and planar rigid alignment."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .config import CoarseConfig, FeatureConfig, PreprocessConfig
from .errors import (
    DegenerateConfiguration,
    GraphTooLarge,
    InsufficientMatches,
    MatchFailed,
)
from .features import TreeFeature, aerial_features, extract_stems
from .geometry import PointCloud, Pose, planar_pose, so3_exp, transform_cloud
from .preprocess import Plane, fit_ground_plane, vertical_alignment

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PlanarPose:
    """``target = R(theta) @ source + t_xy``; ``rms`` is the fit residual."""

    theta: float
    t_xy: np.ndarray
    rms: float = 0.0

    def __post_init__(self):
        th = float(np.arctan2(np.sin(self.theta), np.cos(self.theta)))
        if th == -np.pi:
            th = np.pi
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "t_xy", np.asarray(self.t_xy, dtype=float).reshape(2))

    def apply(self, xy: np.ndarray) -> np.ndarray:
        c, s = np.cos(self.theta), np.sin(self.theta)
        return np.asarray(xy) @ np.array([[c, s], [-s, c]]) + self.t_xy

    def to_pose(self) -> Pose:
        return planar_pose(self.theta, *self.t_xy)


class CorrespondenceGraph:
    """Vertices are (aerial, terrestrial) index pairs; vertex ``k = a * n_t + t``.

    Adjacency is stored as one integer bitset per vertex.
    """

    def __init__(self, n_aerial: int, n_terrestrial: int, neighbors: list[int], tau: float):
        self.n_aerial = n_aerial
        self.n_terrestrial = n_terrestrial
        self.neighbors = neighbors
        self.tau = tau

    def __len__(self) -> int:
        return len(self.neighbors)

    @property
    def vertices(self) -> np.ndarray:
        a, t = np.divmod(np.arange(len(self)), self.n_terrestrial)
        return np.column_stack([a, t])

    def pair(self, k: int) -> tuple[int, int]:
        return divmod(int(k), self.n_terrestrial)

    def has_edge(self, i: int, j: int) -> bool:
        return bool((self.neighbors[i] >> j) & 1)

    def degree(self, k: int) -> int:
        return bin(self.neighbors[k]).count("1")

    def adjacency_matrix(self) -> np.ndarray:
        n = len(self)
        out = np.zeros((n, n), dtype=bool)
        for i, bits in enumerate(self.neighbors):
            if bits:
                raw = bits.to_bytes((n + 7) // 8, "little")
                out[i] = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")[:n].astype(bool)
        return out

    def edges(self) -> set[tuple[int, int]]:
        adj = self.adjacency_matrix()
        i, j = np.nonzero(np.triu(adj, 1))
        return set(zip(i.tolist(), j.tolist()))

    @classmethod
    def from_adjacency(cls, adj: np.ndarray, n_terrestrial: Optional[int] = None) -> "CorrespondenceGraph":
        """Wrap an arbitrary symmetric boolean matrix (mainly for testing)."""
        adj = np.asarray(adj, dtype=bool)
        n = len(adj)
        nt = n_terrestrial or max(n, 1)
        return cls(max(n // nt, 1), nt, _pack_rows(adj & ~np.eye(n, dtype=bool)), float("nan"))


def _pack_rows(adj: np.ndarray) -> list[int]:
    packed = np.packbits(adj, axis=1, bitorder="little")
    return [int.from_bytes(row.tobytes(), "little") for row in packed]


def _positions(features: Sequence) -> np.ndarray:
    out = [f.position_xy if isinstance(f, TreeFeature) else f for f in features]
    return np.asarray(out, dtype=float).reshape(-1, 2)


def build_correspondence_graph(aerial, terrestrial, tau: float = 0.5, max_vertices: int = 10_000) -> CorrespondenceGraph:
    """Edge between (u, v) and (u', v') iff u != u', v != v' and |d(u,u') - d(v,v')| < tau."""
    pa, pt = _positions(aerial), _positions(terrestrial)
    na, nt = len(pa), len(pt)
    if na == 0 or nt == 0:
        raise ValueError("both feature lists must be non-empty")
    if not tau >= 0:
        raise ValueError("tau must be non-negative")
    n = na * nt
    if n > max_vertices:
        raise GraphTooLarge(f"{na} x {nt} = {n} vertices exceeds cap {max_vertices}")
    da = np.linalg.norm(pa[:, None] - pa[None], axis=2)
    dt = np.linalg.norm(pt[:, None] - pt[None], axis=2)
    not_same_t = ~np.eye(nt, dtype=bool)
    neighbors: list[int] = []
    for u in range(na):
        # block[v, u', v'] = edge between (u, v) and (u', v')
        block = np.abs(da[u][None, :, None] - dt[:, None, :]) < tau
        block &= not_same_t[:, None, :]
        block[:, u, :] = False
        neighbors.extend(_pack_rows(block.reshape(nt, n)))
    return CorrespondenceGraph(na, nt, neighbors, float(tau))


def _color_sort(P: int, adj: list[int]) -> tuple[list[int], list[int]]:
    order, bounds = [], []
    U = P
    color = 0
    while U:
        color += 1
        Q = U
        while Q:
            low = Q & -Q
            v = low.bit_length() - 1
            Q &= ~(adj[v] | low)
            U &= ~low
            order.append(v)
            bounds.append(color)
    return order, bounds


def _greedy_clique(adj: list[int], n: int) -> list[int]:
    best: list[int] = []
    for start in range(n):
        clique, P = [start], adj[start]
        while P:
            # pick the candidate with most neighbours inside P
            cands = []
            Q = P
            while Q:
                low = Q & -Q
                v = low.bit_length() - 1
                cands.append((bin(adj[v] & P).count("1"), -v))
                Q ^= low
            _, nv = max(cands)
            clique.append(-nv)
            P &= adj[-nv]
        if len(clique) > len(best):
            best = clique
    return best


def greedy_clique(graph: CorrespondenceGraph) -> list[int]:
    return sorted(_greedy_clique(graph.neighbors, len(graph))) if len(graph) else []


def maximum_cliques(graph: CorrespondenceGraph, max_solutions: int = 10_000) -> list[tuple[int, ...]]:
    """All maximum cliques, each as a sorted vertex tuple, in lexicographic order.

    Branch and bound with a greedy-colouring upper bound over integer
    bitsets. Ties are kept (pruning only when the bound is strictly smaller)
    so every maximum clique is reported, up to ``max_solutions``.
    """
    n = len(graph)
    if n == 0:
        return []
    # Relabel by decreasing degree: colouring works in that order.
    deg = np.array([graph.degree(k) for k in range(n)])
    order = np.lexsort((np.arange(n), -deg))
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    adj = [0] * n
    for old in range(n):
        bits = graph.neighbors[old]
        new_bits = 0
        while bits:
            low = bits & -bits
            new_bits |= 1 << int(rank[low.bit_length() - 1])
            bits ^= low
        adj[int(rank[old])] = new_bits

    best_size = len(_greedy_clique(adj, min(n, 64)))
    solutions: list[list[int]] = []

    def expand(R: list[int], P: int) -> None:
        nonlocal best_size, solutions
        vs, bounds = _color_sort(P, adj)
        for i in range(len(vs) - 1, -1, -1):
            if len(R) + bounds[i] < best_size or len(solutions) >= max_solutions:
                return
            v = vs[i]
            NP = P & adj[v]
            R.append(v)
            if NP:
                expand(R, NP)
            elif len(R) > best_size:
                best_size, solutions = len(R), [list(R)]
            elif len(R) == best_size:
                solutions.append(list(R))
            R.pop()
            P &= ~(1 << v)

    expand([], (1 << n) - 1)
    result = sorted({tuple(sorted(int(order[v]) for v in s)) for s in solutions})
    return result


def max_clique(graph: CorrespondenceGraph) -> list[tuple[int, int]]:
    """Lexicographically smallest maximum clique as (aerial, terrestrial) pairs."""
    cliques = maximum_cliques(graph)
    if not cliques:
        return []
    return [graph.pair(k) for k in cliques[0]]


def estimate_planar_pose(matches) -> PlanarPose:
    """Least-squares 2-D rigid fit (no scale) of ``(source_xy, target_xy)`` pairs.

    Pairs are put in a canonical order first so the result does not depend on
    the order of ``matches``.
    """
    arr = np.asarray([np.concatenate([np.ravel(s), np.ravel(t)]) for s, t in matches], dtype=float).reshape(-1, 4)
    if len(arr) < 3:
        raise InsufficientMatches(f"need at least 3 matches, got {len(arr)}")
    arr = arr[np.lexsort(arr.T[::-1])]
    src, dst = arr[:, :2], arr[:, 2:]
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(arr)
    scale = max(np.abs(xs).max(), np.abs(xd).max(), 1e-300)
    U, S, Vt = np.linalg.svd(cov)
    if S[0] <= 1e-12 * scale * scale:
        raise DegenerateConfiguration("cross-covariance is singular (coincident points)")
    D = np.diag([1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    theta = float(np.arctan2(R[1, 0], R[0, 0]))
    t = mu_d - R @ mu_s
    rms = float(np.sqrt(np.mean(np.sum((src @ R.T + t - dst) ** 2, axis=1))))
    return PlanarPose(theta, t, rms)


def yaw_about_ground(theta: float, src_xy: np.ndarray, dst_xy: np.ndarray, plane: Plane) -> Pose:
    """Rotate by ``theta`` about the ground normal, taking the centroid of
    ``src_xy`` onto that of ``dst_xy`` with both lifted onto ``plane``.

    On sloped ground a yaw about world z would tilt the levelled cloud off
    the plane again; a rotation about the normal keeps the plane fixed.
    """
    R = so3_exp(plane.normal * theta)

    def lift(xy):
        return np.array([xy[0], xy[1], float(plane.z_at(xy))])

    s = lift(np.mean(src_xy, axis=0))
    d = lift(np.mean(dst_xy, axis=0))
    return Pose(R, d - R @ s)


def coarse_register(
    mls: PointCloud,
    als_crop: PointCloud,
    gnss_center=None,
    config: Optional[CoarseConfig] = None,
    *,
    features: Optional[FeatureConfig] = None,
    preprocess: Optional[PreprocessConfig] = None,
    seed=0,
    cloud_id: str = "",
) -> tuple[Pose, dict]:
    """Coarse 6-DoF T_AM: ground-plane correction, then tree matching for x, y, yaw.

    Raises :class:`MatchFailed` (with a ``diagnostics`` attribute) when the
    best clique has fewer than ``min_matches`` trees.
    """
    cfg = config or CoarseConfig()
    fcfg = features or FeatureConfig()
    pcfg = preprocess or PreprocessConfig()
    rng = np.random.default_rng(seed)
    if gnss_center is None:
        lo, hi = mls.points[:, :2].min(axis=0), mls.points[:, :2].max(axis=0)
        gnss_center = 0.5 * (lo + hi)
    plane_kw = dict(
        k=pcfg.normal_k,
        band_fraction=pcfg.ground_band_fraction,
        max_normal_angle_deg=pcfg.ground_normal_max_deg,
        threshold=pcfg.ransac_threshold,
        max_iterations=pcfg.ransac_iterations,
        confidence=pcfg.ransac_confidence,
    )
    mls_plane = fit_ground_plane(mls, seed=rng, **plane_kw)
    als_plane = fit_ground_plane(als_crop, seed=rng, **plane_kw)
    t_vert = vertical_alignment(mls_plane, als_plane, gnss_center)
    aligned = transform_cloud(mls, t_vert)

    stems = extract_stems(
        aligned,
        als_plane,
        slice_low=fcfg.slice_low,
        slice_high=fcfg.slice_high,
        eps=fcfg.dbscan_eps,
        min_pts=fcfg.dbscan_min_pts,
        cluster_voxel=fcfg.cluster_voxel,
        threshold=fcfg.cylinder_threshold,
        min_inliers=fcfg.cylinder_min_inliers,
        iterations=fcfg.cylinder_iterations,
        seed=rng,
    )
    peaks = aerial_features(
        als_crop, als_plane, resolution=fcfg.chm_resolution, window_m=fcfg.nms_window_m,
        min_height=fcfg.min_peak_height,
    )
    diag = {
        "cloud_id": cloud_id,
        "clique_size": 0,
        "n_aerial": len(peaks),
        "n_terrestrial": len(stems),
        "residual_rms": None,
        "status": "match_failed",
    }
    if len(stems) < cfg.min_matches or len(peaks) < cfg.min_matches:
        err = MatchFailed(f"{cloud_id}: {len(stems)} stems / {len(peaks)} canopy peaks")
        err.diagnostics = diag
        raise err
    graph = build_correspondence_graph(peaks, stems, cfg.tau, cfg.max_graph_vertices)
    cliques = maximum_cliques(graph)
    size = len(cliques[0]) if cliques else 0
    diag["clique_size"] = size
    if size < cfg.min_matches:
        err = MatchFailed(f"{cloud_id}: clique of {size} < {cfg.min_matches}")
        err.diagnostics = diag
        raise err
    best = None
    for clique in cliques:
        pairs = [graph.pair(k) for k in clique]
        est = estimate_planar_pose([(stems[t].position_xy, peaks[a].position_xy) for a, t in pairs])
        if best is None or est.rms < best[0].rms:
            best = (est, pairs)
    planar, pairs = best
    diag.update(residual_rms=planar.rms, status="ok", matches=[[int(a), int(t)] for a, t in pairs])
    src = np.array([stems[t].position_xy for _, t in pairs])
    dst = np.array([peaks[a].position_xy for a, _ in pairs])
    return yaw_about_ground(planar.theta, src, dst, als_plane) @ t_vert, diag
