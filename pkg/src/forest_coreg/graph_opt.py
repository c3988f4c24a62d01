"""Factor graph over MLS node poses and its Levenberg-Marquardt solver.

Residuals live in the tangent space of SE(3) with twists ordered
``(rho, phi)``. Poses are perturbed on the right, ``T <- T @ exp(delta)``.
Binary factors (odometry, loop, grid) penalise ``Log(Z^-1 Ti^-1 Tj)``;
aerial priors penalise ``Log(P^-1 Ti)``.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from .config import GraphConfig
from .errors import DisconnectedGraph, GaugeUnconstrained, SolverDiverged, UnknownNode
from .fine_reg import RegistrationResult
from .geometry import Pose, se3_exp, se3_log, se3_right_jacobian_inv
from .ingest import Mission, TileSet, check_information

logger = logging.getLogger(__name__)


class FactorKind(str, enum.Enum):
    ODOMETRY = "odometry"
    LOOP = "loop"
    GRID = "grid"
    AERIAL_PRIOR = "aerial_prior"


BINARY_KINDS = (FactorKind.ODOMETRY, FactorKind.LOOP, FactorKind.GRID)


@dataclass(frozen=True)
class Factor:
    kind: FactorKind
    node_ids: tuple
    measurement: Pose
    information: np.ndarray
    huber_delta: Optional[float] = None

    def __post_init__(self):
        kind = FactorKind(self.kind)
        object.__setattr__(self, "kind", kind)
        ids = tuple(self.node_ids)
        object.__setattr__(self, "node_ids", ids)
        expected = 1 if kind is FactorKind.AERIAL_PRIOR else 2
        if len(ids) != expected:
            raise ValueError(f"{kind.value} factor takes {expected} node(s), got {len(ids)}")
        info = check_information(self.information, f"{kind.value} factor information").copy()
        info.setflags(write=False)
        object.__setattr__(self, "information", info)
        if self.huber_delta is not None and not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive")


def diagonal_information(sigma_t: float, sigma_r: float) -> np.ndarray:
    return np.diag([sigma_t**-2] * 3 + [sigma_r**-2] * 3)


@dataclass
class FactorGraph:
    nodes: dict = field(default_factory=dict)
    factors: list = field(default_factory=list)
    config: GraphConfig = field(default_factory=GraphConfig)
    fixed: set = field(default_factory=set)
    labels: dict = field(default_factory=dict)  # cloud_id -> node_id

    def add_node(self, node_id: Hashable, pose: Pose, label: Optional[str] = None) -> None:
        self.nodes[node_id] = pose
        if label is not None:
            self.labels[label] = node_id

    def add_factor(self, factor: Factor) -> None:
        for k in factor.node_ids:
            if k not in self.nodes:
                raise UnknownNode(k)
        self.factors.append(factor)

    def copy(self) -> "FactorGraph":
        return FactorGraph(dict(self.nodes), list(self.factors), self.config, set(self.fixed), dict(self.labels))

    def count(self, kind: FactorKind) -> int:
        return sum(1 for f in self.factors if f.kind is kind)

    def components(self) -> list[list]:
        """Node sets connected by binary factors, each sorted, in order of first node."""
        ids = sorted(self.nodes, key=_sort_key)
        index = {k: i for i, k in enumerate(ids)}
        rows, cols = [], []
        for f in self.factors:
            if f.kind is not FactorKind.AERIAL_PRIOR:
                rows.append(index[f.node_ids[0]])
                cols.append(index[f.node_ids[1]])
        adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(ids), len(ids)))
        _, labels = connected_components(adj, directed=False)
        out: dict[int, list] = {}
        for k, lab in zip(ids, labels):
            out.setdefault(int(lab), []).append(k)
        return list(out.values())

    def anchored(self) -> set:
        return set(self.fixed) | {f.node_ids[0] for f in self.factors if f.kind is FactorKind.AERIAL_PRIOR}


def _sort_key(k):
    return (0, k, ()) if isinstance(k, (int, np.integer)) else (1, 0, tuple(k) if isinstance(k, tuple) else (str(k),))


def node_label(node_id) -> str:
    if isinstance(node_id, tuple):
        return "tile_" + "_".join(str(int(v)) for v in node_id)
    return f"node_{int(node_id)}"


def build_graph_from_mission(mission: Mission, config: Optional[GraphConfig] = None) -> FactorGraph:
    g = FactorGraph(config=config or GraphConfig())
    for n in mission.nodes:
        g.add_node(n.node_id, n.pose, node_label(n.node_id))
    for e in mission.odometry_edges:
        g.add_factor(Factor(FactorKind.ODOMETRY, (e.i, e.j), e.measurement, e.information))
    for e in mission.loop_edges:
        g.add_factor(Factor(FactorKind.LOOP, (e.i, e.j), e.measurement, e.information))
    comps = g.components()
    if len(comps) > 1:
        raise DisconnectedGraph(f"mission graph has {len(comps)} components")
    return g


def build_graph_from_tiles(tiles: TileSet, config: Optional[GraphConfig] = None) -> FactorGraph:
    cfg = config or GraphConfig()
    g = FactorGraph(config=cfg)
    keys = tiles.keys()
    for k in keys:
        g.add_node(k, tiles.grid_pose(k), node_label(k))
    info = diagonal_information(cfg.grid_sigma_t, cfg.grid_sigma_r)
    occupied = set(keys)
    for r, c in keys:
        for nb in ((r, c + 1), (r + 1, c)):
            if nb in occupied:
                z = tiles.grid_pose((r, c)).inverse() @ tiles.grid_pose(nb)
                g.add_factor(Factor(FactorKind.GRID, ((r, c), nb), z, info))
    return g


def prior_information(result: RegistrationResult, config: GraphConfig) -> np.ndarray:
    sigma_t = max(result.inlier_rmse, config.prior_min_sigma_t)
    return diagonal_information(sigma_t, config.prior_sigma_r)


def add_aerial_factors(graph: FactorGraph, results: Iterable[RegistrationResult]) -> FactorGraph:
    """One robust unary prior ``T_AM @ T_i`` per accepted registration (in place)."""
    cfg = graph.config
    for r in results:
        if not r.accepted:
            continue
        node = graph.labels.get(r.cloud_id)
        if node is None:
            raise UnknownNode(r.cloud_id)
        prior = r.transform @ graph.nodes[node]
        graph.add_factor(Factor(FactorKind.AERIAL_PRIOR, (node,), prior, prior_information(r, cfg), cfg.huber_delta))
    return graph


def evaluate_residual(factor: Factor, nodes: dict) -> tuple[np.ndarray, list[np.ndarray]]:
    """Residual twist and its Jacobians w.r.t. each node's right perturbation."""
    if factor.kind is FactorKind.AERIAL_PRIOR:
        Ti = nodes[factor.node_ids[0]]
        r = se3_log(factor.measurement.inverse() @ Ti)
        return r, [se3_right_jacobian_inv(r)]
    Ti, Tj = nodes[factor.node_ids[0]], nodes[factor.node_ids[1]]
    r = se3_log(factor.measurement.inverse() @ Ti.inverse() @ Tj)
    jr_inv = se3_right_jacobian_inv(r)
    Ji = -jr_inv @ (Tj.inverse() @ Ti).adjoint()
    return r, [Ji, jr_inv]


def _robust(s: float, delta: Optional[float]) -> tuple[float, float]:
    """(cost, IRLS weight) of whitened residual norm ``s``."""
    if delta is None or s <= delta:
        return s * s, 1.0
    return 2.0 * delta * s - delta * delta, delta / s


def total_cost(graph: FactorGraph, nodes: Optional[dict] = None) -> tuple[float, dict]:
    nodes = graph.nodes if nodes is None else nodes
    by_kind = {k.value: 0.0 for k in FactorKind}
    for f in graph.factors:
        r, _ = evaluate_residual(f, nodes)
        s = float(np.sqrt(max(r @ f.information @ r, 0.0)))
        by_kind[f.kind.value] += _robust(s, f.huber_delta)[0]
    return float(sum(by_kind.values())), by_kind


def _check_gauge(graph: FactorGraph, hold_unanchored: bool) -> set:
    anchors = graph.anchored()
    if not anchors:
        raise GaugeUnconstrained("no aerial prior and no fixed node")
    held = set()
    for comp in graph.components():
        if not anchors.intersection(comp):
            if not hold_unanchored:
                raise DisconnectedGraph(f"component starting at {comp[0]!r} ({len(comp)} nodes) has no anchor")
            held.update(comp)
    return held


def _linearize(graph: FactorGraph, nodes: dict, index: dict):
    n = 6 * len(index)
    rows, cols, vals = [], [], []
    g = np.zeros(n)
    cost = 0.0
    for f in graph.factors:
        r, jacs = evaluate_residual(f, nodes)
        s = float(np.sqrt(max(r @ f.information @ r, 0.0)))
        c, w = _robust(s, f.huber_delta)
        cost += c
        W = w * f.information
        active = [(index[k], J) for k, J in zip(f.node_ids, jacs) if k in index]
        for a, Ja in active:
            g[6 * a:6 * a + 6] += Ja.T @ W @ r
            for b, Jb in active:
                block = Ja.T @ W @ Jb
                ii, jj = np.meshgrid(np.arange(6 * a, 6 * a + 6), np.arange(6 * b, 6 * b + 6), indexing="ij")
                rows.append(ii.ravel())
                cols.append(jj.ravel())
                vals.append(block.ravel())
    if rows:
        H = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsc()
    else:
        H = sp.csc_matrix((n, n))
    return H, g, cost


def optimize(graph: FactorGraph, *, hold_unanchored: bool = False) -> tuple[FactorGraph, dict]:
    """Levenberg-Marquardt on the manifold; returns an optimized copy and a report.

    Per-factor cost is the squared Mahalanobis norm, or its Huber
    counterpart for factors carrying ``huber_delta``. With
    ``hold_unanchored`` components lacking any anchor keep their initial
    poses instead of raising :class:`DisconnectedGraph`.
    """
    cfg = graph.config
    held = _check_gauge(graph, hold_unanchored)
    free = [k for k in sorted(graph.nodes, key=_sort_key) if k not in graph.fixed and k not in held]
    index = {k: i for i, k in enumerate(free)}
    nodes = dict(graph.nodes)
    initial_cost, initial_by_kind = total_cost(graph, nodes)
    if not np.isfinite(initial_cost):
        raise SolverDiverged("initial cost is not finite")

    lam = 1e-4
    cost = initial_cost
    iterations = 0
    termination = "max_iterations"
    if not free:
        termination = "no_free_nodes"
    while free and iterations < cfg.max_iterations:
        H, g, cost = _linearize(graph, nodes, index)
        if np.linalg.norm(g, np.inf) < 1e-14:
            termination = "gradient"
            break
        iterations += 1
        diag = H.diagonal()
        damping = sp.diags(lam * np.maximum(diag, 1e-9))
        delta = spsolve((H + damping).tocsc(), -g)
        if not np.all(np.isfinite(delta)):
            raise SolverDiverged("linear solve produced non-finite step")
        trial = dict(nodes)
        for k, i in index.items():
            trial[k] = (nodes[k] @ se3_exp(delta[6 * i:6 * i + 6])).normalized()
        new_cost, _ = total_cost(graph, trial)
        if not np.isfinite(new_cost):
            raise SolverDiverged(f"cost became non-finite at iteration {iterations}")
        step = float(np.linalg.norm(delta))
        if new_cost <= cost:
            change = cost - new_cost
            nodes, cost = trial, new_cost
            lam = max(lam / 10.0, 1e-12)
            if step < cfg.step_tol:
                termination = "step"
                break
            if change <= cfg.cost_tol * max(1.0, cost):
                termination = "cost"
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                termination = "damping"
                break
            if step < cfg.step_tol:
                termination = "step"
                break

    out = FactorGraph(nodes, list(graph.factors), cfg, set(graph.fixed), dict(graph.labels))
    final_cost, by_kind = total_cost(out)
    shifts = np.array([np.linalg.norm(nodes[k].t - graph.nodes[k].t) for k in sorted(graph.nodes, key=_sort_key)])
    report = {
        "initial_cost": initial_cost,
        "final_cost": final_cost,
        "iterations": iterations,
        "termination": termination,
        "cost_by_factor_kind": by_kind,
        "initial_cost_by_factor_kind": initial_by_kind,
        "node_shift_mean_m": float(shifts.mean()) if len(shifts) else 0.0,
        "node_shift_max_m": float(shifts.max()) if len(shifts) else 0.0,
        "num_nodes": len(graph.nodes),
        "num_factors": {k.value: graph.count(k) for k in FactorKind},
        "held_nodes": len(held),
    }
    logger.info("optimize: cost %.6g -> %.6g in %d iterations (%s)", initial_cost, final_cost, iterations, termination)
    return out, report


def poses_rmse(estimate: dict, truth: dict) -> float:
    """Translational RMSE between two pose maps over their common keys."""
    keys = [k for k in estimate if k in truth]
    d = np.array([estimate[k].t - truth[k].t for k in keys])
    return float(np.sqrt(np.mean(np.sum(d**2, axis=1)))) if len(d) else 0.0
