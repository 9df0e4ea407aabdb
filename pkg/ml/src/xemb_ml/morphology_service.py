"""
Morphology graphs, Fused Gromov-Wasserstein distances and embodiment grouping.

Responsibilities:
- Build a torso/joint/foot graph per embodiment with descriptor node features.
- Compute hop-count shortest paths (networkx) as the structure matrix.
- Solve the fused transport problem between two graphs: conditional-gradient
  outer loop with log-domain Sinkhorn inner solves (POT).
- Fill the pairwise distance matrix, normalize it to similarities, and cut an
  average-linkage dendrogram (scipy) into a fixed number of groups.

Notes:
- fgw_distance evaluates pairs in a canonical order so d(a, b) == d(b, a) exactly.
- Same-size pairs also consider permutation couplings (feature assignment,
  identity, rounded solver output) polished by pairwise swaps.
"""
from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
import ot
from scipy.cluster.hierarchy import cut_tree, linkage
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist, squareform

from .errors import ConfigError, GraphError, NormalizationError, SolverError
from .linkchain_service import FOOT_DESC_DIM, JOINT_DESC_DIM, descriptors
from .schemas import EmbodimentSpec, FGWSettings, GroupAssignment
from .utils.table_io import write_json, write_matrix_csv

logger = logging.getLogger(__name__)

NodeKind = Literal["torso", "joint", "foot"]
FEATURE_DIM = max(JOINT_DESC_DIM, FOOT_DESC_DIM)
SWAP_PASSES = 50
ELBOW_FALLBACK = 4


@dataclass(frozen=True)
class MorphNode:
    kind: NodeKind
    features: Tuple[float, ...]


@dataclass(frozen=True)
class MorphGraph:
    """Undirected morphology graph with uniform node weights."""

    nodes: Tuple[MorphNode, ...]
    edges: Tuple[Tuple[int, int], ...]
    label: str = ""

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def node_weights(self) -> np.ndarray:
        return np.full(self.n_nodes, 1.0 / self.n_nodes)

    def feature_matrix(self) -> np.ndarray:
        return np.array([node.features for node in self.nodes], dtype=np.float64)

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.n_nodes))
        graph.add_edges_from(self.edges)
        return graph


@dataclass(frozen=True)
class DistanceMatrix:
    entries: np.ndarray
    labels: Tuple[str, ...]

    def __post_init__(self) -> None:
        d = self.entries
        n = len(self.labels)
        if d.shape != (n, n):
            raise ValueError(f"distance matrix shape {d.shape} does not match {n} labels")
        if not np.array_equal(d, d.T):
            raise ValueError("distance matrix must be symmetric")
        if np.any(np.diag(d) != 0.0) or np.any(d < 0.0):
            raise ValueError("distance matrix needs a zero diagonal and non-negative entries")


def _pad(values: Sequence[float]) -> Tuple[float, ...]:
    return tuple(float(v) for v in values) + (0.0,) * (FEATURE_DIM - len(values))


def build_graph(spec: EmbodimentSpec) -> MorphGraph:
    """Torso node 0, joints 1..J, feet J+1..J+F.

    Edges join the torso to each limb root, consecutive joints of a limb, and
    each foot to its terminal joint.
    """
    d_j, d_f = descriptors(spec)
    nodes = [MorphNode("torso", (0.0,) * FEATURE_DIM)]
    nodes += [MorphNode("joint", _pad(row)) for row in d_j]
    nodes += [MorphNode("foot", _pad(row)) for row in d_f]

    edges: List[Tuple[int, int]] = []
    for limb in spec.limbs:
        edges.append((0, limb[0] + 1))
        edges.extend((a + 1, b + 1) for a, b in zip(limb[:-1], limb[1:]))
    foot_offset = spec.n_joints + 1
    edges.extend((joint + 1, foot_offset + f) for f, joint in enumerate(spec.foot_joints))
    return MorphGraph(nodes=tuple(nodes), edges=tuple(edges), label=spec.id)


def shortest_paths(g: MorphGraph) -> np.ndarray:
    """All-pairs hop counts.

    Raises:
        GraphError: If the graph is disconnected.
    """
    graph = g.to_networkx()
    if g.n_nodes == 0 or not nx.is_connected(graph):
        raise GraphError(f"graph {g.label or '<unnamed>'} is not connected")
    return np.asarray(nx.floyd_warshall_numpy(graph, nodelist=list(range(g.n_nodes))), dtype=np.float64)


def standardize_graphs(graphs: Sequence[MorphGraph]) -> List[MorphGraph]:
    """Z-score joint and foot descriptors per dimension across all given graphs.

    Dimensions with zero spread are only centered. Torso features stay zero.
    """
    stats: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    for kind, width in (("joint", JOINT_DESC_DIM), ("foot", FOOT_DESC_DIM)):
        rows = np.array([n.features[:width] for g in graphs for n in g.nodes if n.kind == kind])
        if rows.size == 0:
            continue
        mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        stats[kind] = (mean, np.where(std > 0.0, std, 1.0))

    out = []
    for g in graphs:
        nodes = []
        for node in g.nodes:
            if node.kind == "torso":
                nodes.append(node)
                continue
            width = JOINT_DESC_DIM if node.kind == "joint" else FOOT_DESC_DIM
            mean, scale = stats[node.kind]
            raw = np.asarray(node.features[:width])
            nodes.append(MorphNode(node.kind, _pad((raw - mean) / scale)))
        out.append(MorphGraph(nodes=tuple(nodes), edges=g.edges, label=g.label))
    return out


def _canonical_key(g: MorphGraph) -> Tuple:
    return (g.n_nodes, g.feature_matrix().tobytes(), tuple(sorted(tuple(sorted(e)) for e in g.edges)))


class _FusedProblem:
    """Cost tensors of one ordered pair."""

    def __init__(self, g1: MorphGraph, g2: MorphGraph, alpha: float) -> None:
        self.alpha = alpha
        self.p = g1.node_weights
        self.q = g2.node_weights
        self.feature_cost = cdist(g1.feature_matrix(), g2.feature_matrix())
        self.d1 = shortest_paths(g1)
        self.d2 = shortest_paths(g2)
        self.const_c, self.h_c1, self.h_c2 = ot.gromov.init_matrix(
            self.d1, self.d2, self.p, self.q, loss_fun="square_loss"
        )

    def objective(self, coupling: np.ndarray) -> float:
        structure = ot.gromov.gwloss(self.const_c, self.h_c1, self.h_c2, coupling)
        return float((1.0 - self.alpha) * np.sum(self.feature_cost * coupling) + self.alpha * structure)

    def gradient(self, coupling: np.ndarray) -> np.ndarray:
        structure = ot.gromov.gwggrad(self.const_c, self.h_c1, self.h_c2, coupling)
        return (1.0 - self.alpha) * self.feature_cost + self.alpha * structure

    def quadratic_coefficient(self, direction: np.ndarray) -> float:
        return float(-self.alpha * np.sum((self.h_c1 @ direction @ self.h_c2.T) * direction))

    def permutation_objective(self, perm: np.ndarray) -> float:
        n = perm.shape[0]
        feature = np.sum(self.feature_cost[np.arange(n), perm]) / n
        structure = np.sum((self.d1 - self.d2[np.ix_(perm, perm)]) ** 2) / (n * n)
        return float((1.0 - self.alpha) * feature + self.alpha * structure)


def _round_to_marginals(coupling: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Project an approximate coupling onto the exact marginal constraints."""
    rows = coupling.sum(axis=1)
    coupling = coupling * np.minimum(1.0, p / np.maximum(rows, 1e-300))[:, None]
    cols = coupling.sum(axis=0)
    coupling = coupling * np.minimum(1.0, q / np.maximum(cols, 1e-300))[None, :]
    err_r = p - coupling.sum(axis=1)
    err_c = q - coupling.sum(axis=0)
    mass = err_r.sum()
    if mass > 0.0:
        coupling = coupling + np.outer(err_r, err_c) / mass
    return coupling


def _inner_transport(problem: _FusedProblem, grad: np.ndarray, settings: FGWSettings) -> np.ndarray:
    span = grad.max() - grad.min()
    cost = (grad - grad.min()) / span if span > 0.0 else np.zeros_like(grad)
    plan = ot.sinkhorn(
        problem.p,
        problem.q,
        cost,
        settings.epsilon,
        method="sinkhorn_log",
        numItermax=settings.inner_max_iter,
        stopThr=settings.inner_tol,
        warn=False,
    )
    plan = np.asarray(plan, dtype=np.float64)
    violation = np.abs(plan.sum(axis=1) - problem.p).sum() + np.abs(plan.sum(axis=0) - problem.q).sum()
    if not np.all(np.isfinite(plan)) or violation > settings.marginal_tol:
        raise SolverError(f"inner transport did not converge (marginal violation {violation:.3g})")
    return _round_to_marginals(plan, problem.p, problem.q)


def _conditional_gradient(problem: _FusedProblem, start: np.ndarray, settings: FGWSettings) -> Tuple[np.ndarray, float]:
    coupling = start
    value = problem.objective(coupling)
    for iteration in range(settings.max_iter):
        grad = problem.gradient(coupling)
        try:
            target = _inner_transport(problem, grad, settings)
        except SolverError as exc:
            raise SolverError(str(exc), last_objective=value) from exc
        direction = target - coupling
        a = problem.quadratic_coefficient(direction)
        b = float(np.sum(grad * direction))
        if a > 0.0:
            step = float(np.clip(-b / (2.0 * a), 0.0, 1.0))
        else:
            step = 1.0 if a + b < 0.0 else 0.0
        if step == 0.0:
            break
        coupling = coupling + step * direction
        new_value = problem.objective(coupling)
        converged = abs(value - new_value) <= settings.tol * max(abs(value), 1e-12)
        value = new_value
        if converged:
            break
    logger.debug("conditional gradient stopped after %d iterations at %.6g", iteration + 1, value)
    return coupling, value


def _swap_polish(problem: _FusedProblem, perm: np.ndarray) -> Tuple[np.ndarray, float]:
    perm = perm.copy()
    best = problem.permutation_objective(perm)
    n = perm.shape[0]
    for _ in range(SWAP_PASSES):
        improved = False
        for i, k in itertools.combinations(range(n), 2):
            perm[i], perm[k] = perm[k], perm[i]
            value = problem.permutation_objective(perm)
            if value < best - 1e-15:
                best, improved = value, True
            else:
                perm[i], perm[k] = perm[k], perm[i]
        if not improved:
            break
    return perm, best


def _polished_permutation(problem: _FusedProblem, candidates: Sequence[np.ndarray]) -> float:
    return min(_swap_polish(problem, perm)[1] for perm in candidates)


def fgw_distance(
    g1: MorphGraph,
    g2: MorphGraph,
    alpha: float = 0.5,
    epsilon: float = 1e-3,
    settings: Optional[FGWSettings] = None,
) -> float:
    """Fused Gromov-Wasserstein objective at the best coupling the solver reaches.

    Candidates are the conditional-gradient couplings and, for same-size
    pairs, their rounded permutations after pairwise-swap polishing.

    Args:
        g1 (MorphGraph): First graph (features assumed standardized).
        g2 (MorphGraph): Second graph.
        alpha (float): Structure weight in [0, 1].
        epsilon (float): Entropic regularization of the inner transport solves.
        settings (Optional[FGWSettings]): Iteration caps and tolerances; its
            alpha and epsilon are overridden by the explicit arguments.

    Returns:
        float: Non-negative distance, deterministic and exactly symmetric.

    Raises:
        ConfigError: If alpha or epsilon is out of range.
        SolverError: If an inner solve fails within its iteration cap.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("alpha must lie in [0, 1]", field="alpha")
    if epsilon <= 0.0:
        raise ConfigError("epsilon must be positive", field="epsilon")
    settings = (settings or FGWSettings()).model_copy(update={"alpha": alpha, "epsilon": epsilon})
    if _canonical_key(g2) < _canonical_key(g1):
        g1, g2 = g2, g1

    problem = _FusedProblem(g1, g2, alpha)
    starts = [np.outer(problem.p, problem.q)]
    same_size = g1.n_nodes == g2.n_nodes
    if same_size:
        n = g1.n_nodes
        _, assignment = linear_sum_assignment(problem.feature_cost)
        starts.append(np.eye(n)[assignment] / n)

    best = np.inf
    rounded: List[np.ndarray] = []
    for start in starts:
        coupling, value = _conditional_gradient(problem, start, settings)
        best = min(best, value)
        if same_size:
            _, perm = linear_sum_assignment(-coupling)
            rounded.append(perm)
    if same_size:
        candidates = rounded + [assignment, np.arange(g1.n_nodes)]
        best = min(best, _polished_permutation(problem, candidates))
    return float(max(best, 0.0))


def distance_matrix(
    graphs: Sequence[MorphGraph],
    alpha: float = 0.5,
    epsilon: float = 1e-3,
    settings: Optional[FGWSettings] = None,
) -> DistanceMatrix:
    """Pairwise distances over N graphs (N(N-1)/2 solves).

    Raises:
        ValueError: If fewer than two graphs are given.
        SolverError: With the offending pair ids attached.
    """
    if len(graphs) < 2:
        raise ValueError("distance_matrix needs at least two graphs")
    n = len(graphs)
    labels = tuple(g.label or str(i) for i, g in enumerate(graphs))
    entries = np.zeros((n, n), dtype=np.float64)
    started = time.perf_counter()
    for i, k in itertools.combinations(range(n), 2):
        try:
            value = fgw_distance(graphs[i], graphs[k], alpha, epsilon, settings)
        except SolverError as exc:
            raise SolverError(str(exc), last_objective=exc.last_objective, pair=(labels[i], labels[k])) from exc
        entries[i, k] = entries[k, i] = value
    logger.info("Computed %dx%d FGW matrix in %.2fs", n, n, time.perf_counter() - started)
    return DistanceMatrix(entries=entries, labels=labels)


def suite_distance_matrix(
    specs: Sequence[EmbodimentSpec],
    settings: FGWSettings = FGWSettings(),
) -> DistanceMatrix:
    """Build, standardize and compare the graphs of a suite."""
    graphs = standardize_graphs([build_graph(spec) for spec in specs])
    return distance_matrix(graphs, settings.alpha, settings.epsilon, settings)


def similarity_from_distance(d: DistanceMatrix) -> np.ndarray:
    """Min-max normalize off-diagonal distances and flip to similarities.

    Raises:
        NormalizationError: If all off-diagonal entries are equal.
    """
    n = d.entries.shape[0]
    off = ~np.eye(n, dtype=bool)
    values = d.entries[off]
    low, high = values.min(), values.max()
    if high == low:
        raise NormalizationError("off-diagonal distances are constant")
    sim = 1.0 - (d.entries - low) / (high - low)
    np.fill_diagonal(sim, 1.0)
    return sim


def _linkage(d: DistanceMatrix, method: str) -> np.ndarray:
    return linkage(squareform(d.entries, checks=False), method=method)


def cluster(d: DistanceMatrix, m: int, method: str = "average") -> GroupAssignment:
    """Cut an agglomerative dendrogram into exactly m groups.

    Group indices are assigned in order of first appearance along the labels.

    Raises:
        ConfigError: If m is outside [1, N].
    """
    n = len(d.labels)
    if not 1 <= m <= n:
        raise ConfigError(f"m must lie in [1, {n}], got {m}", field="m")
    if n == 1:
        return GroupAssignment(m=1, mapping={d.labels[0]: 0})
    raw = cut_tree(_linkage(d, method), n_clusters=m).ravel()
    relabel: Dict[int, int] = {}
    mapping = {}
    for label, group in zip(d.labels, raw):
        mapping[label] = relabel.setdefault(int(group), len(relabel))
    return GroupAssignment(m=m, mapping=mapping)


def elbow_group_count(d: DistanceMatrix, max_m: Optional[int] = None, method: str = "average") -> int:
    """Group count at the largest gap between successive merge heights.

    Falls back to min(4, N) when the gap is not unique or no gap exists.
    """
    n = len(d.labels)
    fallback = min(ELBOW_FALLBACK, n)
    if n < 3:
        return fallback
    heights = _linkage(d, method)[:, 2]
    upper = min(max_m or n - 1, n - 1)
    gaps = {m: heights[n - m] - heights[n - m - 1] for m in range(2, upper + 1)}
    if not gaps:
        return fallback
    best = max(gaps.values())
    winners = [m for m, gap in gaps.items() if gap == best]
    if best <= 0.0 or len(winners) > 1:
        return fallback
    return winners[0]


def export_distances(d: DistanceMatrix, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write distance.csv and similarity.csv."""
    out_dir = Path(out_dir)
    return {
        "distance": write_matrix_csv(out_dir / "distance.csv", d.entries, d.labels),
        "similarity": write_matrix_csv(out_dir / "similarity.csv", similarity_from_distance(d), d.labels),
    }


def export_groups(assignment: GroupAssignment, path: Union[str, Path]) -> Path:
    return write_json(path, assignment.model_dump())
