"""
Test morphology graphs, FGW distances and grouping.

Solver properties (identity, symmetry, permutation optimality) run on small
graphs; the full 16-robot matrix is exercised by the slow tests.
"""
import itertools

import numpy as np
import pytest
from scipy.spatial.distance import cdist
from sklearn.metrics import adjusted_rand_score

from xemb_ml import morphology_service
from xemb_ml.errors import ConfigError, GraphError, NormalizationError
from xemb_ml.morphology_service import (
    FEATURE_DIM,
    DistanceMatrix,
    MorphGraph,
    MorphNode,
    build_graph,
    cluster,
    distance_matrix,
    elbow_group_count,
    export_distances,
    export_groups,
    fgw_distance,
    shortest_paths,
    similarity_from_distance,
    standardize_graphs,
    suite_distance_matrix,
)
from xemb_ml.schemas import EmbodimentSpec


def node(kind, *features):
    return MorphNode(kind, tuple(float(f) for f in features) + (0.0,) * (FEATURE_DIM - len(features)))


def path_graph(*xs, label=""):
    nodes = tuple(node("joint", x) for x in xs)
    edges = tuple((i, i + 1) for i in range(len(xs) - 1))
    return MorphGraph(nodes=nodes, edges=edges, label=label)


def two_family_matrix(sizes=(3, 3), within=0.1, across=1.0):
    labels = [f"r{i}" for i in range(sum(sizes))]
    family = np.repeat(np.arange(len(sizes)), sizes)
    entries = np.where(family[:, None] == family[None, :], within, across)
    np.fill_diagonal(entries, 0.0)
    return DistanceMatrix(entries=entries, labels=tuple(labels)), family


def random_matrix(n, seed):
    rng = np.random.default_rng(seed)
    points = rng.normal(size=(n, 3))
    entries = cdist(points, points)
    return DistanceMatrix(entries=(entries + entries.T) / 2.0, labels=tuple(f"r{i}" for i in range(n)))


def fused_permutation_cost(g1, g2, perm, alpha):
    n = g1.n_nodes
    feature = cdist(g1.feature_matrix(), g2.feature_matrix())[np.arange(n), perm].sum() / n
    d1, d2 = shortest_paths(g1), shortest_paths(g2)
    structure = ((d1 - d2[np.ix_(perm, perm)]) ** 2).sum() / n**2
    return (1 - alpha) * feature + alpha * structure


@pytest.fixture(scope="module")
def suite_graphs(suite):
    return standardize_graphs([build_graph(spec) for spec in suite])


def test_two_joint_graph_counts():
    """A 2-joint, 1-foot chain has 4 nodes, 3 edges and uniform weights."""
    # Outside every family shape, so built without validation.
    spec = EmbodimentSpec.model_construct(
        id="tiny",
        family="biped-like",
        n_joints=2,
        n_feet=1,
        coupling=[0.5, 0.5],
        gear=[1.0, 1.0],
        damping=[0.5, 0.5],
        stiffness=[0.1, 0.1],
        q_limit=[2.0, 2.0],
        limbs=[[0, 1]],
        foot_joints=[1],
        k_track=1.0,
        k_torque=0.01,
        k_rate=0.1,
    )
    graph = build_graph(spec)
    assert graph.n_nodes == 4
    assert sorted(graph.edges) == [(0, 1), (1, 2), (2, 3)]
    assert np.allclose(graph.node_weights, 0.25)
    assert build_graph(spec) == graph


def test_suite_graphs_are_connected(suite):
    """Every suite graph is connected with J + F + 1 nodes."""
    for spec in suite:
        graph = build_graph(spec)
        assert graph.n_nodes == spec.n_joints + spec.n_feet + 1
        assert np.all(np.isfinite(shortest_paths(graph)))


def test_shortest_path_examples():
    """Hop counts on a path, a single edge and a star."""
    assert shortest_paths(path_graph(0, 1, 2)).tolist() == [[0, 1, 2], [1, 0, 1], [2, 1, 0]]
    assert shortest_paths(path_graph(0, 1)).tolist() == [[0, 1], [1, 0]]
    star = MorphGraph(nodes=tuple(node("joint", i) for i in range(5)), edges=tuple((0, k) for k in range(1, 5)))
    d = shortest_paths(star)
    assert np.all(d[0, 1:] == 1)
    assert np.all(d[1:, 1:][~np.eye(4, dtype=bool)] == 2)


def test_disconnected_graph_is_rejected():
    """A graph with an isolated node has no finite shortest paths."""
    graph = MorphGraph(nodes=(node("torso"), node("joint", 1.0), node("foot", 2.0)), edges=((0, 1),))
    with pytest.raises(GraphError):
        shortest_paths(graph)


def test_self_distance_is_zero(suite_graphs):
    """Every graph is at distance zero from itself."""
    for graph in suite_graphs:
        assert fgw_distance(graph, graph, 0.5, 1e-3) <= 1e-6


def test_distance_is_symmetric(suite_graphs):
    """Swapping the arguments gives the same non-negative value."""
    for i, k in [(0, 9), (3, 12), (6, 15), (10, 11)]:
        ab = fgw_distance(suite_graphs[i], suite_graphs[k])
        ba = fgw_distance(suite_graphs[k], suite_graphs[i])
        assert ab >= 0.0
        assert abs(ab - ba) < 1e-8


def test_same_size_pairs_reach_best_permutation(suite, suite_graphs):
    """On small equal-size graphs the distance is at most the best permutation cost."""
    index = {spec.id: i for i, spec in enumerate(suite)}
    g1, g2 = suite_graphs[index["biped-00"]], suite_graphs[index["biped-01"]]
    assert g1.n_nodes == g2.n_nodes <= 6
    brute = min(fused_permutation_cost(g1, g2, np.array(p), 0.5) for p in itertools.permutations(range(g1.n_nodes)))
    assert fgw_distance(g1, g2, 0.5, 1e-3) <= brute + 1e-6


def test_solver_does_not_enumerate_permutations(monkeypatch, suite, suite_graphs):
    """The permutation bound is met by the solver without enumerating node orders."""
    index = {spec.id: i for i, spec in enumerate(suite)}
    g1, g2 = suite_graphs[index["biped-00"]], suite_graphs[index["biped-01"]]
    brute = min(fused_permutation_cost(g1, g2, np.array(p), 0.5) for p in itertools.permutations(range(g1.n_nodes)))

    def refuse(*args, **kwargs):
        raise AssertionError("permutations enumerated")

    monkeypatch.setattr(morphology_service.itertools, "permutations", refuse)
    assert fgw_distance(g1, g2, 0.5, 1e-3) <= brute + 1e-6


def test_feature_perturbation_is_monotone():
    """Moving one node away from the rest never decreases the distance."""
    base = path_graph(0.0, 1.0, 2.0)
    values = [fgw_distance(base, path_graph(0.0, 1.0, 2.0 + delta)) for delta in (0.0, 0.1, 0.5, 1.0)]
    assert values[0] <= 1e-6
    assert all(b >= a - 1e-6 for a, b in zip(values, values[1:]))
    assert values[-1] > values[0]


def test_alpha_and_epsilon_ranges():
    """Out-of-range solver knobs are configuration errors."""
    g = path_graph(0.0, 1.0)
    with pytest.raises(ConfigError):
        fgw_distance(g, g, alpha=1.5)
    with pytest.raises(ConfigError):
        fgw_distance(g, g, epsilon=0.0)


def test_identical_pair_matrix():
    """Two identical graphs give an all-zero matrix."""
    g = path_graph(0.0, 1.0, 3.0, label="a")
    d = distance_matrix([g, g])
    assert np.all(d.entries <= 1e-6)
    assert d.entries.shape == (2, 2)


def test_matrix_solves_each_pair_once(monkeypatch):
    """Three graphs take exactly three distance solves."""
    calls = []
    original = morphology_service.fgw_distance

    def counting(*args, **kwargs):
        calls.append(1)
        return original(*args, **kwargs)

    monkeypatch.setattr(morphology_service, "fgw_distance", counting)
    graphs = [path_graph(0.0, 1.0, label="a"), path_graph(0.0, 2.0, label="b"), path_graph(1.0, 0.0, 2.0, label="c")]
    d = distance_matrix(graphs)
    assert len(calls) == 3
    assert d.labels == ("a", "b", "c")
    assert np.all(np.diag(d.entries) == 0.0)


def test_similarity_min_max():
    """Off-diagonal {2, 4, 6} map to similarities {1, 0.5, 0}."""
    entries = np.array([[0.0, 2.0, 4.0], [2.0, 0.0, 6.0], [4.0, 6.0, 0.0]])
    sim = similarity_from_distance(DistanceMatrix(entries=entries, labels=("a", "b", "c")))
    assert sim[0, 1] == 1.0 and sim[0, 2] == 0.5 and sim[1, 2] == 0.0
    assert np.all(np.diag(sim) == 1.0)


def test_constant_distances_cannot_be_normalized():
    """Equal off-diagonal entries have no spread to normalize."""
    d, _ = two_family_matrix(sizes=(3,), within=1.0)
    with pytest.raises(NormalizationError):
        similarity_from_distance(d)


def test_cluster_extremes():
    """m = 1 puts everyone in group 0; m = N gives singletons."""
    d = random_matrix(6, seed=0)
    assert set(cluster(d, 1).mapping.values()) == {0}
    singletons = cluster(d, 6)
    assert sorted(singletons.mapping.values()) == list(range(6))
    with pytest.raises(ConfigError):
        cluster(d, 7)


def test_cluster_recovers_families():
    """Two well-separated families are split exactly at m = 2."""
    d, family = two_family_matrix(sizes=(4, 3))
    groups = cluster(d, 2)
    assigned = [groups.mapping[label] for label in d.labels]
    assert adjusted_rand_score(family, assigned) == 1.0
    assert assigned[0] == 0


def test_cluster_is_permutation_equivariant():
    """Relabeling the robots relabels the clustering and nothing else."""
    d = random_matrix(8, seed=3)
    perm = np.random.default_rng(1).permutation(8)
    shuffled = DistanceMatrix(entries=d.entries[np.ix_(perm, perm)], labels=tuple(d.labels[i] for i in perm))
    a = cluster(d, 3).mapping
    b = cluster(shuffled, 3).mapping
    assert adjusted_rand_score([a[l] for l in d.labels], [b[l] for l in d.labels]) == 1.0


def test_cuts_are_nested():
    """Every group of the m = 4 cut lies inside one group of the m = 2 cut."""
    d = random_matrix(10, seed=5)
    coarse = cluster(d, 2).mapping
    fine = cluster(d, 4)
    for members in fine.groups():
        assert len({coarse[r] for r in members}) == 1


def test_elbow_finds_family_count():
    """The widest merge-height gap separates the two families."""
    d, _ = two_family_matrix(sizes=(3, 3))
    assert elbow_group_count(d) == 2
    tiny, _ = two_family_matrix(sizes=(1, 1))
    assert elbow_group_count(tiny) == 2


def test_exports(tmp_path):
    """Matrices and groups are written with robot ids."""
    d, _ = two_family_matrix(sizes=(2, 2))
    paths = export_distances(d, tmp_path)
    header = paths["distance"].read_text().splitlines()[0]
    assert "r0" in header and "r3" in header
    assert paths["similarity"].is_file()
    groups_path = export_groups(cluster(d, 2), tmp_path / "groups.json")
    assert '"m": 2' in groups_path.read_text()


@pytest.mark.slow
def test_suite_similarity_structure(suite):
    """Quadruped-like robots are closer to each other than to biped-like ones."""
    d = suite_distance_matrix(suite)
    sim = similarity_from_distance(d)
    family = {spec.id: spec.family for spec in suite}
    quads = [i for i, label in enumerate(d.labels) if family[label] == "quadruped-like"]
    bipeds = [i for i, label in enumerate(d.labels) if family[label] == "biped-like"]
    within = np.mean([sim[i, k] for i, k in itertools.combinations(quads, 2)])
    across = np.mean([sim[i, k] for i in quads for k in bipeds])
    assert within > across
    assert np.isclose(sim[~np.eye(16, dtype=bool)].min(), 0.0)
    assert np.isclose(sim[~np.eye(16, dtype=bool)].max(), 1.0)
