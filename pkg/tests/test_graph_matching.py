import itertools
import logging

import numpy as np
import pytest
import scipy.linalg as la

from conftest import PENDANT_TREE, graph_from_edges, path_edges, star_edges
from lib.graph_matching import (
    GraphMatchingError,
    assemble_affinity,
    discretize,
    distance_matrix,
    leading_eigenvector,
    match_graphs,
    node_histogram,
    pairwise_cost,
    unary_cost,
    unary_table,
)
from optypes.match_types import AffinityMatrix, MatchingParams, SecondOrderScale

logger = logging.getLogger(__name__)


def cycle_edges(n):
    return path_edges(n) + [(0, n - 1)]


def spider_edges():
    # center 0 with three legs of length two
    return [(0, 1), (1, 2), (0, 3), (3, 4), (0, 5), (5, 6)]


def relabeled(n, edges, seed):
    perm = np.random.default_rng(seed).permutation(n)
    return graph_from_edges(n, [(int(perm[a]), int(perm[b])) for a, b in edges])


def wrap(matrix: np.ndarray, n_a: int, n_b: int) -> AffinityMatrix:
    return AffinityMatrix(
        matrix=matrix,
        n_a=n_a,
        n_b=n_b,
        nnz=int((matrix > 0).sum()),
        second_order_scale=1.0,
        active=np.ones(n_a * n_b, dtype=bool),
    )


def row_matches(values, **overrides):
    values = np.asarray(values, dtype=float)
    matching = discretize(values, 1, len(values), MatchingParams(**overrides))
    return matching.match_set(0)


def as_sets(matching):
    return {a: sorted(matching.match_set(a)) for a in range(matching.n_a)}


# ---------------------------------------------------------------------------
# Histograms and costs
# ---------------------------------------------------------------------------

def test_path_histograms():
    p3 = graph_from_edges(3, path_edges(3))
    np.testing.assert_array_equal(node_histogram(p3, 1), [2])
    np.testing.assert_array_equal(node_histogram(p3, 0), [1, 1])


def test_star_histograms():
    s4 = graph_from_edges(5, star_edges(4))
    np.testing.assert_array_equal(node_histogram(s4, 0), [4])
    np.testing.assert_array_equal(node_histogram(s4, 1), [1, 3])


def test_histogram_of_missing_node():
    with pytest.raises(GraphMatchingError):
        node_histogram(graph_from_edges(3, path_edges(3)), 3)


def test_distance_matrix_marks_unreachable_pairs():
    graph = graph_from_edges(4, [(0, 1), (2, 3)])
    dist = distance_matrix(graph)
    assert dist[0, 1] == 1
    assert np.isinf(dist[0, 2])
    np.testing.assert_array_equal(np.diag(dist), 0)


def test_unary_cost_pads_the_shorter_histogram():
    assert unary_cost(np.array([2]), np.array([1, 1])) == pytest.approx(np.sqrt(2))
    assert unary_cost(np.array([1, 3]), np.array([1, 3])) == 0.0


def test_cluster_ids_add_to_the_unary_cost():
    a = graph_from_edges(3, path_edges(3))
    b = graph_from_edges(3, path_edges(3))
    b.nodes[1].centroid_id = 4
    plain = unary_table(a, b)
    with_ids = unary_table(a, b, MatchingParams(use_cluster_ids=True, cluster_id_weight=2.0))
    np.testing.assert_allclose(with_ids[:, 1], plain[:, 1] + 2.0)
    np.testing.assert_allclose(with_ids[:, [0, 2]], plain[:, [0, 2]])


def test_pairwise_cost_compares_hop_distances():
    a = graph_from_edges(2, path_edges(2))
    b = graph_from_edges(4, path_edges(4))
    unary = np.zeros((2, 4))
    assert pairwise_cost(a, b, 0, 0, 1, 3, unary, sigma=0.5) == pytest.approx(np.exp(-4.0))
    assert pairwise_cost(a, b, 0, 0, 1, 1, unary, sigma=0.5) == pytest.approx(1.0)


def test_pairwise_cost_with_one_unreachable_side_is_zero():
    a = graph_from_edges(4, [(0, 1), (2, 3)])
    b = graph_from_edges(4, path_edges(4))
    unary = np.zeros((4, 4))
    assert pairwise_cost(a, b, 0, 0, 2, 1, unary) == 0.0
    assert pairwise_cost(a, a, 0, 0, 2, 2, unary) == pytest.approx(1.0)


def test_pairwise_cost_needs_distinct_candidates():
    g = graph_from_edges(2, path_edges(2))
    with pytest.raises(GraphMatchingError):
        pairwise_cost(g, g, 0, 1, 0, 1, np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# Affinity
# ---------------------------------------------------------------------------

def test_affinity_matches_pairwise_costs():
    a = graph_from_edges(3, path_edges(3))
    b = graph_from_edges(4, star_edges(3))
    params = MatchingParams()
    affinity = assemble_affinity(a, b, params)
    cost = unary_table(a, b, params)
    m = b.n_nodes
    assert affinity.n_pruned == 0
    for (i, j), (k, l) in itertools.combinations(itertools.product(range(3), range(m)), 2):
        expected = pairwise_cost(a, b, i, j, k, l, cost, params.sigma)
        got = affinity.matrix[i * m + j, k * m + l] / affinity.second_order_scale
        assert got == pytest.approx(expected, rel=1e-12, abs=1e-15)
    np.testing.assert_allclose(np.diag(affinity.matrix), np.exp(-cost.ravel() / params.sigma))


def test_affinity_is_symmetric_with_unit_diagonal_on_equivalent_nodes():
    p3 = graph_from_edges(3, path_edges(3))
    affinity = assemble_affinity(p3, p3)
    matrix = affinity.matrix
    np.testing.assert_array_equal(matrix, matrix.T)
    assert (np.diag(matrix) == 1.0).sum() == 5
    assert affinity.nnz == 72
    assert affinity.second_order_scale == pytest.approx(1.0 / 72)


def test_single_node_graphs_give_a_unit_affinity():
    one = graph_from_edges(1, [])
    affinity = assemble_affinity(one, one)
    np.testing.assert_array_equal(affinity.matrix, [[1.0]])
    matching = match_graphs(one, one)
    assert matching.pairs() == [(0, 0)]


def test_unscaled_second_order_terms():
    p3 = graph_from_edges(3, path_edges(3))
    params = MatchingParams(second_order_scale=SecondOrderScale.NONE, second_order_multiplier=0.25)
    affinity = assemble_affinity(p3, p3, params)
    assert affinity.second_order_scale == 0.25
    # (0, 0) against (2, 2): consistent distances, equal unary costs
    assert affinity.matrix[0, 8] == pytest.approx(0.25)


def test_weak_candidates_are_pruned():
    a = graph_from_edges(2, path_edges(2))
    b = graph_from_edges(7, star_edges(6))
    affinity = assemble_affinity(a, b, MatchingParams(prune_threshold=0.05))
    assert affinity.n_pruned > 0
    for row in np.flatnonzero(~affinity.active):
        off = np.delete(affinity.matrix[row], row)
        assert (off == 0).all()
        assert 0 < affinity.matrix[row, row] < 0.05


def test_graph_size_limits():
    p3 = graph_from_edges(3, path_edges(3))
    with pytest.raises(GraphMatchingError):
        assemble_affinity(p3, p3, MatchingParams(max_nodes=2))
    with pytest.raises(GraphMatchingError):
        assemble_affinity(graph_from_edges(0, []), p3)


# ---------------------------------------------------------------------------
# Leading eigenvector
# ---------------------------------------------------------------------------

def test_power_iteration_matches_dense_solver():
    rng = np.random.default_rng(11)
    raw = rng.uniform(size=(20, 20))
    matrix = raw + raw.T
    result = leading_eigenvector(wrap(matrix, 4, 5))
    assert not result.fallback

    vals, vecs = la.eigh(matrix)
    expected = np.abs(vecs[:, -1])
    expected /= expected.max()
    np.testing.assert_allclose(result.vector, expected, atol=1e-6)
    assert result.eigenvalue == pytest.approx(vals[-1], rel=1e-10)

    v = result.vector / np.linalg.norm(result.vector)
    residual = np.linalg.norm(matrix @ v - result.eigenvalue * v) / result.eigenvalue
    assert residual < 1e-8


def test_dense_fallback_when_iterations_run_out():
    rng = np.random.default_rng(12)
    raw = rng.uniform(size=(12, 12))
    matrix = raw + raw.T
    capped = leading_eigenvector(wrap(matrix, 3, 4), MatchingParams(power_max_iter=1))
    full = leading_eigenvector(wrap(matrix, 3, 4))
    assert capped.fallback
    np.testing.assert_allclose(capped.vector, full.vector, atol=1e-6)


def test_dominant_diagonal_concentrates_the_solution():
    matrix = np.full((4, 4), 0.01)
    np.fill_diagonal(matrix, [0.1, 1.0, 0.1, 0.1])
    x = leading_eigenvector(wrap(matrix, 2, 2)).vector
    assert x[1] == 1.0
    assert (np.delete(x, 1) < 0.1).all()


# ---------------------------------------------------------------------------
# Discretization
# ---------------------------------------------------------------------------

@pytest.mark.parametrize(
    "values, expected",
    [
        ((0.50, 0.49, 0.20), [0, 1]),
        ((1.0, 0.95, 0.9, 0.5), [0, 1, 2]),
        ((1.0, 0.89), [0]),
        ((1.0, 0.9, 0.1), [0, 1]),
        ((0.7,), [0]),
        ((0.2, 0.5, 0.49), [1, 2]),
        ((0.0, 0.0, 0.0), []),
        ((0.3,) * 10, []),
        ((0.3,) * 8, list(range(8))),
        ((0.5,) * 8 + (0.1,), list(range(8))),
        ((0.5,) * 9 + (0.1,), []),
    ],
)
def test_gap_rule(values, expected):
    assert row_matches(values) == expected


def test_symmetry_order_cap():
    assert row_matches((1.0, 1.0, 1.0), max_symmetry_order=2) == []
    assert row_matches((1.0, 1.0), max_symmetry_order=2) == [0, 1]


def test_discretization_keeps_only_agreeing_directions():
    matching = discretize(np.array([1.0, 0.95, 0.1, 0.2]), 2, 2)
    assert matching.match_set(0) == [0, 1]
    assert matching.match_set(1) == []
    assert matching.matches_b[1] == [0]
    assert matching.unmatched_a == [1]
    assert matching.likelihood[(0, 1)] == pytest.approx(0.95)


def test_discretization_checks_vector_length():
    with pytest.raises(GraphMatchingError):
        discretize(np.ones(5), 2, 3)


# ---------------------------------------------------------------------------
# match_graphs
# ---------------------------------------------------------------------------

def test_path_matches_middle_to_middle_and_ends_to_both_ends():
    p3 = graph_from_edges(3, path_edges(3))
    matching = match_graphs(p3, p3)
    assert as_sets(matching) == {0: [0, 2], 1: [1], 2: [0, 2]}
    assert matching.stats["fallback"] == 0.0


def test_asymmetric_tree_matches_itself_by_identity():
    n, edges = PENDANT_TREE
    tree = graph_from_edges(n, edges)
    matching = match_graphs(tree, tree)
    assert matching.pairs() == [(i, i) for i in range(n)]


def test_reversed_arguments_transpose_the_matching():
    a = graph_from_edges(4, path_edges(4))
    b = graph_from_edges(5, star_edges(4))
    forward = match_graphs(a, b)
    backward = match_graphs(b, a)
    assert sorted(backward.pairs()) == sorted((j, i) for i, j in forward.pairs())
    assert as_sets(forward.transpose()) == as_sets(backward)


def test_second_order_multiplier_does_not_change_symmetric_sets():
    for n, edges in [(3, path_edges(3)), PENDANT_TREE, (7, spider_edges())]:
        g = graph_from_edges(n, edges)
        base = match_graphs(g, g)
        halved = match_graphs(g, g, MatchingParams(second_order_multiplier=0.5))
        assert as_sets(base) == as_sets(halved)


def qap_optimal_pairs(affinity: AffinityMatrix):
    """Pairs used by at least one best-scoring permutation, and the best score."""
    n, m = affinity.n_a, affinity.n_b
    scores = {}
    for perm in itertools.permutations(range(m), n):
        idx = np.arange(n) * m + np.asarray(perm)
        scores[perm] = float(affinity.matrix[np.ix_(idx, idx)].sum())
    best = max(scores.values())
    allowed = set()
    for perm, score in scores.items():
        if score >= best - 1e-12 * max(1.0, abs(best)):
            allowed.update(enumerate(perm))
    return allowed, best


QAP_SUITE = [
    ("path2", 2, path_edges(2)),
    ("path3", 3, path_edges(3)),
    ("path4", 4, path_edges(4)),
    ("path5", 5, path_edges(5)),
    ("path6", 6, path_edges(6)),
    ("path7", 7, path_edges(7)),
    ("star3", 4, star_edges(3)),
    ("star4", 5, star_edges(4)),
    ("star5", 6, star_edges(5)),
    ("star6", 7, star_edges(6)),
    ("pendant_tree", PENDANT_TREE[0], PENDANT_TREE[1]),
    ("spider", 7, spider_edges()),
    ("double_star", 6, [(0, 1), (0, 2), (0, 3), (1, 4), (1, 5)]),
    ("cycle5", 5, cycle_edges(5)),
    ("cycle6", 6, cycle_edges(6)),
]


def test_one_to_one_restriction_agrees_with_brute_force_assignment():
    agreements = 0
    for seed, (name, n, edges) in enumerate(QAP_SUITE):
        a = graph_from_edges(n, edges)
        b = relabeled(n, edges, seed)
        affinity = assemble_affinity(a, b)
        allowed, best = qap_optimal_pairs(affinity)
        matching = match_graphs(a, b)
        pairs = set(matching.pairs())
        if pairs <= allowed and not matching.unmatched_a:
            agreements += 1
        else:
            # score of the assignment taking each node's first candidate
            idx = np.array([i * n + s[0] for i, s in matching.matches_a.items() if s], dtype=int)
            ours = float(affinity.matrix[np.ix_(idx, idx)].sum())
            logger.warning(
                f"{name}: matching {sorted(pairs)} disagrees with brute force "
                f"(best score {best:.6g}, first-candidate score {ours:.6g})"
            )
    assert agreements / len(QAP_SUITE) >= 0.95
