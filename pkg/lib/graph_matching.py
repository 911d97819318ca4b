import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import networkx as nx
import numpy as np
import scipy.linalg as la

from optypes.match_types import (
    AffinityMatrix,
    MatchingParams,
    SecondOrderScale,
    ShapeGraph,
    SymmetricMatching,
)

logger = logging.getLogger(__name__)


class GraphMatchingError(Exception):
    """Raised when two shape graphs cannot be matched"""
    pass


@dataclass(frozen=True)
class PowerIterationResult:
    vector: np.ndarray
    eigenvalue: float
    iterations: int
    fallback: bool


# ---------------------------------------------------------------------------
# First- and second-order terms
# ---------------------------------------------------------------------------

def distance_matrix(graph: ShapeGraph) -> np.ndarray:
    """Unweighted hop distances between all node pairs; `inf` where unreachable."""
    n = graph.n_nodes
    dist = np.full((n, n), np.inf)
    for source, lengths in nx.all_pairs_shortest_path_length(graph.nx_graph):
        for target, hops in lengths.items():
            dist[source, target] = hops
    return dist


def _histogram_from_row(row: np.ndarray) -> np.ndarray:
    hops = row[np.isfinite(row) & (row > 0)].astype(np.int64)
    if hops.size == 0:
        return np.zeros(0, dtype=np.int64)
    return np.bincount(hops - 1)


def node_histogram(graph: ShapeGraph, node: int) -> np.ndarray:
    """H(i)[r] = number of nodes at hop distance r + 1 from `node`."""
    if not 0 <= node < graph.n_nodes:
        raise GraphMatchingError(f"Node {node} does not exist (graph has {graph.n_nodes})")
    lengths = nx.single_source_shortest_path_length(graph.nx_graph, node)
    row = np.full(graph.n_nodes, np.inf)
    for target, hops in lengths.items():
        row[target] = hops
    return _histogram_from_row(row)


def unary_cost(hist_a: np.ndarray, hist_b: np.ndarray) -> float:
    """Euclidean norm of the histogram difference, shorter one zero-padded."""
    size = max(len(hist_a), len(hist_b))
    a = np.pad(np.asarray(hist_a, dtype=float), (0, size - len(hist_a)))
    b = np.pad(np.asarray(hist_b, dtype=float), (0, size - len(hist_b)))
    return float(np.linalg.norm(a - b))


def unary_table(
    graph_a: ShapeGraph,
    graph_b: ShapeGraph,
    params: Optional[MatchingParams] = None,
    dist_a: Optional[np.ndarray] = None,
    dist_b: Optional[np.ndarray] = None,
) -> np.ndarray:
    """(n_a, n_b) table of unary costs C(i, j)."""
    params = params or MatchingParams()
    dist_a = distance_matrix(graph_a) if dist_a is None else dist_a
    dist_b = distance_matrix(graph_b) if dist_b is None else dist_b
    hists_a = [_histogram_from_row(row) for row in dist_a]
    hists_b = [_histogram_from_row(row) for row in dist_b]
    table = np.array([[unary_cost(ha, hb) for hb in hists_b] for ha in hists_a])
    if params.use_cluster_ids:
        ids_a = np.array([node.centroid_id for node in graph_a.nodes])
        ids_b = np.array([node.centroid_id for node in graph_b.nodes])
        table = table + params.cluster_id_weight * (ids_a[:, None] != ids_b[None, :])
    return table.reshape(graph_a.n_nodes, graph_b.n_nodes)


def pairwise_cost(
    graph_a: ShapeGraph,
    graph_b: ShapeGraph,
    i: int,
    j: int,
    k: int,
    l: int,
    unary: np.ndarray,
    sigma: float = 0.5,
) -> float:
    """Second-order affinity between candidate matches (i, j) and (k, l).

    Compares the hop distance i-k in A with j-l in B and the two unary costs.
    Exactly one of the two distances being unreachable gives 0.
    """
    if i == k and j == l:
        raise GraphMatchingError("pairwise_cost needs two distinct candidate matches")
    try:
        d_a = float(nx.shortest_path_length(graph_a.nx_graph, i, k))
    except nx.NetworkXNoPath:
        d_a = np.inf
    try:
        d_b = float(nx.shortest_path_length(graph_b.nx_graph, j, l))
    except nx.NetworkXNoPath:
        d_b = np.inf
    if np.isinf(d_a) != np.isinf(d_b):
        return 0.0
    d_g = 0.0 if np.isinf(d_a) else abs(d_a - d_b)
    d_u = abs(unary[i, j] - unary[k, l])
    return float(np.exp(-(d_g + d_u) / sigma))


# ---------------------------------------------------------------------------
# Affinity matrix
# ---------------------------------------------------------------------------

def assemble_affinity(
    graph_a: ShapeGraph,
    graph_b: ShapeGraph,
    params: Optional[MatchingParams] = None,
) -> AffinityMatrix:
    """Dense (n_a*n_b) square affinity with unary terms on the diagonal.

    Raises:
        GraphMatchingError: If a graph is empty or exceeds `params.max_nodes`
    """
    params = params or MatchingParams()
    n, m = graph_a.n_nodes, graph_b.n_nodes
    if n == 0 or m == 0:
        raise GraphMatchingError("Cannot match an empty shape graph")
    if max(n, m) > params.max_nodes:
        raise GraphMatchingError(
            f"Shape graphs with {n} and {m} nodes exceed the limit of {params.max_nodes}"
        )

    dist_a, dist_b = distance_matrix(graph_a), distance_matrix(graph_b)
    cost = unary_table(graph_a, graph_b, params, dist_a, dist_b)
    unary = np.exp(-cost / params.sigma)

    reach_a, reach_b = np.isfinite(dist_a), np.isfinite(dist_b)
    hops_a = np.where(reach_a, dist_a, 0.0)
    hops_b = np.where(reach_b, dist_b, 0.0)

    # axes (i, j, k, l): candidate (i, j) against candidate (k, l)
    pair = np.abs(hops_a[:, None, :, None] - hops_b[None, :, None, :])
    pair += np.abs(cost[:, :, None, None] - cost[None, None, :, :])
    pair *= -1.0 / params.sigma
    np.exp(pair, out=pair)
    pair[reach_a[:, None, :, None] != reach_b[None, :, None, :]] = 0.0

    size = n * m
    matrix = pair.reshape(size, size)
    np.fill_diagonal(matrix, 0.0)

    active = unary.ravel() >= params.prune_threshold
    matrix[~active, :] = 0.0
    matrix[:, ~active] = 0.0

    nnz = int((matrix > params.nnz_floor).sum())
    if params.second_order_scale is SecondOrderScale.NNZ and nnz > 0:
        scale = params.second_order_multiplier / nnz
    else:
        scale = params.second_order_multiplier
    matrix *= scale
    matrix[np.diag_indices(size)] = unary.ravel()

    logger.debug(
        f"Affinity {size}x{size}: nnz={nnz}, scale={scale:.3e}, pruned={int((~active).sum())}"
    )
    return AffinityMatrix(
        matrix=matrix, n_a=n, n_b=m, nnz=nnz, second_order_scale=float(scale), active=active
    )


# ---------------------------------------------------------------------------
# Relaxed solution
# ---------------------------------------------------------------------------

def _dense_leading(matrix: np.ndarray) -> np.ndarray:
    size = matrix.shape[0]
    _, vec = la.eigh(matrix, subset_by_index=[size - 1, size - 1])
    return vec[:, 0]


def leading_eigenvector(
    affinity: AffinityMatrix, params: Optional[MatchingParams] = None
) -> PowerIterationResult:
    """Leading eigenvector by power iteration from the all-ones vector.

    Convergence is declared when ||Mv - lambda v|| / lambda drops below
    `params.power_tol`. On hitting the iteration cap the dense solver takes
    over. The result is nonnegative with unit max entry.
    """
    params = params or MatchingParams()
    matrix = affinity.matrix
    v = np.ones(matrix.shape[0]) / np.sqrt(matrix.shape[0])
    eigenvalue = 0.0
    iterations = 0
    converged = False
    while iterations < params.power_max_iter:
        iterations += 1
        w = matrix @ v
        eigenvalue = float(v @ w)
        if eigenvalue <= 0:
            break
        if np.linalg.norm(w - eigenvalue * v) / eigenvalue < params.power_tol:
            converged = True
            break
        v = w / np.linalg.norm(w)

    if not converged:
        logger.warning(
            f"Power iteration stopped after {iterations} iterations without converging; "
            f"using dense eigensolver"
        )
        v = _dense_leading(matrix)
        if v.sum() < 0:
            v = -v
        eigenvalue = float(v @ (matrix @ v))

    x = np.clip(v, 0.0, None)
    peak = x.max()
    if peak <= 0:
        raise GraphMatchingError("Leading eigenvector has no positive entry")
    return PowerIterationResult(
        vector=x / peak, eigenvalue=eigenvalue, iterations=iterations, fallback=not converged
    )


# ---------------------------------------------------------------------------
# Discretization
# ---------------------------------------------------------------------------

def _gap_candidates(likelihood: np.ndarray, gap_ratio: float, max_order: int) -> List[int]:
    """Candidates before the first drop below `gap_ratio` times the previous value."""
    order = np.argsort(-likelihood, kind="stable")
    vals = likelihood[order]
    if vals.size == 0 or vals[0] <= 0:
        return []
    drops = np.flatnonzero(vals[1:] < gap_ratio * vals[:-1])
    gap = int(drops[0]) + 1 if drops.size else len(vals)
    if gap > max_order:
        return []
    return [int(c) for c in order[:gap]]


def discretize(
    x: np.ndarray, n_a: int, n_b: int, params: Optional[MatchingParams] = None
) -> SymmetricMatching:
    """Gap-based discretization of the relaxed solution, kept only where both directions agree.

    `x[i * n_b + j]` is the likelihood of matching node i of A to node j of B.
    """
    params = params or MatchingParams()
    x = np.asarray(x, dtype=np.float64)
    if x.size != n_a * n_b:
        raise GraphMatchingError(f"Likelihood vector has {x.size} entries, expected {n_a * n_b}")
    table = x.reshape(n_a, n_b)

    from_a = {
        i: set(_gap_candidates(table[i], params.gap_ratio, params.max_symmetry_order))
        for i in range(n_a)
    }
    from_b = {
        j: set(_gap_candidates(table[:, j], params.gap_ratio, params.max_symmetry_order))
        for j in range(n_b)
    }

    matches_a: Dict[int, List[int]] = {i: [] for i in range(n_a)}
    matches_b: Dict[int, List[int]] = {j: [] for j in range(n_b)}
    likelihood = {}
    for i in range(n_a):
        for j in sorted(from_a[i]):
            if i in from_b[j]:
                matches_a[i].append(j)
                matches_b[j].append(i)
                likelihood[(i, j)] = float(table[i, j])
    return SymmetricMatching(n_a, n_b, matches_a, matches_b, likelihood)


def match_graphs(
    graph_a: ShapeGraph,
    graph_b: ShapeGraph,
    params: Optional[MatchingParams] = None,
) -> SymmetricMatching:
    """Symmetric region matching: affinity, leading eigenvector, gap discretization."""
    params = params or MatchingParams()
    affinity = assemble_affinity(graph_a, graph_b, params)
    solution = leading_eigenvector(affinity, params)
    matching = discretize(solution.vector, affinity.n_a, affinity.n_b, params)
    matching.stats = {
        "nnz": float(affinity.nnz),
        "nnz_floor": params.nnz_floor,
        "second_order_scale": affinity.second_order_scale,
        "pruned": float(affinity.n_pruned),
        "eigenvalue": solution.eigenvalue,
        "iterations": float(solution.iterations),
        "fallback": float(solution.fallback),
    }
    logger.info(
        f"Matched {affinity.n_a}x{affinity.n_b} nodes: {len(matching.pairs())} pairs, "
        f"{len(matching.unmatched_a)}/{len(matching.unmatched_b)} unmatched"
    )
    return matching
