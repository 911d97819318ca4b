import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import networkx as nx
import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph
from sklearn.cluster import KMeans

from optypes.match_types import (
    ClusterSide,
    DegreeComparison,
    DescriptorField,
    JointClustering,
    SegmentationConfig,
    Shape,
    ShapeGraph,
    ShapeGraphNode,
)
from util.utils import AsyncExecutor, run_async

logger = logging.getLogger(__name__)


class SegmentationError(Exception):
    """Base exception for joint segmentation errors"""
    pass


class ClusteringError(SegmentationError):
    """Raised when k-means cannot produce k non-empty clusters"""
    pass


@dataclass
class KSelection:
    """Outcome of the sweep over cluster counts."""
    k: int
    graph_a: ShapeGraph
    graph_b: ShapeGraph
    clustering: JointClustering
    distances: Dict[int, float] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Rank alignment
# ---------------------------------------------------------------------------

def _midpoint_cdf(values: np.ndarray, areas: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Distinct sorted values and their area-weighted midpoint CDF."""
    unique, inverse = np.unique(values, return_inverse=True)
    mass = np.bincount(inverse, weights=areas, minlength=len(unique))
    mass = mass / mass.sum()
    cdf = np.cumsum(mass) - 0.5 * mass
    return unique, cdf


def align_ranks(
    desc_a: DescriptorField,
    areas_a: np.ndarray,
    desc_b: DescriptorField,
    areas_b: np.ndarray,
) -> DescriptorField:
    """Map each descriptor dimension of shape B onto the value range of shape A.

    For every dimension, h_B(y) = Q_A(F_B(g_B(y))) with F_B the area-weighted
    midpoint CDF of B and Q_A the linearly interpolated quantile of A.
    """
    if desc_a.dimension != desc_b.dimension:
        raise SegmentationError(
            f"Descriptor dimensions differ ({desc_a.dimension} vs {desc_b.dimension})"
        )
    aligned = np.empty_like(desc_b.values)
    for i in range(desc_b.dimension):
        knots_a, cdf_a = _midpoint_cdf(desc_a.values[:, i], areas_a)
        knots_b, cdf_b = _midpoint_cdf(desc_b.values[:, i], areas_b)
        positions = np.searchsorted(knots_b, desc_b.values[:, i])
        aligned[:, i] = np.interp(cdf_b[positions], cdf_a, knots_a)
    return DescriptorField(values=aligned, times=desc_b.times.copy())


# ---------------------------------------------------------------------------
# Joint clustering
# ---------------------------------------------------------------------------

def _nearest_two(distances: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    order = np.argsort(distances, axis=1, kind="stable")
    nearest = order[:, 0]
    second = order[:, 1] if distances.shape[1] > 1 else np.full(len(order), -1)
    return nearest, second


def joint_kmeans(
    desc_a: DescriptorField,
    desc_b: DescriptorField,
    k: int,
    seed: int,
    config: Optional[SegmentationConfig] = None,
) -> JointClustering:
    """k-means on the merged descriptor point set of both shapes.

    Raises:
        ClusteringError: If every retry leaves an empty cluster
    """
    config = config or SegmentationConfig()
    merged = np.vstack([desc_a.values, desc_b.values])
    if k < 1 or k > len(merged):
        raise ClusteringError(f"Cannot form {k} clusters from {len(merged)} points")

    rng = np.random.default_rng(seed)
    random_state = seed
    for attempt in range(config.max_retries + 1):
        km = KMeans(
            n_clusters=k,
            init="k-means++",
            n_init=config.n_init,
            max_iter=config.max_iter,
            tol=config.tol,
            random_state=random_state,
            algorithm="lloyd",
        ).fit(merged)
        counts = np.bincount(km.labels_, minlength=k)
        if (counts > 0).all():
            break
        logger.warning(
            f"k-means left {int((counts == 0).sum())} empty clusters (k={k}, attempt {attempt}); "
            f"restarting"
        )
        random_state = int(rng.integers(2 ** 31 - 1))
    else:
        raise ClusteringError(f"k-means produced empty clusters after {config.max_retries} retries")

    nearest, second = _nearest_two(km.transform(merged))
    n_a = len(desc_a.values)
    return JointClustering(
        centroids=km.cluster_centers_,
        side_a=ClusterSide(nearest=nearest[:n_a], second=second[:n_a]),
        side_b=ClusterSide(nearest=nearest[n_a:], second=second[n_a:]),
        inertia=float(km.inertia_),
    )


# ---------------------------------------------------------------------------
# Shape graph construction
# ---------------------------------------------------------------------------

def _masked_components(shape: Shape, mask: np.ndarray) -> np.ndarray:
    """Connected component id per vertex of the subgraph induced by `mask` (-1 outside)."""
    a, b = shape.edges[:, 0], shape.edges[:, 1]
    keep = mask[a] & mask[b]
    n = shape.n_vertices
    graph = sp.csr_matrix(
        (np.ones(int(keep.sum())), (a[keep], b[keep])), shape=(n, n)
    )
    _, comp = csgraph.connected_components(graph, directed=False)
    comp = comp.astype(np.int64)
    comp[~mask] = -1
    return comp


def _label_components(shape: Shape, labels: np.ndarray) -> np.ndarray:
    """Split every label class into its connected components."""
    a, b = shape.edges[:, 0], shape.edges[:, 1]
    same = labels[a] == labels[b]
    n = shape.n_vertices
    graph = sp.csr_matrix((np.ones(int(same.sum())), (a[same], b[same])), shape=(n, n))
    _, comp = csgraph.connected_components(graph, directed=False)
    return comp.astype(np.int64)


def _compact(region: np.ndarray) -> np.ndarray:
    """Relabel regions 0..r-1 in order of their lowest vertex index."""
    _, first = np.unique(region, return_index=True)
    order = np.argsort(first, kind="stable")
    remap = np.empty(region.max() + 1, dtype=np.int64)
    remap[np.unique(region)[order]] = np.arange(len(order))
    return remap[region]


def merge_tiny_regions(
    shape: Shape, region: np.ndarray, min_area: float
) -> np.ndarray:
    """Absorb regions below `min_area` into the neighbor sharing the most boundary edges."""
    if min_area <= 0:
        return region
    region = region.copy()
    a, b = shape.edges[:, 0], shape.edges[:, 1]
    merged_total = 0
    while True:
        region = _compact(region)
        n_regions = int(region.max()) + 1
        areas = np.bincount(region, weights=shape.vertex_area, minlength=n_regions)
        tiny = areas < min_area
        if not tiny.any():
            break
        cross = region[a] != region[b]
        ra, rb = region[a][cross], region[b][cross]
        boundary = sp.coo_matrix(
            (np.ones(2 * len(ra)), (np.concatenate([ra, rb]), np.concatenate([rb, ra]))),
            shape=(n_regions, n_regions),
        ).tocsr()
        boundary.sum_duplicates()

        targets: Dict[int, int] = {}
        for r in np.flatnonzero(tiny):
            row = boundary.getrow(r)
            if row.nnz == 0:
                continue
            # longest shared boundary, ties toward the lower region id
            best = row.indices[np.lexsort((row.indices, -row.data))[0]]
            targets[int(r)] = int(best)
        if not targets:
            break

        into_large = {r: t for r, t in targets.items() if not tiny[t]}
        if not into_large:
            smallest = min(targets, key=lambda r: (areas[r], r))
            into_large = {smallest: targets[smallest]}
        remap = np.arange(n_regions)
        for r, t in into_large.items():
            remap[r] = t
        region = remap[region]
        merged_total += len(into_large)

    if merged_total:
        logger.debug(f"Merged {merged_total} tiny regions (< {min_area:.4g} area)")
    return _compact(region)


def build_shape_graph(
    shape: Shape, side: ClusterSide, min_region_area: float = 0.0025
) -> ShapeGraph:
    """Mapper-style shape graph from nearest / second-nearest centroid labels.

    Nodes are connected components of each nearest-centroid class; each node's
    expanded set is the connected part of {nearest = c or second = c} that
    contains it; nodes are adjacent when their expanded sets intersect.
    """
    if len(side.nearest) != shape.n_vertices:
        raise SegmentationError("Cluster labels do not cover the shape's vertices")

    region = _label_components(shape, side.nearest)
    region = merge_tiny_regions(shape, _compact(region), min_region_area)
    n_nodes = int(region.max()) + 1

    _, first_vertex = np.unique(region, return_index=True)
    # merged regions take the centroid covering most of their area
    votes = sp.csr_matrix(
        (shape.vertex_area, (region, side.nearest)),
        shape=(n_nodes, int(side.nearest.max()) + 1),
    ).toarray()
    node_centroid = votes.argmax(axis=1)

    expanded: List[np.ndarray] = [np.empty(0, dtype=np.int64)] * n_nodes
    for c in np.unique(node_centroid):
        allowed = (side.nearest == c) | (side.second == c) | (node_centroid[region] == c)
        comp = _masked_components(shape, allowed)
        for node in np.flatnonzero(node_centroid == c):
            anchor = comp[first_vertex[node]]
            expanded[node] = np.flatnonzero(comp == anchor)

    incidence = sp.csr_matrix(
        (
            np.ones(sum(len(e) for e in expanded)),
            (
                np.concatenate([np.full(len(e), i) for i, e in enumerate(expanded)]),
                np.concatenate(expanded),
            ),
        ),
        shape=(n_nodes, shape.n_vertices),
    )
    overlap = (incidence @ incidence.T).tocoo()
    edges = sorted(
        {(int(i), int(j)) for i, j in zip(overlap.row, overlap.col) if i < j}
    )

    nodes = [
        ShapeGraphNode(
            centroid_id=int(node_centroid[i]),
            vertex_set=np.flatnonzero(region == i),
            expanded_set=expanded[i],
        )
        for i in range(n_nodes)
    ]
    return ShapeGraph(nodes=nodes, edges=edges, vertex_to_node=region)


# ---------------------------------------------------------------------------
# Graph similarity and k selection
# ---------------------------------------------------------------------------

def degree_histogram_distance(
    graph_a: ShapeGraph,
    graph_b: ShapeGraph,
    mode: DegreeComparison = DegreeComparison.HISTOGRAM,
) -> float:
    """L1 distance between degree histograms (or sorted degree lists) plus node-count gap."""
    if mode is DegreeComparison.HISTOGRAM:
        ha = nx.degree_histogram(graph_a.nx_graph)
        hb = nx.degree_histogram(graph_b.nx_graph)
    else:
        ha = sorted(graph_a.degrees(), reverse=True)
        hb = sorted(graph_b.degrees(), reverse=True)
    size = max(len(ha), len(hb))
    va = np.pad(np.asarray(ha, dtype=float), (0, size - len(ha)))
    vb = np.pad(np.asarray(hb, dtype=float), (0, size - len(hb)))
    return float(np.abs(va - vb).sum() + abs(graph_a.n_nodes - graph_b.n_nodes))


def segment_pair(
    shape_a: Shape,
    shape_b: Shape,
    desc_a: DescriptorField,
    aligned_b: DescriptorField,
    k: int,
    config: SegmentationConfig,
) -> KSelection:
    clustering = joint_kmeans(desc_a, aligned_b, k, config.seed, config)
    graph_a = build_shape_graph(shape_a, clustering.side_a, config.min_region_area)
    graph_b = build_shape_graph(shape_b, clustering.side_b, config.min_region_area)
    distance = degree_histogram_distance(graph_a, graph_b, config.degree_mode)
    logger.info(
        f"k={k}: {graph_a.n_nodes} vs {graph_b.n_nodes} nodes, degree distance {distance:g}"
    )
    return KSelection(k, graph_a, graph_b, clustering, {k: distance})


def select_k(
    shape_a: Shape,
    shape_b: Shape,
    desc_a: DescriptorField,
    aligned_b: DescriptorField,
    config: Optional[SegmentationConfig] = None,
    workers: int = 1,
) -> KSelection:
    """Run the joint segmentation for every k and keep the most similar graph pair.

    Ties go to the smaller k.
    """
    config = config or SegmentationConfig()
    k_values = config.k_range()
    executor = AsyncExecutor(max_concurrent_tasks=workers)
    try:
        results: List[KSelection] = run_async(
            executor.execute(
                tasks=k_values,
                task_func=lambda k: segment_pair(shape_a, shape_b, desc_a, aligned_b, k, config),
            )
        )
    except ClusteringError:
        raise
    except Exception as e:
        logger.error(f"Segmentation failed: {e}")
        raise SegmentationError(f"Segmentation failed: {e}") from e

    distances = {r.k: r.distances[r.k] for r in results}
    best = min(results, key=lambda r: (r.distances[r.k], r.k))
    best.distances = distances
    logger.info(f"Selected k={best.k} (degree distance {distances[best.k]:g})")
    return best
