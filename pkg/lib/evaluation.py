import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from lib.symmetry import match_groups
from optypes.match_types import (
    CorrespondenceReport,
    GroundTruthMap,
    IndicatorConstraints,
    MatchMode,
    OneToOneMatching,
    SymmetricMatching,
)

logger = logging.getLogger(__name__)

MatchSets = Mapping[int, List[int]]


class EvaluationError(Exception):
    """Raised when labels, matchings and ground truth do not fit together"""
    pass


def match_sets(matching: Union[SymmetricMatching, OneToOneMatching, MatchSets]) -> MatchSets:
    if isinstance(matching, SymmetricMatching):
        return matching.matches_a
    if isinstance(matching, OneToOneMatching):
        return matching.as_sets()
    return matching


def region_accuracy(
    labels_a: np.ndarray,
    labels_b: np.ndarray,
    matching: Union[SymmetricMatching, OneToOneMatching, MatchSets],
    gt: GroundTruthMap,
    areas_a: np.ndarray,
    exclude_unmatched: bool = False,
    mask: Optional[np.ndarray] = None,
) -> float:
    """Area-weighted fraction of A-vertices whose ground-truth image lies in a matched region.

    Vertices outside `mask` are ignored. With `exclude_unmatched`, vertices of
    unmatched regions are ignored too instead of counting as wrong.
    """
    labels_a = np.asarray(labels_a, dtype=np.int64)
    labels_b = np.asarray(labels_b, dtype=np.int64)
    if len(labels_a) != len(gt.target_index) or len(labels_a) != len(areas_a):
        raise EvaluationError(
            f"Labels ({len(labels_a)}), ground truth ({len(gt.target_index)}) and areas "
            f"({len(areas_a)}) disagree on the vertex count of shape A"
        )
    if len(labels_b) != gt.n_target:
        raise EvaluationError(
            f"Ground truth targets {gt.n_target} vertices, shape B has {len(labels_b)} labels"
        )

    sets = match_sets(matching)
    allowed = np.zeros((labels_a.max() + 1, labels_b.max() + 1), dtype=bool)
    for a, bs in sets.items():
        bs = [b for b in bs if b < allowed.shape[1]]
        if a < allowed.shape[0] and bs:
            allowed[a, bs] = True

    correct = allowed[labels_a, labels_b[gt.target_index]]
    weights = np.asarray(areas_a, dtype=np.float64).copy()
    if mask is not None:
        weights = weights * mask
    if exclude_unmatched:
        weights = weights * allowed.any(axis=1)[labels_a]
    total = weights.sum()
    if total <= 0:
        logger.warning("No vertex area left to evaluate; accuracy is 0")
        return 0.0
    return float(weights[correct].sum() / total)


# ---------------------------------------------------------------------------
# Ground truth for sampled clouds
# ---------------------------------------------------------------------------

def first_sample_of_vertex(nearest_vertex: np.ndarray, n_vertices: int) -> np.ndarray:
    """For each mesh vertex, the first sample whose nearest vertex it is (-1 if none)."""
    first = np.full(n_vertices, -1, dtype=np.int64)
    vertices, index = np.unique(nearest_vertex, return_index=True)
    first[vertices] = index
    return first


def _through(vertices: np.ndarray, vertex_map: Optional[GroundTruthMap], n_vertices: int) -> np.ndarray:
    if vertex_map is None:
        return vertices
    if vertex_map.n_target != n_vertices:
        raise EvaluationError(
            f"Vertex map targets {vertex_map.n_target} vertices, sampled mesh has {n_vertices}"
        )
    return vertex_map.target_index[vertices]


def mesh_to_cloud_ground_truth(
    nearest_vertex: np.ndarray,
    n_vertices: int,
    vertex_map: Optional[GroundTruthMap] = None,
) -> Tuple[GroundTruthMap, np.ndarray]:
    """Mesh vertex -> sample map; vertices without a sample are masked out.

    Without `vertex_map` the cloud was sampled from the mesh itself. With it,
    the cloud comes from a second mesh of `n_vertices` vertices and
    `vertex_map` sends each vertex of the first mesh onto that second mesh.
    """
    first = first_sample_of_vertex(nearest_vertex, n_vertices)
    if vertex_map is not None:
        first = first[_through(np.arange(len(vertex_map.target_index)), vertex_map, n_vertices)]
    mask = first >= 0
    return GroundTruthMap(np.where(mask, first, 0), len(nearest_vertex)), mask


def cloud_to_cloud_ground_truth(
    nearest_a: np.ndarray,
    nearest_b: np.ndarray,
    n_vertices: int,
    vertex_map: Optional[GroundTruthMap] = None,
) -> Tuple[GroundTruthMap, np.ndarray]:
    """Sample of cloud A -> sample of cloud B through their nearest mesh vertices.

    `n_vertices` counts the vertices of the mesh cloud B was sampled from;
    `vertex_map` links the mesh of cloud A to it when the two differ.
    """
    first_b = first_sample_of_vertex(nearest_b, n_vertices)
    target = first_b[_through(nearest_a, vertex_map, n_vertices)]
    mask = target >= 0
    return GroundTruthMap(np.where(mask, target, 0), len(nearest_b)), mask


# ---------------------------------------------------------------------------
# Indicator constraints
# ---------------------------------------------------------------------------

def _constraint_groups(
    report: CorrespondenceReport, mode: MatchMode
) -> List[Tuple[List[int], List[int]]]:
    if mode is MatchMode.ONE_TO_ONE:
        if report.one_to_one is None:
            raise EvaluationError("Report has no one-to-one matching")
        return [([p.a], [p.b]) for p in report.one_to_one.pairs]
    sym = SymmetricMatching.from_record(
        report.symmetric_matching, len(report.graph_a.nodes), len(report.graph_b.nodes)
    )
    return match_groups(sym)


def _indicators(labels: np.ndarray, groups: List[List[int]], n_nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    column = np.full(n_nodes, -1, dtype=np.int64)
    for c, nodes in enumerate(groups):
        column[nodes] = c
    indicators = np.zeros((len(labels), len(groups)))
    rows = np.flatnonzero(column[labels] >= 0)
    indicators[rows, column[labels[rows]]] = 1.0
    return indicators, column


def export_indicator_constraints(
    report: CorrespondenceReport, mode: MatchMode = MatchMode.SYMMETRIC
) -> IndicatorConstraints:
    """Characteristic vectors of matched regions, one column per constraint.

    On unit-area shapes the area-weighted sum of a column equals the area of
    its region. In symmetric mode each connected match group is one constraint.
    """
    groups = _constraint_groups(report, mode)
    if not groups:
        raise EvaluationError("Report has no matched regions to export")
    labels_a = np.asarray(report.labels_a, dtype=np.int64)
    labels_b = np.asarray(report.labels_b, dtype=np.int64)
    node_area_a = np.array([n.area for n in report.graph_a.nodes])
    node_area_b = np.array([n.area for n in report.graph_b.nodes])

    indicators_a, column_a = _indicators(labels_a, [g[0] for g in groups], len(node_area_a))
    indicators_b, column_b = _indicators(labels_b, [g[1] for g in groups], len(node_area_b))
    constraints = IndicatorConstraints(
        pairs=np.array([[g[0][0], g[1][0]] for g in groups], dtype=np.int64),
        indicators_a=indicators_a,
        indicators_b=indicators_b,
        areas_a=np.array([node_area_a[g[0]].sum() for g in groups]),
        areas_b=np.array([node_area_b[g[1]].sum() for g in groups]),
        node_column_a=column_a,
        node_column_b=column_b,
        mode=mode,
    )
    logger.info(f"Exported {constraints.n_constraints} {mode.value} region constraints")
    return constraints


def write_indicator_constraints(path: Union[str, Path], constraints: IndicatorConstraints) -> None:
    """Uncompressed .npz with one array per field; `mode` is stored as a string."""
    np.savez(
        path,
        pairs=constraints.pairs,
        indicators_a=constraints.indicators_a,
        indicators_b=constraints.indicators_b,
        areas_a=constraints.areas_a,
        areas_b=constraints.areas_b,
        node_column_a=constraints.node_column_a,
        node_column_b=constraints.node_column_b,
        mode=np.array(constraints.mode.value),
    )


def read_indicator_constraints(path: Union[str, Path]) -> IndicatorConstraints:
    try:
        with np.load(path, allow_pickle=False) as data:
            fields: Dict[str, np.ndarray] = {key: data[key] for key in data.files}
    except (OSError, ValueError) as e:
        logger.error(f"Failed to read constraints {path}: {e}")
        raise EvaluationError(f"Could not read constraints file {path}") from e
    mode = MatchMode(str(fields.pop("mode")))
    return IndicatorConstraints(mode=mode, **fields)
