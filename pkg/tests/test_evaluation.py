from typing import List, Optional, Tuple

import numpy as np
import pytest

from lib.evaluation import (
    EvaluationError,
    cloud_to_cloud_ground_truth,
    export_indicator_constraints,
    first_sample_of_vertex,
    mesh_to_cloud_ground_truth,
    read_indicator_constraints,
    region_accuracy,
    write_indicator_constraints,
)
from lib.geometry import identity_ground_truth
from optypes.match_types import (
    CorrespondenceReport,
    GraphRecord,
    GroundTruthMap,
    MatchingRecord,
    MatchMode,
    MatchPair,
    NodeRecord,
    OneToOneRecord,
    PipelineConfig,
    ResolvedPair,
)

LABELS = np.array([0, 0, 1, 1])
AREAS = np.full(4, 0.25)


def graph_record(labels: np.ndarray, areas: np.ndarray) -> GraphRecord:
    n = int(labels.max()) + 1
    node_area = np.bincount(labels, weights=areas, minlength=n)
    return GraphRecord(
        nodes=[
            NodeRecord(id=i, centroid_id=i, size=int((labels == i).sum()), area=float(node_area[i]))
            for i in range(n)
        ],
        edges=[[i, i + 1] for i in range(n - 1)],
    )


def make_report(
    labels_a: np.ndarray,
    labels_b: np.ndarray,
    pairs: List[Tuple[int, int]],
    one_to_one: Optional[List[Tuple[int, int]]] = None,
) -> CorrespondenceReport:
    area_a = np.full(len(labels_a), 1.0 / len(labels_a))
    area_b = np.full(len(labels_b), 1.0 / len(labels_b))
    graph_a, graph_b = graph_record(labels_a, area_a), graph_record(labels_b, area_b)
    matched_a = {a for a, _ in pairs}
    matched_b = {b for _, b in pairs}
    return CorrespondenceReport(
        mode="match",
        shape_a="a.off",
        shape_b="b.off",
        parameters=PipelineConfig(),
        chosen_k=5,
        labels_a=labels_a.tolist(),
        labels_b=labels_b.tolist(),
        graph_a=graph_a,
        graph_b=graph_b,
        symmetric_matching=MatchingRecord(
            pairs=[MatchPair(a=a, b=b, likelihood=1.0) for a, b in pairs],
            unmatched_a=[i for i in range(len(graph_a.nodes)) if i not in matched_a],
            unmatched_b=[j for j in range(len(graph_b.nodes)) if j not in matched_b],
        ),
        one_to_one=None if one_to_one is None else OneToOneRecord(
            pairs=[ResolvedPair(a=a, b=b) for a, b in one_to_one],
            unresolved_a=[],
            unresolved_b=[],
        ),
        segments_a=len(graph_a.nodes),
        segments_b=len(graph_b.nodes),
    )


# ---------------------------------------------------------------------------
# region_accuracy
# ---------------------------------------------------------------------------

def test_correct_matching_scores_one():
    acc = region_accuracy(LABELS, LABELS, {0: [0], 1: [1]}, identity_ground_truth(4), AREAS)
    assert acc == 1.0


def test_swapped_matching_scores_zero():
    acc = region_accuracy(LABELS, LABELS, {0: [1], 1: [0]}, identity_ground_truth(4), AREAS)
    assert acc == 0.0


def test_unmatched_regions_count_as_wrong_unless_excluded():
    matching = {0: [0], 1: []}
    gt = identity_ground_truth(4)
    assert region_accuracy(LABELS, LABELS, matching, gt, AREAS) == pytest.approx(0.5)
    assert region_accuracy(LABELS, LABELS, matching, gt, AREAS, exclude_unmatched=True) == 1.0


def test_symmetric_sets_accept_any_member():
    labels_b = np.array([0, 0, 1, 1])
    acc = region_accuracy(LABELS, labels_b, {0: [0, 1], 1: [1]}, identity_ground_truth(4), AREAS)
    assert acc == 1.0


def test_accuracy_is_invariant_to_region_names():
    gt = GroundTruthMap(target_index=np.array([1, 0, 3, 2]), n_target=4)
    labels_b = np.array([0, 0, 1, 1])
    renamed_b = 1 - labels_b
    direct = region_accuracy(LABELS, labels_b, {0: [0], 1: [0]}, gt, AREAS)
    renamed = region_accuracy(LABELS, renamed_b, {0: [1], 1: [1]}, gt, AREAS)
    assert direct == renamed == pytest.approx(0.5)


def test_accuracy_is_area_weighted():
    areas = np.array([0.4, 0.4, 0.1, 0.1])
    acc = region_accuracy(LABELS, LABELS, {0: [0], 1: [0]}, identity_ground_truth(4), areas)
    assert acc == pytest.approx(0.8)


def test_masked_vertices_are_ignored():
    mask = np.array([True, True, False, False])
    acc = region_accuracy(
        LABELS, LABELS, {0: [0], 1: [0]}, identity_ground_truth(4), AREAS, mask=mask
    )
    assert acc == 1.0


def test_empty_evaluation_scores_zero():
    acc = region_accuracy(
        LABELS, LABELS, {0: [0]}, identity_ground_truth(4), AREAS, mask=np.zeros(4, dtype=bool)
    )
    assert acc == 0.0


def test_vertex_counts_must_agree():
    with pytest.raises(EvaluationError):
        region_accuracy(LABELS, LABELS, {0: [0]}, identity_ground_truth(3), AREAS)
    with pytest.raises(EvaluationError):
        region_accuracy(LABELS, LABELS[:3], {0: [0]}, identity_ground_truth(4), AREAS)


# ---------------------------------------------------------------------------
# Ground truth for sampled clouds
# ---------------------------------------------------------------------------

def test_first_sample_of_each_vertex():
    first = first_sample_of_vertex(np.array([2, 0, 2, 1]), 4)
    np.testing.assert_array_equal(first, [1, 3, 0, -1])


def test_mesh_to_cloud_ground_truth_masks_unsampled_vertices():
    gt, mask = mesh_to_cloud_ground_truth(np.array([2, 0, 2, 1]), 4)
    np.testing.assert_array_equal(mask, [True, True, True, False])
    np.testing.assert_array_equal(gt.target_index[mask], [1, 3, 0])
    assert gt.n_target == 4


def test_cloud_to_cloud_ground_truth_goes_through_shared_vertices():
    gt, mask = cloud_to_cloud_ground_truth(np.array([0, 1, 3]), np.array([1, 0, 2]), 4)
    np.testing.assert_array_equal(mask, [True, True, False])
    np.testing.assert_array_equal(gt.target_index[mask], [1, 0])
    assert gt.n_target == 3


A_TO_B = GroundTruthMap(np.array([3, 0, 2]), 4)


def test_cloud_of_a_second_mesh_is_reached_through_the_vertex_map():
    gt, mask = mesh_to_cloud_ground_truth(np.array([2, 0, 2, 1]), 4, A_TO_B)
    np.testing.assert_array_equal(mask, [False, True, True])
    np.testing.assert_array_equal(gt.target_index[mask], [1, 0])
    assert gt.n_target == 4


def test_clouds_of_two_meshes_meet_through_the_vertex_map():
    gt, mask = cloud_to_cloud_ground_truth(np.array([0, 1, 2]), np.array([1, 0, 2]), 4, A_TO_B)
    np.testing.assert_array_equal(mask, [False, True, True])
    np.testing.assert_array_equal(gt.target_index[mask], [1, 2])
    assert gt.n_target == 3


def test_vertex_map_must_target_the_sampled_mesh():
    with pytest.raises(EvaluationError):
        mesh_to_cloud_ground_truth(np.array([0, 1]), 5, A_TO_B)
    with pytest.raises(EvaluationError):
        cloud_to_cloud_ground_truth(np.array([0, 1]), np.array([0, 1]), 5, A_TO_B)


# ---------------------------------------------------------------------------
# Indicator constraints
# ---------------------------------------------------------------------------

def test_whole_shape_region_gives_an_all_ones_indicator():
    labels = np.zeros(6, dtype=np.int64)
    constraints = export_indicator_constraints(make_report(labels, labels, [(0, 0)]))
    assert constraints.n_constraints == 1
    np.testing.assert_array_equal(constraints.indicators_a, np.ones((6, 1)))
    np.testing.assert_array_equal(constraints.indicators_b, np.ones((6, 1)))
    np.testing.assert_allclose(constraints.areas_a, [1.0])


def test_indicator_columns_integrate_to_region_area():
    labels_a = np.array([0, 0, 0, 1, 1, 2, 2, 2, 2, 3])
    labels_b = np.array([0, 1, 1, 1, 2, 2, 3, 3, 3, 3])
    report = make_report(labels_a, labels_b, [(0, 0), (1, 1), (2, 2), (2, 3), (3, 3)])
    constraints = export_indicator_constraints(report)
    # (0, 0), (1, 1) and the group {2, 3} x {2, 3}
    np.testing.assert_array_equal(constraints.pairs, [[0, 0], [1, 1], [2, 2]])
    np.testing.assert_array_equal(constraints.node_column_a, [0, 1, 2, 2])
    area_a = np.full(10, 0.1)
    np.testing.assert_allclose(area_a @ constraints.indicators_a, constraints.areas_a)
    np.testing.assert_allclose(constraints.areas_a, [0.3, 0.2, 0.5])
    np.testing.assert_allclose(constraints.areas_b, [0.1, 0.3, 0.6])


def test_one_to_one_constraints():
    labels = np.array([0, 0, 1, 1])
    report = make_report(labels, labels, [(0, 0), (0, 1), (1, 0), (1, 1)], one_to_one=[(0, 1), (1, 0)])
    symmetric = export_indicator_constraints(report, MatchMode.SYMMETRIC)
    assert symmetric.n_constraints == 1
    one = export_indicator_constraints(report, MatchMode.ONE_TO_ONE)
    np.testing.assert_array_equal(one.pairs, [[0, 1], [1, 0]])
    np.testing.assert_array_equal(one.indicators_a[:, 0], [1, 1, 0, 0])
    np.testing.assert_array_equal(one.indicators_b[:, 0], [0, 0, 1, 1])


def test_one_to_one_export_needs_a_resolved_matching():
    labels = np.array([0, 0, 1, 1])
    with pytest.raises(EvaluationError):
        export_indicator_constraints(make_report(labels, labels, [(0, 0)]), MatchMode.ONE_TO_ONE)


def test_nothing_matched_cannot_be_exported():
    labels = np.array([0, 0, 1, 1])
    with pytest.raises(EvaluationError):
        export_indicator_constraints(make_report(labels, labels, []))


def test_constraint_file_round_trip(tmp_path):
    labels_a = np.array([0, 0, 1, 1, 2])
    labels_b = np.array([0, 1, 1, 2, 2])
    constraints = export_indicator_constraints(make_report(labels_a, labels_b, [(0, 0), (2, 2)]))
    path = tmp_path / "constraints.npz"
    write_indicator_constraints(path, constraints)
    loaded = read_indicator_constraints(path)
    assert loaded.mode is MatchMode.SYMMETRIC
    for name in ("pairs", "indicators_a", "indicators_b", "areas_a", "areas_b", "node_column_a", "node_column_b"):
        np.testing.assert_array_equal(getattr(loaded, name), getattr(constraints, name))
    np.testing.assert_array_equal(loaded.node_column_a, [0, -1, 1])


def test_unreadable_constraint_file(tmp_path):
    with pytest.raises(EvaluationError):
        read_indicator_constraints(tmp_path / "missing.npz")
