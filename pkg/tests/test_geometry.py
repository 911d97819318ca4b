import heapq

import numpy as np
import pytest

from lib.geometry import (
    GeometryError,
    face_areas,
    geodesic_distances,
    load_ground_truth,
    load_shape,
    make_mesh,
    make_point_cloud,
    sample_point_cloud,
    vertex_areas,
)
from lib.mesh_io import ShapeFormatError, ShapeIOError, ShapeValidationError, write_index_file
from optypes.match_types import Shape, ShapeKind

TETRA_OFF = """OFF
4 4 0
0 0 0
1 0 0
0 1 0
0 0 1
3 0 2 1
3 0 1 3
3 0 3 2
3 1 2 3
"""


def dijkstra_oracle(shape: Shape, source: int) -> np.ndarray:
    neighbors = {i: [] for i in range(shape.n_vertices)}
    for (a, b), w in zip(shape.edges, shape.edge_lengths):
        neighbors[a].append((b, w))
        neighbors[b].append((a, w))
    dist = np.full(shape.n_vertices, np.inf)
    dist[source] = 0.0
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v, w in neighbors[u]:
            if d + w < dist[v]:
                dist[v] = d + w
                heapq.heappush(heap, (d + w, v))
    return dist


def test_mesh_is_normalized_to_unit_area(figure):
    assert face_areas(figure.vertices, figure.faces).sum() == pytest.approx(1.0, abs=1e-9)
    assert figure.vertex_area.sum() == pytest.approx(1.0, abs=1e-9)
    assert (figure.vertex_area > 0).all()


def test_degenerate_triangles_are_dropped():
    vertices = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    faces = np.array([[0, 1, 2], [1, 3, 2], [0, 1, 1]])
    shape = make_mesh(vertices, faces)
    assert len(shape.faces) == 2


def test_unreferenced_vertex_is_rejected():
    vertices = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], dtype=float)
    with pytest.raises(ShapeValidationError):
        make_mesh(vertices, np.array([[0, 1, 2]]))


def test_out_of_range_face_index_is_rejected():
    vertices = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    with pytest.raises(ShapeValidationError):
        make_mesh(vertices, np.array([[0, 1, 3]]))


def test_knn_graph_is_symmetric_with_positive_degree():
    points = np.random.default_rng(1).normal(size=(200, 3))
    cloud = make_point_cloud(points, k=6)
    assert cloud.kind is ShapeKind.POINT_CLOUD
    assert (cloud.edges[:, 0] < cloud.edges[:, 1]).all()
    assert len(np.unique(cloud.edges, axis=0)) == len(cloud.edges)
    assert (cloud.degree >= 6).all()
    assert cloud.adjacency.nnz == 2 * len(cloud.edges)
    assert cloud.vertex_area.sum() == pytest.approx(1.0)
    assert cloud.bounding_box_diagonal == pytest.approx(1.0)


def test_point_cloud_needs_more_than_k_points():
    with pytest.raises(ShapeValidationError):
        make_point_cloud(np.zeros((5, 3)), k=6)


def test_geodesics_match_brute_force_dijkstra(figure):
    sources = [0, 57]
    got = geodesic_distances(figure, sources)
    expected = np.minimum(dijkstra_oracle(figure, 0), dijkstra_oracle(figure, 57))
    np.testing.assert_allclose(got, expected, atol=1e-12)
    assert got[sources].max() == 0.0


def test_geodesics_are_infinite_across_components():
    vertices = np.array(
        [[0, 0, 0], [1, 0, 0], [0, 1, 0], [10, 0, 0], [11, 0, 0], [10, 1, 0]], dtype=float
    )
    shape = make_mesh(vertices, np.array([[0, 1, 2], [3, 4, 5]]))
    dist = geodesic_distances(shape, [0])
    assert np.isfinite(dist[:3]).all()
    assert np.isinf(dist[3:]).all()


def test_geodesics_need_a_valid_source(figure):
    with pytest.raises(GeometryError):
        geodesic_distances(figure, [])
    with pytest.raises(GeometryError):
        geodesic_distances(figure, [figure.n_vertices])


def test_load_off_mesh(tmp_path):
    path = tmp_path / "tetra.off"
    path.write_text(TETRA_OFF)
    shape = load_shape(path)
    assert shape.kind is ShapeKind.MESH
    assert shape.n_vertices == 4
    assert len(shape.faces) == 4
    assert len(shape.edges) == 6


def test_load_xyz_point_cloud(tmp_path):
    points = np.random.default_rng(2).uniform(size=(50, 3)) * 7.0
    path = tmp_path / "cloud.xyz"
    np.savetxt(path, points)
    shape = load_shape(path)
    assert shape.kind is ShapeKind.POINT_CLOUD
    assert shape.n_vertices == 50
    assert shape.bounding_box_diagonal == pytest.approx(1.0)


def test_load_errors(tmp_path):
    with pytest.raises(ShapeIOError):
        load_shape(tmp_path / "missing.off")
    bad = tmp_path / "shape.obj"
    bad.write_text("v 0 0 0\n")
    with pytest.raises(ShapeFormatError):
        load_shape(bad)


def test_ground_truth_length_is_checked(tmp_path):
    path = tmp_path / "gt.txt"
    write_index_file(path, np.array([0, 1, 2]))
    gt = load_ground_truth(path, 3, 3)
    np.testing.assert_array_equal(gt.target_index, [0, 1, 2])
    with pytest.raises(ShapeValidationError):
        load_ground_truth(path, 4, 3)
    with pytest.raises(ShapeValidationError):
        load_ground_truth(path, 3, 2)


def test_sampling_is_deterministic_and_on_surface(figure):
    cloud, nearest = sample_point_cloud(figure, 300, 0.0, seed=5)
    again, nearest_again = sample_point_cloud(figure, 300, 0.0, seed=5)
    assert cloud.n_vertices == 300
    np.testing.assert_array_equal(cloud.vertices, again.vertices)
    np.testing.assert_array_equal(nearest, nearest_again)
    # the figure is flat, noise-free samples stay in its plane
    assert np.abs(cloud.vertices[:, 2]).max() < 1e-12
    assert nearest.min() >= 0 and nearest.max() < figure.n_vertices
    assert cloud.scale_factor == figure.scale_factor


def test_sampling_noise_is_bounded_by_shape_width(figure):
    noise = 0.02
    cloud, _ = sample_point_cloud(figure, 300, noise, seed=5)
    assert np.abs(cloud.vertices[:, 2]).max() <= noise * figure.bounding_box_diagonal
    assert np.abs(cloud.vertices[:, 2]).max() > 0


def test_sampling_rejects_bad_parameters(figure):
    with pytest.raises(GeometryError):
        sample_point_cloud(figure, 100, 0.6, seed=0)
    with pytest.raises(GeometryError):
        sample_point_cloud(figure, 3, 0.0, seed=0)
    cloud, _ = sample_point_cloud(figure, 100, 0.0, seed=0)
    with pytest.raises(GeometryError):
        sample_point_cloud(cloud, 50, 0.0, seed=0)


def test_regular_tetrahedron_vertices_share_the_area_equally():
    vertices = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    faces = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    shape = make_mesh(vertices, faces)
    np.testing.assert_allclose(shape.vertex_area, 0.25, atol=1e-12)
    np.testing.assert_allclose(vertex_areas(shape), 0.25, atol=1e-12)


def test_equilateral_triangle_vertices_get_a_third_each():
    vertices = np.array([[0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0]])
    shape = make_mesh(vertices, np.array([[0, 1, 2]]))
    np.testing.assert_allclose(shape.vertex_area, 1.0 / 3.0, atol=1e-12)


def test_samples_of_one_triangle_average_to_its_centroid():
    vertices = np.array([[0, 0, 0], [3, 0, 0], [0, 1, 0]], dtype=float)
    triangle = make_mesh(vertices, np.array([[0, 1, 2]]))
    cloud, nearest = sample_point_cloud(triangle, 100_000, 0.0, seed=11)
    # standard error of each mean coordinate is below 2e-3
    np.testing.assert_allclose(
        cloud.vertices.mean(axis=0), triangle.vertices.mean(axis=0), atol=1e-2
    )
    assert set(np.unique(nearest)) == {0, 1, 2}
