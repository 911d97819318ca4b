import logging
from pathlib import Path
from typing import Iterable, Optional, Tuple, Union

import numpy as np
from scipy.sparse import csgraph
from sklearn.neighbors import NearestNeighbors

from lib.mesh_io import (
    ShapeValidationError,
    read_index_file,
    read_raw_shape,
)
from optypes.match_types import GroundTruthMap, FullProtocol, Shape, ShapeKind

logger = logging.getLogger(__name__)

DEGENERATE_FACE_FRACTION = 1e-12
MAX_NOISE_FRACTION = 0.5


class GeometryError(Exception):
    """Raised when a geometric operation receives invalid input"""
    pass


def face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    e1 = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    e2 = vertices[faces[:, 2]] - vertices[faces[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


def _unique_edges(pairs: np.ndarray) -> np.ndarray:
    pairs = np.sort(pairs, axis=1)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    return np.unique(pairs, axis=0)


def _mesh_edges(faces: np.ndarray) -> np.ndarray:
    pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    return _unique_edges(pairs)


def knn_edges(points: np.ndarray, k: int) -> np.ndarray:
    """Union of directed k-nearest-neighbor edges as undirected pairs."""
    n = len(points)
    neighbors = NearestNeighbors(n_neighbors=k + 1).fit(points)
    idx = neighbors.kneighbors(points, return_distance=False)
    not_self = idx != np.arange(n)[:, None]
    # duplicates may push the point itself out of its own neighbor list
    order = np.argsort(~not_self, axis=1, kind="stable")[:, :k]
    nbrs = np.take_along_axis(idx, order, axis=1)
    pairs = np.column_stack([np.repeat(np.arange(n), k), nbrs.ravel()])
    return _unique_edges(pairs)


def make_mesh(
    vertices: np.ndarray,
    faces: np.ndarray,
    source: Optional[str] = None,
    normalize: bool = True,
) -> Shape:
    """Validate a triangle mesh and rescale it to unit total area.

    Raises:
        ShapeValidationError: On out-of-range indices, no surviving
            triangles, or vertices unreferenced by any triangle
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    n = len(vertices)

    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise ShapeValidationError("Vertices must be an (n, 3) array")
    if faces.size and (faces.min() < 0 or faces.max() >= n):
        raise ShapeValidationError("Triangle references a vertex index out of range")

    areas = face_areas(vertices, faces) if len(faces) else np.zeros(0)
    total = float(areas.sum())
    keep = areas >= DEGENERATE_FACE_FRACTION * total if total > 0 else np.zeros(len(faces), bool)
    if (~keep).any():
        logger.info(f"Dropping {int((~keep).sum())} degenerate triangles")
    faces = faces[keep]
    if len(faces) == 0:
        raise ShapeValidationError("No valid triangles left after cleaning")

    referenced = np.zeros(n, dtype=bool)
    referenced[faces.ravel()] = True
    if not referenced.all():
        raise ShapeValidationError(
            f"{int((~referenced).sum())} vertices are not referenced by any triangle"
        )

    scale = 1.0
    if normalize:
        scale = 1.0 / np.sqrt(face_areas(vertices, faces).sum())
        vertices = vertices * scale

    shape = Shape(
        vertices=vertices,
        edges=_mesh_edges(faces),
        vertex_area=_mesh_vertex_areas(vertices, faces),
        kind=ShapeKind.MESH,
        faces=faces,
        scale_factor=float(scale),
        source=source,
    )
    logger.debug(f"Built mesh: {n} vertices, {len(faces)} triangles, scale {scale:.6g}")
    return shape


def make_point_cloud(
    points: np.ndarray,
    k: int = FullProtocol.KNN,
    source: Optional[str] = None,
    normalize: bool = True,
    scale_factor: float = 1.0,
) -> Shape:
    """Build a point cloud with a symmetrized kNN graph and uniform areas.

    With `normalize` the cloud is rescaled to a unit bounding-box diagonal;
    otherwise positions are kept and `scale_factor` is recorded as given.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ShapeValidationError("Points must be an (n, 3) array")
    if n < k + 1:
        raise ShapeValidationError(f"Point cloud has fewer than k+1 points ({n} < {k + 1})")

    if normalize:
        diagonal = float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))
        if diagonal <= 0:
            raise ShapeValidationError("Point cloud has a zero-size bounding box")
        scale_factor = 1.0 / diagonal
        points = points * scale_factor

    edges = knn_edges(points, k)
    return Shape(
        vertices=points,
        edges=edges,
        vertex_area=np.full(n, 1.0 / n),
        kind=ShapeKind.POINT_CLOUD,
        scale_factor=float(scale_factor),
        source=source,
    )


def _mesh_vertex_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    third = np.repeat(face_areas(vertices, faces) / 3.0, 3)
    areas = np.bincount(faces.ravel(), weights=third, minlength=len(vertices))
    return areas / areas.sum()


def vertex_areas(shape: Shape) -> np.ndarray:
    """Per-vertex area fractions summing to 1.

    Meshes get one third of the incident triangle areas; point clouds are
    uniform.
    """
    if shape.kind is ShapeKind.MESH:
        return _mesh_vertex_areas(shape.vertices, shape.faces)
    return np.full(shape.n_vertices, 1.0 / shape.n_vertices)


def geodesic_distances(shape: Shape, sources: Iterable[int]) -> np.ndarray:
    """Shortest-path distance to the nearest source over the connectivity graph.

    Unreachable vertices get `inf`.
    """
    sources = np.unique(np.asarray(list(sources), dtype=np.int64))
    if sources.size == 0:
        raise GeometryError("geodesic_distances needs at least one source")
    if sources.min() < 0 or sources.max() >= shape.n_vertices:
        raise GeometryError("Source vertex index out of range")
    return csgraph.dijkstra(
        shape.adjacency, directed=False, indices=sources, min_only=True
    )


def load_shape(
    path: Union[str, Path],
    kind_hint: Optional[ShapeKind] = None,
    k: int = FullProtocol.KNN,
) -> Shape:
    """Load and validate a shape file (OFF, ASCII PLY or XYZ).

    Raises:
        ShapeIOError: If the file is missing, unparsable or invalid
    """
    raw = read_raw_shape(path)
    kind = kind_hint or (ShapeKind.MESH if raw.is_mesh else ShapeKind.POINT_CLOUD)
    if kind is ShapeKind.MESH:
        if not raw.is_mesh:
            raise ShapeValidationError(f"{path} has no faces but a mesh was requested")
        shape = make_mesh(raw.vertices, raw.faces, source=str(path))
    else:
        shape = make_point_cloud(raw.vertices, k=k, source=str(path))
    logger.info(f"Loaded {kind.value} {path}: {shape.n_vertices} vertices")
    return shape


def load_ground_truth(path: Union[str, Path], n_source: int, n_target: int) -> GroundTruthMap:
    """Read a dense vertex-to-vertex map (one 0-based target index per line)."""
    index = read_index_file(path)
    if len(index) != n_source:
        raise ShapeValidationError(
            f"Ground truth has {len(index)} entries, source shape has {n_source} vertices"
        )
    if index.size and (index.min() < 0 or index.max() >= n_target):
        raise ShapeValidationError("Ground truth index out of range of the target shape")
    return GroundTruthMap(target_index=index, n_target=n_target)


def identity_ground_truth(n: int) -> GroundTruthMap:
    return GroundTruthMap(target_index=np.arange(n), n_target=n)


def sample_point_cloud(
    shape: Shape,
    n_points: int,
    noise_frac: float,
    seed: int,
    k: int = FullProtocol.KNN,
) -> Tuple[Shape, np.ndarray]:
    """Area-uniform surface sampling with uniform per-coordinate noise.

    Returns the cloud (in the mesh's normalized units) and the index of the
    mesh vertex nearest to each noise-free sample.
    """
    if shape.kind is not ShapeKind.MESH:
        raise GeometryError("sample_point_cloud needs a mesh")
    if n_points < k + 1:
        raise GeometryError(f"n_points must be at least {k + 1}")
    if noise_frac < 0 or noise_frac > MAX_NOISE_FRACTION:
        raise GeometryError(
            f"noise_frac must lie in [0, {MAX_NOISE_FRACTION}], got {noise_frac}"
        )

    rng = np.random.default_rng(seed)
    areas = face_areas(shape.vertices, shape.faces)
    chosen = rng.choice(len(areas), size=n_points, p=areas / areas.sum())
    r1, r2 = rng.random((2, n_points))
    s = np.sqrt(r1)
    bary = np.column_stack([1.0 - s, s * (1.0 - r2), s * r2])
    corners = shape.vertices[shape.faces[chosen]]
    clean = np.einsum("ij,ijk->ik", bary, corners)

    width = shape.bounding_box_diagonal
    amplitude = noise_frac * width
    noisy = clean + rng.uniform(-amplitude, amplitude, size=clean.shape)

    nearest = NearestNeighbors(n_neighbors=1).fit(shape.vertices)
    nearest_vertex = nearest.kneighbors(clean, return_distance=False)[:, 0]

    cloud = make_point_cloud(
        noisy,
        k=k,
        source=f"{shape.source}#sample(n={n_points},noise={noise_frac},seed={seed})",
        normalize=False,
        scale_factor=shape.scale_factor,
    )
    logger.debug(f"Sampled {n_points} points (noise {noise_frac}, seed {seed})")
    return cloud, nearest_vertex
