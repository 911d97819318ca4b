import logging
from dataclasses import replace
from typing import Callable, Dict, List, Tuple

import numpy as np
import trimesh
from sklearn.neighbors import NearestNeighbors

from lib.geometry import make_mesh
from lib.mesh_io import ShapeIOError
from optypes.match_types import GroundTruthMap, Shape, ShapeKind

logger = logging.getLogger(__name__)

BUILTIN_PREFIX = "builtin:"

# axis-aligned boxes (x0, x1, y0, y1), mirror-symmetric about x = 0
FIGURE_PARTS: Dict[str, Tuple[float, float, float, float]] = {
    "torso": (-2.0, 2.0, 0.0, 6.0),
    "head": (-1.0, 1.0, 6.0, 8.0),
    "left_arm": (-7.0, -2.0, 4.0, 5.0),
    "right_arm": (2.0, 7.0, 4.0, 5.0),
    "left_leg": (-2.0, -0.5, -6.0, 0.0),
    "right_leg": (0.5, 2.0, -6.0, 0.0),
}


def grid_mesh(
    nx: int, ny: int, x_range: Tuple[float, float] = (0.0, 1.0), y_range: Tuple[float, float] = (0.0, 1.0)
) -> Tuple[np.ndarray, np.ndarray]:
    """Flat (nx x ny)-cell grid in z = 0.

    Cell diagonals flip across the vertical center line so the triangulation
    is mirror-symmetric under x -> -x (for a symmetric x_range).
    """
    xs = np.linspace(*x_range, nx + 1)
    ys = np.linspace(*y_range, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])

    def vid(i: int, j: int) -> int:
        return i * (ny + 1) + j

    center = 0.5 * (x_range[0] + x_range[1])
    faces: List[List[int]] = []
    for i in range(nx):
        for j in range(ny):
            v00, v10, v01, v11 = vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1)
            if 0.5 * (xs[i] + xs[i + 1]) < center:
                faces += [[v00, v10, v11], [v00, v11, v01]]
            else:
                faces += [[v00, v10, v01], [v10, v11, v01]]
    return vertices, np.array(faces, dtype=np.int64)


def _inside_figure(cx: np.ndarray, cy: np.ndarray) -> np.ndarray:
    inside = np.zeros(cx.shape, dtype=bool)
    for x0, x1, y0, y1 in FIGURE_PARTS.values():
        inside |= (cx > x0) & (cx < x1) & (cy > y0) & (cy < y1)
    return inside


def figure_mesh(cells_per_unit: int = 2) -> Shape:
    """Flat human-like silhouette (head, torso, two arms, two legs), mirror-symmetric in x."""
    if cells_per_unit < 2 or cells_per_unit % 2:
        raise ValueError("cells_per_unit must be an even number >= 2")
    nx, ny = 14 * cells_per_unit, 14 * cells_per_unit
    vertices, faces = grid_mesh(nx, ny, (-7.0, 7.0), (-6.0, 8.0))
    centroids = vertices[faces].mean(axis=1)
    faces = faces[_inside_figure(centroids[:, 0], centroids[:, 1])]

    used = np.unique(faces)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    shape = make_mesh(vertices[used], remap[faces], source=f"{BUILTIN_PREFIX}figure{cells_per_unit}")
    logger.debug(f"Built figure mesh with {shape.n_vertices} vertices")
    return shape


def sphere_mesh(subdivisions: int = 4) -> Shape:
    sphere = trimesh.creation.icosphere(subdivisions=subdivisions)
    return make_mesh(sphere.vertices, sphere.faces, source=f"{BUILTIN_PREFIX}sphere{subdivisions}")


def path_shape(n: int) -> Shape:
    """n points on a line joined as a path graph, uniform areas."""
    vertices = np.column_stack([np.arange(n, dtype=float), np.zeros(n), np.zeros(n)])
    edges = np.column_stack([np.arange(n - 1), np.arange(1, n)])
    return Shape(
        vertices=vertices,
        edges=edges,
        vertex_area=np.full(n, 1.0 / n),
        kind=ShapeKind.POINT_CLOUD,
        source=f"{BUILTIN_PREFIX}path{n}",
    )


def mirror_vertex_map(shape: Shape) -> np.ndarray:
    """Index of the vertex closest to each vertex's reflection x -> -x."""
    mirrored = shape.vertices * np.array([-1.0, 1.0, 1.0])
    nearest = NearestNeighbors(n_neighbors=1).fit(shape.vertices)
    return nearest.kneighbors(mirrored, return_distance=False)[:, 0]


def part_vertices(shape: Shape, part: str) -> np.ndarray:
    """Vertices of a figure mesh lying strictly inside one named part."""
    x0, x1, y0, y1 = np.array(FIGURE_PARTS[part]) * shape.scale_factor
    v = shape.vertices
    return np.flatnonzero((v[:, 0] > x0) & (v[:, 0] < x1) & (v[:, 1] > y0) & (v[:, 1] < y1))


BUILTIN_SHAPES: Dict[str, Callable[[], Shape]] = {
    "figure": lambda: figure_mesh(2),
    "figure-fine": lambda: figure_mesh(4),
    "sphere": lambda: sphere_mesh(4),
}

# builtins of one family cover the same surface in the same coordinates
BUILTIN_FAMILIES: Dict[str, str] = {"figure": "figure", "figure-fine": "figure", "sphere": "sphere"}


def load_builtin(name: str) -> Shape:
    key = name[len(BUILTIN_PREFIX):] if name.startswith(BUILTIN_PREFIX) else name
    if key not in BUILTIN_SHAPES:
        raise ShapeIOError(f"Unknown builtin shape '{key}' (have {sorted(BUILTIN_SHAPES)})")
    return replace(BUILTIN_SHAPES[key](), source=f"{BUILTIN_PREFIX}{key}")


def builtin_vertex_map(name_a: str, name_b: str, shape_a: Shape, shape_b: Shape) -> GroundTruthMap:
    """Nearest-vertex map between two builtins of the same family."""
    keys = [n[len(BUILTIN_PREFIX):] if n.startswith(BUILTIN_PREFIX) else n for n in (name_a, name_b)]
    families = [BUILTIN_FAMILIES.get(key) for key in keys]
    if None in families or families[0] != families[1]:
        raise ShapeIOError(f"No vertex map between {name_a} and {name_b}; give a ground-truth file")
    nearest = NearestNeighbors(n_neighbors=1).fit(shape_b.vertices)
    index = nearest.kneighbors(shape_a.vertices, return_distance=False)[:, 0]
    return GroundTruthMap(target_index=index, n_target=shape_b.n_vertices)
