from typing import List, Sequence, Tuple

import numpy as np
import pytest

from lib.geometry import make_mesh
from optypes.match_types import (
    PipelineConfig,
    SegmentationConfig,
    Shape,
    ShapeGraph,
    ShapeGraphNode,
)
from util.synthetic import figure_mesh, grid_mesh


def graph_from_edges(n: int, edges: Sequence[Tuple[int, int]]) -> ShapeGraph:
    """Shape graph whose node i owns vertex i only."""
    nodes = [
        ShapeGraphNode(centroid_id=0, vertex_set=np.array([i]), expanded_set=np.array([i]))
        for i in range(n)
    ]
    clean = sorted({(min(a, b), max(a, b)) for a, b in edges})
    return ShapeGraph(nodes=nodes, edges=clean, vertex_to_node=np.arange(n))


def path_edges(n: int) -> List[Tuple[int, int]]:
    return [(i, i + 1) for i in range(n - 1)]


def star_edges(leaves: int) -> List[Tuple[int, int]]:
    return [(0, i) for i in range(1, leaves + 1)]


# path 0-1-2-3-4-5 with a pendant 6 on node 2: no two nodes share a distance histogram
PENDANT_TREE = (7, path_edges(6) + [(2, 6)])


@pytest.fixture
def make_graph():
    return graph_from_edges


@pytest.fixture(scope="session")
def figure() -> Shape:
    return figure_mesh(2)


@pytest.fixture(scope="session")
def strip() -> Tuple[Shape, np.ndarray]:
    """Flat 20x2 strip over x in [-5, 5] split into five mirror-symmetric bands.

    Band labels: 0 = far left, 1 = left, 2 = center, 3 = right, 4 = far right.
    """
    vertices, faces = grid_mesh(20, 2, (-5.0, 5.0), (0.0, 1.0))
    x = vertices[:, 0]
    labels = np.full(len(x), 2)
    labels[(x < -1.25) & (x > -3.25)] = 1
    labels[x < -3.25] = 0
    labels[(x > 1.25) & (x < 3.25)] = 3
    labels[x > 3.25] = 4
    return make_mesh(vertices, faces), labels


@pytest.fixture
def fast_config() -> PipelineConfig:
    return PipelineConfig(segmentation=SegmentationConfig(k_min=5, k_max=6))
