from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Any, Dict, List, Optional, Tuple

import networkx as nx
import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, Field, field_validator, model_validator


class ShapeKind(Enum):
    MESH = "mesh"
    POINT_CLOUD = "point_cloud"


class DescriptorKind(Enum):
    HKS = "hks"
    WKS = "wks"  # reserved, never computed


class DegreeComparison(Enum):
    HISTOGRAM = "histogram"
    SORTED = "sorted"


class SecondOrderScale(Enum):
    NNZ = "nnz"
    NONE = "none"


class MatchMode(Enum):
    SYMMETRIC = "symmetric"
    ONE_TO_ONE = "one_to_one"


class SweepMode(Enum):
    MESH_TO_CLOUD = "mesh_to_cloud"
    CLOUD_TO_CLOUD = "cloud_to_cloud"


class SelfPairKind(Enum):
    SELF = "self"
    SYMMETRIC = "symmetric"
    FALLBACK = "fallback"


class FullProtocol:
    DENSITIES: Tuple[int, ...] = (6000, 3000, 1500, 500)
    NOISE_LEVELS: Tuple[float, ...] = (0.0, 0.01, 0.02)
    TRIALS: int = 4
    KNN: int = 6


class TestingProtocol:
    __test__ = False

    DENSITIES: Tuple[int, ...] = (1500, 500)
    NOISE_LEVELS: Tuple[float, ...] = (0.0, 0.02)
    TRIALS: int = 1
    KNN: int = 6


# ---------------------------------------------------------------------------
# In-memory numeric types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Shape:
    """Surface sample with connectivity and per-vertex area weights.

    `edges` always holds the undirected connectivity graph (a < b, unique).
    For meshes it is derived from `faces`; for point clouds it is the
    symmetrized kNN graph.
    """
    vertices: np.ndarray
    edges: np.ndarray
    vertex_area: np.ndarray
    kind: ShapeKind
    faces: Optional[np.ndarray] = None
    scale_factor: float = 1.0
    source: Optional[str] = None

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        diff = self.vertices[self.edges[:, 0]] - self.vertices[self.edges[:, 1]]
        return np.linalg.norm(diff, axis=1)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Symmetric sparse adjacency weighted by Euclidean edge length."""
        n = self.n_vertices
        # csgraph treats stored zeros as missing edges
        weights = np.maximum(self.edge_lengths, 1e-12)
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        data = np.concatenate([weights, weights])
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    @cached_property
    def degree(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n_vertices)

    @property
    def bounding_box_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))


@dataclass(frozen=True, eq=False)
class GroundTruthMap:
    target_index: np.ndarray
    n_target: int


@dataclass(frozen=True, eq=False)
class LaplacianPair:
    stiffness: sp.csr_matrix
    mass: sp.dia_matrix


@dataclass(frozen=True, eq=False)
class EigenBasis:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def size(self) -> int:
        return int(self.eigenvalues.shape[0])


@dataclass(frozen=True, eq=False)
class DescriptorField:
    values: np.ndarray
    times: np.ndarray

    @property
    def dimension(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True, eq=False)
class ClusterSide:
    """Nearest and second-nearest centroid per vertex of one shape (-1 = none)."""
    nearest: np.ndarray
    second: np.ndarray


@dataclass(frozen=True, eq=False)
class JointClustering:
    centroids: np.ndarray
    side_a: ClusterSide
    side_b: ClusterSide
    inertia: float

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])


@dataclass(eq=False)
class ShapeGraphNode:
    centroid_id: int
    vertex_set: np.ndarray
    expanded_set: np.ndarray


@dataclass(eq=False)
class ShapeGraph:
    nodes: List[ShapeGraphNode]
    edges: List[Tuple[int, int]]
    vertex_to_node: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @cached_property
    def nx_graph(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.n_nodes))
        graph.add_edges_from(self.edges)
        return graph

    def degrees(self) -> List[int]:
        return [d for _, d in sorted(self.nx_graph.degree())]

    def node_areas(self, vertex_area: np.ndarray) -> np.ndarray:
        return np.bincount(
            self.vertex_to_node, weights=vertex_area, minlength=self.n_nodes
        )

    def to_record(self, vertex_area: np.ndarray) -> "GraphRecord":
        areas = self.node_areas(vertex_area)
        return GraphRecord(
            nodes=[
                NodeRecord(
                    id=i,
                    centroid_id=node.centroid_id,
                    size=int(node.vertex_set.size),
                    area=float(areas[i]),
                )
                for i, node in enumerate(self.nodes)
            ],
            edges=[[a, b] for a, b in self.edges],
        )


@dataclass(frozen=True, eq=False)
class AffinityMatrix:
    """(n_a*n_b) square affinity; candidate (i, j) lives at row i*n_b + j."""
    matrix: np.ndarray
    n_a: int
    n_b: int
    nnz: int
    second_order_scale: float
    active: np.ndarray

    @property
    def n_pruned(self) -> int:
        return int((~self.active).sum())


@dataclass(eq=False)
class SymmetricMatching:
    n_a: int
    n_b: int
    matches_a: Dict[int, List[int]]
    matches_b: Dict[int, List[int]]
    likelihood: Dict[Tuple[int, int], float] = field(default_factory=dict)
    stats: Dict[str, float] = field(default_factory=dict)

    @property
    def unmatched_a(self) -> List[int]:
        return [a for a in range(self.n_a) if not self.matches_a.get(a)]

    @property
    def unmatched_b(self) -> List[int]:
        return [b for b in range(self.n_b) if not self.matches_b.get(b)]

    def pairs(self) -> List[Tuple[int, int]]:
        return [(a, b) for a in range(self.n_a) for b in self.matches_a.get(a, [])]

    def match_set(self, a: int) -> List[int]:
        return self.matches_a.get(a, [])

    def transpose(self) -> "SymmetricMatching":
        return SymmetricMatching(
            n_a=self.n_b,
            n_b=self.n_a,
            matches_a={b: list(v) for b, v in self.matches_b.items()},
            matches_b={a: list(v) for a, v in self.matches_a.items()},
            likelihood={(b, a): x for (a, b), x in self.likelihood.items()},
            stats=dict(self.stats),
        )

    def to_record(self, params: Optional["MatchingParams"] = None) -> "MatchingRecord":
        return MatchingRecord(
            pairs=[
                MatchPair(a=a, b=b, likelihood=float(self.likelihood.get((a, b), 0.0)))
                for a, b in self.pairs()
            ],
            unmatched_a=self.unmatched_a,
            unmatched_b=self.unmatched_b,
            params=params.model_dump(mode="json") if params else {},
            stats=dict(self.stats),
        )

    @classmethod
    def from_record(cls, record: "MatchingRecord", n_a: int, n_b: int) -> "SymmetricMatching":
        matches_a: Dict[int, List[int]] = {a: [] for a in range(n_a)}
        matches_b: Dict[int, List[int]] = {b: [] for b in range(n_b)}
        likelihood: Dict[Tuple[int, int], float] = {}
        for pair in record.pairs:
            matches_a[pair.a].append(pair.b)
            matches_b[pair.b].append(pair.a)
            likelihood[(pair.a, pair.b)] = pair.likelihood
        return cls(n_a, n_b, matches_a, matches_b, likelihood, dict(record.stats))


@dataclass(eq=False)
class OneToOneMatching:
    pairs: List[Tuple[int, int]]
    unresolved_a: List[int]
    unresolved_b: List[int]

    def as_sets(self) -> Dict[int, List[int]]:
        return {a: [b] for a, b in self.pairs}

    def to_record(self) -> "OneToOneRecord":
        return OneToOneRecord(
            pairs=[ResolvedPair(a=a, b=b) for a, b in self.pairs],
            unresolved_a=list(self.unresolved_a),
            unresolved_b=list(self.unresolved_b),
        )

    @classmethod
    def from_record(cls, record: "OneToOneRecord") -> "OneToOneMatching":
        return cls(
            pairs=[(p.a, p.b) for p in record.pairs],
            unresolved_a=list(record.unresolved_a),
            unresolved_b=list(record.unresolved_b),
        )


@dataclass(frozen=True, eq=False)
class IndicatorConstraints:
    """Region indicators, one column per constraint, for functional-map solvers.

    `pairs[c]` is the lowest (node_a, node_b) of constraint c and
    `node_column_a[i]` the constraint containing node i (-1 if none).
    """
    pairs: np.ndarray
    indicators_a: np.ndarray
    indicators_b: np.ndarray
    areas_a: np.ndarray
    areas_b: np.ndarray
    node_column_a: np.ndarray
    node_column_b: np.ndarray
    mode: MatchMode

    @property
    def n_constraints(self) -> int:
        return int(self.pairs.shape[0])


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

class DescriptorConfig(BaseModel):
    kind: DescriptorKind = DescriptorKind.HKS
    t_steps: int = 15
    t_min: float = 0.03
    t_max: float = 0.25
    max_eigenpairs: int = 150
    knn: int = 6

    @field_validator("t_steps", "max_eigenpairs", "knn")
    @classmethod
    def _positive_count(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @model_validator(mode="after")
    def _check_time_range(self) -> "DescriptorConfig":
        if self.t_min <= 0:
            raise ValueError("t_min must be positive")
        if self.t_steps > 1 and self.t_max <= self.t_min:
            raise ValueError("t_max must exceed t_min")
        return self

    def times(self) -> np.ndarray:
        if self.t_steps == 1:
            return np.array([self.t_min])
        return np.geomspace(self.t_min, self.t_max, self.t_steps)


TIME_PRESETS: Dict[str, Dict[str, float]] = {
    "default": {"t_steps": 15, "t_min": 0.03, "t_max": 0.25},
    "wide": {"t_steps": 10, "t_min": 0.03, "t_max": 0.3},
}


class SegmentationConfig(BaseModel):
    k_min: int = 5
    k_max: int = 10
    seed: int = 42
    n_init: int = 10
    max_iter: int = 100
    tol: float = 1e-7
    max_retries: int = 5
    min_region_area: float = 0.0025
    degree_mode: DegreeComparison = DegreeComparison.HISTOGRAM

    @model_validator(mode="after")
    def _check_k_range(self) -> "SegmentationConfig":
        if not 2 <= self.k_min <= self.k_max <= 20:
            raise ValueError("k range must satisfy 2 <= k_min <= k_max <= 20")
        if not 0 <= self.min_region_area < 1:
            raise ValueError("min_region_area must lie in [0, 1)")
        return self

    def k_range(self) -> List[int]:
        return list(range(self.k_min, self.k_max + 1))


class MatchingParams(BaseModel):
    sigma: float = 0.5
    max_symmetry_order: int = 8
    gap_ratio: float = 0.9
    second_order_scale: SecondOrderScale = SecondOrderScale.NNZ
    second_order_multiplier: float = 1.0
    nnz_floor: float = 1e-12
    prune_threshold: float = 1e-4
    max_nodes: int = 60
    power_tol: float = 1e-10
    power_max_iter: int = 10_000
    use_cluster_ids: bool = False
    cluster_id_weight: float = 1.0

    @field_validator("sigma", "second_order_multiplier")
    @classmethod
    def _strictly_positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("must be positive")
        return v

    @field_validator("max_symmetry_order", "max_nodes", "power_max_iter")
    @classmethod
    def _at_least_one(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @field_validator("gap_ratio")
    @classmethod
    def _open_unit(cls, v: float) -> float:
        if not 0 < v < 1:
            raise ValueError("gap_ratio must lie in (0, 1)")
        return v


class EvaluationConfig(BaseModel):
    exclude_unmatched: bool = False


class SweepConfig(BaseModel):
    densities: List[int] = Field(default_factory=lambda: list(FullProtocol.DENSITIES))
    noise_levels: List[float] = Field(default_factory=lambda: list(FullProtocol.NOISE_LEVELS))
    trials: int = FullProtocol.TRIALS
    modes: List[SweepMode] = Field(
        default_factory=lambda: [SweepMode.MESH_TO_CLOUD, SweepMode.CLOUD_TO_CLOUD]
    )
    base_seed: int = 0

    @field_validator("densities")
    @classmethod
    def _dense_enough(cls, v: List[int]) -> List[int]:
        if any(n < 7 for n in v):
            raise ValueError("every density must be at least 7 points")
        return v

    @field_validator("noise_levels")
    @classmethod
    def _sane_noise(cls, v: List[float]) -> List[float]:
        if any(f < 0 or f > 0.5 for f in v):
            raise ValueError("noise levels must lie in [0, 0.5]")
        return v

    @classmethod
    def testing(cls) -> "SweepConfig":
        return cls(
            densities=list(TestingProtocol.DENSITIES),
            noise_levels=list(TestingProtocol.NOISE_LEVELS),
            trials=TestingProtocol.TRIALS,
        )


class PipelineConfig(BaseModel):
    descriptors: DescriptorConfig = Field(default_factory=DescriptorConfig)
    segmentation: SegmentationConfig = Field(default_factory=SegmentationConfig)
    matching: MatchingParams = Field(default_factory=MatchingParams)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    symmetric_only: bool = False
    workers: int = 1

    @field_validator("workers")
    @classmethod
    def _workers(cls, v: int) -> int:
        if v < 1:
            raise ValueError("workers must be at least 1")
        return v


# ---------------------------------------------------------------------------
# Serialized records
# ---------------------------------------------------------------------------

class NodeRecord(BaseModel):
    id: int
    centroid_id: int
    size: int
    area: float


class GraphRecord(BaseModel):
    nodes: List[NodeRecord]
    edges: List[List[int]]


class MatchPair(BaseModel):
    a: int
    b: int
    likelihood: float


class MatchingRecord(BaseModel):
    pairs: List[MatchPair]
    unmatched_a: List[int]
    unmatched_b: List[int]
    params: Dict[str, Any] = Field(default_factory=dict)
    stats: Dict[str, float] = Field(default_factory=dict)


class ResolvedPair(BaseModel):
    a: int
    b: int
    resolved: bool = True


class OneToOneRecord(BaseModel):
    pairs: List[ResolvedPair]
    unresolved_a: List[int]
    unresolved_b: List[int]


class SelfSymmetryEntry(BaseModel):
    node: int
    partners: List[int]
    kind: SelfPairKind


class CorrespondenceReport(BaseModel):
    """Result bundle of one pipeline run."""
    mode: str
    shape_a: str
    shape_b: Optional[str] = None
    parameters: PipelineConfig
    chosen_k: int
    k_distances: Dict[str, float] = Field(default_factory=dict)
    labels_a: List[int]
    labels_b: List[int]
    graph_a: GraphRecord
    graph_b: GraphRecord
    symmetric_matching: MatchingRecord
    one_to_one: Optional[OneToOneRecord] = None
    self_symmetry: Optional[List[SelfSymmetryEntry]] = None
    accuracy: Optional[float] = None
    one_to_one_accuracy: Optional[float] = None
    segments_a: int
    segments_b: int
    metadata: Dict[str, Any] = Field(default_factory=dict)
    timings: Dict[str, float] = Field(default_factory=dict)
    total_time: float = 0.0

    @model_validator(mode="after")
    def _check_labels(self) -> "CorrespondenceReport":
        if any(t < 0 for t in self.timings.values()) or self.total_time < 0:
            raise ValueError("timings must be nonnegative")
        return self
