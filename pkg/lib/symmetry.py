import logging
from typing import Dict, List, Optional, Set, Tuple

import networkx as nx
import numpy as np

from lib.geometry import geodesic_distances
from optypes.match_types import OneToOneMatching, Shape, ShapeGraph, SymmetricMatching

logger = logging.getLogger(__name__)


class SymmetryBreakingError(Exception):
    """Raised when a symmetric matching does not fit its shape graphs"""
    pass


def match_groups(sym: SymmetricMatching) -> List[Tuple[List[int], List[int]]]:
    """Connected components of the bipartite match relation as (A nodes, B nodes)."""
    bipartite = nx.Graph()
    bipartite.add_edges_from((("a", a), ("b", b)) for a, b in sym.pairs())
    groups = []
    for component in nx.connected_components(bipartite):
        side_a = sorted(node for side, node in component if side == "a")
        side_b = sorted(node for side, node in component if side == "b")
        groups.append((side_a, side_b))
    groups.sort(key=lambda g: (g[0][0], g[1][0]))
    return groups


class _Resolver:
    """Mutable state of one symmetry-breaking run."""

    def __init__(
        self,
        graph_a: ShapeGraph,
        graph_b: ShapeGraph,
        sym: SymmetricMatching,
        shape_a: Shape,
        shape_b: Shape,
    ):
        self.graph_a = graph_a
        self.graph_b = graph_b
        self.shape_a = shape_a
        self.shape_b = shape_b
        self.match_a: Dict[int, Set[int]] = {a: set(sym.match_set(a)) for a in range(sym.n_a)}
        self.match_b: Dict[int, Set[int]] = {b: set() for b in range(sym.n_b)}
        for a, b in sym.pairs():
            self.match_b[b].add(a)
        self.fixed: Dict[int, int] = {}
        self.v_nodes: List[int] = []
        self.w_nodes: List[int] = []

    def fix(self, a: int, b: int, grow: bool = True) -> None:
        for other in self.match_a[a] - {b}:
            self.match_b[other].discard(a)
        for other in self.match_b[b] - {a}:
            self.match_a[other].discard(b)
        self.match_a[a] = {b}
        self.match_b[b] = {a}
        self.fixed[a] = b
        if grow:
            self.v_nodes.append(a)
            self.w_nodes.append(b)

    def accept_settled(self) -> None:
        """Fix every unresolved node whose only match points back at it alone.

        Settled pairs are fixed without joining the anchor sets V and W.
        """
        for a in range(len(self.match_a)):
            if a in self.fixed or len(self.match_a[a]) != 1:
                continue
            (b,) = self.match_a[a]
            if self.match_b[b] == {a}:
                self.fix(a, b, grow=False)

    def ambiguous(self) -> List[int]:
        return [
            a for a, bs in self.match_a.items()
            if a not in self.fixed and bs
        ]

    def _mean_distances(self, shape: Shape, graph: ShapeGraph, anchors: List[int]) -> np.ndarray:
        sources = np.concatenate([graph.nodes[n].vertex_set for n in anchors])
        dist = geodesic_distances(shape, sources)
        return np.array([dist[node.vertex_set].mean() for node in graph.nodes])

    def step(self) -> Optional[Tuple[int, int]]:
        candidates = self.ambiguous()
        if not candidates:
            return None
        to_v = self._mean_distances(self.shape_a, self.graph_a, self.v_nodes)
        region = min(candidates, key=lambda a: (to_v[a], a))
        to_w = self._mean_distances(self.shape_b, self.graph_b, self.w_nodes)
        partner = min(self.match_a[region], key=lambda b: (to_w[b], b))
        self.fix(region, partner)
        return region, partner


def _seed_group(
    groups: List[Tuple[List[int], List[int]]],
    areas_a: np.ndarray,
    areas_b: np.ndarray,
) -> Optional[Tuple[List[int], List[int]]]:
    square = [(ga, gb) for ga, gb in groups if len(ga) > 1 and len(gb) > 1]
    if not square:
        return None
    return min(
        square,
        key=lambda g: (
            max(len(g[0]), len(g[1])),
            len(g[0]) + len(g[1]),
            float(areas_a[g[0]].sum() + areas_b[g[1]].sum()),
            g[0][0],
        ),
    )


def break_symmetry(
    graph_a: ShapeGraph,
    graph_b: ShapeGraph,
    sym: SymmetricMatching,
    shape_a: Shape,
    shape_b: Shape,
) -> OneToOneMatching:
    """Resolve symmetric match sets into a one-to-one correspondence.

    One-to-one matches are kept. The smallest symmetric group with more than
    one node on each side is resolved lowest-index to lowest-index, then the
    remaining ambiguous regions are fixed one at a time, closest to the
    already resolved regions first, each taking its candidate closest to the
    resolved regions of the other shape.
    """
    if sym.n_a != graph_a.n_nodes or sym.n_b != graph_b.n_nodes:
        raise SymmetryBreakingError(
            f"Matching is {sym.n_a}x{sym.n_b} but graphs have "
            f"{graph_a.n_nodes} and {graph_b.n_nodes} nodes"
        )

    resolver = _Resolver(graph_a, graph_b, sym, shape_a, shape_b)
    groups = match_groups(sym)
    seed = _seed_group(
        groups,
        graph_a.node_areas(shape_a.vertex_area),
        graph_b.node_areas(shape_b.vertex_area),
    )
    one_to_one = [(ga[0], gb[0]) for ga, gb in groups if len(ga) == 1 and len(gb) == 1]

    if seed is not None:
        for a, b in one_to_one:
            resolver.fix(a, b, grow=False)
        seed_a = seed[0][0]
        seed_b = min(resolver.match_a[seed_a])
        resolver.fix(seed_a, seed_b)
        logger.debug(f"Seeded symmetry breaking with {seed_a} -> {seed_b}")
    elif one_to_one:
        for a, b in one_to_one:
            resolver.fix(a, b)
    else:
        logger.warning("No one-to-one match and no symmetric group to seed from; nothing resolved")
        return OneToOneMatching(
            pairs=[], unresolved_a=list(range(sym.n_a)), unresolved_b=list(range(sym.n_b))
        )

    resolver.accept_settled()
    while resolver.step() is not None:
        resolver.accept_settled()

    pairs = sorted(resolver.fixed.items())
    used_b = {b for _, b in pairs}
    result = OneToOneMatching(
        pairs=pairs,
        unresolved_a=[a for a in range(sym.n_a) if a not in resolver.fixed],
        unresolved_b=[b for b in range(sym.n_b) if b not in used_b],
    )
    logger.info(
        f"Symmetry breaking: {len(pairs)} pairs, {len(result.unresolved_a)} unresolved in A"
    )
    return result
