"""Warehouse layout graph and road-distance matrix.

Every node is a ground node of the road graph: robots and humans move on
all of them. Node kinds are markers (where racks live, where stations
are), not traversability classes; dynamic occupancy is the simulator's
business. Distances are Euclidean edge lengths in meters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import yaml
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra as _csgraph_dijkstra

EPS = 1e-9


class GraphError(Exception):
    """Base class for layout-related errors."""


class ParseError(GraphError):
    """The layout document is not parseable."""


class ValidationError(GraphError):
    """The layout document parsed but violates a structural invariant."""


class UnknownEdge(GraphError):
    pass


class Unreachable(GraphError):
    pass


class NodeKind(str, Enum):
    ROAD = "road"
    STORAGE = "storage"
    PICKING_STATION = "picking_station"
    CHARGING_STATION = "charging_station"
    GOAL_MARKER = "goal_marker"


@dataclass(frozen=True)
class Node:
    id: int
    x: float
    y: float
    kind: NodeKind

    @property
    def pos(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass
class WarehouseGraph:
    """Undirected warehouse graph with dense 0..N-1 node ids.

    ``blocked`` holds edge ids currently removed from routing (e.g. a
    robot parked across an edge). Blocking is the only mutation the
    graph supports after construction; ``generation`` is bumped on each
    block/unblock so distance matrices can be matched to graph state.
    """

    nodes: list[Node]
    edges: list[tuple[int, int]]
    blocked: set[int] = field(default_factory=set)
    generation: int = 0

    def __post_init__(self) -> None:
        self.positions = np.array([[n.x, n.y] for n in self.nodes], dtype=float)
        self.edge_lengths = [
            float(math.dist(self.nodes[a].pos, self.nodes[b].pos)) for a, b in self.edges
        ]
        self._adjacency: list[list[tuple[int, int, float]]] = [[] for _ in self.nodes]
        for eid, (a, b) in enumerate(self.edges):
            length = self.edge_lengths[eid]
            self._adjacency[a].append((b, eid, length))
            self._adjacency[b].append((a, eid, length))
        for nbrs in self._adjacency:
            nbrs.sort()

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def neighbors(self, node_id: int) -> list[tuple[int, int, float]]:
        """Unblocked ``(neighbor, edge_id, length)`` triples, neighbor-sorted."""
        return [t for t in self._adjacency[node_id] if t[1] not in self.blocked]

    def node_pos(self, node_id: int) -> tuple[float, float]:
        return self.nodes[node_id].pos

    def nodes_of_kind(self, kind: NodeKind) -> list[int]:
        return [n.id for n in self.nodes if n.kind == kind]

    def edge_id(self, a: int, b: int) -> int:
        for nbr, eid, _ in self._adjacency[a]:
            if nbr == b:
                return eid
        raise UnknownEdge(f"no edge between {a} and {b}")

    def block_edge(self, edge_id: int) -> None:
        if not 0 <= edge_id < len(self.edges):
            raise UnknownEdge(f"edge id {edge_id} out of range")
        self.blocked.add(edge_id)
        self.generation += 1

    def unblock_edge(self, edge_id: int) -> None:
        if not 0 <= edge_id < len(self.edges):
            raise UnknownEdge(f"edge id {edge_id} out of range")
        self.blocked.discard(edge_id)
        self.generation += 1


@dataclass
class DistanceMatrix:
    """All-pairs shortest road distances; +inf encodes disconnection."""

    F: np.ndarray
    generation: int

    def dist(self, a: int, b: int) -> float:
        return float(self.F[a, b])


def _parse_document(text: str) -> dict:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ParseError(f"layout document does not parse: {exc}") from exc
    if not isinstance(doc, dict):
        raise ParseError("layout document must be a mapping with 'nodes' and 'edges'")
    return doc


def load_graph(source: str | dict) -> WarehouseGraph:
    """Build and validate a WarehouseGraph from a layout document.

    ``source`` is either a document string (YAML/JSON) or an already
    parsed mapping with top-level keys ``nodes`` (id, x, y, kind) and
    ``edges`` (a, b).
    """
    doc = _parse_document(source) if isinstance(source, str) else source
    try:
        raw_nodes = doc["nodes"]
        raw_edges = doc["edges"]
    except (KeyError, TypeError) as exc:
        raise ParseError("layout document needs top-level 'nodes' and 'edges'") from exc

    nodes: list[Node] = []
    seen: set[int] = set()
    for entry in raw_nodes:
        try:
            nid = int(entry["id"])
            x = float(entry["x"])
            y = float(entry["y"])
            kind = NodeKind(entry.get("kind", "road"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad node entry {entry!r}: {exc}") from exc
        if nid in seen:
            raise ValidationError(f"duplicate node id {nid}")
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ValidationError(f"node {nid} has non-finite position")
        seen.add(nid)
        nodes.append(Node(nid, x, y, kind))

    n = len(nodes)
    if n == 0:
        raise ValidationError("layout has no nodes")
    if seen != set(range(n)):
        raise ValidationError("node ids must be dense 0..N-1")
    nodes.sort(key=lambda nd: nd.id)

    edges: list[tuple[int, int]] = []
    edge_set: set[tuple[int, int]] = set()
    for entry in raw_edges:
        try:
            a, b = int(entry["a"]), int(entry["b"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad edge entry {entry!r}: {exc}") from exc
        if a not in seen or b not in seen:
            raise ValidationError(f"edge ({a},{b}) references a missing node")
        if a == b:
            raise ValidationError(f"self edge at node {a}")
        key = (min(a, b), max(a, b))
        if key in edge_set:
            raise ValidationError(f"duplicate edge ({a},{b})")
        edge_set.add(key)
        edges.append((a, b))

    g = WarehouseGraph(nodes, edges)
    _validate_topology(g)
    return g


def _validate_topology(g: WarehouseGraph) -> None:
    # Connectivity over non-blocked edges, flood fill from node 0.
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for v, _, _ in g.neighbors(u):
            if v not in seen:
                seen.add(v)
                stack.append(v)
    if len(seen) != g.n_nodes:
        raise ValidationError(
            f"road graph disconnected: {g.n_nodes - len(seen)} unreachable nodes"
        )
    for nid in g.nodes_of_kind(NodeKind.STORAGE):
        if not any(g.nodes[v].kind == NodeKind.ROAD for v, _, _ in g.neighbors(nid)):
            raise ValidationError(f"storage node {nid} has no adjacent road node")


def save_graph(g: WarehouseGraph) -> dict:
    """Layout document for ``g``; round-trips losslessly through load_graph."""
    return {
        "nodes": [{"id": n.id, "x": n.x, "y": n.y, "kind": n.kind.value} for n in g.nodes],
        "edges": [{"a": a, "b": b} for a, b in g.edges],
    }


def dump_graph(g: WarehouseGraph) -> str:
    return json.dumps(save_graph(g), indent=1)


def all_pairs_distances(g: WarehouseGraph) -> DistanceMatrix:
    """All-pairs shortest path distances over non-blocked edges.

    The full recompute is fast enough on road graphs (a few hundred
    nodes) that no incremental repair is needed after an edge change.
    """
    n = g.n_nodes
    rows, cols, data = [], [], []
    for eid, (a, b) in enumerate(g.edges):
        if eid in g.blocked:
            continue
        length = g.edge_lengths[eid]
        rows.extend((a, b))
        cols.extend((b, a))
        data.extend((length, length))
    mat = csr_matrix((data, (rows, cols)), shape=(n, n))
    F = _csgraph_dijkstra(mat, directed=False)
    np.fill_diagonal(F, 0.0)
    return DistanceMatrix(F=F, generation=g.generation)


def invalidate_edge(g: WarehouseGraph, edge_id: int) -> DistanceMatrix:
    """Discard an edge from routing and recompute distances."""
    g.block_edge(edge_id)
    return all_pairs_distances(g)


def restore_edge(g: WarehouseGraph, edge_id: int) -> DistanceMatrix:
    g.unblock_edge(edge_id)
    return all_pairs_distances(g)


def shortest_path(g: WarehouseGraph, F: DistanceMatrix, frm: int, to: int) -> list[int]:
    """Shortest node sequence from ``frm`` to ``to``.

    Among equal-cost paths the lexicographically smallest node sequence
    is returned, which the greedy step below yields because neighbors
    are visited in ascending id order.
    """
    if not (0 <= frm < g.n_nodes and 0 <= to < g.n_nodes):
        raise Unreachable(f"unknown node in ({frm}, {to})")
    if not math.isfinite(F.dist(frm, to)):
        raise Unreachable(f"no road path from {frm} to {to}")
    path = [frm]
    u = frm
    while u != to:
        remaining = F.dist(u, to)
        nxt = None
        for v, _, length in g.neighbors(u):
            if abs(length + F.dist(v, to) - remaining) <= EPS * max(1.0, remaining):
                nxt = v
                break
        if nxt is None:  # should not happen on a consistent matrix
            raise Unreachable(f"distance matrix inconsistent at node {u}")
        path.append(nxt)
        u = nxt
    return path


def nearest_nodes(
    g: WarehouseGraph, p: tuple[float, float], k: int
) -> list[tuple[int, float]]:
    """The k road nodes nearest to ``p``, ascending, ties by node id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    d = np.hypot(g.positions[:, 0] - p[0], g.positions[:, 1] - p[1])
    order = np.lexsort((np.arange(g.n_nodes), d))
    return [(int(i), float(d[i])) for i in order[:k]]
