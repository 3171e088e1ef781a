"""Bundled warehouse layouts.

``demo_layout`` is the default shop floor: a 19 x 12 grid at 1 m pitch
(228 ground nodes, 348 edges) with rack columns, three picking stations
along the bottom highway, chargers along the top, and an auxiliary goal
marker in each corner. ``grid_layout`` builds plain open grids for tests
and benchmarks.
"""

from __future__ import annotations

from .graph import Node, NodeKind, ValidationError, WarehouseGraph, load_graph, save_graph

DEMO_WIDTH = 19
DEMO_HEIGHT = 12
DEMO_PITCH = 1.0

# Columns without vertical edges; racks live here on the inner rows.
_RACK_COLUMNS = (2, 4, 6, 9, 12, 14, 16)
_STATION_COLUMNS = (3, 8, 13)
# Chargers are spaced two columns apart so parked robots never sit in
# each other's conflict regions; the tenth lives on the east edge.
_CHARGER_COLUMNS = (1, 3, 5, 7, 9, 11, 13, 15, 17)
_EXTRA_CHARGER = (18, 9)


def grid_layout(width: int, height: int, pitch: float = 1.0) -> WarehouseGraph:
    """Fully connected open grid of road nodes, row-major ids."""
    nodes = [
        Node(y * width + x, x * pitch, y * pitch, NodeKind.ROAD)
        for y in range(height)
        for x in range(width)
    ]
    edges: list[tuple[int, int]] = []
    for y in range(height):
        for x in range(width):
            nid = y * width + x
            if x + 1 < width:
                edges.append((nid, nid + 1))
            if y + 1 < height:
                edges.append((nid, nid + width))
    return WarehouseGraph(nodes, edges)


def corridor_layout(length: int, pitch: float = 1.0) -> WarehouseGraph:
    """Single straight corridor of ``length`` road nodes."""
    return grid_layout(length, 1, pitch)


def demo_layout() -> WarehouseGraph:
    g = load_graph(demo_layout_doc())
    if g.n_nodes != 228 or g.n_edges != 348:
        raise ValidationError(
            f"demo layout degenerated: {g.n_nodes} nodes / {g.n_edges} edges"
        )
    return g


def demo_layout_doc() -> dict:
    """Layout document for the demo floor (see module docstring)."""
    w, h = DEMO_WIDTH, DEMO_HEIGHT
    corners = {(0, 0), (w - 1, 0), (0, h - 1), (w - 1, h - 1)}

    def kind_at(x: int, y: int) -> NodeKind:
        if (x, y) in corners:
            return NodeKind.GOAL_MARKER
        if y == 0 and x in _STATION_COLUMNS:
            return NodeKind.PICKING_STATION
        if (y == h - 1 and x in _CHARGER_COLUMNS) or (x, y) == _EXTRA_CHARGER:
            return NodeKind.CHARGING_STATION
        if x in _RACK_COLUMNS and 1 <= y <= h - 2:
            return NodeKind.STORAGE
        return NodeKind.ROAD

    nodes = []
    for y in range(h):
        for x in range(w):
            nodes.append(
                {
                    "id": y * w + x,
                    "x": x * DEMO_PITCH,
                    "y": y * DEMO_PITCH,
                    "kind": kind_at(x, y).value,
                }
            )

    edges = []
    for y in range(h):
        for x in range(w):
            nid = y * w + x
            if x + 1 < w:
                edges.append({"a": nid, "b": nid + 1})
            # Vertical edges only along aisle columns; rack columns are
            # reachable sideways, which keeps racks off the through lanes.
            if y + 1 < h and x not in _RACK_COLUMNS:
                edges.append({"a": nid, "b": nid + w})
    return {"nodes": nodes, "edges": edges}


def station_queue(g: WarehouseGraph, station: int, depth: int = 3) -> list[int]:
    """Queue slots feeding a picking station, nearest-to-head first.

    The queue grows away from the station and away from the warehouse
    boundary (into the floor), so stations on the perimeter never park
    their queues across the perimeter highway.
    """
    xs = [n.x for n in g.nodes]
    ys = [n.y for n in g.nodes]
    lo_x, hi_x, lo_y, hi_y = min(xs), max(xs), min(ys), max(ys)

    def border_distance(v: int) -> float:
        n = g.nodes[v]
        return min(n.x - lo_x, hi_x - n.x, n.y - lo_y, hi_y - n.y)

    queue: list[int] = []
    prev, cur = None, station
    for _ in range(depth):
        candidates = [
            v
            for v, _, _ in g.neighbors(cur)
            if v != prev and g.nodes[v].kind == NodeKind.ROAD
        ]
        if not candidates:
            break
        far = max(
            candidates,
            key=lambda v: (
                border_distance(v),
                (g.nodes[v].x - g.nodes[station].x) ** 2
                + (g.nodes[v].y - g.nodes[station].y) ** 2,
                -v,
            ),
        )
        queue.append(far)
        prev, cur = cur, far
    return queue


__all__ = [
    "grid_layout",
    "corridor_layout",
    "demo_layout",
    "demo_layout_doc",
    "station_queue",
    "save_graph",
]
