"""Human-precedence planning on top of the reservation table.

Humans outrank robots: when a human needs a path, every robot is
interrupted and frozen in place, the human is planned around the
frozen fleet (stage one) or the fleet is moved out of the way (stage
two), and the robots are then replanned around the human's velocity-band
time windows. Reactions to intention reports replan the human along the
common segment of the predicted paths and stop the human when even that
fails.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

from .graph import DistanceMatrix, WarehouseGraph, nearest_nodes
from .intention import HirReport
from .planner import (
    AgentPlan,
    NoPlan,
    ReservationTable,
    SafetyRegionConfig,
    TimeWindow,
    plan_route,
)

KEEP_PLAN = "keep_plan"
NEW_HUMAN_PLAN = "new_human_plan"
EVASIVE_MANEUVER = "evasive_maneuver"
STOP_HUMAN = "stop_human"
FAILURE = "failure"

IDLE = "idle"
BUSY = "busy"
FREE = "free"
INTERRUPTED = "interrupted"
FAILED = "failed"


class HumanAwareError(Exception):
    pass


class EmptySegment(HumanAwareError):
    pass


class UnknownNode(HumanAwareError):
    pass


@dataclass
class VelocityBand:
    v_min: float = 0.8
    v_max: float = 1.6

    def __post_init__(self) -> None:
        if not 0 < self.v_min <= self.v_max:
            raise ValueError("need 0 < v_min <= v_max")


@dataclass
class HumanPlan:
    agent: str
    path: list[int]
    windows: list[TimeWindow]
    band: VelocityBand
    t0: float

    def to_payload(self) -> dict:
        return {
            "agent": self.agent,
            "path": self.path,
            "windows": [[w.start, w.end] for w in self.windows],
        }


@dataclass
class RobotContext:
    """The slice of robot state the human-aware planner works with."""

    id: str
    resource: int
    goal: int | None
    speed: float
    state: str


@dataclass
class DeviationReplanRequest:
    candidate_paths: list[list[int]]
    segment: list[int]
    start: int
    goal: int


@dataclass
class HapOutcome:
    kind: str
    human_plan: HumanPlan | None = None
    robot_plans: dict[str, AgentPlan] = field(default_factory=dict)
    failed_robots: list[str] = field(default_factory=list)
    trace: list[str] = field(default_factory=list)

    def to_payload(self) -> dict:
        return {
            "kind": self.kind,
            "human_plan": self.human_plan.to_payload() if self.human_plan else None,
            "robot_plans": {a: p.to_payload() for a, p in self.robot_plans.items()},
            "failed_robots": self.failed_robots,
        }


def human_windows(
    agent: str,
    path: list[int],
    g: WarehouseGraph,
    band: VelocityBand,
    t0: float,
    terminal_dwell: float = 5.0,
) -> HumanPlan:
    """Velocity-band windows along a path.

    Resource i is entered as early as a max-speed walk allows and left
    as late as a min-speed walk allows, so the window covers every pace
    inside the band. The terminal node keeps a dwell margin.
    """
    cum = [0.0]
    for u, v in zip(path, path[1:]):
        cum.append(cum[-1] + math.dist(g.node_pos(u), g.node_pos(v)))
    windows = []
    for i, _ in enumerate(path):
        entry = t0 + cum[i] / band.v_max
        if i + 1 < len(path):
            exit_t = t0 + cum[i + 1] / band.v_min
        else:
            exit_t = t0 + cum[i] / band.v_min + terminal_dwell
        windows.append(TimeWindow(entry, exit_t, agent))
    return HumanPlan(agent=agent, path=list(path), windows=windows, band=band, t0=t0)


def reserve_human(table: ReservationTable, hp: HumanPlan) -> None:
    """Write the human's windows onto the safety timelines.

    Humans occupy the safety-region layers rather than the robot-side
    physical/conflicting pair: the safety-2 ring contains the walked
    node itself, so robots (which always plan over safety2) are kept
    out, while two humans may legitimately share floor space.
    """
    for rid, win in zip(hp.path, hp.windows):
        table.occupy_safety(hp.agent, rid, win.start, win.end)


def longest_common_segment(paths: list[list[int]], current: int) -> list[int]:
    """Maximal shared prefix of the candidate paths from ``current``.

    A shared prefix shorter than one edge is useless as a plan corridor
    and raises EmptySegment.
    """
    if not paths:
        raise EmptySegment("no candidate paths")
    for p in paths:
        if not p or p[0] != current:
            raise EmptySegment(f"candidate path does not start at {current}")
    prefix = list(paths[0])
    for p in paths[1:]:
        n = 0
        for a, b in zip(prefix, p):
            if a != b:
                break
            n += 1
        prefix = prefix[:n]
    if len(prefix) < 2:
        raise EmptySegment("candidate paths diverge immediately")
    return prefix


def static_path(
    g: WarehouseGraph,
    frm: int,
    to: int,
    blocked: set[int],
    allowed: set[int] | None = None,
) -> list[int] | None:
    """Plain Dijkstra over the surviving nodes (frozen-world planning)."""
    if frm == to:
        return [frm]

    def usable(n: int) -> bool:
        if n == frm or n == to:
            return True
        if n in blocked:
            return False
        return allowed is None or n in allowed

    if to in blocked or (allowed is not None and to not in allowed):
        return None
    dist = {frm: 0.0}
    prev: dict[int, int] = {}
    heap = [(0.0, frm)]
    while heap:
        d, u = heapq.heappop(heap)
        if u == to:
            path = [to]
            while path[-1] != frm:
                path.append(prev[path[-1]])
            return path[::-1]
        if d > dist.get(u, math.inf):
            continue
        for v, _, length in g.neighbors(u):
            if not usable(v):
                continue
            nd = d + length
            if nd < dist.get(v, math.inf):
                dist[v] = nd
                prev[v] = u
                heapq.heappush(heap, (nd, v))
    return None


def interrupt_robots(
    table: ReservationTable, robots: list[RobotContext], now: float
) -> dict[str, AgentPlan]:
    """Freeze every busy/free robot in place and drop its future windows.

    Returns the released plans so unaffected robots can be handed their
    old plans back after the human is planned. Idempotent: interrupted,
    failed, and idle robots already sit on a frozen window.
    """
    released: dict[str, AgentPlan] = {}
    for r in robots:
        if r.state not in (BUSY, FREE):
            continue
        old = table.plans.get(r.id)
        if old is not None:
            released[r.id] = old
        table.release(r.id, after=now)
        table.plans.pop(r.id, None)
        table.freeze(r.id, r.resource, now)
        r.state = INTERRUPTED
    return released


def _robot_obstacles(
    g: WarehouseGraph, robots: list[RobotContext], safety: SafetyRegionConfig
) -> set[int]:
    """Nodes unusable for a human walking among frozen robots."""
    blocked: set[int] = set()
    pos = g.positions
    for r in robots:
        rx, ry = g.node_pos(r.resource)
        d = ((pos[:, 0] - rx) ** 2 + (pos[:, 1] - ry) ** 2) ** 0.5
        blocked.update(int(i) for i in range(g.n_nodes) if d[i] <= safety.r2 + 1e-9)
    return blocked


def _replan_interrupted(
    table: ReservationTable,
    robots: list[RobotContext],
    now: float,
) -> tuple[dict[str, AgentPlan], list[str]]:
    """Resume interrupted robots around the newly reserved human."""
    plans: dict[str, AgentPlan] = {}
    failed: list[str] = []
    for r in sorted(robots, key=lambda r: r.id):
        if r.state != INTERRUPTED or r.goal is None:
            continue
        table.release(r.id)
        try:
            plan = plan_route(table, r.id, r.resource, r.goal, now, r.speed)
        except NoPlan:
            table.freeze(r.id, r.resource, now)
            r.state = FAILED
            failed.append(r.id)
            continue
        table.reserve(plan)
        plans[r.id] = plan
        r.state = BUSY
    return plans, failed


def plan_human(
    table: ReservationTable,
    g: WarehouseGraph,
    F: DistanceMatrix,
    human: str,
    frm: int,
    to: int,
    band: VelocityBand,
    now: float,
    robots: list[RobotContext],
    terminal_dwell: float = 5.0,
) -> HapOutcome:
    """Plan a human path with precedence over the whole fleet.

    Stage one freezes the fleet and routes the human around the frozen
    robots and their safety-region-2 halos. Stage two routes the human
    as if no robots existed and asks each robot in the way to step to
    the nearest node clear of the path; if even that fails, the outcome
    is Failure.
    """
    if not (0 <= frm < g.n_nodes and 0 <= to < g.n_nodes):
        raise UnknownNode(f"bad endpoints ({frm}, {to})")
    trace = []
    interrupt_robots(table, robots, now)
    table.release(human)

    blocked = _robot_obstacles(g, robots, table.safety)
    path = static_path(g, frm, to, blocked)
    trace.append(f"stage1:{'ok' if path else 'blocked'}")
    if path is not None and to not in blocked:
        hp = human_windows(human, path, g, band, now, terminal_dwell)
        reserve_human(table, hp)
        plans, failed = _replan_interrupted(table, robots, now)
        return HapOutcome(NEW_HUMAN_PLAN, hp, plans, failed, trace)

    # Stage two: ignore robots, then move the blockers aside.
    path = static_path(g, frm, to, set())
    if path is None:
        trace.append("stage2:unreachable")
        return HapOutcome(FAILURE, trace=trace)
    hp = human_windows(human, path, g, band, now, terminal_dwell)
    path_nodes = set(path)
    clearance: set[int] = set()
    pos = g.positions
    for rid in path:
        px, py = g.node_pos(rid)
        d = ((pos[:, 0] - px) ** 2 + (pos[:, 1] - py) ** 2) ** 0.5
        clearance.update(int(i) for i in range(g.n_nodes) if d[i] <= table.safety.r2 + 1e-9)
    blockers = sorted(
        (r for r in robots if r.resource in clearance), key=lambda r: r.id
    )
    # The blockers are about to move: lift their frozen presence before
    # the human is written, then plan each around the human's windows.
    for r in blockers:
        table.release(r.id)
    reserve_human(table, hp)
    evasions: dict[str, AgentPlan] = {}
    taken: set[int] = {r.resource for r in robots}
    for r in blockers:
        anchor = r.goal if r.goal is not None else r.resource
        refuges = sorted(
            (rid for rid in range(g.n_nodes)
             if rid not in clearance and rid not in taken and math.isfinite(F.dist(rid, anchor))),
            key=lambda rid: (F.dist(rid, anchor), rid),
        )
        plan = None
        for refuge in refuges[:12]:
            try:
                plan = plan_route(table, r.id, r.resource, refuge, now, r.speed)
                break
            except NoPlan:
                continue
        if plan is None:
            trace.append(f"stage2:evasion-failed:{r.id}")
            table.release(human)
            table.freeze(r.id, r.resource, now)
            r.state = FAILED
            return HapOutcome(FAILURE, failed_robots=[r.id], trace=trace)
        table.reserve(plan)
        evasions[r.id] = plan
        taken.add(plan.visits[-1].resource)
    trace.append("stage2:evasive")
    return HapOutcome(EVASIVE_MANEUVER, hp, evasions, [], trace)


def react_to_hir(
    table: ReservationTable,
    g: WarehouseGraph,
    F: DistanceMatrix,
    report: HirReport,
    human: str,
    position: tuple[float, float],
    band: VelocityBand,
    now: float,
    robots: list[RobotContext],
) -> HapOutcome:
    """React to a deviation report.

    A plausible original goal keeps every plan. Otherwise the fleet is
    interrupted and the human replanned along the longest common
    segment of the predicted paths; when that restricted plan cannot be
    found the human is told to stop.
    """
    if not report.deviating or report.original_goal_plausible:
        return HapOutcome(KEEP_PLAN, trace=["keep:original-goal-plausible"])
    trace = []
    current = nearest_nodes(g, position, 1)[0][0]
    interrupt_robots(table, robots, now)
    table.release(human)
    try:
        segment = longest_common_segment(
            [c.path for c in report.candidate_paths], current
        )
    except EmptySegment:
        trace.append("segment:empty")
        return HapOutcome(STOP_HUMAN, trace=trace)

    blocked = _robot_obstacles(g, robots, table.safety)
    restricted = static_path(g, segment[0], segment[-1], blocked, allowed=set(segment))
    trace.append(f"restricted-plan:{'ok' if restricted else 'failed'}")
    if restricted is None:
        return HapOutcome(STOP_HUMAN, trace=trace)
    hp = human_windows(human, restricted, g, band, now)
    reserve_human(table, hp)
    plans, failed = _replan_interrupted(table, robots, now)
    return HapOutcome(NEW_HUMAN_PLAN, hp, plans, failed, trace)
