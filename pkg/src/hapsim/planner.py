"""Time-window route planner over the warehouse resource graph.

Each ground node is a resource carrying four timelines: ``physical``
(bodily occupied), ``conflicting`` (a conflicting resource is bodily
occupied), and the human-centric ``safety2`` / ``safety3`` layers.
Merging the selected layers of a resource yields the free windows an
agent may move into; routes are found with an A* over overlapping free
windows, and committed routes write occupied windows back.

Time is continuous seconds. Windows are half-open ``[start, end)`` and
compared with a small epsilon.
"""

from __future__ import annotations

import heapq
import itertools
import math
from bisect import insort
from dataclasses import dataclass, field, replace

from .graph import WarehouseGraph

EPS = 1e-6

PHYSICAL = "physical"
CONFLICTING = "conflicting"
SAFETY2 = "safety2"
SAFETY3 = "safety3"
LAYERS = (PHYSICAL, CONFLICTING, SAFETY2, SAFETY3)

ROBOT_LAYERS = (PHYSICAL, CONFLICTING, SAFETY2)


class PlannerError(Exception):
    pass


class NoPlan(PlannerError):
    pass


class StartOccupied(NoPlan):
    pass


class Conflict(PlannerError):
    """A plan is stale with respect to the reservation table."""


class UnknownResource(PlannerError):
    pass


@dataclass(frozen=True, order=True)
class TimeWindow:
    start: float
    end: float
    owner: str | None = None

    def __post_init__(self) -> None:
        if not self.start < self.end:
            raise ValueError(f"degenerate window [{self.start}, {self.end})")

    def overlaps(self, start: float, end: float) -> bool:
        return self.start < end - EPS and start < self.end - EPS


@dataclass
class SafetyRegionConfig:
    """Concentric safety radii around a human and the slowdown factor."""

    r1: float = 0.5
    r2: float = 1.0
    r3: float = 2.0
    slowdown_factor: float = 0.5

    def __post_init__(self) -> None:
        if not 0 < self.r1 <= self.r2 <= self.r3:
            raise ValueError("safety radii must satisfy 0 < r1 <= r2 <= r3")
        if not 0 < self.slowdown_factor <= 1:
            raise ValueError("slowdown factor must be in (0, 1]")


@dataclass
class Resource:
    node_id: int
    conflicts_with: tuple[int, ...]
    timelines: dict[str, list[TimeWindow]] = field(
        default_factory=lambda: {layer: [] for layer in LAYERS}
    )


@dataclass(frozen=True)
class Visit:
    resource: int
    entry: float
    exit: float


@dataclass(frozen=True)
class PlanRequest:
    agent: str
    start: int
    goal: int
    depart: float
    speed: float
    park: bool = True


@dataclass
class AgentPlan:
    agent: str
    visits: list[Visit]
    cost: float  # arrival time at the goal resource
    request: PlanRequest | None = None
    layers: tuple[str, ...] = ROBOT_LAYERS

    def to_payload(self) -> dict:
        return {
            "agent": self.agent,
            "cost": self.cost,
            "visits": [[v.resource, v.entry, v.exit] for v in self.visits],
        }


@dataclass
class Violation:
    kind: str
    agents: tuple[str, str]
    resources: tuple[int, int]
    interval: tuple[float, float]


def build_resource_graph(g: WarehouseGraph, conflict_radius: float) -> dict[int, Resource]:
    """One resource per node; conflicts are nodes within the radius."""
    resources = {}
    pos = g.positions
    for node in g.nodes:
        d = ((pos[:, 0] - node.x) ** 2 + (pos[:, 1] - node.y) ** 2) ** 0.5
        conflicts = tuple(
            int(i) for i in range(g.n_nodes) if i != node.id and d[i] <= conflict_radius + EPS
        )
        resources[node.id] = Resource(node_id=node.id, conflicts_with=conflicts)
    return resources


def _merge_intervals(intervals: list[tuple[float, float]]) -> list[tuple[float, float]]:
    if not intervals:
        return []
    intervals.sort()
    merged = [intervals[0]]
    for s, e in intervals[1:]:
        ls, le = merged[-1]
        if s <= le + EPS:
            merged[-1] = (ls, max(le, e))
        else:
            merged.append((s, e))
    return merged


class ReservationTable:
    """Per-resource timelines plus the active plan registry.

    Single-writer: all mutations (reserve, release, freeze) go through
    one owner; ``clone`` produces an independent snapshot for what-if
    planning and validation.
    """

    def __init__(self, g: WarehouseGraph, safety: SafetyRegionConfig | None = None,
                 conflict_radius: float | None = None):
        self.graph = g
        self.safety = safety or SafetyRegionConfig()
        radius = self.safety.r2 if conflict_radius is None else conflict_radius
        self.resources = build_resource_graph(g, radius)
        self.generation = 0
        self.plans: dict[str, AgentPlan] = {}

    def clone(self) -> "ReservationTable":
        other = ReservationTable.__new__(ReservationTable)
        other.graph = self.graph
        other.safety = self.safety
        other.generation = self.generation
        other.plans = dict(self.plans)
        other.resources = {
            rid: Resource(
                node_id=r.node_id,
                conflicts_with=r.conflicts_with,
                timelines={layer: list(wins) for layer, wins in r.timelines.items()},
            )
            for rid, r in self.resources.items()
        }
        return other

    def resource(self, rid: int) -> Resource:
        try:
            return self.resources[rid]
        except KeyError:
            raise UnknownResource(f"no resource {rid}") from None

    # -- window bookkeeping -------------------------------------------------

    def _insert(self, rid: int, layer: str, window: TimeWindow, check: bool = True) -> None:
        wins = self.resource(rid).timelines[layer]
        if check and layer == PHYSICAL:
            for w in wins:
                if w.overlaps(window.start, window.end):
                    raise Conflict(
                        f"physical window clash on resource {rid}: "
                        f"{window.owner} vs {w.owner} at [{window.start:.3f}, {window.end:.3f})"
                    )
        insort(wins, window)

    def occupied(self, rid: int, layers: tuple[str, ...],
                 ignore: frozenset[str] = frozenset()) -> list[tuple[float, float]]:
        intervals = [
            (w.start, w.end)
            for layer in layers
            for w in self.resource(rid).timelines[layer]
            if w.owner not in ignore
        ]
        return _merge_intervals(intervals)

    def free_windows(self, rid: int, layers: tuple[str, ...] = ROBOT_LAYERS,
                     ignore: frozenset[str] = frozenset()) -> list[TimeWindow]:
        """Maximal free intervals over the selected layers."""
        busy = self.occupied(rid, layers, ignore)
        out = []
        cursor = 0.0
        for s, e in busy:
            if s - cursor > EPS:
                out.append(TimeWindow(cursor, s))
            cursor = max(cursor, e)
        if math.isinf(cursor):
            return out
        out.append(TimeWindow(cursor, math.inf))
        return out

    def safety3_busy(self, rid: int, start: float, end: float) -> bool:
        return any(
            w.overlaps(start, end) for w in self.resource(rid).timelines[SAFETY3]
        )

    # -- mutations ----------------------------------------------------------

    def reserve(self, plan: AgentPlan) -> None:
        """Commit a plan: physical windows plus conflict shadows.

        Raises Conflict if any visit no longer fits the table the plan
        was computed against (stale plan, double reserve).
        """
        for i, visit in enumerate(plan.visits):
            # the first visit is where the agent already stands; only
            # physical occupation can make it stale (mirrors plan_route)
            layers = (PHYSICAL,) if i == 0 else plan.layers
            free = self.free_windows(visit.resource, layers)
            if not any(
                w.start - EPS <= visit.entry and visit.exit <= w.end + EPS for w in free
            ):
                raise Conflict(
                    f"plan for {plan.agent} is stale at resource {visit.resource}"
                )
        for visit in plan.visits:
            window = TimeWindow(visit.entry, visit.exit, plan.agent)
            self._insert(visit.resource, PHYSICAL, window)
            for c in self.resource(visit.resource).conflicts_with:
                self._insert(c, CONFLICTING, window)
        self.plans[plan.agent] = plan
        self.generation += 1

    def release(self, agent: str, after: float | None = None) -> None:
        """Remove an agent's windows; ``after`` keeps the past intact.

        Windows straddling ``after`` are truncated so the agent's
        current occupation survives; future ones disappear.
        """
        for r in self.resources.values():
            for layer, wins in r.timelines.items():
                kept = []
                for w in wins:
                    if w.owner != agent:
                        kept.append(w)
                    elif after is None or w.start >= after - EPS:
                        continue
                    elif w.end > after:
                        kept.append(replace(w, end=after))
                    else:
                        kept.append(w)
                wins[:] = kept
        if after is None:
            self.plans.pop(agent, None)
        self.generation += 1

    def freeze(self, agent: str, rid: int, t: float) -> None:
        """Park an agent on a resource from t onward (physical + shadow).

        Freezing records ground truth (the body is there), so it never
        fails; stale overlapping windows belong to plans that execution
        will invalidate when their owners approach.
        """
        window = TimeWindow(t, math.inf, agent)
        self._insert(rid, PHYSICAL, window, check=False)
        for c in self.resource(rid).conflicts_with:
            self._insert(c, CONFLICTING, window)
        self.generation += 1

    def occupy_safety(self, owner: str, center_rid: int, start: float, end: float) -> None:
        """Write safety2/safety3 shadows around a human-occupied node."""
        cx, cy = self.graph.node_pos(center_rid)
        pos = self.graph.positions
        d = ((pos[:, 0] - cx) ** 2 + (pos[:, 1] - cy) ** 2) ** 0.5
        window = TimeWindow(start, end, owner)
        for rid in range(self.graph.n_nodes):
            if d[rid] <= self.safety.r3 + EPS:
                insort(self.resource(rid).timelines[SAFETY3], window)
            if d[rid] <= self.safety.r2 + EPS:
                insort(self.resource(rid).timelines[SAFETY2], window)
        self.generation += 1

    def prune(self, before: float) -> None:
        """Drop windows that ended before ``before`` (log compaction)."""
        for r in self.resources.values():
            for layer, wins in r.timelines.items():
                wins[:] = [w for w in wins if w.end > before]


def free_windows(table: ReservationTable, rid: int,
                 layers: tuple[str, ...] = ROBOT_LAYERS) -> list[TimeWindow]:
    return table.free_windows(rid, layers)


def plan_route(
    table: ReservationTable,
    agent: str,
    start: int,
    goal: int,
    depart: float,
    speed: float,
    layers: tuple[str, ...] = ROBOT_LAYERS,
    ignore: frozenset[str] = frozenset(),
    allowed_nodes: set[int] | None = None,
    park: bool = True,
    min_dwell: float = 0.5,
) -> AgentPlan:
    """Window A* from start to goal, departing at ``depart``.

    Expansion follows temporally overlapping free windows on adjacent
    resources; the crossing time of a resource is inflated by the
    slowdown factor when the crossing interval intersects its safety3
    occupancy. The straight-line/speed heuristic keeps the search
    admissible. ``ignore`` drops the named owners' windows (the agent
    itself is always ignored so it can replan over its own
    reservations); ``allowed_nodes`` restricts the search to a corridor.
    """
    g = table.graph
    ignore = ignore | {agent}
    if allowed_nodes is not None and (start not in allowed_nodes or goal not in allowed_nodes):
        raise NoPlan(f"start or goal outside the allowed corridor for {agent}")

    window_cache: dict[int, list[TimeWindow]] = {}

    def windows_of(rid: int) -> list[TimeWindow]:
        if rid not in window_cache:
            window_cache[rid] = table.free_windows(rid, layers, ignore)
        return window_cache[rid]

    # The agent already stands on the start resource, so only physical
    # occupation constrains its departure; a conflict shadow it happens
    # to sit inside is resolved by leaving, not a reason to refuse.
    start_window = None
    for w in table.free_windows(start, (PHYSICAL,), ignore):
        if w.start - EPS <= depart < w.end - EPS:
            start_window = w
            break
    if start_window is None:
        raise StartOccupied(f"resource {start} not free at t={depart:.3f} for {agent}")
    START_WIDX = -1

    gx, gy = g.node_pos(goal)

    def heuristic(rid: int) -> float:
        px, py = g.node_pos(rid)
        return math.hypot(px - gx, py - gy) / speed

    best: dict[tuple[int, int], float] = {(start, START_WIDX): depart}
    parent: dict[tuple[int, int], tuple[tuple[int, int] | None, float]] = {
        (start, START_WIDX): (None, depart)
    }
    counter = itertools.count()
    heap: list = [(depart + heuristic(start), depart, start, START_WIDX, next(counter))]
    goal_state = None

    while heap:
        f, arrival, rid, widx, _ = heapq.heappop(heap)
        if best.get((rid, widx), math.inf) < arrival - EPS:
            continue
        window = start_window if widx == START_WIDX else windows_of(rid)[widx]
        if rid == goal and (not park or math.isinf(window.end)):
            goal_state = (rid, widx)
            break
        for nbr, _, length in g.neighbors(rid):
            if allowed_nodes is not None and nbr not in allowed_nodes:
                continue
            tau_nominal = length / speed
            for nwidx, nwin in enumerate(windows_of(nbr)):
                # Crossing happens on rid right before the entry; inflate
                # once if that interval touches rid's safety3 occupancy.
                tau = tau_nominal
                entry = max(arrival + tau, nwin.start)
                if table.safety3_busy(rid, entry - tau, entry):
                    tau = tau_nominal / table.safety.slowdown_factor
                    entry = max(arrival + tau, nwin.start)
                if entry >= nwin.end - EPS:
                    continue
                if entry > window.end + EPS:  # cannot stay on rid that long
                    continue
                key = (nbr, nwidx)
                if entry < best.get(key, math.inf) - EPS:
                    best[key] = entry
                    parent[key] = ((rid, widx), entry)
                    heapq.heappush(
                        heap, (entry + heuristic(nbr), entry, nbr, nwidx, next(counter))
                    )
    if goal_state is None:
        raise NoPlan(f"no window route from {start} to {goal} for {agent}")

    # Reconstruct entries, then pair them into visits.
    chain: list[tuple[int, float]] = []
    state: tuple[int, int] | None = goal_state
    while state is not None:
        prev, entry = parent[state]
        chain.append((state[0], entry))
        state = prev
    chain.reverse()
    visits = []
    for i, (rid, entry) in enumerate(chain):
        if i + 1 < len(chain):
            exit_t = chain[i + 1][1]
        else:
            exit_t = math.inf if park else entry + min_dwell
        visits.append(Visit(resource=rid, entry=entry, exit=exit_t))
    cost = chain[-1][1]
    return AgentPlan(
        agent=agent,
        visits=visits,
        cost=cost,
        request=PlanRequest(agent, start, goal, depart, speed, park),
        layers=layers,
    )


def reserve(table: ReservationTable, plan: AgentPlan) -> ReservationTable:
    table.reserve(plan)
    return table


def release(table: ReservationTable, agent: str, after: float | None = None) -> ReservationTable:
    table.release(agent, after)
    return table


def validate(
    table: ReservationTable,
    plans: list[AgentPlan],
    humans: list | None = None,
) -> list[Violation]:
    """Pairwise soundness report over committed plans.

    Checks physical co-occupation, conflict-shadow overlap, adjacency
    and monotonicity. When human plans are given, their per-resource
    windows act as physical occupation and additionally exclude robots
    from every resource within safety-region-2 during those windows.
    """
    g = table.graph
    violations: list[Violation] = []

    by_resource: dict[int, list[tuple[float, float, str]]] = {}
    for plan in plans:
        prev_exit = None
        for i, v in enumerate(plan.visits):
            if v.entry >= v.exit:
                violations.append(
                    Violation("monotonicity", (plan.agent, plan.agent),
                              (v.resource, v.resource), (v.entry, v.exit))
                )
            if prev_exit is not None and abs(v.entry - prev_exit) > EPS:
                violations.append(
                    Violation("monotonicity", (plan.agent, plan.agent),
                              (v.resource, v.resource), (prev_exit, v.entry))
                )
            if i > 0:
                prev_rid = plan.visits[i - 1].resource
                if prev_rid != v.resource and not any(
                    nbr == v.resource for nbr, _, _ in g.neighbors(prev_rid)
                ):
                    violations.append(
                        Violation("adjacency", (plan.agent, plan.agent),
                                  (prev_rid, v.resource), (v.entry, v.entry))
                    )
            prev_exit = v.exit
            by_resource.setdefault(v.resource, []).append((v.entry, v.exit, plan.agent))

    def overlapping(a: tuple[float, float], b: tuple[float, float]) -> bool:
        return a[0] < b[1] - EPS and b[0] < a[1] - EPS

    for rid, occs in by_resource.items():
        for i in range(len(occs)):
            for j in range(i + 1, len(occs)):
                s1, e1, a1 = occs[i]
                s2, e2, a2 = occs[j]
                if a1 != a2 and overlapping((s1, e1), (s2, e2)):
                    violations.append(
                        Violation("physical", (a1, a2), (rid, rid),
                                  (max(s1, s2), min(e1, e2)))
                    )
        for crid in table.resource(rid).conflicts_with:
            if crid <= rid or crid not in by_resource:
                continue
            for s1, e1, a1 in occs:
                for s2, e2, a2 in by_resource[crid]:
                    if a1 != a2 and overlapping((s1, e1), (s2, e2)):
                        violations.append(
                            Violation("conflict", (a1, a2), (rid, crid),
                                      (max(s1, s2), min(e1, e2)))
                        )

    if humans:
        pos = g.positions
        for hp in humans:
            for rid_h, win in zip(hp.path, hp.windows):
                hx, hy = g.node_pos(rid_h)
                d = ((pos[:, 0] - hx) ** 2 + (pos[:, 1] - hy) ** 2) ** 0.5
                for rid, occs in by_resource.items():
                    if d[rid] > table.safety.r2 + EPS:
                        continue
                    kind = "human-physical" if rid == rid_h else "safety2"
                    for s, e, agent in occs:
                        if overlapping((s, e), (win.start, win.end)):
                            violations.append(
                                Violation(kind, (agent, hp.agent), (rid, rid_h),
                                          (max(s, win.start), min(e, win.end)))
                            )
    return violations


def replan_influencing_set(
    table: ReservationTable,
    request: PlanRequest,
    cap: int = 4,
    layers: tuple[str, ...] = ROBOT_LAYERS,
    extra_requests: dict[str, PlanRequest] | None = None,
) -> dict[str, AgentPlan]:
    """Plan ``request.agent`` by replanning the agents that block it most.

    Greedy loop: probe which single agent delays the request most when
    its reservations are ignored, add it to the set, and search all
    priority orderings of the set for the best global cost. When the
    whole fleet fits under the cap the final pass permutes everyone,
    which makes the search exhaustive on small instances. The winning
    ordering is committed to the table; returns the replanned plans.

    ``extra_requests`` offers agents without an active plan (parked or
    frozen ones) as replannable too, which untangles positional
    deadlocks between stuck agents.
    """
    extra_requests = extra_requests or {}

    def request_of(a: str) -> PlanRequest | None:
        if a == request.agent:
            return request
        plan = table.plans.get(a)
        if plan is not None and plan.request is not None:
            return plan.request
        return extra_requests.get(a)

    def try_cost(ignore: frozenset[str]) -> float:
        try:
            return plan_route(
                table, request.agent, request.start, request.goal,
                request.depart, request.speed, layers=layers, ignore=ignore,
                park=request.park,
            ).cost
        except NoPlan:
            return math.inf

    def evaluate(order: list[str]) -> tuple[float, dict[str, AgentPlan], list[str]] | None:
        work = table.clone()
        for a in order:
            work.release(a)
        new_plans: dict[str, AgentPlan] = {}
        for a in order:
            req = request_of(a)
            if req is None:
                return None
            try:
                p = plan_route(
                    work, req.agent, req.start, req.goal, req.depart, req.speed,
                    layers=layers, park=req.park,
                )
            except NoPlan:
                return None
            work.reserve(p)
            new_plans[a] = p
        untouched = sum(
            pl.cost for a, pl in table.plans.items() if a not in new_plans
        )
        total = untouched + sum(p.cost for p in new_plans.values())
        return (total, new_plans, list(order))

    def best_over_permutations(agents: list[str]):
        best = None
        for order in itertools.permutations(sorted(agents)):
            result = evaluate(list(order))
            if result is not None and (best is None or result[0] < best[0] - EPS):
                best = result
        return best

    members = [request.agent]
    candidates = sorted(
        {a for a in table.plans if a != request.agent and table.plans[a].request}
        | {a for a in extra_requests if a != request.agent}
    )
    best = evaluate(members)

    while len(members) < cap and candidates:
        base = try_cost(frozenset(members))
        probes = []
        for b in candidates:
            cost_b = try_cost(frozenset(members) | {b})
            if math.isinf(base):
                delay = math.inf if not math.isinf(cost_b) else 0.0
            else:
                delay = base - cost_b
            probes.append((delay, b))
        probes.sort(key=lambda t: (-t[0], t[1]))
        delay, blocker = probes[0]
        if not delay > EPS:
            break
        members.append(blocker)
        candidates.remove(blocker)
        result = best_over_permutations(members)
        if result is not None and (best is None or result[0] < best[0] - EPS):
            best = result

    # Small fleets get a full ordering search, which makes the result
    # exhaustive-optimal there; kept only on strict improvement so an
    # unobstructed request still replans nobody else.
    everyone = [request.agent] + sorted(set(candidates) | set(members[1:]))
    if len(everyone) <= cap:
        result = best_over_permutations(everyone)
        if result is not None and (best is None or result[0] < best[0] - EPS):
            best = result

    if best is None:
        raise NoPlan(f"no consistent ordering found for {request.agent} (cap={cap})")

    # Recommit in the winning priority order: the standing-start
    # exemption makes reservation feasibility order-sensitive.
    _, new_plans, order = best
    for a in new_plans:
        table.release(a)
    for a in order:
        table.reserve(new_plans[a])
    return new_plans
