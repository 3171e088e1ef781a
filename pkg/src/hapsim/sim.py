"""Deterministic warehouse world: robots, jobs, humans, and safety.

The loop is single-threaded with a fixed timestep. All randomness comes
from named child generators of one master seed, and every tick follows
the same phase order (jobs, humans, intention, robots, safety,
bookkeeping), so identical configurations replay bit-identically.

Robots execute the time-window plans the fleet planner reserved for
them; humans walk freely and are tracked by the intention pipeline.
The three experiment modes differ only in how deviation reports are
handled: not at all (nhir), with the constant-velocity baseline (shir),
or with the full belief pipeline (phir).
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field

from . import human_aware as hap
from . import intention as hir
from .graph import (
    NodeKind,
    WarehouseGraph,
    all_pairs_distances,
    load_graph,
    save_graph,
)
from .human_aware import RobotContext, VelocityBand
from .intention import DeviationConfig, GoalSet, HirConfig, IntentionMonitor
from .layouts import demo_layout, station_queue
from .planner import (
    NoPlan,
    PlanRequest,
    ReservationTable,
    SafetyRegionConfig,
    plan_route,
    replan_influencing_set,
)

NHIR = "nhir"
SHIR = "shir"
PHIR = "phir"
MODES = (NHIR, SHIR, PHIR)

# robot planning states
TO_RACK = "to_rack"
RACK_TO_QUEUE = "rack_to_queue"
IN_QUEUE = "in_queue"
RETURN_RACK = "return_rack"
TO_CHARGER = "to_charger"


class ConfigError(Exception):
    pass


class UnknownWorker(Exception):
    pass


@dataclass
class SimConfig:
    seed: int = 1
    dt: float = 0.1
    duration: float = 300.0
    mode: str = PHIR
    n_robots: int = 10
    n_humans: int = 3
    robot_speed: float = 1.2
    n_racks: int = 36
    service_time: float = 10.0
    human_dwell: float = 5.0
    retry_period: float = 3.0
    reaction_cooldown: float = 4.0
    stop_wait: float = 4.0
    encounter_recovery: float = 5.0
    deviation_interval: float = 40.0
    lag_tolerance: float = 1.5
    shir_horizon: int = 10
    band: VelocityBand = field(default_factory=VelocityBand)
    safety: SafetyRegionConfig = field(default_factory=SafetyRegionConfig)
    deviation: DeviationConfig = field(default_factory=DeviationConfig)
    hir: HirConfig = field(default_factory=HirConfig)

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")


@dataclass
class Metrics:
    robot_deliveries: int = 0
    human_deliveries: int = 0
    encounters: int = 0
    sim_time: float = 0.0

    @property
    def total_deliveries(self) -> int:
        return self.robot_deliveries + self.human_deliveries

    @property
    def encounters_per_min(self) -> float:
        if self.sim_time <= 0:
            return 0.0
        return self.encounters / (self.sim_time / 60.0)

    def to_payload(self) -> dict:
        return {
            "robot_deliveries": self.robot_deliveries,
            "human_deliveries": self.human_deliveries,
            "total_deliveries": self.total_deliveries,
            "encounters": self.encounters,
            "encounters_per_min": self.encounters_per_min,
            "sim_time": self.sim_time,
        }


@dataclass
class Job:
    rack: int
    station: int  # station node id


class Robot:
    def __init__(self, rid: str, node: int, speed: float, g: WarehouseGraph):
        self.id = rid
        self.speed = speed
        self.state = hap.IDLE
        self.planning_state: str | None = None
        self.carried_rack: int | None = None
        self.job: Job | None = None
        self.plan = None
        self.plan_clock = 0.0
        self.resource = node
        self.home_charger = node
        self.body = list(g.node_pos(node))
        self.halted = False
        self.retry_at = 0.0
        self.leg_goal: int | None = None
        self.service_until: float | None = None
        self.fail_count = 0
        self._near: dict[str, bool] = {}

    def schedule_position(self, g: WarehouseGraph) -> tuple[float, float]:
        """Where the plan says the robot should be at its plan clock."""
        if self.plan is None:
            return g.node_pos(self.resource)
        t = self.plan_clock
        visits = self.plan.visits
        for i, v in enumerate(visits):
            nxt = visits[i + 1] if i + 1 < len(visits) else None
            if nxt is None or t < nxt.entry:
                if nxt is None:
                    return g.node_pos(v.resource)
                p0 = g.node_pos(v.resource)
                p1 = g.node_pos(nxt.resource)
                length = math.dist(p0, p1)
                tau = length / self.speed
                cross_start = nxt.entry - tau
                if t <= cross_start:
                    return p0
                frac = min(1.0, (t - cross_start) / tau)
                return (p0[0] + (p1[0] - p0[0]) * frac, p0[1] + (p1[1] - p0[1]) * frac)
        return g.node_pos(visits[-1].resource)

    def attributed_resource(self) -> int:
        if self.plan is None:
            return self.resource
        t = self.plan_clock
        current = self.plan.visits[0].resource
        for v in self.plan.visits:
            if v.entry <= t + 1e-9:
                current = v.resource
            else:
                break
        return current

    def arrived(self) -> bool:
        return self.plan is not None and self.plan_clock >= self.plan.visits[-1].entry - 1e-9

    def context(self) -> RobotContext:
        return RobotContext(
            id=self.id,
            resource=self.attributed_resource(),
            goal=self.leg_goal,
            speed=self.speed,
            state=self.state,
        )


class Station:
    """Two-slot pipeline: one robot serving, one waiting two nodes back.

    The wait slot sits outside the station node's conflict region, so
    both slots can be held simultaneously; deeper queues would deadlock
    against the conflict shadows of parked robots.
    """

    def __init__(self, node: int, queue_nodes: list[int]):
        self.node = node
        self.queue_nodes = queue_nodes  # nearest-to-station first
        self.serving: str | None = None
        self.waiting: str | None = None

    @property
    def wait_node(self) -> int:
        return self.queue_nodes[1] if len(self.queue_nodes) > 1 else self.queue_nodes[0]


@dataclass
class HumanSpec:
    id: str
    start: int
    controller: str = "scripted"  # or "external"
    deviations: list[tuple[float, int]] = field(default_factory=list)


class Human:
    def __init__(self, spec: HumanSpec, g: WarehouseGraph, hir_graph: WarehouseGraph,
                 speed: float, goal_markers: list[int], cfg: SimConfig):
        self.id = spec.id
        self.controller = spec.controller
        self.speed = speed
        self.body = list(g.node_pos(spec.start))
        self.objective: int | None = None
        self.route: list[int] = []
        self.assigned_path: list[int] = [spec.start]
        self.monitor = IntentionMonitor(
            hir_graph,
            GoalSet(auxiliary_goals=goal_markers, terminal_goal=spec.start),
            [spec.start],
            tuple(self.body),
            cfg.deviation,
            cfg.hir,
        )
        self.dwell_until: float | None = None
        self.stopped_until: float | None = None
        self.pending_deviations = sorted(spec.deviations)
        self.errand: int | None = None  # secret destination while deviating
        self.last_report: hir.HirReport | None = None
        self.last_reaction_at = -math.inf
        self.prev_body = tuple(self.body)
        self.steer: dict | None = None
        self.next_auto_deviation = math.inf

    def position(self) -> tuple[float, float]:
        return (self.body[0], self.body[1])


def _nearest(g: WarehouseGraph, p) -> int:
    from .graph import nearest_nodes

    return nearest_nodes(g, tuple(p), 1)[0][0]


class World:
    """Owns all mutable simulation state; advanced by ``step``."""

    def __init__(self, cfg: SimConfig, graph: WarehouseGraph | None = None,
                 humans: list[HumanSpec] | None = None, collect_log: bool = False):
        self.cfg = cfg
        self.g = graph or demo_layout()
        self.F = all_pairs_distances(self.g)
        # Separate graph copy for intention distances so edge blocking
        # near stationary robots never disturbs fleet planning.
        self.hir_graph = load_graph(save_graph(self.g))
        self.hir_F = all_pairs_distances(self.hir_graph)
        self._stationary_blocked: frozenset[int] = frozenset()
        self._stationary_check_at = 0.0

        self.table = ReservationTable(self.g, cfg.safety)
        self.tick = 0
        self.time = 0.0
        self.metrics = Metrics()
        self.mode = cfg.mode
        self.collect_log = collect_log
        self.log: list[dict] = []
        self.snapshot_listener = None

        master = random.Random(cfg.seed)
        self.rng_jobs = random.Random(master.getrandbits(64))
        self.rng_humans = random.Random(master.getrandbits(64))
        self.rng_deviations = random.Random(master.getrandbits(64))

        self.road_nodes = sorted(
            n.id for n in self.g.nodes if n.kind in (NodeKind.ROAD, NodeKind.GOAL_MARKER)
        )
        self.goal_markers = sorted(self.g.nodes_of_kind(NodeKind.GOAL_MARKER))
        self.storage_slots = sorted(self.g.nodes_of_kind(NodeKind.STORAGE))
        chargers = sorted(self.g.nodes_of_kind(NodeKind.CHARGING_STATION))
        station_nodes = sorted(self.g.nodes_of_kind(NodeKind.PICKING_STATION))
        self.stations = {s: Station(s, station_queue(self.g, s)) for s in station_nodes}
        # picking spots: road nodes adjacent to a storage slot
        spots = set()
        for s in self.storage_slots:
            for v, _, _ in self.g.neighbors(s):
                if self.g.nodes[v].kind == NodeKind.ROAD:
                    spots.add(v)
        self.work_spots = sorted(spots) or list(self.road_nodes)

        # racks fill storage slots round-robin from a seeded shuffle
        slots = list(self.storage_slots)
        self.rng_jobs.shuffle(slots)
        self.racks: dict[int, int | str] = {}
        for i in range(min(cfg.n_racks, len(slots))):
            self.racks[i] = slots[i]

        self.robots: list[Robot] = []
        if cfg.n_robots > len(chargers):
            raise ConfigError("not enough chargers for the robot fleet")
        for i in range(cfg.n_robots):
            r = Robot(f"r{i}", chargers[i], cfg.robot_speed, self.g)
            self.table.freeze(r.id, r.home_charger, 0.0)
            self.robots.append(r)

        self.humans: list[Human] = []
        specs = humans
        if specs is None:
            starts = [self.work_spots[i * 7 % len(self.work_spots)]
                      for i in range(cfg.n_humans)]
            specs = [HumanSpec(id=f"h{i}", start=starts[i]) for i in range(cfg.n_humans)]
        for spec in specs:
            speed = self.rng_humans.uniform(cfg.band.v_min * 1.05, cfg.band.v_max * 0.95)
            h = Human(spec, self.g, self.hir_graph, speed, self.goal_markers, cfg)
            if spec.controller == "scripted":
                h.next_auto_deviation = self._next_deviation_time(0.0)
            else:
                h.next_auto_deviation = math.inf
            self.humans.append(h)

        self._event("config", {"seed": cfg.seed, "mode": cfg.mode,
                               "robots": cfg.n_robots, "humans": len(self.humans),
                               "duration": cfg.duration, "dt": cfg.dt})

    # -- infrastructure -----------------------------------------------------

    def _event(self, kind: str, payload: dict) -> None:
        if self.collect_log:
            self.log.append({"tick": self.tick, "kind": kind, "payload": payload})

    def _next_deviation_time(self, now: float) -> float:
        spread = self.rng_deviations.uniform(0.6, 1.4)
        return now + self.cfg.deviation_interval * spread

    def human_by_id(self, hid: str) -> Human:
        for h in self.humans:
            if h.id == hid:
                return h
        raise UnknownWorker(hid)

    def inject_deviation(self, worker: str, at: float, toward: int) -> None:
        h = self.human_by_id(worker)
        h.pending_deviations.append((at, toward))
        h.pending_deviations.sort()

    def fleet_contexts(self) -> list[RobotContext]:
        return [r.context() for r in self.robots]

    def _sync_from_contexts(self, contexts: list[RobotContext],
                            plans: dict[str, object]) -> None:
        by_id = {r.id: r for r in self.robots}
        for ctx in contexts:
            robot = by_id[ctx.id]
            if ctx.state != robot.state:
                robot.state = ctx.state
                if ctx.state in (hap.INTERRUPTED, hap.FAILED):
                    robot.plan = None
                    robot.resource = ctx.resource
                    robot.retry_at = self.time + self.cfg.retry_period
                    self._event("robot_state", {"id": robot.id, "state": ctx.state})
        for rid, plan in plans.items():
            robot = by_id[rid]
            robot.plan = plan
            robot.plan_clock = plan.visits[0].entry
            robot.state = hap.BUSY
            robot.resource = plan.visits[0].resource

    # -- job lifecycle ------------------------------------------------------

    def _racks_on_floor(self) -> list[int]:
        return sorted(r for r, loc in self.racks.items() if isinstance(loc, int))

    def _free_slots(self) -> list[int]:
        used = {loc for loc in self.racks.values() if isinstance(loc, int)}
        return [s for s in self.storage_slots if s not in used]

    def _next_job(self) -> Job | None:
        racks = [r for r in self._racks_on_floor()
                 if not any(rb.job and rb.job.rack == r for rb in self.robots)]
        if not racks:
            return None
        open_stations = sorted(
            sid for sid, s in self.stations.items() if s.waiting is None
        )
        if not open_stations:
            return None
        rack = self.rng_jobs.choice(racks)
        station = self.rng_jobs.choice(open_stations)
        return Job(rack=rack, station=station)

    def _plan_leg(self, robot: Robot, goal: int, *, loaded: bool) -> bool:
        """Plan and reserve the robot's next leg; False when stuck."""
        start = robot.attributed_resource()
        robot.leg_goal = goal
        allowed = None
        if loaded:
            rack_nodes = {loc for rid, loc in self.racks.items()
                          if isinstance(loc, int) and rid != robot.carried_rack}
            allowed = set(range(self.g.n_nodes)) - rack_nodes
            allowed.add(start)
            allowed.add(goal)
        self.table.release(robot.id)
        try:
            plan = plan_route(self.table, robot.id, start, goal, self.time,
                              robot.speed, allowed_nodes=allowed)
            self.table.reserve(plan)
        except NoPlan:
            robot.fail_count += 1
            if robot.fail_count >= 3 and allowed is None:
                # offer stuck agents as replannable so positional
                # deadlocks between frozen robots untangle
                extra = {
                    r.id: PlanRequest(r.id, r.attributed_resource(), r.leg_goal,
                                      self.time, r.speed)
                    for r in self.robots
                    if (r.id != robot.id and r.leg_goal is not None
                        and r.state in (hap.FAILED, hap.INTERRUPTED))
                }
                try:
                    plans = replan_influencing_set(
                        self.table,
                        PlanRequest(robot.id, start, goal, self.time, robot.speed),
                        extra_requests=extra,
                    )
                except NoPlan:
                    plans = None
                if plans:
                    by_id = {r.id: r for r in self.robots}
                    for rid, p in plans.items():
                        other = by_id[rid]
                        other.plan = p
                        other.plan_clock = p.visits[0].entry
                        other.state = hap.BUSY
                        other.fail_count = 0
                        other.retry_at = 0.0
                    return True
            self.table.freeze(robot.id, start, self.time)
            robot.plan = None
            robot.state = hap.FAILED
            robot.retry_at = self.time + self.cfg.retry_period
            if robot.fail_count >= 6:
                self._abandon_leg(robot)
            return False
        robot.plan = plan
        robot.plan_clock = plan.visits[0].entry
        robot.state = hap.BUSY
        robot.fail_count = 0
        return True

    def _release_claims(self, robot: Robot) -> None:
        for station in self.stations.values():
            if station.waiting == robot.id:
                station.waiting = None
            if station.serving == robot.id:
                station.serving = None

    def _pick_charger(self, robot: Robot, exclude: int | None = None) -> int:
        taken = {r.attributed_resource() for r in self.robots if r.id != robot.id}
        options = [
            c for c in sorted(self.g.nodes_of_kind(NodeKind.CHARGING_STATION))
            if c not in taken and c != exclude
        ]
        if not options:
            return robot.home_charger
        here = robot.attributed_resource()
        return min(options, key=lambda c: (self.F.dist(here, c), c))

    def _abandon_leg(self, robot: Robot) -> None:
        """Persistent planning failure: change destination instead."""
        robot.fail_count = 0
        state = robot.planning_state
        self._event("leg_abandoned", {"robot": robot.id, "state": state,
                                      "goal": robot.leg_goal})
        if state == TO_RACK:
            self._release_claims(robot)
            robot.job = None
            robot.planning_state = TO_CHARGER
            robot.leg_goal = self._pick_charger(robot)
        elif state in (RACK_TO_QUEUE, IN_QUEUE) and robot.job is not None:
            current = robot.job.station
            open_stations = sorted(
                sid for sid, stn in self.stations.items()
                if stn.waiting is None and sid != current
            )
            self._release_claims(robot)
            if open_stations:
                station = self.rng_jobs.choice(open_stations)
                robot.job = Job(rack=robot.job.rack, station=station)
                self.stations[station].waiting = robot.id
                robot.planning_state = RACK_TO_QUEUE
                robot.leg_goal = self.stations[station].wait_node
            else:
                free = self._free_slots()
                if free:
                    robot.job = None
                    robot.planning_state = RETURN_RACK
                    robot.leg_goal = self.rng_jobs.choice(free)
        elif state == RETURN_RACK:
            free = [n for n in self._free_slots() if n != robot.leg_goal]
            if free:
                robot.leg_goal = self.rng_jobs.choice(free)
        elif state == TO_CHARGER:
            robot.leg_goal = self._pick_charger(robot, exclude=robot.leg_goal)

    def _advance_job(self, robot: Robot) -> None:
        """Robot finished a leg (or needs its first one)."""
        cfg = self.cfg
        if robot.planning_state == TO_RACK:
            rack = robot.job.rack
            if self.racks.get(rack) == robot.attributed_resource():
                self.racks[rack] = robot.id
                robot.carried_rack = rack
                robot.planning_state = RACK_TO_QUEUE
                self._plan_leg(robot, self.stations[robot.job.station].wait_node,
                               loaded=True)
            else:  # rack was taken elsewhere; abandon the job
                self._release_claims(robot)
                robot.job = None
                robot.planning_state = TO_CHARGER
                self._plan_leg(robot, robot.home_charger, loaded=False)
        elif robot.planning_state == RACK_TO_QUEUE:
            robot.planning_state = IN_QUEUE
            self._queue_step(robot)
        elif robot.planning_state == IN_QUEUE:
            self._queue_step(robot)
        elif robot.planning_state == RETURN_RACK:
            slot = robot.leg_goal
            self.racks[robot.carried_rack] = slot
            robot.carried_rack = None
            robot.job = None
            robot.planning_state = TO_CHARGER
            if self._plan_leg(robot, robot.home_charger, loaded=False):
                robot.state = hap.FREE
        elif robot.planning_state == TO_CHARGER:
            robot.planning_state = None
            robot.state = hap.IDLE
            robot.plan = None
            robot.resource = robot.attributed_resource()

    def _queue_step(self, robot: Robot) -> None:
        """Advance through the station pipeline; serve at the head."""
        station = self.stations[robot.job.station]
        here = robot.attributed_resource()
        if here == station.node:
            if robot.service_until is None:
                robot.service_until = self.time + self.cfg.service_time
                self.metrics.robot_deliveries += 1
                self._event("delivery", {"kind": "robot", "robot": robot.id,
                                         "rack": robot.job.rack,
                                         "station": station.node})
            elif self.time >= robot.service_until:
                robot.service_until = None
                if station.serving == robot.id:
                    station.serving = None
                free = self._free_slots()
                if free:
                    target = self.rng_jobs.choice(free)
                    robot.planning_state = RETURN_RACK
                    self._plan_leg(robot, target, loaded=True)
                else:
                    robot.planning_state = TO_CHARGER
                    self._plan_leg(robot, robot.home_charger, loaded=True)
            return
        if here == station.wait_node and station.serving in (None, robot.id):
            station.serving = robot.id
            if station.waiting == robot.id:
                station.waiting = None
            self._plan_leg(robot, station.node, loaded=True)

    def _dispatch_jobs(self) -> None:
        for robot in self.robots:
            if robot.state != hap.IDLE or robot.job is not None:
                continue
            job = self._next_job()
            if job is None:
                continue
            loc = self.racks[job.rack]
            robot.job = job
            robot.planning_state = TO_RACK
            if self._plan_leg(robot, loc, loaded=False):
                self.stations[job.station].waiting = robot.id
                self._event("job", {"robot": robot.id, "rack": job.rack,
                                    "station": job.station})
            else:
                robot.job = None
                robot.planning_state = None

    def _retry_stuck_robots(self) -> None:
        for robot in self.robots:
            if robot.state not in (hap.FAILED, hap.INTERRUPTED):
                continue
            if self.time < robot.retry_at:
                continue
            if any(math.dist(tuple(robot.body), h.position())
                   <= self.cfg.safety.r1 + 0.05 for h in self.humans):
                robot.retry_at = self.time + self.cfg.retry_period
                continue
            if robot.job is None and robot.planning_state is None:
                robot.state = hap.IDLE
                continue
            goal = robot.leg_goal if robot.leg_goal is not None else robot.home_charger
            loaded = robot.carried_rack is not None
            self._plan_leg(robot, goal, loaded=loaded)

    # -- humans ---------------------------------------------------------------

    def _assign_human_task(self, h: Human) -> None:
        """Pick the next work spot and plan it with human precedence."""
        current = _nearest(self.g, h.body)
        choices = [n for n in self.work_spots
                   if n != current and self.F.dist(current, n) > 3.0]
        if not choices:
            choices = [n for n in self.work_spots if n != current]
        target = self.rng_humans.choice(choices)
        contexts = self.fleet_contexts()
        outcome = hap.plan_human(
            self.table, self.g, self.F, h.id, current, target,
            self.cfg.band, self.time, contexts, self.cfg.human_dwell,
        )
        self._sync_from_contexts(contexts, outcome.robot_plans)
        self._event("hap_outcome", outcome.to_payload())
        if outcome.kind in (hap.NEW_HUMAN_PLAN, hap.EVASIVE_MANEUVER):
            path = outcome.human_plan.path
            h.objective = target
            h.assigned_path = path
            h.route = list(path)
            h.monitor.reassign(path, h.position())
            h.deviating_secretly = False
        else:
            # nowhere to go right now; idle briefly and try again
            h.objective = None
            h.dwell_until = self.time + self.cfg.retry_period

    def _stationary_robots(self) -> list[Robot]:
        """Robots that are physical walls for a walking human.

        Moving robots are not dodged: the worker trusts the robots'
        safety stop, which is what produces encounter events.
        """
        out = []
        for r in self.robots:
            if (r.halted or r.plan is None or r.service_until is not None
                    or r.state in (hap.IDLE, hap.INTERRUPTED, hap.FAILED)):
                out.append(r)
        return out

    def _human_blocked(self, h: Human, node: int) -> bool:
        px, py = self.g.node_pos(node)
        for r in self._stationary_robots():
            if math.dist((px, py), tuple(r.body)) <= 0.45:
                return True
        return False

    def _reroute_human(self, h: Human, objective: int) -> None:
        current = _nearest(self.g, h.body)
        blocked = {r.attributed_resource() for r in self._stationary_robots()}
        blocked.discard(current)
        path = hap.static_path(self.g, current, objective, blocked)
        if path is None:
            h.route = []  # wait in place until something moves
        else:
            h.route = path

    def _walk_human(self, h: Human) -> None:
        if not h.route:
            return
        target_node = h.route[0]
        if self._human_blocked(h, target_node):
            self._reroute_human(h, h.objective if h.objective is not None
                                else h.route[-1])
            if not h.route:
                return
            target_node = h.route[0]
        tx, ty = self.g.node_pos(target_node)
        dx, dy = tx - h.body[0], ty - h.body[1]
        dist = math.hypot(dx, dy)
        step = h.speed * self.cfg.dt
        if dist <= step:
            h.body[0], h.body[1] = tx, ty
            h.route.pop(0)
        else:
            h.body[0] += dx / dist * step
            h.body[1] += dy / dist * step

    def _step_human(self, h: Human) -> None:
        cfg = self.cfg
        h.prev_body = tuple(h.body)
        if h.controller == "external":
            if h.objective is None:
                self._assign_human_task(h)
            self._apply_steer(h)
            return
        if h.stopped_until is not None:
            if self.time < h.stopped_until:
                return
            h.stopped_until = None
            target = h.errand if h.errand is not None else h.objective
            if target is not None:
                self._reroute_human(h, target)
        if h.dwell_until is not None:
            if self.time < h.dwell_until:
                return
            h.dwell_until = None
            self._assign_human_task(h)
            return
        if h.objective is None:
            self._assign_human_task(h)
            return
        # pending deviation triggers (scenario-injected or automatic)
        trigger = None
        if h.pending_deviations and self.time >= h.pending_deviations[0][0]:
            trigger = h.pending_deviations.pop(0)[1]
        elif self.time >= h.next_auto_deviation and h.errand is None:
            candidates = [n for n in self.road_nodes
                          if self.F.dist(_nearest(self.g, h.body), n) > 4.0]
            if candidates:
                trigger = self.rng_deviations.choice(candidates)
            h.next_auto_deviation = self._next_deviation_time(self.time)
        if trigger is not None:
            h.errand = trigger
            self._reroute_human(h, trigger)
            self._event("deviation_injected", {"worker": h.id, "toward": trigger})

        destination = h.errand if h.errand is not None else h.objective
        if destination is None:
            return
        arrived = (not h.route) and math.dist(h.body, self.g.node_pos(destination)) <= 0.3
        if arrived:
            self.metrics.human_deliveries += 1
            self._event("delivery", {"kind": "human", "worker": h.id,
                                     "node": destination})
            h.dwell_until = self.time + cfg.human_dwell
            h.errand = None
            h.objective = None  # next task assigned after the dwell
            return
        if not h.route:
            self._reroute_human(h, destination)
        self._walk_human(h)

    def _apply_steer(self, h: Human) -> None:
        cfg = self.cfg
        step = cfg.band.v_max * cfg.dt
        if not h.steer:
            return
        kind = h.steer.get("kind")
        if kind == "dir":
            dx, dy = h.steer["dx"], h.steer["dy"]
            norm = math.hypot(dx, dy)
            if norm < 1e-9:
                return
            h.body[0] += dx / norm * step
            h.body[1] += dy / norm * step
        elif kind == "target":
            tx, ty = h.steer["x"], h.steer["y"]
            dx, dy = tx - h.body[0], ty - h.body[1]
            dist = math.hypot(dx, dy)
            if dist <= step:
                h.body[0], h.body[1] = tx, ty
                h.steer = None
            else:
                h.body[0] += dx / dist * step
                h.body[1] += dy / dist * step

    # -- intention & reactions ------------------------------------------------

    def _refresh_hir_blocking(self) -> None:
        """Block road edges next to long-stationary robots for the HIR
        distance matrix (debounced: at most once a second)."""
        if self.time < self._stationary_check_at:
            return
        self._stationary_check_at = self.time + 1.0
        blocked = set()
        for r in self.robots:
            if r.state in (hap.IDLE, hap.FAILED, hap.INTERRUPTED) or r.halted:
                node = r.attributed_resource()
                for _, eid, _ in self.hir_graph._adjacency[node]:
                    blocked.add(eid)
        frozen = frozenset(blocked)
        if frozen == self._stationary_blocked:
            return
        self._stationary_blocked = frozen
        self.hir_graph.blocked = set(frozen)
        self.hir_graph.generation += 1
        self.hir_F = all_pairs_distances(self.hir_graph)
        self._event("hir_distances_recomputed",
                    {"blocked_edges": sorted(frozen)})

    def _mode_dispatch(self, h: Human, report: hir.HirReport | None) -> None:
        if report is None or not report.deviating:
            return
        self._event("hir_report", {"worker": h.id, **report.to_payload()})
        if self.mode == NHIR:
            return
        if self.mode == SHIR:
            try:
                path = hir.shir_predict(h.prev_body, tuple(h.body),
                                        self.g, self.cfg.shir_horizon)
            except hir.ZeroDisplacement:
                return
            if len(path) < 2:
                return
            report = hir.HirReport(
                deviating=True,
                candidate_paths=[hir.CandidatePath(goal=path[-1], probability=1.0,
                                                   path=path)],
                original_goal_plausible=False,
            )
        if report.original_goal_plausible:
            return
        if not report.candidate_paths:
            return
        if self.time - h.last_reaction_at < self.cfg.reaction_cooldown:
            return
        h.last_reaction_at = self.time
        contexts = self.fleet_contexts()
        outcome = hap.react_to_hir(
            self.table, self.g, self.F, report, h.id, h.position(),
            self.cfg.band, self.time, contexts,
        )
        self._sync_from_contexts(contexts, outcome.robot_plans)
        self._event("hap_outcome", outcome.to_payload())
        if outcome.kind == hap.NEW_HUMAN_PLAN:
            path = outcome.human_plan.path
            destination = h.errand if h.errand is not None else h.objective
            accept = False
            if destination is not None:
                here = _nearest(self.g, h.body)
                # accept guidance that makes progress toward the errand
                accept = (path[-1] == destination
                          or self.F.dist(path[-1], destination)
                          < self.F.dist(here, destination) - 0.5)
            if accept:
                h.assigned_path = path
                h.route = list(path)
                h.monitor.reassign(path, h.position())
            # otherwise the worker keeps its own course and the alarm
            # stays up; robots were still routed around the segment
        elif outcome.kind == hap.STOP_HUMAN:
            h.stopped_until = self.time + self.cfg.stop_wait
            h.route = []
            node = _nearest(self.g, h.body)
            self.table.occupy_safety(h.id, node, self.time,
                                     self.time + self.cfg.stop_wait)
            h.last_reaction_at = self.time + self.cfg.stop_wait
            self._event("stop_command", {"worker": h.id, "until": h.stopped_until})

    # -- robots -----------------------------------------------------------------

    def _interrupt_robot(self, robot: Robot, reason: str, retry_delay: float) -> None:
        """Drop the robot's future reservations and park it in place."""
        self.table.release(robot.id, after=self.time)
        self.table.plans.pop(robot.id, None)
        robot.resource = robot.attributed_resource()
        self.table.freeze(robot.id, robot.resource, self.time)
        robot.plan = None
        robot.state = hap.INTERRUPTED
        robot.retry_at = self.time + retry_delay
        self._event("robot_state", {"id": robot.id, "state": "interrupted",
                                    "reason": reason})

    def _step_robot(self, robot: Robot) -> None:
        cfg = self.cfg
        if robot.state not in (hap.BUSY, hap.FREE):
            return
        if robot.plan is None:
            return
        near_r1 = any(
            math.dist(tuple(robot.body), h.position()) <= cfg.safety.r1
            for h in self.humans
        )
        robot.halted = near_r1
        lag = self.time - robot.plan_clock
        if near_r1:
            if lag > cfg.lag_tolerance:
                # a long safety stop invalidates the schedule; requeue so
                # the rest of the fleet sees this robot parked
                self._interrupt_robot(robot, "safety-stop", cfg.retry_period)
            return
        rate = 1.0
        if any(math.dist(tuple(robot.body), h.position()) <= cfg.safety.r3
               for h in self.humans):
            rate = cfg.safety.slowdown_factor
        new_clock = robot.plan_clock + cfg.dt * rate
        nxt = None
        for v in robot.plan.visits:
            if v.entry > robot.plan_clock + 1e-9:
                nxt = v
                break
        if nxt is not None and new_clock >= nxt.entry - 1e-9:
            from .planner import PHYSICAL as _PHY

            for w in self.table.resource(nxt.resource).timelines[_PHY]:
                if (w.owner != robot.id and math.isinf(w.end)
                        and w.start <= self.time):
                    # someone is parked on the next resource: do not
                    # drive through them, replan from here
                    self._interrupt_robot(robot, "blocked", cfg.retry_period)
                    return
        robot.plan_clock = new_clock
        target = robot.schedule_position(self.g)
        step = robot.speed * cfg.dt
        dx, dy = target[0] - robot.body[0], target[1] - robot.body[1]
        dist = math.hypot(dx, dy)
        if dist <= step:
            robot.body[0], robot.body[1] = target
        else:
            robot.body[0] += dx / dist * step
            robot.body[1] += dy / dist * step
        robot.resource = robot.attributed_resource()
        if robot.arrived() and dist <= step:
            if robot.planning_state == IN_QUEUE and robot.service_until is not None:
                self._queue_step(robot)
            else:
                self._advance_job(robot)
        elif lag > cfg.lag_tolerance:
            self._interrupt_robot(robot, "lag", 0.0)

    def _safety_bookkeeping(self) -> None:
        cfg = self.cfg
        for robot in self.robots:
            for h in self.humans:
                key = (robot.id, h.id)
                close = math.dist(tuple(robot.body), h.position()) <= cfg.safety.r1
                was = robot._near.get(h.id, False)
                if close and not was:
                    self.metrics.encounters += 1
                    self._event("encounter", {"robot": robot.id, "worker": h.id})
                    if robot.state in (hap.BUSY, hap.FREE) and robot.plan is not None:
                        # the safety stop desynchronizes the plan; requeue
                        self._interrupt_robot(robot, "encounter",
                                              self.cfg.encounter_recovery)
                robot._near[h.id] = close

    # -- main loop ----------------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "tick": self.tick,
            "time": round(self.time, 6),
            "mode": self.mode,
            "metrics": self.metrics.to_payload(),
            "robots": [
                {
                    "id": r.id,
                    "x": round(r.body[0], 4),
                    "y": round(r.body[1], 4),
                    "state": r.state,
                    "planning_state": r.planning_state,
                    "carried_rack": r.carried_rack,
                    "halted": r.halted,
                }
                for r in self.robots
            ],
            "humans": [
                {
                    "id": h.id,
                    "x": round(h.body[0], 4),
                    "y": round(h.body[1], 4),
                    "deviating": h.monitor.deviating,
                    "stopped": h.stopped_until is not None,
                    "current_node": h.monitor.tracker.current_node,
                    "next_node": h.monitor.tracker.next_node,
                    "belief": [round(b, 6) for b in h.monitor.hmm.belief.tolist()],
                    "goals": h.monitor.goal_set.all_goals,
                    "candidates": [
                        {"goal": c.goal, "probability": round(c.probability, 6),
                         "path": c.path}
                        for c in (h.last_report.candidate_paths if h.last_report else [])
                    ],
                    "assigned_path": h.assigned_path,
                }
                for h in self.humans
            ],
            "racks": {str(k): v if isinstance(v, int) else None
                      for k, v in sorted(self.racks.items())},
        }

    def step(self) -> None:
        self._dispatch_jobs()
        self._retry_stuck_robots()
        for h in self.humans:
            self._step_human(h)
        self._refresh_hir_blocking()
        for h in self.humans:
            report = h.monitor.observe(h.position(), self.hir_F)
            if report is not None:
                h.last_report = report
            elif not h.monitor.deviating:
                h.last_report = None
            self._mode_dispatch(h, report)
        for robot in self.robots:
            self._step_robot(robot)
        self._safety_bookkeeping()
        if self.tick % 50 == 0:
            self.table.prune(self.time - 5.0)
        self.tick += 1
        self.time = self.tick * self.cfg.dt
        self.metrics.sim_time = self.time
        snap = None
        if self.collect_log:
            snap = self.snapshot()
            self._event("snapshot", snap)
        if self.snapshot_listener is not None:
            self.snapshot_listener(snap or self.snapshot())

    def run(self) -> Metrics:
        steps = int(round(self.cfg.duration / self.cfg.dt))
        for _ in range(steps):
            self.step()
        self._event("metrics", self.metrics.to_payload())
        return self.metrics


def run_scenario(cfg: SimConfig, graph: WarehouseGraph | None = None,
                 humans: list[HumanSpec] | None = None,
                 collect_log: bool = False) -> tuple[Metrics, list[dict]]:
    world = World(cfg, graph=graph, humans=humans, collect_log=collect_log)
    metrics = world.run()
    return metrics, world.log


def log_lines(events: list[dict]) -> list[str]:
    """Canonical byte-stable serialization of a replay log."""
    return [json.dumps(e, sort_keys=True, separators=(",", ":")) for e in events]
