"""Human intention recognition.

Two cooperating parts:

- Deviation detection: capture-radius tracking of the worker along its
  assigned path and an elliptical allowed area around the current path
  segment, with a consecutive-cycle debounce.
- Goal-belief tracking: each significant displacement is scored against
  every goal by comparing the goal-modulated distance of the worker's
  actual position with the modulated distances of same-length moves in
  other directions, and the resulting observation stream feeds a small
  HMM whose states are the goals. The belief drives which predicted
  paths get reported for replanning.

A constant-velocity baseline predictor (minimal heading change) is
included for benchmarking against the belief-based pipeline.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .graph import DistanceMatrix, Unreachable, WarehouseGraph, nearest_nodes, shortest_path

log = logging.getLogger(__name__)

Position = tuple[float, float]


class IntentionError(Exception):
    pass


class ZeroDisplacement(IntentionError):
    pass


class DimensionMismatch(IntentionError):
    pass


class DeadEnd(IntentionError):
    pass


@dataclass
class DeviationConfig:
    """Capture radius, debounce length, and the tracker cycle period."""

    r: float = 0.25
    consecutive_cycles: int = 4
    cycle_period: float = 0.1

    def __post_init__(self) -> None:
        if self.r <= 0:
            raise ValueError("capture radius must be positive")
        if self.consecutive_cycles < 1:
            raise ValueError("consecutive_cycles must be >= 1")


@dataclass
class HirConfig:
    """Tunables of the goal-belief pipeline."""

    k_nearest: int = 4
    assoc_eps: float = 0.05
    n_alternatives: int = 8
    displacement_trigger: float = 0.3
    min_displacement: float = 1e-6
    alpha: float = 0.823
    emission_floor: float = 1e-3
    decoder: str = "viterbi"  # or "forward"
    # The published keep-original threshold reads as 0.25*g, which can
    # exceed 1; default is the per-goal reading 0.25/g.
    keep_threshold_literal: bool = False
    goal_threshold_scale: float = 0.8

    def keep_threshold(self, n_states: int) -> float:
        return 0.25 * n_states if self.keep_threshold_literal else 0.25 / n_states

    def goal_threshold(self, n_states: int) -> float:
        return self.goal_threshold_scale / n_states


@dataclass
class PathTracker:
    """Tracks which path segment the worker is on.

    ``assigned_path[current_index]`` is the current node; its successor
    is the next node. The outside counter debounces deviation alarms.
    """

    assigned_path: list[int]
    current_index: int = 0
    outside_counter: int = 0

    def __post_init__(self) -> None:
        if not self.assigned_path:
            raise ValueError("assigned path must be nonempty")

    @property
    def complete(self) -> bool:
        return self.current_index >= len(self.assigned_path) - 1

    @property
    def current_node(self) -> int:
        return self.assigned_path[self.current_index]

    @property
    def next_node(self) -> int | None:
        if self.complete:
            return None
        return self.assigned_path[self.current_index + 1]


def advance_tracker(
    t: PathTracker, p: Position, g: WarehouseGraph, cfg: DeviationConfig
) -> PathTracker:
    """Advance current/next node whenever the next node is captured."""
    while not t.complete:
        nxt = t.assigned_path[t.current_index + 1]
        if math.dist(p, g.node_pos(nxt)) < cfg.r:
            t.current_index += 1
        else:
            break
    return t


def inside_allowed_area(
    t: PathTracker, p: Position, g: WarehouseGraph, cfg: DeviationConfig
) -> bool:
    """Focal-sum test against the allowed deviation ellipse.

    Foci are the current and next node; the major axis is the focal
    distance plus 2r, so a point is inside iff the sum of its distances
    to the foci is at most dist(f1, f2) + 2r.
    """
    f1 = g.node_pos(t.current_node)
    nxt = t.next_node
    if nxt is None:
        raise IntentionError("tracker complete: no allowed area")
    f2 = g.node_pos(nxt)
    return math.dist(p, f1) + math.dist(p, f2) <= math.dist(f1, f2) + 2 * cfg.r


def update_deviation(
    t: PathTracker, p: Position, g: WarehouseGraph, cfg: DeviationConfig
) -> tuple[PathTracker, bool]:
    """One tracker cycle: capture nodes, update the debounce counter.

    A completed tracker cannot deviate (there is no next segment).
    """
    advance_tracker(t, p, g, cfg)
    if t.complete or inside_allowed_area(t, p, g, cfg):
        t.outside_counter = 0
    else:
        t.outside_counter += 1
    return t, t.outside_counter >= cfg.consecutive_cycles


@dataclass
class GoalSet:
    """Auxiliary goals plus the assigned path's terminal node.

    The terminal goal is always the last state; thresholds and the
    transition matrix are sized by the total state count.
    """

    auxiliary_goals: list[int]
    terminal_goal: int

    def __post_init__(self) -> None:
        goals = self.all_goals
        if len(goals) < 2:
            raise ValueError("need at least two goals")
        if len(set(goals)) != len(goals):
            raise ValueError("goals must be distinct")

    @property
    def all_goals(self) -> list[int]:
        return [*self.auxiliary_goals, self.terminal_goal]

    @property
    def g(self) -> int:
        return len(self.auxiliary_goals) + 1

    @property
    def terminal_index(self) -> int:
        return self.g - 1


@dataclass
class AssociationVector:
    """Kernel weights over the support nodes nearest to a position."""

    node_ids: np.ndarray
    weights: np.ndarray


def association_vector(
    g: WarehouseGraph, p: Position, k: int = 4, eps: float = 0.05
) -> AssociationVector:
    """Inverse-distance weights over the k nearest road nodes.

    weight_i = 1 / (dist_i + eps), normalized; closer nodes always get
    the larger weight, equidistant nodes get equal weight.
    """
    support = nearest_nodes(g, p, k)
    ids = np.array([nid for nid, _ in support], dtype=int)
    raw = np.array([1.0 / (d + eps) for _, d in support])
    return AssociationVector(node_ids=ids, weights=raw / raw.sum())


def modulated_distances_at(
    assoc: AssociationVector, F: DistanceMatrix, goal_nodes: list[int]
) -> np.ndarray:
    """Association-weighted road distance to each goal."""
    block = F.F[np.ix_(assoc.node_ids, goal_nodes)]
    return assoc.weights @ block


@dataclass
class ModulatedDistances:
    d: np.ndarray  # length g, actual position
    D: np.ndarray  # n_alt x g, alternative positions


def alternative_positions(
    p_prev: Position, p_now: Position, n_alt: int = 8, min_displacement: float = 1e-6
) -> list[Position]:
    """Same-length moves from p_prev at uniformly spaced headings.

    The actual heading is always the first point, so the true move is
    one of its own alternatives.
    """
    if n_alt < 2:
        raise ValueError("n_alt must be >= 2")
    dx, dy = p_now[0] - p_prev[0], p_now[1] - p_prev[1]
    radius = math.hypot(dx, dy)
    if radius < min_displacement:
        raise ZeroDisplacement("worker did not move")
    theta0 = math.atan2(dy, dx)
    out = []
    for i in range(n_alt):
        theta = theta0 + 2 * math.pi * i / n_alt
        out.append((p_prev[0] + radius * math.cos(theta), p_prev[1] + radius * math.sin(theta)))
    return out


@dataclass
class ObservationVector:
    o: np.ndarray
    clamped: bool = False


def observation_vector(md: ModulatedDistances) -> ObservationVector:
    """Per-goal evidence in [0, 1] from modulated-distance comparison.

    o_j = (max_i D_ij - d_j) / (max_i D_ij - min_i D_ij), clamped. A
    degenerate column (no spread, or no finite entries) carries no
    directional evidence and yields 0.5; an unreachable actual distance
    yields 0.
    """
    if md.D.size == 0:
        raise ValueError("empty alternative matrix")
    n_goals = md.d.shape[0]
    o = np.empty(n_goals)
    clamped = False
    for j in range(n_goals):
        col = md.D[:, j]
        finite = col[np.isfinite(col)]
        if not math.isfinite(md.d[j]):
            o[j] = 0.0
            continue
        if finite.size == 0:
            o[j] = 0.5
            continue
        hi, lo = finite.max(), finite.min()
        if hi - lo <= 0.0:
            o[j] = 0.5
            continue
        raw = (hi - md.d[j]) / (hi - lo)
        if raw < 0.0 or raw > 1.0:
            clamped = True
        o[j] = min(1.0, max(0.0, raw))
    return ObservationVector(o=o, clamped=clamped)


class GoalHmm:
    """Belief over goals, updated per observation.

    The transition matrix has ``alpha`` on the diagonal and spreads the
    remainder evenly, so the worker may change its mind at any point.
    The default decoder normalizes max-product trellis scores into the
    belief; the forward-posterior variant is selectable. Both recursions
    are incremental, so update cost does not grow with history length.
    """

    def __init__(self, n_states: int, cfg: HirConfig | None = None):
        if n_states < 2:
            raise ValueError("need at least two states")
        cfg = cfg or HirConfig()
        self.cfg = cfg
        self.n_states = n_states
        off = (1.0 - cfg.alpha) / (n_states - 1)
        self.T = np.full((n_states, n_states), off)
        np.fill_diagonal(self.T, cfg.alpha)
        self._logT = np.log(self.T)
        self.belief = np.full(n_states, 1.0 / n_states)
        self.observation_history: list[np.ndarray] = []
        self._log_score = np.zeros(n_states)  # rescaled each update

    def update(self, o: ObservationVector | np.ndarray) -> "GoalHmm":
        vec = o.o if isinstance(o, ObservationVector) else np.asarray(o, dtype=float)
        if vec.shape != (self.n_states,):
            raise DimensionMismatch(
                f"observation has {vec.shape[0] if vec.ndim else 0} entries, "
                f"expected {self.n_states}"
            )
        self.observation_history.append(vec.copy())
        emission = vec + self.cfg.emission_floor
        emission = emission / emission.sum()
        log_e = np.log(emission)
        candidates = self._log_score[:, None] + self._logT
        if self.cfg.decoder == "forward":
            merged = np.logaddexp.reduce(candidates, axis=0)
        else:
            merged = candidates.max(axis=0)
        score = merged + log_e
        score -= score.max()
        self._log_score = score
        weights = np.exp(score)
        self.belief = weights / weights.sum()
        return self


def hmm_update(h: GoalHmm, o: ObservationVector | np.ndarray) -> GoalHmm:
    return h.update(o)


@dataclass
class CandidatePath:
    goal: int
    probability: float
    path: list[int]


@dataclass
class HirReport:
    deviating: bool
    candidate_paths: list[CandidatePath] = field(default_factory=list)
    original_goal_plausible: bool = True

    def to_payload(self) -> dict:
        return {
            "deviating": self.deviating,
            "original_goal_plausible": self.original_goal_plausible,
            "candidates": [
                {"goal": c.goal, "probability": c.probability, "path": c.path}
                for c in self.candidate_paths
            ],
        }


def emit_report(
    h: GoalHmm,
    gs: GoalSet,
    g: WarehouseGraph,
    F: DistanceMatrix,
    deviating: bool,
    p: Position,
    cfg: HirConfig | None = None,
) -> HirReport:
    """Decide between keeping the original goal and predicting paths.

    The original goal survives while its belief stays within the keep
    threshold of the leader; otherwise every sufficiently probable goal
    gets a shortest path from the worker's nearest road node.
    """
    cfg = cfg or HirConfig()
    if not deviating:
        return HirReport(deviating=False)
    belief = h.belief
    n = gs.g
    if belief.shape != (n,):
        raise DimensionMismatch("belief size does not match goal set")
    gap = float(belief.max() - belief[gs.terminal_index])
    if gap < cfg.keep_threshold(n):
        return HirReport(deviating=True, original_goal_plausible=True)
    start = nearest_nodes(g, p, 1)[0][0]
    candidates = []
    threshold = cfg.goal_threshold(n)
    for idx, goal_node in enumerate(gs.all_goals):
        prob = float(belief[idx])
        if prob <= threshold:
            continue
        try:
            path = shortest_path(g, F, start, goal_node)
        except Unreachable:
            log.info("dropping unreachable goal %d from HIR candidates", goal_node)
            continue
        candidates.append(CandidatePath(goal=goal_node, probability=prob, path=path))
    candidates.sort(key=lambda c: (-c.probability, c.goal))
    return HirReport(deviating=True, candidate_paths=candidates, original_goal_plausible=False)


def hir_observation(
    g: WarehouseGraph,
    F: DistanceMatrix,
    goal_nodes: list[int],
    p_prev: Position,
    p_now: Position,
    cfg: HirConfig | None = None,
) -> ObservationVector:
    """Full observation pipeline for one displacement."""
    cfg = cfg or HirConfig()
    assoc = association_vector(g, p_now, cfg.k_nearest, cfg.assoc_eps)
    d = modulated_distances_at(assoc, F, goal_nodes)
    alts = alternative_positions(p_prev, p_now, cfg.n_alternatives, cfg.min_displacement)
    rows = [
        modulated_distances_at(
            association_vector(g, a, cfg.k_nearest, cfg.assoc_eps), F, goal_nodes
        )
        for a in alts
    ]
    return observation_vector(ModulatedDistances(d=d, D=np.stack(rows)))


def shir_predict(
    p_prev: Position,
    p_now: Position,
    g: WarehouseGraph,
    horizon: int,
) -> list[int]:
    """Constant-velocity baseline: greedy minimal-heading-change walk.

    Starting from the nearest road node, repeatedly steps to the
    neighbor that bends the current heading the least. Never doubles
    back; a node whose only continuation is a reversal ends the walk.
    """
    dx, dy = p_now[0] - p_prev[0], p_now[1] - p_prev[1]
    norm = math.hypot(dx, dy)
    if norm < 1e-9:
        raise ZeroDisplacement("no heading available for the baseline predictor")
    heading = (dx / norm, dy / norm)
    current = nearest_nodes(g, p_now, 1)[0][0]
    path = [current]
    prev = None
    for _ in range(horizon):
        best = None
        for v, _, _ in g.neighbors(current):
            if v == prev:
                continue
            vx = g.node_pos(v)[0] - g.node_pos(current)[0]
            vy = g.node_pos(v)[1] - g.node_pos(current)[1]
            vnorm = math.hypot(vx, vy)
            cosang = (vx * heading[0] + vy * heading[1]) / vnorm
            angle = math.acos(max(-1.0, min(1.0, cosang)))
            if best is None or (angle, v) < best[:2]:
                best = (angle, v, (vx / vnorm, vy / vnorm))
        if best is None:
            break
        _, nxt, heading = best
        path.append(nxt)
        prev, current = current, nxt
    return path


class IntentionMonitor:
    """Per-worker orchestration of tracker cycles and belief updates.

    Runs once per simulation tick: advances the tracker, debounces the
    deviation flag, and when cumulative displacement since the last
    belief update exceeds the trigger, scores the move against the
    goals. Emits a report whenever the worker is deviating and the
    belief changed this cycle (or the alarm just rose).
    """

    def __init__(
        self,
        g: WarehouseGraph,
        goal_set: GoalSet,
        assigned_path: list[int],
        start_pos: Position,
        dev_cfg: DeviationConfig | None = None,
        hir_cfg: HirConfig | None = None,
    ):
        self.graph = g
        self.dev_cfg = dev_cfg or DeviationConfig()
        self.hir_cfg = hir_cfg or HirConfig()
        self.goal_set = goal_set
        self._base_auxiliary = list(goal_set.auxiliary_goals)
        self.tracker = PathTracker(assigned_path)
        self.hmm = GoalHmm(goal_set.g, self.hir_cfg)
        self.deviating = False
        self.last_update_pos = start_pos
        self.last_clamped = False

    def reassign(self, path: list[int], p: Position) -> None:
        """New task path: fresh tracker, fresh prior over goals.

        A terminal that coincides with an auxiliary goal absorbs it, so
        the state count can shrink by one for such tasks.
        """
        self.tracker = PathTracker(path)
        aux = [a for a in self._base_auxiliary if a != path[-1]]
        self.goal_set = GoalSet(aux, path[-1])
        self.hmm = GoalHmm(self.goal_set.g, self.hir_cfg)
        self.deviating = False
        self.last_update_pos = p

    def observe(self, p: Position, F: DistanceMatrix) -> HirReport | None:
        was_deviating = self.deviating
        self.tracker, self.deviating = update_deviation(self.tracker, p, self.graph, self.dev_cfg)
        if self.tracker.complete:
            # walking on after finishing the assigned path is a
            # deviation too; the ellipse no longer applies
            terminal = self.graph.node_pos(self.tracker.assigned_path[-1])
            if math.dist(p, terminal) > 2 * self.dev_cfg.r:
                self.tracker.outside_counter += 1
                self.deviating = (
                    self.tracker.outside_counter >= self.dev_cfg.consecutive_cycles
                )
            else:
                self.tracker.outside_counter = 0
        updated = False
        if math.dist(p, self.last_update_pos) >= self.hir_cfg.displacement_trigger:
            try:
                obs = hir_observation(
                    self.graph, F, self.goal_set.all_goals, self.last_update_pos, p, self.hir_cfg
                )
            except ZeroDisplacement:
                obs = None
            if obs is not None:
                self.hmm.update(obs)
                self.last_clamped = obs.clamped
                updated = True
            self.last_update_pos = p
        if self.deviating and (updated or not was_deviating):
            return emit_report(
                self.hmm, self.goal_set, self.graph, F, True, p, self.hir_cfg
            )
        return None
