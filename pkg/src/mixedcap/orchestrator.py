"""Phased reordering policy and the simulation loop that drives it.

Phase 0 lets the initial intermixed traffic run for a few steps.  Phase 1
sends every autonomous vehicle to its assigned lane.  Phase 2 (only when
the assignment has a full-autonomy lane) pushes humans out of those lanes.
Phase 3 gathers the autonomous vehicles of the mixed lane into one block,
by swapping with the adjacent full-autonomy lane when there is one and
otherwise by leading interleaved humans out of the lane.

Lane 0 is the leftmost lane, ``y`` grows to the right, and lane ``i`` has
its center at ``i * lane_width``.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

import numpy as np

from .capacity import (
    UPPER_BOUND,
    LaneCensus,
    RoadParams,
    VehicleType,
    capacity_fn,
    headway,
    lane_ordering_capacity,
)
from .dynamics import DynamicsParams, RoadGeometry, lanes_of, step_array
from .errors import CollisionError, ConfigError, ParameterError
from .interaction import (
    HUMAN_WEIGHTS,
    ROBOT_WEIGHTS,
    ControllerConfig,
    Influence,
    Plan,
    RewardWeights,
    Snapshot,
    nested_plan,
    plan_batch,
)
from .lanes import OptimalAssignment, optimistic_assignment

log = logging.getLogger(__name__)

FIXED_COUNT = "fixed_count"
BERNOULLI_SLOTS = "bernoulli"
INIT_MODES = (FIXED_COUNT, BERNOULLI_SLOTS)

CENTRAL = "central"
SAMPLED = "sampled"
ASSIGNMENT_MODES = (CENTRAL, SAMPLED)


class Phase(IntEnum):
    INIT = 0
    ASSIGN = 1
    EVICT = 2
    PLATOON = 3
    DONE = 4

    @property
    def label(self) -> str:
        return "done" if self is Phase.DONE else str(int(self))


@dataclass(frozen=True)
class PhaseBudgets:
    """Step budgets per phase; phase 0 always runs for its full budget."""

    init: int = 10
    assign: int = 60
    evict: int = 70
    platoon: int = 60

    def __post_init__(self):
        if min(self.init, self.assign, self.evict, self.platoon) < 1:
            raise ParameterError("phase budgets must be >= 1")

    def of(self, phase: Phase) -> int:
        return {Phase.INIT: self.init, Phase.ASSIGN: self.assign,
                Phase.EVICT: self.evict, Phase.PLATOON: self.platoon}[phase]

    @property
    def total(self) -> int:
        return self.init + self.assign + self.evict + self.platoon


@dataclass(frozen=True)
class PolicySettings:
    lateral_tolerance: float = 0.5
    detection_window: int = 3
    pairing_range: float = 60.0
    safety_gap_factor: float = 0.5
    assignment_mode: str = CENTRAL
    # longitudinal safety filter: stop gap and lateral overlap that count as "ahead"
    filter_stop_gap: float = 4.0
    filter_overlap: float = 2.5
    # bumper room required ahead of and behind a merging vehicle
    merge_gap: float = 8.0
    # speed bias (m/s per m) used to line a merging vehicle up with its slot
    slot_gain: float = 0.3
    slot_speed_band: float = 4.0
    # an evicting robot slows down and leans away from the lane the human should take
    evict_slowdown: float = 7.0
    evict_offset: float = 0.5
    recovery_band: float = 1.0
    min_evict_window: int = 15

    def __post_init__(self):
        if self.assignment_mode not in ASSIGNMENT_MODES:
            raise ParameterError(f"assignment_mode must be one of {ASSIGNMENT_MODES}")
        if self.detection_window < 1:
            raise ParameterError("detection_window must be >= 1")
        if self.lateral_tolerance <= 0 or self.pairing_range <= 0:
            raise ParameterError("tolerances must be > 0")


@dataclass(frozen=True)
class Controllers:
    """Everything ``tick`` needs beyond the world and the phase record."""

    params: RoadParams = RoadParams()
    dynamics: DynamicsParams = DynamicsParams()
    controller: ControllerConfig = ControllerConfig()
    human: RewardWeights = HUMAN_WEIGHTS
    robot: RewardWeights = ROBOT_WEIGHTS
    budgets: PhaseBudgets = PhaseBudgets()
    policy: PolicySettings = PolicySettings()


@dataclass(frozen=True)
class LaneProbabilityVector:
    q: tuple

    def __post_init__(self):
        q = tuple(float(v) for v in self.q)
        if any(v < 0 for v in q) or abs(sum(q) - 1.0) > 1e-9:
            raise ParameterError(f"lane probabilities must be >= 0 and sum to 1, got {q}")
        object.__setattr__(self, "q", q)

    def quotas(self, count: int) -> list:
        """Integer split of ``count`` vehicles by largest remainder (ties to the lower lane)."""
        raw = np.asarray(self.q) * count
        base = np.floor(raw + 1e-9).astype(int)
        rest = count - int(base.sum())
        order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - base[i]), i))
        for i in order[:rest]:
            base[i] += 1
        return [int(b) for b in base]


@dataclass(frozen=True)
class Vehicle:
    id: int
    type: VehicleType
    state: np.ndarray
    plan: Optional[Plan] = None


@dataclass
class WorldState:
    """Vehicle ids, types and states (``(V, 4)``), plus the simulation clock."""

    ids: np.ndarray
    types: tuple
    states: np.ndarray
    geometry: RoadGeometry
    clock: float = 0.0
    tick: int = 0
    seed: int = 0
    plans: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(set(int(i) for i in self.ids)) != len(self.ids):
            raise ParameterError("vehicle ids must be unique")
        if self.states.shape != (len(self.ids), 4) or len(self.types) != len(self.ids):
            raise ParameterError("ids, types and states disagree in length")

    @property
    def vehicles(self) -> list:
        return [Vehicle(int(i), t, self.states[k].copy(), self.plans.get(k))
                for k, (i, t) in enumerate(zip(self.ids, self.types))]

    @property
    def autonomous(self) -> np.ndarray:
        return np.array([t is VehicleType.AUTONOMOUS for t in self.types], dtype=bool)

    def lanes(self) -> np.ndarray:
        return lanes_of(self.states[:, 1], self.geometry)

    def measured_lanes(self) -> np.ndarray:
        """Lane of every vehicle, with off-road vehicles clamped to the nearest edge lane."""
        ys = np.clip(self.states[:, 1], self.geometry.left_edge, self.geometry.right_edge)
        return lanes_of(ys, self.geometry)

    def orderings(self) -> list:
        """Row indices per lane, front (largest x) to back."""
        lanes = self.measured_lanes()
        out = []
        for lane in range(self.geometry.lane_count):
            rows = np.flatnonzero(lanes == lane)
            rows = sorted(rows, key=lambda r: (-self.states[r, 0], int(self.ids[r])))
            out.append([int(r) for r in rows])
        return out

    def type_orderings(self) -> list:
        return [[self.types[r] for r in lane] for lane in self.orderings()]

    def census(self) -> list:
        auto = self.autonomous
        return [LaneCensus(int(np.sum(~auto[lane])), int(np.sum(auto[lane]))) for lane in self.orderings()]

    def capacity(self, params: RoadParams) -> float:
        return float(sum(lane_ordering_capacity(t, params).capacity for t in self.type_orderings()))

    def copy(self) -> "WorldState":
        return dataclasses.replace(self, states=self.states.copy(), plans=dict(self.plans))


@dataclass
class PhaseRecord:
    phase: Phase = Phase.INIT
    entered_at: float = 0.0
    entered_tick: int = 0
    census: list = field(default_factory=list)
    pairings: dict = field(default_factory=dict)
    assignment: Optional[OptimalAssignment] = None
    targets: dict = field(default_factory=dict)
    streak: int = 0
    history: list = field(default_factory=list)
    pairing_meta: dict = field(default_factory=dict)

    @property
    def full_lanes(self) -> int:
        return self.assignment.full_autonomy_lanes if self.assignment else 0

    @property
    def mixed_lane(self) -> Optional[int]:
        return self.assignment.mixed_lane if self.assignment else None


# ---------------------------------------------------------------------------
# initialization


def assignment_probabilities(opt: OptimalAssignment, params: RoadParams) -> LaneProbabilityVector:
    """Share of the autonomous volume carried by each lane at ``opt``."""
    if opt.assignment.overall_alpha <= 0:
        raise ParameterError("lane probabilities are undefined when no vehicle is autonomous")
    cap = capacity_fn(opt.model)
    vol = np.array([a * cap(a, params) for a in opt.alphas])
    return LaneProbabilityVector(tuple(vol / vol.sum()))


def _lane_positions(types: list, params: RoadParams, offset: float) -> np.ndarray:
    """Longitudinal positions front-to-back for one lane's type sequence."""
    xs = np.zeros(len(types))
    x = offset
    for j, t in enumerate(types):
        if j > 0:
            x -= params.L + headway(t, types[j - 1], params)
        xs[j] = x
    return xs


def init_world(params: RoadParams, vehicle_count: int, alpha_bar: float, seed: int,
               mode: str = FIXED_COUNT, geometry: Optional[RoadGeometry] = None,
               speed: float = 25.0) -> WorldState:
    """Intermixed starting traffic.

    ``fixed_count`` shuffles ``round(alpha_bar * V)`` autonomous vehicles
    among ``V`` and deals them into equally filled lanes; ``bernoulli``
    draws every slot's type independently.  Each lane is laid out
    front-to-back at type-appropriate headways from a random offset.
    """
    if mode not in INIT_MODES:
        raise ConfigError(f"init mode must be one of {INIT_MODES}, got {mode!r}")
    if not 0.0 <= alpha_bar <= 1.0:
        raise ConfigError(f"autonomy level must lie in [0, 1], got {alpha_bar}")
    n = params.n
    geometry = geometry or RoadGeometry(lane_count=n, length=params.d)
    if geometry.lane_count != n:
        raise ConfigError("geometry lane count disagrees with road parameters")
    if vehicle_count < n or vehicle_count % n:
        raise ConfigError(f"vehicle count {vehicle_count} must be a positive multiple of n={n}")
    rng = np.random.default_rng(seed)
    if mode == FIXED_COUNT:
        n_auto = int(round(alpha_bar * vehicle_count))
        auto = np.zeros(vehicle_count, dtype=bool)
        auto[:n_auto] = True
        rng.shuffle(auto)
    else:
        auto = rng.random(vehicle_count) < alpha_bar
    per_lane = vehicle_count // n
    types = [VehicleType.AUTONOMOUS if a else VehicleType.HUMAN for a in auto]
    states = np.zeros((vehicle_count, 4))
    for lane in range(n):
        rows = list(range(lane * per_lane, (lane + 1) * per_lane))
        lane_types = [types[r] for r in rows]
        offset = rng.uniform(0.0, params.k1)
        xs = _lane_positions(lane_types, params, offset)
        span = offset - xs[-1] + params.L
        if span > params.d:
            raise ConfigError(f"lane {lane} needs {span:.1f} m but the road is {params.d} m long")
        states[rows, 0] = xs - xs.min()
        states[rows, 1] = geometry.center(lane)
        states[rows, 3] = speed
    return WorldState(ids=np.arange(vehicle_count), types=tuple(types), states=states,
                      geometry=geometry, seed=seed)


def lane_targets(world: WorldState, q: LaneProbabilityVector, mode: str = CENTRAL,
                 seed: int = 0) -> dict:
    """Assigned lane per autonomous row.

    Central mode splits the fleet by largest-remainder quotas and keeps
    vehicles in their current lane where the quota allows; sampled mode
    draws each lane from ``q`` independently.
    """
    auto_rows = [int(r) for r in np.flatnonzero(world.autonomous)]
    if mode == SAMPLED:
        rng = np.random.default_rng(seed + 1)
        picks = rng.choice(len(q.q), size=len(auto_rows), p=np.asarray(q.q))
        return {r: int(p) for r, p in zip(auto_rows, picks)}
    quotas = q.quotas(len(auto_rows))
    lanes = world.measured_lanes()
    targets = {}
    for r in auto_rows:
        lane = int(lanes[r])
        if quotas[lane] > 0:
            targets[r] = lane
            quotas[lane] -= 1
    for r in auto_rows:
        if r in targets:
            continue
        lane = int(lanes[r])
        open_lanes = [i for i, k in enumerate(quotas) if k > 0]
        best = min(open_lanes, key=lambda i: (abs(i - lane), i))
        targets[r] = best
        quotas[best] -= 1
    return targets


def start_record(world: WorldState, c: Controllers, alpha_bar: float) -> PhaseRecord:
    """Phase-0 record with the optimistic assignment and per-robot lane targets."""
    params = c.params
    assignment = optimistic_assignment(alpha_bar, params)
    targets = {}
    if alpha_bar > 0 and world.autonomous.any():
        q = assignment_probabilities(assignment, params)
        targets = lane_targets(world, q, c.policy.assignment_mode, world.seed)
    rec = PhaseRecord(assignment=assignment, targets=targets, census=world.census())
    rec.history.append((0, int(Phase.INIT)))
    return rec


# ---------------------------------------------------------------------------
# phase predicates


def is_contiguous(types) -> bool:
    """True when the autonomous entries of a front-to-back ordering form one block."""
    pos = [j for j, t in enumerate(types) if VehicleType.parse(t) is VehicleType.AUTONOMOUS]
    return not pos or pos[-1] - pos[0] + 1 == len(pos)


def _main_block(types) -> tuple:
    """(start, stop) of the longest autonomous run; ties go to the frontmost."""
    best = (0, 0)
    j = 0
    while j < len(types):
        if types[j] is VehicleType.AUTONOMOUS:
            k = j
            while k < len(types) and types[k] is VehicleType.AUTONOMOUS:
                k += 1
            if k - j > best[1] - best[0]:
                best = (j, k)
            j = k
        else:
            j += 1
    return best


def phase_condition(world: WorldState, rec: PhaseRecord, tol: float = 0.5) -> bool:
    """Instantaneous completion predicate of the current phase."""
    phase = rec.phase
    if phase is Phase.ASSIGN:
        lanes = world.lanes()
        for r, lane in rec.targets.items():
            if lanes[r] != lane or abs(world.states[r, 1] - world.geometry.center(lane)) >= tol:
                return False
        return True
    if phase is Phase.EVICT:
        orders = world.type_orderings()
        return all(t is VehicleType.AUTONOMOUS for lane in range(rec.full_lanes) for t in orders[lane])
    if phase is Phase.PLATOON:
        mixed = rec.mixed_lane
        return mixed is None or is_contiguous(world.type_orderings()[mixed])
    return phase is Phase.DONE


def phase_complete(world: WorldState, rec: PhaseRecord, tol: float = 0.5, window: int = 1) -> bool:
    """Completion of the current phase, requiring the predicate for ``window`` consecutive ticks.

    ``rec.streak`` counts ticks the predicate has already held.
    """
    if rec.phase is Phase.DONE:
        return True
    if not phase_condition(world, rec, tol):
        return False
    return rec.streak + 1 >= window


def _next_phase(phase: Phase, rec: PhaseRecord) -> Phase:
    if phase is Phase.INIT:
        return Phase.ASSIGN
    if phase is Phase.ASSIGN:
        return Phase.EVICT if rec.full_lanes >= 1 else Phase.PLATOON
    return Phase.DONE if phase is Phase.PLATOON else Phase.PLATOON


# ---------------------------------------------------------------------------
# pairing


@dataclass(frozen=True)
class Task:
    """What one autonomous vehicle does this tick."""

    target_lane: int
    human: Optional[int] = None
    influence: Influence = Influence.NONE
    influence_lane: Optional[int] = None
    target_speed: Optional[float] = None
    role: str = "cruise"
    # lane the vehicle should end up in, recorded as its new target by swaps
    dest: Optional[int] = None
    # lateral offset from the target lane centre
    lateral_bias: float = 0.0


def _neighbour_behind(order: list, row: int) -> Optional[int]:
    j = order.index(row)
    return order[j + 1] if j + 1 < len(order) else None


def _neighbour_ahead(order: list, row: int) -> Optional[int]:
    j = order.index(row)
    return order[j - 1] if j > 0 else None


def _trailing_in_lane(world: WorldState, order: list, x: float) -> Optional[int]:
    """First vehicle in ``order`` behind longitudinal position ``x``."""
    for r in order:
        if world.states[r, 0] < x:
            return r
    return None


def _within(world: WorldState, a: int, b: int, reach: float) -> bool:
    return abs(world.states[a, 0] - world.states[b, 0]) <= reach


def plan_tasks(world: WorldState, rec: PhaseRecord, c: Controllers) -> dict:
    """Per-robot tasks for the current phase, before pairing exclusivity."""
    auto = world.autonomous
    lanes = world.measured_lanes()
    orders = world.orderings()
    reach = c.policy.pairing_range
    tasks = {}
    for r in np.flatnonzero(auto):
        r = int(r)
        tasks[r] = Task(target_lane=int(lanes[r]))
    if rec.phase is Phase.INIT:
        return tasks
    helpers = {}
    for r in list(tasks):
        lane = int(lanes[r])
        dest = int(rec.targets.get(r, lane))
        if dest != lane:
            tasks[r] = _merge_task(world, c, tasks[r], r, lane, dest, orders, "merge", helpers)
    _apply_helpers(world, c, tasks, helpers)
    if rec.phase is Phase.EVICT:
        _evict_tasks(world, rec, c, tasks, lanes, orders)
    elif rec.phase is Phase.PLATOON:
        if rec.full_lanes >= 1:
            _swap_tasks(world, rec, c, tasks, lanes, orders)
        else:
            _lead_out_tasks(world, rec, c, tasks, orders)
    return tasks


def _merge_task(world, c, task: Task, r: int, lane: int, dest: int, orders, role: str,
                helpers: dict) -> Task:
    """Move ``r`` one lane toward ``dest`` once the gap beside it is wide enough.

    Until then the vehicle keeps its lane and tracks the midpoint of a slot
    in the destination lane: the nearest gap that is already wide enough or
    whose follower is autonomous (that follower is entered in ``helpers``
    and drops back), or the open road beyond either end.  Either way it
    pairs with the human (if any) that would trail it there, asking it to
    yield.
    """
    auto = world.autonomous
    nxt = lane + int(np.sign(dest - lane))
    x = world.states[r, 0]
    order = [q for q in orders[nxt] if q != r]
    room = c.params.L + c.policy.merge_gap
    # a merge already under way only needs half the room to carry on
    committed = (world.states[r, 1] - world.geometry.center(lane)) * (nxt - lane) > 0.25 * world.geometry.lane_width
    need = c.params.L + 0.5 * c.policy.merge_gap if committed else room
    foll = _trailing_in_lane(world, order, x)
    # vehicles straddling the boundary count as occupying the destination lane
    near = np.abs(world.states[:, 1] - world.geometry.center(nxt)) < 0.75 * world.geometry.lane_width
    near[r] = False
    dx = world.states[near, 0] - x
    clear = not np.any((dx > -need) & (dx < need))
    human = foll if foll is not None and not auto[foll] and _within(world, r, foll, c.policy.pairing_range) else None
    influence = Influence.YIELD_GAP if human is not None else Influence.NONE
    if clear:
        return dataclasses.replace(task, target_lane=nxt, human=human, influence=influence, role=role)
    xs = [world.states[q, 0] for q in order]
    # (midpoint, follower that must drop back or None)
    slots = []
    if xs:
        slots.append((xs[0] + room, None))
        slots.append((xs[-1] - room, None))
    for (a, qa), (b, qb) in zip(zip(xs, order), zip(xs[1:], order[1:])):
        if a - b >= 2.0 * room:
            slots.append((0.5 * (a + b), None))
        elif auto[qb]:
            slots.append((a - room, qb))
    mid, opener = min(slots, key=lambda sl: (abs(sl[0] - x), -sl[0]))
    if opener is not None:
        helpers[opener] = c.robot.target_speed - c.policy.slot_speed_band
    return dataclasses.replace(task, target_lane=lane, human=human, influence=influence,
                               target_speed=_slot_speed(world, c, r, mid), role=role)


def _apply_helpers(world, c, tasks, helpers):
    """Autonomous vehicles not merging themselves slow down to open a gap behind a merger."""
    for r, speed in sorted(helpers.items()):
        if tasks[r].role == "cruise" and tasks[r].target_speed is None:
            tasks[r] = dataclasses.replace(tasks[r], target_speed=float(speed), role="make_room")


def _evict_tasks(world, rec, c, tasks, lanes, orders):
    auto = world.autonomous
    reach = c.policy.pairing_range
    humans_left = False
    late = world.tick - rec.entered_tick > c.budgets.of(Phase.EVICT) - c.policy.min_evict_window
    for lane in range(rec.full_lanes):
        order = orders[lane]
        if lane + 1 >= world.geometry.lane_count:
            break
        if not humans_left:
            for r in order:
                if not auto[r]:
                    continue
                behind = _neighbour_behind(order, r)
                held = _held_eviction(world, rec, c, r, lane)
                if held is not None:
                    behind = held
                elif world.states[r, 3] < c.robot.target_speed - c.policy.recovery_band or late:
                    # a new eviction starts only once the robot is back near cruising speed
                    # and there is time left in the phase to complete it
                    continue
                if behind is not None and not auto[behind] and _within(world, r, behind, reach):
                    tasks[r] = dataclasses.replace(tasks[r], target_lane=lane, human=behind, role="evict",
                                                   influence=Influence.MERGE_RIGHT, influence_lane=lane + 1,
                                                   target_speed=c.robot.target_speed - c.policy.evict_slowdown,
                                                   lateral_bias=-c.policy.evict_offset)
        humans_left = humans_left or any(not auto[r] for r in order)


def _held_eviction(world, rec, c, r, lane):
    """The human ``r`` is already evicting, kept until it has settled in the next lane."""
    rid = int(world.ids[r])
    hid = rec.pairings.get(rid)
    if hid is None or rec.pairing_meta.get(rid, {}).get("influence") != Influence.MERGE_RIGHT.value:
        return None
    h = int(np.flatnonzero(world.ids == hid)[0])
    settled = abs(world.states[h, 1] - world.geometry.center(lane + 1)) < c.policy.lateral_tolerance
    if settled or world.states[h, 0] > world.states[r, 0] or not _within(world, r, h, c.policy.pairing_range):
        return None
    return h


def _slot_speed(world, c, row, x_slot):
    base = c.robot.target_speed
    band = c.policy.slot_speed_band
    return float(np.clip(base + c.policy.slot_gain * (x_slot - world.states[row, 0]), base - band, base + band))


def _swap_tasks(world, rec, c, tasks, lanes, orders):
    """Lone mixed-lane vehicles move to the full lane; a full-lane vehicle fills in behind the block."""
    mixed = rec.mixed_lane
    if mixed is None or mixed < 1:
        return
    auto = world.autonomous
    donor = mixed - 1
    order = orders[mixed]
    types = [world.types[r] for r in order]
    if is_contiguous(types):
        return
    start, stop = _main_block(types)
    block = order[start:stop]
    loners = [r for j, r in enumerate(order) if auto[r] and not start <= j < stop]
    helpers = {}
    for lone in sorted(loners, key=lambda r: int(world.ids[r])):
        t = _merge_task(world, c, tasks[lone], lone, mixed, donor, orders, "swap_out", helpers)
        tasks[lone] = dataclasses.replace(t, dest=donor)
    tail = block[-1]
    spacing = c.params.L + c.params.h_bar
    slot_x = world.states[tail, 0] - spacing
    free = [r for r in orders[donor] if auto[r] and tasks[r].role == "cruise"]
    if free:
        exit_row = min(free, key=lambda r: (abs(world.states[r, 0] - slot_x), int(world.ids[r])))
        if abs(world.states[exit_row, 0] - slot_x) < 0.5 * spacing:
            t = _merge_task(world, c, tasks[exit_row], exit_row, donor, mixed, orders, "swap_in", helpers)
            tasks[exit_row] = dataclasses.replace(t, dest=mixed)
        else:
            tasks[exit_row] = dataclasses.replace(tasks[exit_row], role="swap_in",
                                                  target_speed=_slot_speed(world, c, exit_row, slot_x))
    _apply_helpers(world, c, tasks, helpers)


def _lead_out_tasks(world, rec, c, tasks, orders):
    mixed = rec.mixed_lane
    if mixed is None or mixed + 1 >= world.geometry.lane_count:
        return
    auto = world.autonomous
    order = orders[mixed]
    reach = c.policy.pairing_range
    pos = [j for j, r in enumerate(order) if auto[r]]
    if not pos:
        return
    last = pos[-1]
    for j, r in enumerate(order[:last]):
        if not auto[r]:
            continue
        behind = order[j + 1]
        # only humans that split the autonomous vehicles are led out
        if not auto[behind] and _within(world, r, behind, reach):
            tasks[r] = dataclasses.replace(tasks[r], human=behind, role="lead_out",
                                           influence=Influence.MERGE_RIGHT, influence_lane=mixed + 1)


def resolve_pairings(tasks: dict, world: WorldState) -> dict:
    """Each human is influenced by at most one robot; the lowest robot id wins."""
    taken = {}
    out = {}
    for r in sorted(tasks, key=lambda r: int(world.ids[r])):
        task = tasks[r]
        if task.human is not None and task.human in taken:
            task = dataclasses.replace(task, human=None, influence=Influence.NONE)
        if task.human is not None:
            taken[task.human] = r
        out[r] = task
    return out


# ---------------------------------------------------------------------------
# the simulation step


def _vehicle_event(world: WorldState, r: int) -> dict:
    s = world.states[r]
    return {"id": int(world.ids[r]), "type": world.types[r].short,
            "x": round(float(s[0]), 6), "y": round(float(s[1]), 6), "v": round(float(s[3]), 6)}


def check_collisions(world: WorldState, params: RoadParams, factor: float = 0.5, body_width: float = 1.8):
    """Raise :class:`CollisionError` when a same-lane bumper gap drops below ``factor * L``.

    Two vehicles whose centres are ``body_width`` or more apart laterally run
    side by side and are not compared, even if a lane boundary lies between
    them and one of them has just crossed it.
    """
    limit = factor * params.L
    st = world.states
    for lane, order in enumerate(world.orderings()):
        for i, a in enumerate(order):
            for b in order[i + 1:]:
                if abs(st[a, 1] - st[b, 1]) >= body_width:
                    continue
                gap = st[a, 0] - st[b, 0] - params.L
                if gap < limit:
                    raise CollisionError(
                        f"gap {gap:.2f} m between vehicles {int(world.ids[a])} and {int(world.ids[b])} in lane {lane}",
                        {"tick": world.tick, "time": round(world.clock, 6), "lane": lane,
                         "leader": int(world.ids[a]), "follower": int(world.ids[b]), "gap": gap,
                         "vehicles": [_vehicle_event(world, r) for r in range(len(world.ids))]},
                    )
                break


def safety_filter(states: np.ndarray, controls: np.ndarray, params: RoadParams, p: DynamicsParams,
                  stop_gap: float = 4.0, overlap: float = 2.5, lane_width: Optional[float] = None,
                  side_gap: float = 2.0) -> np.ndarray:
    """Cap accelerations so no vehicle closes on an overlapping leader faster than it can brake.

    For every follower the nearest vehicle ahead within ``overlap`` laterally
    is its leader; the follower's acceleration is limited to what keeps the
    bumper gap above ``stop_gap`` under constant deceleration.  With
    ``lane_width`` set, vehicles steering toward a neighbour that overlaps them
    longitudinally are turned back.
    """
    out = controls.copy()
    x, y, v = states[:, 0], states[:, 1], states[:, 3]
    for f in range(len(states)):
        ahead = (x > x[f]) & (np.abs(y - y[f]) < overlap)
        if not ahead.any():
            continue
        lead = np.flatnonzero(ahead)[np.argmin(x[ahead])]
        gap = x[lead] - x[f] - params.L - stop_gap
        closing = v[f] - v[lead]
        if closing <= 0:
            continue
        need = closing**2 / (2.0 * max(gap, 0.1))
        if gap <= 0.0:
            # already inside the stop distance: cancel the closing speed outright
            need = max(need, closing / p.dt)
        cap = p.friction * v[f] - 1.5 * need
        if need > 0.25 and out[f, 1] > cap:
            out[f, 1] = max(cap, p.u2_min)
    if lane_width is not None:
        _lateral_guard(states, out, params, p, lane_width, side_gap)
    return out


def _lateral_guard(states, out, params, p, lane_width, side_gap):
    # steer back when drifting toward a vehicle running alongside
    x, y, th, v = states.T
    for f in range(len(states)):
        dx = np.abs(x - x[f])
        dy = y - y[f]
        # heading after this tick's steering
        th_next = th[f] + v[f] * out[f, 0] * p.dt
        side = (dx < params.L + side_gap) & (np.abs(dy) > 0.3) & (np.abs(dy) < lane_width) \
            & (dy * np.sin(th_next) > 0)
        if not side.any() or v[f] < 0.5:
            continue
        away = -np.sign(dy[side][np.argmin(np.abs(dy[side]))])
        desired = 0.03 * away
        out[f, 0] = np.clip((desired - th[f]) / (v[f] * p.dt), -p.u1_max, p.u1_max)


def _census_payload(census) -> list:
    return [[c.human_count, c.autonomous_count] for c in census]


def tick(world: WorldState, rec: PhaseRecord, c: Controllers):
    """Advance the world one step under the current phase; returns ``(world, record, events)``."""
    world = world.copy()
    rec = dataclasses.replace(rec, pairings=dict(rec.pairings), history=list(rec.history),
                              pairing_meta=dict(rec.pairing_meta), targets=dict(rec.targets))
    events = []
    geometry = world.geometry
    cfg = c.controller
    auto = world.autonomous
    if rec.phase is Phase.DONE:
        # after the last phase robots just keep their lanes
        lanes = world.measured_lanes()
        tasks = {int(r): Task(target_lane=int(lanes[r])) for r in np.flatnonzero(auto)}
    else:
        tasks = resolve_pairings(plan_tasks(world, rec, c), world)

    # pairing bookkeeping
    new_pairs = {int(world.ids[r]): int(world.ids[t.human]) for r, t in tasks.items() if t.human is not None}
    for rid, hid in sorted(rec.pairings.items()):
        if new_pairs.get(rid) != hid:
            meta = rec.pairing_meta.pop(rid, {})
            events.append({"event": "pairing_end", "tick": world.tick, "robot": rid, "human": hid,
                           "phase": rec.phase.label, "influence": meta.get("influence")})
    for rid, hid in sorted(new_pairs.items()):
        if rec.pairings.get(rid) != hid:
            r = int(np.flatnonzero(world.ids == rid)[0])
            rec.pairing_meta[rid] = {"influence": tasks[r].influence.value, "start": world.tick}
            events.append({"event": "pairing_start", "tick": world.tick, "robot": rid, "human": hid,
                           "phase": rec.phase.label, "influence": tasks[r].influence.value,
                           "role": tasks[r].role})
    rec.pairings = new_pairs
    for r, t in tasks.items():
        if t.dest is not None and rec.targets.get(r) != t.dest:
            rec.targets = {**rec.targets, r: t.dest}
            events.append({"event": "retarget", "tick": world.tick, "vehicle": int(world.ids[r]),
                           "lane": t.dest, "role": t.role})

    snap = Snapshot(world.states.copy(), geometry, c.dynamics,
                    warm={k: p.controls for k, p in world.plans.items()})
    controls = np.zeros((len(world.ids), 2))
    plans = {}
    single_rows, single_w, single_y = [], [], []
    for r in range(len(world.ids)):
        if not auto[r]:
            single_rows.append(r)
            single_w.append(c.human)
            single_y.append(0.0)
        elif tasks[r].human is None:
            t = tasks[r]
            w = c.robot if t.target_speed is None else dataclasses.replace(c.robot, target_speed=t.target_speed)
            single_rows.append(r)
            single_w.append(w)
            single_y.append(geometry.center(t.target_lane))
    for r, p in zip(single_rows, plan_batch(snap, single_rows, single_w, single_y, cfg,
                                            pad_to=len(world.ids))):
        plans[r] = p
    for r in sorted(tasks, key=lambda r: int(world.ids[r])):
        t = tasks[r]
        if t.human is None:
            continue
        w = c.robot if t.target_speed is None else dataclasses.replace(c.robot, target_speed=t.target_speed)
        infl_y = geometry.center(t.influence_lane) if t.influence_lane is not None else 0.0
        p = nested_plan(snap, r, t.human, cfg, w, c.human, t.influence,
                        robot_target_y=geometry.center(t.target_lane) + t.lateral_bias,
                        influence_target_y=infl_y)
        if p.fallback:
            events.append({"event": "inner_fallback", "tick": world.tick, "robot": int(world.ids[r])})
        plans[r] = p
    for r, p in plans.items():
        controls[r] = p.first_control
    controls = safety_filter(world.states, controls, c.params, c.dynamics,
                             c.policy.filter_stop_gap, c.policy.filter_overlap,
                             lane_width=geometry.lane_width)

    before = world.measured_lanes()
    world.states = step_array(world.states, controls, c.dynamics)
    world.plans = plans
    world.tick += 1
    world.clock = world.tick * c.dynamics.dt
    after = world.measured_lanes()
    for r in np.flatnonzero(before != after):
        events.append({"event": "merge", "tick": world.tick, "vehicle": int(world.ids[r]),
                       "type": world.types[r].short, "from_lane": int(before[r]), "to_lane": int(after[r])})
    off = np.flatnonzero(world.lanes() < 0)
    for r in off:
        events.append({"event": "off_road", "tick": world.tick, "vehicle": int(world.ids[r])})
    check_collisions(world, c.params, c.policy.safety_gap_factor)

    rec.census = world.census()
    events.extend(_advance(world, rec, c))
    events.append({
        "event": "tick", "tick": world.tick, "time": round(world.clock, 6), "phase": rec.phase.label,
        "pairings": {str(k): v for k, v in sorted(rec.pairings.items())},
        "census": _census_payload(rec.census),
        "vehicles": [_vehicle_event(world, r) for r in range(len(world.ids))],
    })
    return world, rec, events


def _advance(world: WorldState, rec: PhaseRecord, c: Controllers) -> list:
    """Phase-transition bookkeeping after a step (possibly several instant transitions)."""
    events = []
    while rec.phase is not Phase.DONE:
        steps = world.tick - rec.entered_tick
        if rec.phase is Phase.INIT:
            done = steps >= c.budgets.init
        else:
            held = phase_condition(world, rec, c.policy.lateral_tolerance)
            rec.streak = rec.streak + 1 if held else 0
            done = rec.streak >= c.policy.detection_window
            if not done and steps >= c.budgets.of(rec.phase):
                events.append({"event": "phase_timeout", "tick": world.tick, "phase": rec.phase.label})
                done = True
        if not done:
            break
        nxt = _next_phase(rec.phase, rec)
        events.append({"event": "phase_transition", "tick": world.tick, "from": rec.phase.label,
                       "to": nxt.label, "census": _census_payload(world.census())})
        rec.phase = nxt
        rec.entered_at = world.clock
        rec.entered_tick = world.tick
        rec.streak = 0
        rec.history.append((world.tick, int(nxt)))
        if rec.phase is not Phase.DONE and phase_condition(world, rec, c.policy.lateral_tolerance):
            # already satisfied on entry: still require the detection window
            continue
    return events
