"""Evaluation tasks: specs, world construction, step accounting, trial runner.

Four tasks mirror the benchmark suite: adversarial pedestrian avoidance,
blind-spot basket avoidance, elevator riding, and a four-turn loop circuit.
Each task has n steps; a monitor judges per-step success, applies the
intervention convention of its task (resume at the next step, or terminate
for the elevator), and provides the mode signal a global planner would.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional, Protocol

import numpy as np

from ..memory import Mode
from ..network import Action
from .oracle import oracle_action, steer_to
from .render import render
from .world import (
    Adversary,
    Basket,
    Elevator,
    Wall,
    WorldState,
    adversary_policy,
    corridor_walls,
    step_dynamics,
    wrap_angle,
)

TASK_KINDS = ("pedestrian", "blindspot", "elevator", "loop")


@dataclass
class TrialResult:
    """Outcome of one trial: completed steps out of n plus failure annotations."""

    completed: int
    total: int
    failures: list[tuple[int, str]] = field(default_factory=list)
    kind: str = ""
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.completed <= self.total):
            raise ValueError(f"completed {self.completed} outside [0, {self.total}]")


@dataclass
class TaskSpec:
    """Task geometry and limits; serializes to a key = value scenario file."""

    kind: str = "blindspot"
    steps: int = 5
    step_time_limit: float = 15.0
    trial_time_cap: float = 240.0
    safety_distance: float = 0.2
    dt: float = 0.1
    blind_radius: float = 0.6
    # corridor tasks
    corridor_length: float = 16.0
    corridor_half_width: float = 0.75
    basket_count: int = 5
    basket_first_x: float = 2.2
    basket_spacing: float = 2.8
    basket_offset_lo: float = 0.26
    basket_offset_hi: float = 0.32
    basket_radius: float = 0.12
    # pedestrian task
    adversary_block_lo: float = 1.0
    adversary_block_hi: float = 1.2
    # elevator task
    lobby_length: float = 3.0
    lobby_half_width: float = 1.0
    car_depth: float = 1.4
    car_half_width: float = 0.7
    door_half_width: float = 0.5
    # loop task
    loop_side: float = 6.0
    loop_half_width: float = 0.8
    stub_length: float = 2.0
    turn_zone: float = 1.25
    leg_time_limit: float = 30.0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.steps < 1:
            raise ValueError("a task needs at least one step")
        if self.kind == "blindspot":
            last = self.basket_first_x + (self.basket_count - 1) * self.basket_spacing
            if last + 1.5 > self.corridor_length:
                raise ValueError("corridor too short for the configured baskets")

    @classmethod
    def blindspot(cls, **kw):
        return cls(kind="blindspot", steps=kw.pop("steps", 5), **kw)

    @classmethod
    def pedestrian(cls, **kw):
        defaults = dict(kind="pedestrian", steps=8, step_time_limit=12.0,
                        corridor_length=20.0, corridor_half_width=1.25,
                        basket_count=0, trial_time_cap=150.0)
        defaults.update(kw)
        return cls(**defaults)

    @classmethod
    def elevator(cls, **kw):
        defaults = dict(kind="elevator", steps=4, step_time_limit=10.0,
                        trial_time_cap=120.0)
        defaults.update(kw)
        return cls(**defaults)

    @classmethod
    def loop(cls, **kw):
        defaults = dict(kind="loop", steps=4, step_time_limit=10.0,
                        trial_time_cap=200.0)
        defaults.update(kw)
        return cls(**defaults)

    @classmethod
    def make(cls, kind: str, **kw):
        return {"pedestrian": cls.pedestrian, "blindspot": cls.blindspot,
                "elevator": cls.elevator, "loop": cls.loop}[kind](**kw)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TaskSpec":
        values = {}
        types = {f.name: f.type for f in fields(cls)}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad scenario line: {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"unknown scenario key {key!r}")
            t = types[key]
            if t in ("int", int):
                values[key] = int(val)
            elif t in ("float", float):
                values[key] = float(val)
            else:
                values[key] = val
        return cls(**values)


# ---------------------------------------------------------------------------
# world builders

def _jitter_pose(rng, x, y, theta, dy=0.08, dth=0.06):
    return x, y + rng.uniform(-dy, dy), theta + rng.uniform(-dth, dth)


def _build_blindspot(spec: TaskSpec, rng) -> WorldState:
    baskets = []
    for i in range(spec.basket_count):
        sign = 1.0 if rng.random() < 0.5 else -1.0
        off = sign * rng.uniform(spec.basket_offset_lo, spec.basket_offset_hi)
        baskets.append(Basket(spec.basket_first_x + i * spec.basket_spacing, off,
                              spec.basket_radius))
    x, y, th = _jitter_pose(rng, 0.35, 0.0, 0.0)
    return WorldState(
        x=x, y=y, theta=th,
        walls=corridor_walls(spec.corridor_length, spec.corridor_half_width),
        baskets=baskets,
        route=np.array([[0.0, 0.0], [spec.corridor_length, 0.0]]),
        bounds=(-0.1, spec.corridor_length + 0.1,
                -spec.corridor_half_width - 0.1, spec.corridor_half_width + 0.1),
        safety_distance=spec.safety_distance,
        blind_radius=spec.blind_radius,
        task_kind="blindspot",
        rng=rng,
    )


def _build_pedestrian(spec: TaskSpec, rng) -> WorldState:
    x, y, th = _jitter_pose(rng, 0.5, 0.0, 0.0)
    world = WorldState(
        x=x, y=y, theta=th,
        walls=corridor_walls(spec.corridor_length, spec.corridor_half_width),
        route=np.array([[0.0, 0.0], [spec.corridor_length, 0.0]]),
        bounds=(-0.1, spec.corridor_length + 0.1,
                -spec.corridor_half_width - 0.1, spec.corridor_half_width + 0.1),
        safety_distance=spec.safety_distance,
        blind_radius=spec.blind_radius,
        task_kind="pedestrian",
        rng=rng,
    )
    adv = Adversary(x=0.0, y=0.0, block_min=spec.adversary_block_lo,
                    block_max=spec.adversary_block_hi)
    world.adversary = adv
    tx, ty = adversary_policy(world)
    adv.x, adv.y = tx, ty
    adv.target_x, adv.target_y = tx, ty
    return world


def _build_elevator(spec: TaskSpec, rng) -> WorldState:
    door_x = spec.lobby_length
    car_x2 = door_x + spec.car_depth
    hw = spec.lobby_half_width
    dh = spec.door_half_width
    ch = spec.car_half_width
    walls = [
        Wall(0.0, -hw, door_x, -hw),
        Wall(0.0, hw, door_x, hw),
        Wall(0.0, -hw, 0.0, hw),
        Wall(door_x, -hw, door_x, -dh),
        Wall(door_x, dh, door_x, hw),
        Wall(door_x, -ch, car_x2, -ch, "car_wall"),
        Wall(door_x, ch, car_x2, ch, "car_wall"),
        Wall(car_x2, -ch, car_x2, ch, "car_wall"),
    ]
    ev = Elevator(door_x=door_x, door_half=dh, car_x2=car_x2, car_half=ch,
                  phase="closed", phase_duration=float(rng.uniform(5.0, 10.0)))
    x, y, th = _jitter_pose(rng, 1.2, 0.0, 0.0)
    return WorldState(
        x=x, y=y, theta=th, walls=walls, elevator=ev,
        route=np.array([[0.4, 0.0], [(door_x + car_x2) / 2, 0.0]]),
        bounds=(-0.1, car_x2 + 0.1, -hw - 0.1, hw + 0.1),
        safety_distance=spec.safety_distance,
        blind_radius=spec.blind_radius,
        task_kind="elevator",
        rng=rng,
    )


def _loop_walls(side: float, hw: float, stub: float) -> list[Wall]:
    """Square ring corridor with two dead-end stubs at every corner, making
    each corner a visually symmetric 4-way junction."""
    s, o = side, hw
    inner = [
        Wall(o, o, s - o, o), Wall(s - o, o, s - o, s - o),
        Wall(s - o, s - o, o, s - o), Wall(o, s - o, o, o),
    ]
    outer = [
        Wall(o, -o, s - o, -o), Wall(s + o, o, s + o, s - o),
        Wall(s - o, s + o, o, s + o), Wall(-o, s - o, -o, o),
    ]
    walls = inner + outer
    # stubs: at each corner, one continuing each incoming leg direction
    for cx, cy, dirs in ((0.0, 0.0, ((-1, 0), (0, -1))),
                         (s, 0.0, ((1, 0), (0, -1))),
                         (s, s, ((1, 0), (0, 1))),
                         (0.0, s, ((-1, 0), (0, 1)))):
        for ux, uy in dirs:
            # stub corridor extends from the junction cell outward
            ex, ey = cx + ux * (o + stub), cy + uy * (o + stub)
            if ux != 0:  # horizontal stub: side walls at y = cy +- o
                x0 = cx + ux * o
                walls.append(Wall(x0, cy - o, ex, cy - o))
                walls.append(Wall(x0, cy + o, ex, cy + o))
                walls.append(Wall(ex, cy - o, ex, cy + o))
            else:
                y0 = cy + uy * o
                walls.append(Wall(cx - o, y0, cx - o, ey))
                walls.append(Wall(cx + o, y0, cx + o, ey))
                walls.append(Wall(cx - o, ey, cx + o, ey))
    return walls


def _build_loop(spec: TaskSpec, rng) -> WorldState:
    s = spec.loop_side
    ccw = bool(rng.random() < 0.5)
    if ccw:
        route = np.array([[s / 2, 0], [s, 0], [s, s], [0, s], [0, 0], [s / 2, 0]],
                         dtype=float)
        heading = 0.0
    else:
        route = np.array([[s / 2, 0], [0, 0], [0, s], [s, s], [s, 0], [s / 2, 0]],
                         dtype=float)
        heading = math.pi
    x, y, th = _jitter_pose(rng, s / 2, 0.0, heading)
    ext = spec.loop_half_width + spec.stub_length + 0.1
    return WorldState(
        x=x, y=y, theta=th,
        walls=_loop_walls(s, spec.loop_half_width, spec.stub_length),
        route=route,
        bounds=(-ext, s + ext, -ext, s + ext),
        safety_distance=spec.safety_distance,
        blind_radius=spec.blind_radius,
        task_kind="loop",
        loop_ccw=ccw,
        rng=rng,
    )


def build_world(spec: TaskSpec, seed: int) -> WorldState:
    rng = np.random.default_rng(seed)
    builder = {"blindspot": _build_blindspot, "pedestrian": _build_pedestrian,
               "elevator": _build_elevator, "loop": _build_loop}[spec.kind]
    return builder(spec, rng)


# ---------------------------------------------------------------------------
# monitors

class TaskMonitor:
    """Tracks per-step success/failure and applies intervention semantics."""

    def __init__(self, spec: TaskSpec, world: WorldState, seed: int):
        self.spec = spec
        self.world = world
        self.seed = seed
        self.completed = 0
        self.failures: list[tuple[int, str]] = []
        self.done = False
        self.step_idx = 0

    def mode(self, world: WorldState) -> Mode:
        return Mode.GO_FORWARD

    def update(self, world: WorldState):
        raise NotImplementedError

    def abort(self, reason: str):
        if not self.done:
            self.failures.append((self.step_idx, reason))
            self.done = True

    def result(self) -> TrialResult:
        return TrialResult(completed=self.completed, total=self.spec.steps,
                           failures=list(self.failures), kind=self.spec.kind,
                           seed=self.seed)

    def _teleport(self, x, y, theta):
        w = self.world
        w.x, w.y, w.theta = x, y, theta
        w.collision = False
        w.collision_entity = ""


class BlindspotMonitor(TaskMonitor):
    def __init__(self, spec, world, seed):
        super().__init__(spec, world, seed)
        self.seg_start = 0.0

    def update(self, world):
        if self.done:
            return
        b = world.baskets[self.step_idx]
        if world.collision:
            self._fail("collision")
        elif world.t - self.seg_start > self.spec.step_time_limit:
            self._fail("timeout")
        elif world.x > b.x + 0.4:
            self.completed += 1
            self._advance()

    def _fail(self, reason):
        self.failures.append((self.step_idx, reason))
        b = self.world.baskets[self.step_idx]
        self._teleport(b.x + 0.6, 0.0, 0.0)
        self._advance()

    def _advance(self):
        self.step_idx += 1
        self.seg_start = self.world.t
        if self.step_idx >= self.spec.steps:
            self.done = True


class PedestrianMonitor(TaskMonitor):
    def __init__(self, spec, world, seed):
        super().__init__(spec, world, seed)
        self.cycle_start = 0.0
        self.seen_cycles = 0
        self.collided = False
        self.grace_until = 0.0  # ignore residual contact right after a reset

    def update(self, world):
        if self.done:
            return
        adv = world.adversary
        if world.collision and world.t >= self.grace_until:
            self.collided = True
        if adv.cycles_completed > self.seen_cycles:
            self.seen_cycles = adv.cycles_completed
            if self.collided:
                self.failures.append((self.step_idx, "collision"))
                self._teleport(world.x, 0.0, 0.0)
            else:
                self.completed += 1
            self.collided = False
            self._advance(world)
        elif world.t - self.cycle_start > self.spec.step_time_limit:
            self.failures.append((self.step_idx, "timeout"))
            adv.cycles_completed += 1
            self.seen_cycles = adv.cycles_completed
            tx, ty = adversary_policy(world)
            adv.target_x, adv.target_y = tx, ty
            adv.walking = True
            adv.collided_this_cycle = False
            adv.engaged_this_cycle = False
            self._teleport(world.x, 0.0, 0.0)
            self.collided = False
            self._advance(world)
        elif world.x > self.spec.corridor_length - 1.0:
            # ran out of corridor before finishing the slalom
            while self.step_idx < self.spec.steps:
                self.failures.append((self.step_idx, "course-end"))
                self.step_idx += 1
            self.done = True

    def _advance(self, world):
        self.step_idx += 1
        self.cycle_start = world.t
        self.grace_until = world.t + 0.5
        if self.step_idx >= self.spec.steps:
            self.done = True


class ElevatorMonitor(TaskMonitor):
    STEP_NAMES = ("enter", "turn", "wait-close", "exit")

    def __init__(self, spec, world, seed):
        super().__init__(spec, world, seed)
        self.t_open0 = None
        self.t_enter = None
        self.t_open1 = None

    def mode(self, world):
        return Mode.TAKE_ELEVATOR

    def _fail(self, reason):
        self.failures.append((self.step_idx, f"{self.STEP_NAMES[self.step_idx]}:{reason}"))
        self.done = True  # first failure terminates the trial

    def update(self, world):
        if self.done:
            return
        ev = world.elevator
        inside = world.x > ev.door_x + 0.3
        if world.collision:
            self._fail("collision")
            return
        if self.step_idx == 0:
            if ev.phase == "open" and ev.floor == 0 and self.t_open0 is None:
                self.t_open0 = world.t
            if inside:
                self.completed += 1
                self.step_idx = 1
                self.t_enter = world.t
            elif self.t_open0 is not None and (
                    world.t - self.t_open0 > self.spec.step_time_limit
                    or (ev.phase in ("closing", "closed") and ev.floor == 0
                        and world.t > self.t_open0)):
                self._fail("missed-door")
        elif self.step_idx == 1:
            if world.x < ev.door_x:
                self._fail("exited")
            elif abs(wrap_angle(world.theta - math.pi)) < 0.35:
                self.completed += 1
                self.step_idx = 2
            elif world.t - self.t_enter > self.spec.step_time_limit:
                self._fail("timeout")
        elif self.step_idx == 2:
            if world.x < ev.door_x:
                self._fail("exited-early")
            elif ev.phase == "closed":
                self.completed += 1
                self.step_idx = 3
        else:
            if ev.phase == "open" and ev.floor == 1 and self.t_open1 is None:
                self.t_open1 = world.t
            if world.x < ev.door_x - 0.8:
                if self.t_open1 is None:
                    self._fail("exited-early")
                else:
                    self.completed += 1
                    self.done = True
            elif self.t_open1 is not None and world.t - self.t_open1 > self.spec.step_time_limit:
                self._fail("timeout")


class LoopMonitor(TaskMonitor):
    def __init__(self, spec, world, seed):
        super().__init__(spec, world, seed)
        self.corners = world.route[1:-1]
        self.turn_mode = Mode.TURN_LEFT if world.loop_ccw else Mode.TURN_RIGHT
        self.leg_start = 0.0
        self.zone_entered = None

    def mode(self, world):
        if self.done:
            return Mode.GO_FORWARD
        c = self.corners[self.step_idx]
        if math.hypot(world.x - c[0], world.y - c[1]) < self.spec.turn_zone:
            return self.turn_mode
        return Mode.GO_FORWARD

    def _legs(self):
        route = self.world.route
        i = self.step_idx + 1
        u_in = route[i] - route[i - 1]
        u_in = u_in / np.hypot(*u_in)
        u_out = route[i + 1] - route[i]
        u_out = u_out / np.hypot(*u_out)
        return u_in, u_out

    def update(self, world):
        if self.done:
            return
        c = self.corners[self.step_idx]
        u_in, u_out = self._legs()
        rel = np.array([world.x - c[0], world.y - c[1]])
        if world.collision:
            self._fail("collision")
            return
        if math.hypot(*rel) < self.spec.turn_zone and self.zone_entered is None:
            self.zone_entered = world.t
        if self.zone_entered is not None:
            prog_out = float(rel @ u_out)
            cross_out = float(rel @ np.array([-u_out[1], u_out[0]]))
            prog_straight = float(rel @ u_in)
            if prog_out > 0.55 and abs(cross_out) < 0.6:
                self.completed += 1
                self._advance()
                return
            if prog_straight > 0.95 or prog_out < -0.95:
                self._fail("wrong-exit")
                return
            if world.t - self.zone_entered > self.spec.step_time_limit:
                self._fail("timeout")
                return
        if world.t - self.leg_start > self.spec.leg_time_limit:
            self._fail("timeout")

    def _fail(self, reason):
        self.failures.append((self.step_idx, reason))
        c = self.corners[self.step_idx]
        _, u_out = self._legs()
        self._teleport(c[0] + 1.1 * u_out[0], c[1] + 1.1 * u_out[1],
                       math.atan2(u_out[1], u_out[0]))
        self._advance()

    def _advance(self):
        self.step_idx += 1
        self.leg_start = self.world.t
        self.zone_entered = None
        if self.step_idx >= self.spec.steps:
            self.done = True


def build_task(spec: TaskSpec, seed: int) -> tuple[WorldState, TaskMonitor]:
    world = build_world(spec, seed)
    monitor = {"blindspot": BlindspotMonitor, "pedestrian": PedestrianMonitor,
               "elevator": ElevatorMonitor, "loop": LoopMonitor}[spec.kind]
    return world, monitor(spec, world, seed)


# ---------------------------------------------------------------------------
# policies and the trial runner

class Policy(Protocol):
    def reset(self, seed: int): ...
    def act(self, obs: np.ndarray, mode: Mode) -> Action: ...


class OraclePolicy:
    """Privileged expert wrapped in the policy interface."""

    needs_world = True

    def __init__(self):
        self.world: Optional[WorldState] = None

    def reset(self, seed: int):
        pass

    def bind_world(self, world: WorldState):
        self.world = world

    def act(self, obs, mode) -> Action:
        return oracle_action(self.world, mode)


class ConstantLanePolicy:
    """Memoryless baseline: follow the lateral lane y = lane at the oracle's
    speed schedule. Privileged pose access gives an upper bound on any
    observation-based memoryless controller's lane keeping."""

    needs_world = True

    def __init__(self, lane: float):
        self.lane = lane
        self.world: Optional[WorldState] = None

    def reset(self, seed: int):
        pass

    def bind_world(self, world: WorldState):
        self.world = world

    def act(self, obs, mode) -> Action:
        w = self.world
        nxt = [b for b in w.baskets if b.x > w.x - 0.45]
        gap = min((b.x - w.x) for b in nxt) if nxt else np.inf
        v = 0.25 if gap <= 0.32 else (0.3 if gap <= 1.3 else 0.8)
        return Action(steer_to(w, w.x + 0.9, self.lane), v)


def run_task(policy, spec: TaskSpec, seed: int) -> TrialResult:
    """Run one trial; the policy sees (observation, mode) and the monitor
    judges steps with the task's intervention semantics."""
    world, monitor = build_task(spec, seed)
    if hasattr(policy, "reset"):
        policy.reset(seed)
    if getattr(policy, "needs_world", False):
        policy.bind_world(world)
    max_ticks = int(spec.trial_time_cap / spec.dt)
    for _ in range(max_ticks):
        if monitor.done:
            break
        obs = render(world)
        mode = monitor.mode(world)
        action = policy.act(obs, mode)
        if action is None or not action.finite():
            monitor.abort("non-finite-action")
            break
        step_dynamics(world, action, spec.dt)
        monitor.update(world)
    else:
        monitor.abort("trial-time-cap")
    return monitor.result()
