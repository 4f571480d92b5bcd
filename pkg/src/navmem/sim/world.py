"""2D navigation world: unicycle robot, walls, baskets, an adversarial
pedestrian and a two-floor elevator with a phased sliding door.

All randomness flows through the world's own Generator so a (seed, policy)
pair fully determines every trajectory. step_dynamics mutates the world in
place (one rollout owns one world) and returns it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..network import Action


def wrap_angle(a: float) -> float:
    while a > math.pi:
        a -= 2 * math.pi
    while a < -math.pi:
        a += 2 * math.pi
    return a


@dataclass
class Wall:
    x1: float; y1: float; x2: float; y2: float
    kind: str = "wall"  # wall | car_wall | door

    def as_array(self):
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass
class Basket:
    x: float
    y: float
    radius: float = 0.12


@dataclass
class Adversary:
    """Pedestrian that repeatedly walks to a blocking spot ahead of the robot.

    A blocking cycle ends (and the next move begins) once the robot has
    turned away from the pedestrian past the avoidance threshold, slipped
    past it, or collided with it.
    """

    x: float
    y: float
    radius: float = 0.22
    speed: float = 2.2
    block_min: float = 1.0
    block_max: float = 1.2
    avoid_threshold: float = 0.52  # rad; "adjusted direction correctly"
    engage_range: float = 2.2
    target_x: float = 0.0
    target_y: float = 0.0
    walking: bool = False
    cycles_completed: int = 0
    collided_this_cycle: bool = False
    engaged_this_cycle: bool = False


@dataclass
class Elevator:
    """Sliding-door car; the floor toggles mid-way through a closed phase
    that follows a full open/close cycle (never while the door moves)."""

    door_x: float          # x of the door plane
    door_half: float       # half-width of the door opening
    car_x2: float          # back wall x
    car_half: float        # half-width of the car interior
    phase: str = "closed"  # closed -> opening -> open -> closing -> closed
    phase_elapsed: float = 0.0
    phase_duration: float = 7.0
    move_time: float = 1.0  # opening/closing animation time
    floor: int = 0
    pending_travel: bool = False
    traveled_this_phase: bool = False

    @property
    def open_frac(self) -> float:
        if self.phase == "open":
            return 1.0
        if self.phase == "closed":
            return 0.0
        frac = min(1.0, self.phase_elapsed / self.move_time)
        return frac if self.phase == "opening" else 1.0 - frac

    def door_panels(self) -> list[Wall]:
        """The two visible door panel segments for the current open fraction."""
        gap_half = self.open_frac * self.door_half
        panels = []
        if gap_half < self.door_half - 1e-9:
            panels.append(Wall(self.door_x, -self.door_half, self.door_x, -gap_half, "door"))
            panels.append(Wall(self.door_x, gap_half, self.door_x, self.door_half, "door"))
        return panels


@dataclass
class WorldState:
    # robot pose and last clamped command
    x: float
    y: float
    theta: float
    cmd_steer: float = 0.0
    cmd_v: float = 0.0
    # entities
    walls: list[Wall] = field(default_factory=list)
    baskets: list[Basket] = field(default_factory=list)
    adversary: Optional[Adversary] = None
    elevator: Optional[Elevator] = None
    route: Optional[np.ndarray] = None  # (N,2) task centerline for oracle/monitors
    # world parameters
    bounds: tuple[float, float, float, float] = (-1.0, 21.0, -2.0, 2.0)
    safety_distance: float = 0.2
    max_steer: float = 2.5   # rad/s
    max_v: float = 1.2       # m/s
    blind_radius: float = 0.6
    task_kind: str = ""
    loop_ccw: bool = True  # loop traversal direction (loop task only)
    # bookkeeping
    t: float = 0.0
    collision: bool = False
    collision_entity: str = ""
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @property
    def pose(self):
        return (self.x, self.y, self.theta)

    def active_walls(self) -> list[Wall]:
        walls = list(self.walls)
        if self.elevator is not None:
            walls.extend(self.elevator.door_panels())
        return walls


def point_segment_distance(px, py, w: Wall) -> float:
    ax, ay, bx, by = w.x1, w.y1, w.x2, w.y2
    abx, aby = bx - ax, by - ay
    denom = abx * abx + aby * aby
    if denom == 0:
        return math.hypot(px - ax, py - ay)
    s = max(0.0, min(1.0, ((px - ax) * abx + (py - ay) * aby) / denom))
    return math.hypot(px - (ax + s * abx), py - (ay + s * aby))


def _check_collision(world: WorldState):
    world.collision = False
    world.collision_entity = ""
    safe = world.safety_distance
    for b in world.baskets:
        if math.hypot(world.x - b.x, world.y - b.y) - b.radius < safe:
            world.collision = True
            world.collision_entity = "basket"
            return
    adv = world.adversary
    if adv is not None:
        if math.hypot(world.x - adv.x, world.y - adv.y) - adv.radius < safe:
            world.collision = True
            world.collision_entity = "adversary"
            return
    for w in world.active_walls():
        if point_segment_distance(world.x, world.y, w) < safe:
            world.collision = True
            world.collision_entity = w.kind
            return


def adversary_policy(world: WorldState) -> Optional[tuple[float, float]]:
    """Next blocking target: a point 1-1.2 m along the robot's current heading,
    clamped into the corridor. Returns None when no adversary is present."""
    adv = world.adversary
    if adv is None:
        return None
    d = world.rng.uniform(adv.block_min, adv.block_max)
    tx = world.x + d * math.cos(world.theta)
    ty = world.y + d * math.sin(world.theta)
    xmin, xmax, ymin, ymax = world.bounds
    margin = adv.radius + 0.25
    tx = min(max(tx, xmin + margin), xmax - margin)
    ty = min(max(ty, ymin + margin), ymax - margin)
    return tx, ty


def _advance_adversary(world: WorldState, dt: float):
    adv = world.adversary
    if adv is None:
        return
    if adv.walking:
        dx, dy = adv.target_x - adv.x, adv.target_y - adv.y
        dist = math.hypot(dx, dy)
        step = adv.speed * dt
        if dist <= step:
            adv.x, adv.y = adv.target_x, adv.target_y
            adv.walking = False
        else:
            nx = adv.x + dx / dist * step
            ny = adv.y + dy / dist * step
            # do not walk into the robot; wait for it to move
            if math.hypot(nx - world.x, ny - world.y) > adv.radius + 0.35:
                adv.x, adv.y = nx, ny
        return

    # blocking: watch for the end-of-cycle triggers
    rel_dist = math.hypot(adv.x - world.x, adv.y - world.y)
    if rel_dist < adv.engage_range:
        adv.engaged_this_cycle = True
    if world.collision and world.collision_entity == "adversary":
        adv.collided_this_cycle = True
    bearing = math.atan2(adv.y - world.y, adv.x - world.x)
    deviated = abs(wrap_angle(world.theta - bearing)) > adv.avoid_threshold
    slipped_past = (math.cos(world.theta) * (adv.x - world.x)
                    + math.sin(world.theta) * (adv.y - world.y)) < -0.1
    trigger = adv.collided_this_cycle or (
        adv.engaged_this_cycle and rel_dist < adv.engage_range and (deviated or slipped_past))
    if trigger:
        adv.cycles_completed += 1
        target = adversary_policy(world)
        adv.target_x, adv.target_y = target
        adv.walking = True
        adv.collided_this_cycle = False
        adv.engaged_this_cycle = False


def _advance_elevator(world: WorldState, dt: float):
    ev = world.elevator
    if ev is None:
        return
    ev.phase_elapsed += dt
    if ev.phase == "closed" and ev.pending_travel and not ev.traveled_this_phase \
            and ev.phase_elapsed >= ev.phase_duration / 2:
        ev.floor = 1 - ev.floor
        ev.traveled_this_phase = True
    if ev.phase_elapsed < ev.phase_duration:
        return
    if ev.phase == "closed":
        ev.phase = "opening"
        ev.phase_duration = ev.move_time
        ev.pending_travel = False
        ev.traveled_this_phase = False
    elif ev.phase == "opening":
        ev.phase = "open"
        ev.phase_duration = float(world.rng.uniform(5.0, 10.0))
    elif ev.phase == "open":
        ev.phase = "closing"
        ev.phase_duration = ev.move_time
    else:  # closing
        ev.phase = "closed"
        ev.phase_duration = float(world.rng.uniform(5.0, 10.0))
        ev.pending_travel = True
    ev.phase_elapsed = 0.0


def step_dynamics(world: WorldState, action: Action, dt: float) -> WorldState:
    """Advance the robot (unicycle), detect collisions, then advance the
    adversary and elevator sub-dynamics. Invalid action values are clamped."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    steer = float(np.clip(action.steering if math.isfinite(action.steering) else 0.0,
                          -world.max_steer, world.max_steer))
    v = float(np.clip(action.velocity if math.isfinite(action.velocity) else 0.0,
                      0.0, world.max_v))
    world.cmd_steer, world.cmd_v = steer, v
    world.theta = wrap_angle(world.theta + steer * dt)
    world.x += v * math.cos(world.theta) * dt
    world.y += v * math.sin(world.theta) * dt
    xmin, xmax, ymin, ymax = world.bounds
    world.x = min(max(world.x, xmin), xmax)
    world.y = min(max(world.y, ymin), ymax)
    world.t += dt
    _check_collision(world)
    _advance_adversary(world, dt)
    _advance_elevator(world, dt)
    return world


def corridor_walls(length: float, half_width: float, kind: str = "wall") -> list[Wall]:
    """Closed rectangular corridor along +x from 0 to length."""
    return [
        Wall(0.0, -half_width, length, -half_width, kind),
        Wall(0.0, half_width, length, half_width, kind),
        Wall(0.0, -half_width, 0.0, half_width, kind),
        Wall(length, -half_width, length, half_width, kind),
    ]
