"""Full-state scripted expert standing in for human teleoperation.

The oracle reads true world geometry (including baskets hidden in the
camera blind spot) and produces deterministic avoidance, elevator riding
and route-following behavior. Its only interfaces are (world, mode) in and
an Action out, so it can drive data collection and serve as a competence
reference in the benchmarks.
"""

from __future__ import annotations

import math

import numpy as np

from ..network import Action
from .world import WorldState, wrap_angle

CRUISE = 0.8
APPROACH_SPEED = 0.3
SWERVE_SPEED = 0.25
STEER_GAIN = 2.8

# blindspot avoidance geometry
SLOW_ZONE = 1.3        # start slowing this far before a basket
COMMIT_GAP = 0.30      # forward gap at which the avoidance arc begins
SWERVE_LANE = 0.35     # magnitude of the avoidance lateral offset
PASS_CLEAR = 0.45      # forward distance after which a basket counts as passed


def steer_to(world: WorldState, tx: float, ty: float) -> float:
    desired = math.atan2(ty - world.y, tx - world.x)
    err = wrap_angle(desired - world.theta)
    return float(np.clip(STEER_GAIN * err, -world.max_steer, world.max_steer))


def align_to(world: WorldState, heading: float) -> float:
    err = wrap_angle(heading - world.theta)
    return float(np.clip(STEER_GAIN * err, -world.max_steer, world.max_steer))


def _next_basket(world: WorldState):
    ahead = [b for b in world.baskets if b.x > world.x - PASS_CLEAR]
    if not ahead:
        return None
    return min(ahead, key=lambda b: b.x)


def _blindspot_oracle(world: WorldState) -> Action:
    b = _next_basket(world)
    if b is None:
        return Action(steer_to(world, world.x + 1.4, 0.0), CRUISE)
    gap = b.x - world.x
    if gap <= COMMIT_GAP:
        # basket is inside the blind zone by now; swerve hard to the open side
        lane = -math.copysign(SWERVE_LANE, b.y)
        wx = max(b.x + 0.15, world.x + 0.25)
        return Action(steer_to(world, wx, lane), SWERVE_SPEED)
    if gap <= SLOW_ZONE:
        return Action(steer_to(world, world.x + 0.5, 0.0), APPROACH_SPEED)
    return Action(steer_to(world, world.x + 0.7, 0.0), CRUISE)


def _pedestrian_oracle(world: WorldState) -> Action:
    adv = world.adversary
    half = None
    for w in world.walls:
        if w.y1 == w.y2 and w.y1 > 0:
            half = w.y1
    half = half if half is not None else 1.25
    if adv is not None and not adv.walking:
        rel_x, rel_y = adv.x - world.x, adv.y - world.y
        dist = math.hypot(rel_x, rel_y)
        bearing = wrap_angle(math.atan2(rel_y, rel_x) - world.theta)
        if dist < 1.9 and abs(bearing) < 1.05:
            if abs(adv.y) > 0.12:
                side = -math.copysign(1.0, adv.y)  # pass on the roomier side
            else:
                side = -math.copysign(1.0, bearing if bearing != 0 else 1.0)
            y_pass = float(np.clip(adv.y + side * 0.85, -(half - 0.4), half - 0.4))
            return Action(steer_to(world, adv.x + 0.55, y_pass), 0.5)
    return Action(steer_to(world, world.x + 1.4, 0.0), CRUISE)


def _elevator_oracle(world: WorldState) -> Action:
    ev = world.elevator
    center_x = (ev.door_x + ev.car_x2) / 2
    if world.x <= ev.door_x:
        if ev.floor == 1:
            # just exited on the far floor; clear the doorway
            return Action(steer_to(world, ev.door_x - 1.7, 0.0), 0.55)
        # lobby side: wait for a floor-0 open, then drive in
        if ev.phase == "open" and ev.floor == 0:
            return Action(steer_to(world, center_x + 0.1, 0.0), 0.6)
        return Action(align_to(world, 0.0) if abs(wrap_angle(world.theta)) > 0.03 else 0.0, 0.0)
    heading_out = abs(wrap_angle(world.theta - math.pi)) < math.pi / 2
    if not heading_out:
        if world.x < center_x - 0.12:
            return Action(steer_to(world, center_x + 0.1, 0.0), 0.5)
        # turn in place to face the door
        spin = math.copysign(world.max_steer, wrap_angle(math.pi - world.theta) or 1.0)
        return Action(spin, 0.0)
    if (ev.phase == "open" and ev.floor == 1) or world.x < ev.door_x + 0.3:
        return Action(steer_to(world, ev.door_x - 1.7, 0.0), 0.55)
    err = abs(wrap_angle(world.theta - math.pi))
    return Action(align_to(world, math.pi) if err > 0.03 else 0.0, 0.0)


def _route_point(route: np.ndarray, x: float, y: float, lookahead: float):
    """Point on the polyline `lookahead` meters past the closest point."""
    p = np.array([x, y])
    best_d = np.inf
    best_seg, best_s = 0, 0.0
    for i in range(len(route) - 1):
        a, b = route[i], route[i + 1]
        ab = b - a
        denom = float(ab @ ab)
        s = 0.0 if denom == 0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
        d = float(np.hypot(*(p - (a + s * ab))))
        if d < best_d:
            best_d, best_seg, best_s = d, i, s
    remaining = lookahead
    seg, s = best_seg, best_s
    while seg < len(route) - 1:
        a, b = route[seg], route[seg + 1]
        seg_len = float(np.hypot(*(b - a)))
        left = (1.0 - s) * seg_len
        if remaining <= left or seg == len(route) - 2:
            frac = s + min(remaining, left) / seg_len if seg_len > 0 else 1.0
            frac = min(frac, 1.0)
            pt = a + frac * (b - a)
            return float(pt[0]), float(pt[1]), best_d
        remaining -= left
        seg, s = seg + 1, 0.0
    pt = route[-1]
    return float(pt[0]), float(pt[1]), best_d


def _route_oracle(world: WorldState) -> Action:
    route = world.route
    tx, ty, _ = _route_point(route, world.x, world.y, 0.65)
    corner_dist = min(
        float(np.hypot(world.x - cx, world.y - cy)) for cx, cy in route[1:-1]
    ) if len(route) > 2 else np.inf
    v = 0.35 if corner_dist < 1.15 else 0.7
    return Action(steer_to(world, tx, ty), v)


def oracle_action(world: WorldState, mode=None) -> Action:
    """Deterministic privileged expert action for the current world."""
    kind = world.task_kind
    if kind == "blindspot":
        return _blindspot_oracle(world)
    if kind == "pedestrian":
        return _pedestrian_oracle(world)
    if kind == "elevator":
        return _elevator_oracle(world)
    if kind == "loop":
        return _route_oracle(world)
    if world.route is not None:
        return _route_oracle(world)
    return Action(steer_to(world, world.x + 1.4, 0.0), CRUISE)
