"""Demonstration collection: scripted-expert rollouts and gated interventions.

Demo collection drives the oracle through randomized task instances and
records every step. Intervention collection lets a policy drive and hands
control to the oracle whenever the robot strays from the task's reference
line, stalls, or violates a scripted elevator gate; only the expert-driven
segments are recorded.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from ..data import Episode, StepRecord
from ..memory import Mode
from .oracle import _route_point, oracle_action
from .render import render_bytes
from .tasks import TaskSpec, build_task
from .world import WorldState, step_dynamics, wrap_angle


def episode_seeds(seed: int, count: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(s) for s in ss.generate_state(count)]


def collect_demos(specs: Sequence[TaskSpec], episode_count: int, seed: int,
                  progress=None) -> list[Episode]:
    """Oracle-driven rollouts over randomized task instances (round-robin
    across specs, one world seed per episode)."""
    episodes = []
    seeds = episode_seeds(seed, episode_count)
    for i in range(episode_count):
        spec = specs[i % len(specs)]
        world, monitor = build_task(spec, seeds[i])
        records = []
        t_i = 0
        max_ticks = int(spec.trial_time_cap / spec.dt)
        while not monitor.done and t_i < max_ticks:
            obs = render_bytes(world)
            mode = monitor.mode(world)
            a = oracle_action(world, mode)
            records.append(StepRecord(obs, int(mode), (a.steering, a.velocity),
                                      False, t_i))
            step_dynamics(world, a, spec.dt)
            monitor.update(world)
            t_i += 1
        episodes.append(Episode.from_records(records, kind=spec.kind,
                                             seed=seeds[i], phase="demo"))
        if progress is not None:
            progress(i + 1, episode_count)
    return episodes


def _route_deviation(world: WorldState) -> tuple[float, float]:
    """Cross-track distance to the task reference line and heading error
    against its local tangent."""
    route = world.route
    if route is None:
        return 0.0, 0.0
    tx, ty, cross = _route_point(route, world.x, world.y, 0.6)
    desired = math.atan2(ty - world.y, tx - world.x)
    return cross, abs(wrap_angle(desired - world.theta))


def _gate_violation(world: WorldState) -> bool:
    """Scripted elevator gates: pressing a closed door or exiting while the
    task requires staying inside."""
    ev = world.elevator
    if ev is None:
        return False
    near_door_outside = ev.door_x - 0.35 < world.x <= ev.door_x
    if near_door_outside and ev.open_frac < 0.999 and abs(wrap_angle(world.theta)) < 1.2:
        return True
    inside = world.x > ev.door_x
    exiting_allowed = ev.phase == "open" and ev.floor == 1
    if inside and world.x < ev.door_x + 0.12 and not exiting_allowed \
            and abs(wrap_angle(world.theta - math.pi)) < 1.2:
        return True
    return False


def collect_interventions(policy, spec: TaskSpec, seed: int,
                          deviation_threshold: float = 0.5,
                          heading_threshold: float = math.pi / 4,
                          stall_time: float = 3.0) -> list[Episode]:
    """Policy drives; the oracle takes over on deviation, stall or gate
    violation and drives until recovery. Only expert-controlled steps are
    recorded, each contiguous takeover becoming one episode fragment."""
    world, monitor = build_task(spec, seed)
    if hasattr(policy, "reset"):
        policy.reset(seed)
    if getattr(policy, "needs_world", False):
        policy.bind_world(world)
    fragments: list[list[StepRecord]] = []
    current: list[StepRecord] = []
    expert_on = False
    stalled_since: Optional[float] = None
    t_i = 0
    max_ticks = int(spec.trial_time_cap / spec.dt)
    while not monitor.done and t_i < max_ticks:
        obs = render_bytes(world)
        mode = monitor.mode(world)
        cross, head_err = _route_deviation(world)
        moving_ref = oracle_action(world, mode).velocity > 0.1
        if not expert_on:
            if world.cmd_v < 0.05 and moving_ref:
                if stalled_since is None:
                    stalled_since = world.t
            else:
                stalled_since = None
            stalled = stalled_since is not None and world.t - stalled_since >= stall_time
            deviated = cross > deviation_threshold or (
                world.cmd_v > 0.05 and head_err > heading_threshold)
            if deviated or stalled or _gate_violation(world):
                expert_on = True
                stalled_since = None
        if expert_on:
            a = oracle_action(world, mode)
            current.append(StepRecord(obs, int(mode), (a.steering, a.velocity),
                                      True, t_i))
            recovered = cross < 0.15 and (head_err < 0.26 or a.velocity < 0.05) \
                and not _gate_violation(world)
            if recovered and len(current) >= 5:
                fragments.append(current)
                current = []
                expert_on = False
        else:
            a = policy.act(obs.astype(np.float64) / 255.0, mode)
            if a is None or not a.finite():
                monitor.abort("non-finite-action")
                break
        step_dynamics(world, a, spec.dt)
        monitor.update(world)
        t_i += 1
    if current:
        fragments.append(current)
    return [Episode.from_records(frag, kind=spec.kind, seed=seed, phase="dagger")
            for frag in fragments]
