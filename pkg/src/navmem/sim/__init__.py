"""Desk-scale partially observable navigation simulator."""

from .world import WorldState, step_dynamics, adversary_policy  # noqa: F401
from .render import render, render_bytes  # noqa: F401
from .oracle import oracle_action  # noqa: F401
from .tasks import TaskSpec, TrialResult, build_task, run_task, OraclePolicy  # noqa: F401
from .collect import collect_demos, collect_interventions  # noqa: F401
