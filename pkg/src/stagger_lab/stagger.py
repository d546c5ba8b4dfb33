"""Reset scheduling: naive synchronous resets vs. staggered offset groups.

In staggered mode the N environments are split into ``num_groups`` contiguous
groups; group ``j`` is advanced ``j * stagger_step`` steps with random actions
before training starts, so every rollout batch mixes all stages of the episode.
Resets only ever happen between rollouts, at a "gate": the moment some
environment has lived ``horizon`` steps since its last full reset. Environments
that terminate early are frozen and flagged, then reset at the next gate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

NAIVE = "naive"
STAGGERED = "staggered"
MODES = (NAIVE, STAGGERED)

HORIZON = "horizon"
PARTIAL_DEFERRED = "partial-deferred"


@dataclass
class StaggerSchedule:
    mode: str
    num_envs: int
    num_groups: int
    stagger_step: int
    horizon: int
    offsets: np.ndarray
    group_of: np.ndarray
    pending_reset: np.ndarray

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.group_of, minlength=self.num_groups)


def build_schedule(
    num_envs: int, horizon: int, rollout_len: int, num_groups: int | None = None, mode: str = STAGGERED
) -> StaggerSchedule:
    """Assign environments to offset groups; the stagger step is the rollout length."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if num_envs < 1:
        raise ValueError("num_envs must be >= 1")
    if not 1 <= rollout_len <= horizon:
        raise ValueError(f"need 1 <= rollout_len <= horizon, got K={rollout_len}, H={horizon}")
    step = rollout_len
    if mode == NAIVE:
        if num_groups not in (None, 1):
            raise ValueError("naive mode uses a single group")
        num_groups = 1
    elif num_groups is None:
        num_groups = math.ceil(horizon / step)
    if num_groups < 1:
        raise ValueError("num_groups must be >= 1")
    if num_groups * step > horizon + step - 1:
        raise ValueError(
            f"{num_groups} groups with stagger step {step} put offsets beyond horizon {horizon}"
        )
    if num_groups > num_envs:
        raise ValueError(f"cannot split {num_envs} envs into {num_groups} nonempty groups")

    group_of = np.empty(num_envs, dtype=np.int64)
    for g, chunk in enumerate(np.array_split(np.arange(num_envs), num_groups)):
        group_of[chunk] = g
    return StaggerSchedule(
        mode=mode,
        num_envs=num_envs,
        num_groups=num_groups,
        stagger_step=step,
        horizon=horizon,
        offsets=group_of * step,
        group_of=group_of,
        pending_reset=np.zeros(num_envs, dtype=bool),
    )


def apply_initial_stagger(states, schedule: StaggerSchedule, env):
    """Advance env ``i`` by ``offsets[i]`` uniform-random steps. Nothing is recorded."""
    offsets = schedule.offsets
    for t in range(int(offsets.max(initial=0))):
        active = (offsets > t) & ~states.episode_done
        if not active.any():
            break
        states, _, _ = env.step(states, env.random_actions(states), active)
    states.lifetime_elapsed[:] = offsets
    return states


def flag_partial_reset(schedule: StaggerSchedule, env_id) -> StaggerSchedule:
    schedule.pending_reset[env_id] = True
    return schedule


def gate_step(states, schedule: StaggerSchedule, env):
    """Apply the resets due after a rollout.

    Returns ``(states, reset_log)`` where ``reset_log`` is a list of
    ``(env_id, reason)`` pairs in env order.
    """
    due = states.lifetime_elapsed >= schedule.horizon
    deferred = np.zeros_like(due)
    if due.any():
        deferred = schedule.pending_reset & ~due
    mask = due | deferred
    if not mask.any():
        return states, []
    states = env.reset(states, mask)
    schedule.pending_reset[mask] = False
    log = [
        (int(states.env_id[i]), HORIZON if due[i] else PARTIAL_DEFERRED)
        for i in np.flatnonzero(mask)
    ]
    return states, log
