"""Desk-scale lab for synchronous vs. staggered environment resets in on-policy RL."""

from stagger_lab.chainworld import ChainEnv, EnvConfig, EnvState
from stagger_lab.stagger import StaggerSchedule, build_schedule

__all__ = ["ChainEnv", "EnvConfig", "EnvState", "StaggerSchedule", "build_schedule"]
__version__ = "0.1.0"
