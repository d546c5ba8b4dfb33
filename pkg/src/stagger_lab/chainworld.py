"""Vectorized 1-D block chain.

An episode lasts ``horizon`` steps and is split into ``num_blocks`` blocks of
``block_length`` steps. Each block has one target action; matching it pays
+0.5, anything else -0.5. The agent only moves to the next block once the
nominal block (``elapsed // block_length``) is ahead of it *and* the skill
gate opens: either ``mastery_threshold`` correct actions were made in the
current block during this episode, or a Bernoulli(``progression_prob``) draw
succeeds. A failed gate is retried on every later step, one block per step.

Randomness is counter based (see :mod:`stagger_lab.rng`): each environment
draws from its own lane, indexed by its step and reset counters, so batched and
one-at-a-time stepping give bit-identical trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from stagger_lab import rng


def draw_target_actions(seed: int, num_blocks: int, num_actions: int) -> tuple[int, ...]:
    gen = rng.generator(seed, rng.TARGETS, num_blocks, num_actions)
    return tuple(int(a) for a in gen.integers(0, num_actions, size=num_blocks))


@dataclass(frozen=True)
class EnvConfig:
    horizon: int
    block_length: int
    num_actions: int
    target_actions: tuple[int, ...]
    progression_prob: float = 1.0
    mastery_threshold: int = 3
    reset_lambda: float = 0.0
    reward_correct: float = 0.5
    reward_incorrect: float = -0.5

    def __post_init__(self):
        if self.horizon <= 0 or self.block_length <= 0 or self.num_actions <= 0:
            raise ValueError("horizon, block_length and num_actions must be positive")
        if self.horizon % self.block_length:
            raise ValueError(
                f"horizon {self.horizon} is not a multiple of block_length {self.block_length}"
            )
        if not 0.0 <= self.progression_prob <= 1.0:
            raise ValueError("progression_prob must lie in [0, 1]")
        if self.mastery_threshold < 0 or self.reset_lambda < 0:
            raise ValueError("mastery_threshold and reset_lambda must be nonnegative")
        object.__setattr__(self, "target_actions", tuple(int(a) for a in self.target_actions))
        if len(self.target_actions) != self.num_blocks:
            raise ValueError(
                f"need {self.num_blocks} target actions, got {len(self.target_actions)}"
            )
        if any(not 0 <= a < self.num_actions for a in self.target_actions):
            raise ValueError("target actions must lie in [0, num_actions)")

    @property
    def num_blocks(self) -> int:
        return self.horizon // self.block_length

    @classmethod
    def from_seed(cls, seed: int, horizon: int, block_length: int, num_actions: int, **kwargs):
        """Build a config whose target actions are drawn from ``seed``."""
        if horizon <= 0 or block_length <= 0 or horizon % block_length:
            raise ValueError(
                f"horizon {horizon} is not a positive multiple of block_length {block_length}"
            )
        targets = draw_target_actions(seed, horizon // block_length, num_actions)
        return cls(horizon, block_length, num_actions, targets, **kwargs)


@dataclass(frozen=True)
class EnvStreams:
    """Stream keys for the environment's three sources of randomness."""

    progress: int
    reset: int
    stagger: int

    @classmethod
    def from_seed(cls, seed: int) -> "EnvStreams":
        return cls(
            progress=rng.derive_key(seed, rng.PROGRESS),
            reset=rng.derive_key(seed, rng.RESET),
            stagger=rng.derive_key(seed, rng.STAGGER),
        )


@dataclass(frozen=True)
class EnvState:
    """One environment. ``step_count``/``reset_count`` index its random lane."""

    env_id: int
    block: int = 0
    elapsed: int = 0
    correct_in_block: int = 0
    episode_done: bool = False
    lifetime_elapsed: int = 0
    step_count: int = 0
    reset_count: int = 0


_BATCH_FIELDS = (
    "env_id",
    "block",
    "elapsed",
    "correct_in_block",
    "episode_done",
    "lifetime_elapsed",
    "step_count",
    "reset_count",
)


@dataclass
class EnvBatch:
    """Struct-of-arrays view of N environments."""

    env_id: np.ndarray
    block: np.ndarray
    elapsed: np.ndarray
    correct_in_block: np.ndarray
    episode_done: np.ndarray
    lifetime_elapsed: np.ndarray
    step_count: np.ndarray
    reset_count: np.ndarray = field(repr=False)

    @classmethod
    def fresh(cls, num_envs: int) -> "EnvBatch":
        z = np.zeros(num_envs, dtype=np.int64)
        return cls(
            env_id=np.arange(num_envs, dtype=np.int64),
            block=z.copy(),
            elapsed=z.copy(),
            correct_in_block=z.copy(),
            episode_done=np.zeros(num_envs, dtype=bool),
            lifetime_elapsed=z.copy(),
            step_count=z.copy(),
            reset_count=z.copy(),
        )

    @classmethod
    def from_states(cls, states) -> "EnvBatch":
        cols = {f: np.array([getattr(s, f) for s in states]) for f in _BATCH_FIELDS}
        cols["episode_done"] = cols["episode_done"].astype(bool)
        for f in _BATCH_FIELDS:
            if f != "episode_done":
                cols[f] = cols[f].astype(np.int64)
        return cls(**cols)

    def to_states(self) -> list[EnvState]:
        return [self.state(i) for i in range(len(self))]

    def state(self, i: int) -> EnvState:
        vals = {f: getattr(self, f)[i].item() for f in _BATCH_FIELDS}
        return EnvState(**vals)

    def take(self, index) -> "EnvBatch":
        return EnvBatch(**{f: getattr(self, f)[index].copy() for f in _BATCH_FIELDS})

    def copy(self) -> "EnvBatch":
        return self.take(slice(None))

    def __len__(self) -> int:
        return len(self.env_id)


def sample_reset_block(reset_lambda: float, num_blocks: int, u) -> np.ndarray:
    """Poisson(``reset_lambda``) by CDF inversion of uniforms ``u``, clamped to [0, B-1]."""
    if reset_lambda < 0 or num_blocks < 1:
        raise ValueError("need reset_lambda >= 0 and num_blocks >= 1")
    u = np.asarray(u, dtype=np.float64)
    k = np.zeros(u.shape, dtype=np.int64)
    pmf = np.exp(-reset_lambda)
    cdf = pmf
    for j in range(1, num_blocks):
        beyond = u >= cdf
        if not beyond.any():
            break
        k += beyond
        pmf *= reset_lambda / j
        cdf += pmf
    return k


def reset(state: EnvState, cfg: EnvConfig, streams: EnvStreams) -> EnvState:
    u = rng.uniforms(streams.reset, state.env_id, state.reset_count)
    b0 = int(sample_reset_block(cfg.reset_lambda, cfg.num_blocks, u))
    return replace(
        state,
        block=b0,
        elapsed=0,
        correct_in_block=0,
        episode_done=False,
        lifetime_elapsed=0,
        reset_count=state.reset_count + 1,
    )


def step(state: EnvState, action: int, cfg: EnvConfig, streams: EnvStreams):
    """Single-environment transition; returns ``(state, reward, done)``."""
    if state.episode_done:
        raise RuntimeError(f"env {state.env_id} stepped after its episode ended")
    if not 0 <= action < cfg.num_actions:
        raise ValueError(f"action {action} outside [0, {cfg.num_actions})")
    correct = action == cfg.target_actions[state.block]
    reward = cfg.reward_correct if correct else cfg.reward_incorrect
    block = state.block
    correct_in_block = state.correct_in_block + int(correct)
    elapsed = state.elapsed + 1
    u = float(rng.uniforms(streams.progress, state.env_id, state.step_count))
    if block < cfg.num_blocks - 1 and elapsed >= (block + 1) * cfg.block_length:
        if correct_in_block >= cfg.mastery_threshold or u < cfg.progression_prob:
            block += 1
            correct_in_block = 0
    done = elapsed >= cfg.horizon
    new = replace(
        state,
        block=block,
        elapsed=elapsed,
        correct_in_block=correct_in_block,
        episode_done=done,
        lifetime_elapsed=state.lifetime_elapsed + 1,
        step_count=state.step_count + 1,
    )
    return new, reward, done


def reset_batch(batch: EnvBatch, mask, cfg: EnvConfig, streams: EnvStreams) -> EnvBatch:
    """Reset the environments selected by boolean ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    out = batch.copy()
    if not mask.any():
        return out
    u = rng.uniforms(streams.reset, batch.env_id[mask], batch.reset_count[mask])
    out.block[mask] = sample_reset_block(cfg.reset_lambda, cfg.num_blocks, u)
    out.elapsed[mask] = 0
    out.correct_in_block[mask] = 0
    out.episode_done[mask] = False
    out.lifetime_elapsed[mask] = 0
    out.reset_count[mask] += 1
    return out


def step_batch(batch: EnvBatch, actions, cfg: EnvConfig, streams: EnvStreams, active=None):
    """Elementwise :func:`step` over a batch.

    Environments with ``active`` false are left untouched and report reward 0.
    Returns ``(batch, rewards, dones)``.
    """
    actions = np.asarray(actions, dtype=np.int64)
    n = len(batch)
    if actions.shape != (n,):
        raise ValueError(f"expected {n} actions, got shape {actions.shape}")
    active = np.ones(n, dtype=bool) if active is None else np.asarray(active, dtype=bool)
    if np.any(batch.episode_done & active):
        bad = np.flatnonzero(batch.episode_done & active)
        raise RuntimeError(f"envs {bad.tolist()} stepped after their episode ended")
    if np.any(active & ((actions < 0) | (actions >= cfg.num_actions))):
        raise ValueError("action outside [0, num_actions)")

    targets = np.asarray(cfg.target_actions, dtype=np.int64)
    safe_actions = np.where(active, actions, 0)
    correct = active & (safe_actions == targets[batch.block])
    rewards = np.where(correct, cfg.reward_correct, cfg.reward_incorrect)
    rewards = np.where(active, rewards, 0.0)

    out = batch.copy()
    out.correct_in_block += correct
    out.elapsed += active
    out.lifetime_elapsed += active
    u = rng.uniforms(streams.progress, batch.env_id, batch.step_count)
    attempt = (
        active
        & (out.block < cfg.num_blocks - 1)
        & (out.elapsed >= (out.block + 1) * cfg.block_length)
    )
    opened = (out.correct_in_block >= cfg.mastery_threshold) | (u < cfg.progression_prob)
    advance = attempt & opened
    out.block += advance
    out.correct_in_block[advance] = 0
    out.step_count += active
    out.episode_done = np.where(active, out.elapsed >= cfg.horizon, batch.episode_done)
    return out, rewards, out.episode_done.copy()


class ChainEnv:
    """Binds a config and its random streams; the object the training loop drives."""

    def __init__(self, cfg: EnvConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.streams = EnvStreams.from_seed(seed)

    @property
    def horizon(self) -> int:
        return self.cfg.horizon

    @property
    def num_blocks(self) -> int:
        return self.cfg.num_blocks

    @property
    def num_actions(self) -> int:
        return self.cfg.num_actions

    def initial_states(self, num_envs: int) -> EnvBatch:
        batch = EnvBatch.fresh(num_envs)
        return reset_batch(batch, np.ones(num_envs, dtype=bool), self.cfg, self.streams)

    def reset(self, batch: EnvBatch, mask) -> EnvBatch:
        return reset_batch(batch, mask, self.cfg, self.streams)

    def step(self, batch: EnvBatch, actions, active=None):
        return step_batch(batch, actions, self.cfg, self.streams, active)

    def random_actions(self, batch: EnvBatch) -> np.ndarray:
        u = rng.uniforms(self.streams.stagger, batch.env_id, batch.step_count)
        return np.minimum((u * self.cfg.num_actions).astype(np.int64), self.cfg.num_actions - 1)
