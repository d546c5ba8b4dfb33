"""Instability instrumentation: accuracy, block occupancy, value error, KL, forgetting."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field

import numpy as np


def rolling_accuracy(rewards, valid=None, reward_correct: float = 0.5) -> float:
    """Fraction of (valid) steps in the window that earned the correct-action reward."""
    rewards = np.asarray(rewards).reshape(-1)
    if valid is not None:
        rewards = rewards[np.asarray(valid, dtype=bool).reshape(-1)]
    if rewards.size == 0:
        raise ValueError("accuracy window is empty")
    return float(np.mean(rewards == reward_correct))


class AccuracyEMA:
    """Exponential moving average over per-batch accuracies (``alpha`` = weight of the new batch)."""

    def __init__(self, alpha: float = 0.1):
        self.alpha = alpha
        self.value: float | None = None

    def update(self, batch_accuracy: float) -> float:
        if self.value is None:
            self.value = batch_accuracy
        else:
            self.value += self.alpha * (batch_accuracy - self.value)
        return self.value


def occupancy_histogram(blocks, num_blocks: int) -> np.ndarray:
    return np.bincount(np.asarray(blocks, dtype=np.int64).reshape(-1), minlength=num_blocks)


def rollout_occupancy(obs, num_blocks: int) -> np.ndarray:
    """Mean over the K rollout steps of the per-block environment counts.

    ``obs`` is the ``(N, K)`` block array of a rollout; each column sums to N,
    so the result does too.
    """
    obs = np.asarray(obs)
    counts = np.stack([occupancy_histogram(obs[:, k], num_blocks) for k in range(obs.shape[1])])
    return counts.mean(axis=0)


def approx_kl(log_probs_old, log_probs_new) -> float:
    """0.5 * mean squared log-prob difference."""
    d = np.asarray(log_probs_new, dtype=np.float64) - np.asarray(log_probs_old, dtype=np.float64)
    return float(0.5 * np.mean(d * d))


def block_accuracy(obs, rewards, valid, num_blocks: int, reward_correct: float = 0.5) -> np.ndarray:
    """Per-block accuracy of one rollout, by the block the agent occupied when acting.

    Blocks with no valid transitions are NaN.
    """
    obs = np.asarray(obs).reshape(-1)
    valid = np.asarray(valid, dtype=bool).reshape(-1)
    hits = (np.asarray(rewards).reshape(-1) == reward_correct) & valid
    visits = np.bincount(obs[valid], minlength=num_blocks)
    correct = np.bincount(obs, weights=hits, minlength=num_blocks)
    acc = np.full(num_blocks, np.nan)
    seen = visits > 0
    acc[seen] = correct[seen] / visits[seen]
    return acc


def policy_block_accuracy(logits, target_actions) -> np.ndarray:
    """Probability the policy picks each block's target action; ``logits`` has one row per block."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
    return probs[np.arange(len(target_actions)), np.asarray(target_actions)]


def update_forgetting(best_so_far, acc_row):
    """Fold one accuracy row into the running best; returns ``(best, forgetting_row)``.

    NaN cells in ``acc_row`` leave the best untouched and have zero forgetting.
    """
    best = np.asarray(best_so_far, dtype=np.float64).copy()
    acc_row = np.asarray(acc_row, dtype=np.float64)
    seen = ~np.isnan(acc_row)
    best[seen] = np.fmax(best[seen], acc_row[seen])
    forgetting = np.zeros_like(acc_row)
    forgetting[seen] = best[seen] - acc_row[seen]
    return best, forgetting


def forgetting_matrix(acc_matrix) -> np.ndarray:
    acc_matrix = np.asarray(acc_matrix, dtype=np.float64)
    best = np.full(acc_matrix.shape[1], np.nan)
    rows = []
    for acc_row in acc_matrix:
        best, f = update_forgetting(best, acc_row)
        rows.append(f)
    return np.array(rows).reshape(acc_matrix.shape)


def summarize_forgetting(forgetting, acc_matrix=None) -> float:
    """Mean forgetting over defined cells (all cells when no accuracy mask is given)."""
    forgetting = np.asarray(forgetting, dtype=np.float64)
    if acc_matrix is not None:
        cells = forgetting[~np.isnan(np.asarray(acc_matrix, dtype=np.float64))]
    else:
        cells = forgetting.reshape(-1)
    return float(cells.mean()) if cells.size else 0.0


def success_rate(dones, next_obs, valid, num_blocks: int) -> float:
    """Share of episodes ending in this rollout that finished in the last block; NaN if none ended."""
    ended = np.asarray(dones, dtype=bool) & np.asarray(valid, dtype=bool)
    if not ended.any():
        return math.nan
    return float(np.mean(np.asarray(next_obs)[ended] == num_blocks - 1))


def aggregate(values) -> tuple[float, float]:
    """Sample mean and sample (ddof=1) standard deviation."""
    v = [float(x) for x in np.asarray(values, dtype=np.float64).reshape(-1)]
    if len(v) < 2:
        raise ValueError("need at least two values to aggregate")
    # statistics works in exact rationals: identical inputs give std exactly 0
    return statistics.fmean(v), statistics.stdev(v)


METRIC_COLUMNS = (
    "update",
    "rolling_accuracy",
    "success_rate",
    "value_mse",
    "approx_kl",
    "entropy",
    "clip_fraction",
)


ROLLOUT = "rollout"
POLICY = "policy"
FORGETTING_SOURCES = (POLICY, ROLLOUT)


class _ForgettingTrack:
    def __init__(self, num_blocks: int):
        self.best = np.full(num_blocks, np.nan)
        self.accuracy: list[np.ndarray] = []
        self.forgetting: list[np.ndarray] = []

    def add(self, acc_row):
        self.best, f = update_forgetting(self.best, acc_row)
        self.accuracy.append(np.asarray(acc_row, dtype=np.float64))
        self.forgetting.append(f)


@dataclass
class MetricsLedger:
    """Per-update metrics of one run.

    Per-block accuracy is tracked from two sources. ``rollout`` scores the
    transitions collected in the update's rollout, grouped by occupied block;
    blocks nobody visited are absent (NaN). ``policy`` scores every block after
    the update as the probability the policy picks its target action. ``source``
    picks the one behind :attr:`acc_matrix`, :attr:`forgetting_matrix` and
    :meth:`mean_forgetting`.
    """

    num_envs: int
    num_blocks: int
    ema_alpha: float | None = None
    source: str = POLICY
    rows: list[dict] = field(default_factory=list)
    occupancy: list[np.ndarray] = field(default_factory=list)
    episodes_ended: list[int] = field(default_factory=list)
    episodes_succeeded: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.source not in FORGETTING_SOURCES:
            raise ValueError(f"forgetting source must be one of {FORGETTING_SOURCES}")
        self._ema = AccuracyEMA(self.ema_alpha) if self.ema_alpha is not None else None
        self.tracks = {name: _ForgettingTrack(self.num_blocks) for name in FORGETTING_SOURCES}

    def record(self, update: int, buffer, stats, policy_accuracy=None) -> dict:
        """Fold one update in; ``policy_accuracy`` is the per-block probe after the update."""
        acc = rolling_accuracy(buffer.rewards, buffer.valid)
        if self._ema is not None:
            acc = self._ema.update(acc)
        ended = buffer.dones & buffer.valid
        n_ended = int(ended.sum())
        n_success = int((buffer.next_obs[ended] == self.num_blocks - 1).sum())
        row = {
            "update": update,
            "rolling_accuracy": acc,
            "success_rate": n_success / n_ended if n_ended else math.nan,
            "value_mse": stats.value_mse,
            "approx_kl": stats.approx_kl,
            "entropy": stats.entropy,
            "clip_fraction": stats.clip_fraction,
        }
        self.rows.append(row)
        self.episodes_ended.append(n_ended)
        self.episodes_succeeded.append(n_success)
        self.occupancy.append(rollout_occupancy(buffer.obs, self.num_blocks))
        self.tracks[ROLLOUT].add(block_accuracy(buffer.obs, buffer.rewards, buffer.valid, self.num_blocks))
        if policy_accuracy is None:
            policy_accuracy = np.full(self.num_blocks, np.nan)
        self.tracks[POLICY].add(policy_accuracy)
        return row

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def accuracy_matrix(self, source: str | None = None) -> np.ndarray:
        return np.array(self.tracks[source or self.source].accuracy).reshape(-1, self.num_blocks)

    def forgetting_of(self, source: str | None = None) -> np.ndarray:
        return np.array(self.tracks[source or self.source].forgetting).reshape(-1, self.num_blocks)

    @property
    def acc_matrix(self) -> np.ndarray:
        return self.accuracy_matrix()

    @property
    def forgetting_matrix(self) -> np.ndarray:
        return self.forgetting_of()

    @property
    def occupancy_matrix(self) -> np.ndarray:
        return np.array(self.occupancy).reshape(-1, self.num_blocks)

    def mean_forgetting(self, source: str | None = None) -> float:
        return summarize_forgetting(self.forgetting_of(source), self.accuracy_matrix(source))

    def final_success(self, window: int) -> float:
        """Success over all episodes that ended in the last ``window`` updates."""
        ended = sum(self.episodes_ended[-window:])
        if not ended:
            return math.nan
        return sum(self.episodes_succeeded[-window:]) / ended

    def updates_to_threshold(self, threshold: float = 0.75) -> int | None:
        for row in self.rows:
            s = row["success_rate"]
            if not math.isnan(s) and s >= threshold:
                return int(row["update"])
        return None
