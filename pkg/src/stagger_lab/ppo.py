"""PPO from scratch: rollouts, GAE, clipped surrogate, Adam with global-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from stagger_lab import metrics, net, rng
from stagger_lab.stagger import flag_partial_reset, gate_step


@dataclass(frozen=True)
class PpoConfig:
    lr: float = 3e-4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    rollout_len: int = 5
    num_envs: int = 512
    total_updates: int = 150
    epochs: int = 4
    num_minibatches: int = 4
    clip_eps: float = 0.2
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    max_grad_norm: float = 0.5
    normalize_adv: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.rollout_len < 1 or self.num_envs < 1 or self.epochs < 1 or self.num_minibatches < 1:
            raise ValueError("rollout_len, num_envs, epochs and num_minibatches must be >= 1")
        if (self.num_envs * self.rollout_len) % self.num_minibatches:
            raise ValueError(
                f"batch of {self.num_envs}x{self.rollout_len} does not split into "
                f"{self.num_minibatches} minibatches"
            )

    @property
    def batch_size(self) -> int:
        return self.num_envs * self.rollout_len

    @property
    def minibatch_size(self) -> int:
        return self.batch_size // self.num_minibatches


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RolloutBuffer:
    """``(N, K)`` arrays of one rollout. ``valid`` is false for frozen (finished) envs."""

    obs: np.ndarray
    elapsed: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    valid: np.ndarray
    next_obs: np.ndarray
    bootstrap_values: np.ndarray

    @classmethod
    def empty(cls, n: int, k: int) -> "RolloutBuffer":
        return cls(
            obs=np.zeros((n, k), dtype=np.int64),
            elapsed=np.zeros((n, k), dtype=np.int64),
            actions=np.zeros((n, k), dtype=np.int64),
            log_probs=np.zeros((n, k)),
            rewards=np.zeros((n, k)),
            dones=np.zeros((n, k), dtype=bool),
            values=np.zeros((n, k)),
            valid=np.zeros((n, k), dtype=bool),
            next_obs=np.zeros((n, k), dtype=np.int64),
            bootstrap_values=np.zeros(n),
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.obs.shape


def collect_rollout(env, states, params, schedule, cfg: PpoConfig, seed: int, update: int):
    """Run the frozen policy ``params`` for K steps in every env, then apply the reset gate.

    Returns ``(buffer, states, reset_log)``.
    """
    n, k_len = len(states), cfg.rollout_len
    buf = RolloutBuffer.empty(n, k_len)
    policy_key = rng.derive_key(seed, rng.POLICY)
    for k in range(k_len):
        active = ~states.episode_done
        logits, values = net.forward(params, states.block)
        u = rng.uniforms(policy_key, states.env_id, update * k_len + k)
        actions, logp = net.sample_actions(logits, u)
        buf.obs[:, k] = states.block
        buf.elapsed[:, k] = states.elapsed
        buf.actions[:, k] = actions
        buf.log_probs[:, k] = np.where(active, logp, 0.0)
        buf.values[:, k] = np.where(active, values, 0.0)
        buf.valid[:, k] = active

        states, rewards, dones = env.step(states, actions, active)
        # frozen envs keep their lifetime clock running so their gate still arrives
        states.lifetime_elapsed[~active] += 1
        buf.rewards[:, k] = rewards
        buf.dones[:, k] = dones & active
        buf.next_obs[:, k] = states.block
        early = dones & active & (states.lifetime_elapsed < env.horizon)
        if early.any():
            flag_partial_reset(schedule, np.flatnonzero(early))

    _, last_values = net.forward(params, states.block)
    buf.bootstrap_values = np.where(states.episode_done, 0.0, last_values).astype(np.float64)
    states, reset_log = gate_step(states, schedule, env)
    return buf, states, reset_log


def compute_gae(rewards, values, dones, bootstrap_values, gamma: float, lam: float):
    """Backward GAE sweep per environment; returns ``(advantages, returns)``, both ``(N, K)``."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    not_done = 1.0 - np.asarray(dones, dtype=np.float64)
    n, k_len = rewards.shape
    adv = np.zeros((n, k_len))
    next_adv = np.zeros(n)
    next_value = np.asarray(bootstrap_values, dtype=np.float64)
    for t in reversed(range(k_len)):
        delta = rewards[:, t] + gamma * next_value * not_done[:, t] - values[:, t]
        next_adv = delta + gamma * lam * not_done[:, t] * next_adv
        adv[:, t] = next_adv
        next_value = values[:, t]
    return adv, adv + values


def clipped_policy_loss(log_probs_new, log_probs_old, advantages, clip_eps: float) -> float:
    ratio = np.exp(np.asarray(log_probs_new) - np.asarray(log_probs_old))
    adv = np.asarray(advantages)
    return float(-np.mean(np.minimum(ratio * adv, np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * adv)))


def clipped_policy_grad(log_probs_new, log_probs_old, advantages, clip_eps: float) -> np.ndarray:
    """d(clipped_policy_loss)/d(log_probs_new), elementwise."""
    ratio = np.exp(np.asarray(log_probs_new) - np.asarray(log_probs_old))
    adv = np.asarray(advantages)
    unclipped = ratio * adv <= np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * adv
    return -np.where(unclipped, ratio * adv, 0.0) / ratio.size


@dataclass(frozen=True)
class LossWeights:
    policy: float = 1.0
    value: float = 0.5
    entropy: float = 0.01


def loss_and_grads(params, obs, actions, log_probs_old, advantages, returns, weights: LossWeights, clip_eps: float):
    """``policy * clipped_loss + value * MSE(V, returns) - entropy * mean(H)`` and its gradient.

    Returns ``(loss, parts, grads)``; ``parts`` holds the unweighted components.
    """
    dtype = params.dtype
    logits, values, cache = net.forward_cached(params, obs)
    logp_all = net.log_softmax(logits)
    probs = np.exp(logp_all)
    n = len(actions)
    idx = np.arange(n)
    logp = logp_all[idx, actions]
    ent = -(probs * logp_all).sum(axis=-1)
    returns = np.asarray(returns, dtype=dtype)
    verr = values - returns

    pg_loss = clipped_policy_loss(logp, log_probs_old, advantages, clip_eps)
    v_mse = float(np.mean(verr * verr))
    ent_mean = float(np.mean(ent))
    loss = weights.policy * pg_loss + weights.value * v_mse - weights.entropy * ent_mean

    dlogp = weights.policy * clipped_policy_grad(logp, log_probs_old, advantages, clip_eps)
    dlogits = -probs * dlogp[:, None]
    dlogits[idx, actions] += dlogp
    # dH/dz = -p * (log p + H)
    dlogits += (weights.entropy / n) * probs * (logp_all + ent[:, None])
    dvalues = weights.value * 2.0 * verr / n
    grads = net.backward(params, cache, dlogits.astype(dtype), dvalues)

    ratio = np.exp(logp - log_probs_old)
    parts = {
        "policy_loss": pg_loss,
        "value_mse": v_mse,
        "entropy": ent_mean,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip_eps)),
    }
    return loss, parts, grads


def global_norm(grads) -> float:
    total = 0.0
    for g in grads.values():
        flat = g.reshape(-1)
        total += float(flat @ flat)
    return float(np.sqrt(total))


def clip_grad_norm(grads, max_norm: float):
    """Scale ``grads`` so their global norm is at most ``max_norm``; returns ``(grads, pre_norm)``."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        grads = {k: g * g.dtype.type(scale) for k, g in grads.items()}
    return grads, norm


@dataclass
class AdamState:
    """First/second moments as flat vectors aligned with ``NetworkParams.flat``."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(np.zeros_like(params.flat), np.zeros_like(params.flat))

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step)


@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, step_size, beta1, beta2, inv_sqrt_bc2, eps):
    for i in range(p.size):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        # keep the second moment out of the (very slow) subnormal range
        if vi < 1e-30:
            vi = 0.0
        m[i] = mi
        v[i] = vi
        p[i] -= step_size * mi / (np.sqrt(vi) * inv_sqrt_bc2 + eps)


def adam_step(params, grads, adam: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, *, inplace=False):
    """One bias-corrected Adam step; returns ``(params, adam)``.

    ``p -= lr * (m / (1 - beta1^t)) / (sqrt(v / (1 - beta2^t)) + eps)``.
    With ``inplace`` the given params and moments are overwritten (the training
    loop's fast path); otherwise fresh copies are returned.
    """
    if not inplace:
        params, adam = params.copy(), adam.copy()
    g = net.flatten(grads).astype(params.dtype, copy=False)
    adam.step += 1
    bc1 = 1.0 - beta1**adam.step
    bc2 = 1.0 - beta2**adam.step
    _adam_kernel(params.flat, g, adam.m, adam.v, lr / bc1, beta1, beta2, 1.0 / np.sqrt(bc2), eps)
    return params, adam


@dataclass
class UpdateStats:
    value_mse: float
    approx_kl: float
    entropy: float
    clip_fraction: float
    policy_loss: float
    max_grad_norm_pre: float
    max_grad_norm_post: float
    visits: np.ndarray = field(repr=False)


def minibatch_indices(n: int, num_minibatches: int, gen: np.random.Generator) -> list[np.ndarray]:
    return np.array_split(gen.permutation(n), num_minibatches)


def normalize(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def update(params, adam: AdamState, buffer: RolloutBuffer, advantages, returns, cfg: PpoConfig, seed: int, update_index: int):
    """Epochs x shuffled minibatches over the valid transitions of ``buffer``."""
    mask = buffer.valid.reshape(-1)
    obs = buffer.obs.reshape(-1)[mask]
    actions = buffer.actions.reshape(-1)[mask]
    old_logp = buffer.log_probs.reshape(-1)[mask].astype(params.dtype)
    adv_all = np.asarray(advantages).reshape(-1)[mask]
    ret_all = np.asarray(returns).reshape(-1)[mask]
    n = len(obs)
    params, adam = params.copy(), adam.copy()
    weights = LossWeights(1.0, cfg.vf_coef, cfg.ent_coef)
    gen = rng.generator(seed, rng.SHUFFLE, update_index)

    visits = np.zeros(n, dtype=np.int64)
    parts_log = []
    pre_norms, post_norms = [], []
    for _ in range(cfg.epochs):
        for mb in minibatch_indices(n, cfg.num_minibatches, gen):
            visits[mb] += 1
            adv = adv_all[mb]
            if cfg.normalize_adv:
                adv = normalize(adv)
            loss, parts, grads = loss_and_grads(
                params, obs[mb], actions[mb], old_logp[mb], adv.astype(params.dtype),
                ret_all[mb], weights, cfg.clip_eps,
            )
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at update {update_index}: {parts}"
                )
            grads, pre = clip_grad_norm(grads, cfg.max_grad_norm)
            pre_norms.append(pre)
            post_norms.append(global_norm(grads))
            params, adam = adam_step(
                params, grads, adam, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, inplace=True
            )
            parts_log.append(parts)
    if not params.all_finite():
        raise TrainingDiverged(f"non-finite parameters after update {update_index}")

    new_logp, _, _ = net.evaluate_actions(params, obs, actions)
    stats = UpdateStats(
        value_mse=float(np.mean([p["value_mse"] for p in parts_log])),
        approx_kl=metrics.approx_kl(old_logp, new_logp),
        entropy=float(np.mean([p["entropy"] for p in parts_log])),
        clip_fraction=float(np.mean([p["clip_fraction"] for p in parts_log])),
        policy_loss=float(np.mean([p["policy_loss"] for p in parts_log])),
        max_grad_norm_pre=max(pre_norms),
        max_grad_norm_post=max(post_norms),
        visits=visits,
    )
    return params, adam, stats
