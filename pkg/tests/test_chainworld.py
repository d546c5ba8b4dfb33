import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stagger_lab import rng
from stagger_lab.chainworld import (
    ChainEnv,
    EnvBatch,
    EnvConfig,
    EnvState,
    EnvStreams,
    draw_target_actions,
    reset,
    sample_reset_block,
    step,
    step_batch,
)


def make_cfg(H=20, L=5, A=4, **kw):
    return EnvConfig.from_seed(0, H, L, A, **kw)


def play(cfg, actions, seed=0):
    env = ChainEnv(cfg, seed)
    s = env.initial_states(1)
    blocks, rewards = [], []
    for a in actions:
        s, r, _ = env.step(s, np.array([a]))
        blocks.append(int(s.block[0]))
        rewards.append(float(r[0]))
    return blocks, rewards


def test_config_validation():
    with pytest.raises(ValueError):
        EnvConfig(21, 5, 4, (0,) * 4)
    with pytest.raises(ValueError):
        EnvConfig(20, 5, 4, (0,) * 3)
    with pytest.raises(ValueError):
        EnvConfig(20, 5, 4, (0, 1, 2, 4))
    with pytest.raises(ValueError):
        EnvConfig(20, 5, 4, (0,) * 4, progression_prob=1.5)
    assert make_cfg().num_blocks == 4


def test_targets_depend_only_on_seed():
    assert draw_target_actions(3, 40, 20) == draw_target_actions(3, 40, 20)
    assert draw_target_actions(3, 40, 20) != draw_target_actions(4, 40, 20)


def test_mastery_opens_gate_at_block_boundary():
    cfg = make_cfg(progression_prob=0.0, mastery_threshold=3)
    t = cfg.target_actions
    wrong = [(a + 1) % cfg.num_actions for a in t]
    # 3 correct then 2 wrong in block 0: advance exactly at step 5
    blocks, rewards = play(cfg, [t[0]] * 3 + [wrong[0]] * 2 + [wrong[1]] * 5)
    assert blocks[:5] == [0, 0, 0, 0, 1]
    assert rewards[:5] == [0.5, 0.5, 0.5, -0.5, -0.5]
    # no mastery and no bypass in block 1: stuck there
    assert blocks[5:] == [1] * 5


def test_late_mastery_retries_every_step():
    cfg = make_cfg(progression_prob=0.0, mastery_threshold=3)
    t = cfg.target_actions
    w0 = (t[0] + 1) % cfg.num_actions
    # the third correct action arrives at step 7: gate opens then, not before
    blocks, _ = play(cfg, [w0] * 5 + [t[0]] * 3)
    assert blocks == [0] * 7 + [1]


def test_p1_tracks_nominal_block():
    cfg = make_cfg(progression_prob=1.0, mastery_threshold=99)
    blocks, _ = play(cfg, [0] * 20)
    assert blocks == [min((e + 1) // 5, 3) for e in range(20)]


def test_done_at_horizon_and_step_after_done_raises():
    cfg = make_cfg()
    s = EnvState(env_id=0)
    streams = EnvStreams.from_seed(0)
    for i in range(cfg.horizon):
        s, _, done = step(s, 0, cfg, streams)
        assert done == (i == cfg.horizon - 1)
    with pytest.raises(RuntimeError):
        step(s, 0, cfg, streams)
    with pytest.raises(ValueError):
        step(EnvState(env_id=0), cfg.num_actions, cfg, streams)


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**32),
    p=st.sampled_from([0.0, 0.3, 1.0]),
    k=st.integers(0, 4),
    lam=st.sampled_from([0.0, 0.7, 3.0]),
    n=st.integers(1, 6),
)
def test_batch_matches_scalar_and_invariants(seed, p, k, lam, n):
    cfg = EnvConfig.from_seed(seed, 20, 5, 3, progression_prob=p, mastery_threshold=k, reset_lambda=lam)
    env = ChainEnv(cfg, seed)
    batch = env.initial_states(n)
    singles = [reset(EnvState(env_id=i), cfg, env.streams) for i in range(n)]
    assert batch.to_states() == singles
    gen = np.random.default_rng(seed)
    for _ in range(cfg.horizon):
        actions = gen.integers(0, cfg.num_actions, size=n)
        before = batch.block.copy()
        batch, rewards, dones = env.step(batch, actions)
        stepped = [step(s, int(a), cfg, env.streams) for s, a in zip(singles, actions)]
        singles = [s for s, _, _ in stepped]
        assert batch.to_states() == singles
        assert rewards.tolist() == [r for _, r, _ in stepped]
        assert dones.tolist() == [d for _, _, d in stepped]
        jump = batch.block - before
        assert ((jump == 0) | (jump == 1)).all()
        # blocks never run ahead of the clock (a reset may start an env ahead of it)
        assert (batch.block <= np.maximum(batch.elapsed // cfg.block_length, before)).all()
        assert (batch.block < cfg.num_blocks).all()
    assert batch.episode_done.all()


def test_inactive_envs_untouched():
    cfg = make_cfg()
    env = ChainEnv(cfg, 1)
    b = env.initial_states(3)
    out, r, _ = env.step(b, np.array([0, 0, 0]), np.array([True, False, True]))
    assert out.state(1) == b.state(1)
    assert r[1] == 0.0
    assert out.elapsed.tolist() == [1, 0, 1]


def poisson_pmf(lam, j):
    return math.exp(-lam) * lam**j / math.factorial(j)


@pytest.mark.parametrize("lam", [0.3, 1.0, 2.5])
def test_reset_block_is_clamped_poisson(lam):
    B = 4
    u = rng.uniforms(rng.derive_key(0, "poisson"), np.arange(400_000), 0)
    k = sample_reset_block(lam, B, u)
    freq = np.bincount(k, minlength=B) / len(k)
    expect = [poisson_pmf(lam, j) for j in range(B - 1)]
    expect.append(1 - sum(expect))
    np.testing.assert_allclose(freq, expect, atol=0.004)


def test_reset_block_edges():
    assert sample_reset_block(0.0, 10, np.array([0.0, 0.5, 0.999999])).tolist() == [0, 0, 0]
    # u just above the cdf of 0 under lambda=1 lands on block 1
    assert int(sample_reset_block(1.0, 10, math.exp(-1) + 1e-12)) == 1
    assert int(sample_reset_block(50.0, 3, 0.5)) == 2
    with pytest.raises(ValueError):
        sample_reset_block(-1.0, 3, 0.5)


def test_reset_is_deterministic_per_lane():
    cfg = make_cfg(reset_lambda=1.5)
    env = ChainEnv(cfg, 4)
    a = env.initial_states(64)
    b = env.initial_states(64).take(slice(10, 20))
    np.testing.assert_array_equal(a.block[10:20], b.block)
    again = env.reset(a, np.ones(64, dtype=bool))
    assert (again.reset_count == 2).all()
    assert not np.array_equal(again.block, a.block)


def test_random_actions_in_range():
    env = ChainEnv(make_cfg(A=7), 0)
    a = env.random_actions(EnvBatch.fresh(10_000))
    assert a.min() == 0 and a.max() == 6
