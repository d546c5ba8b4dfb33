import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import finite_difference_errors, reduced_problem
from stagger_lab import net
from stagger_lab.ppo import LossWeights


def per_sample_forward(params, obs):
    """Row-at-a-time MLP, no table tricks."""
    t = params.tensors
    logits, values = [], []
    for o in obs:
        h = {}
        for trunk in params.arch.trunks():
            x = t[f"{trunk}/embed"][o]
            for i in range(len(params.arch.hidden)):
                x = np.maximum(x @ t[f"{trunk}/w{i}"] + t[f"{trunk}/b{i}"], 0)
            h[trunk] = x
        logits.append(h["actor"] @ t["pi_w"] + t["pi_b"])
        values.append(float(h[params.arch.value_trunk] @ t["v_w"][:, 0] + t["v_b"][0]))
    return np.array(logits), np.array(values)


@pytest.mark.parametrize("separate", [True, False])
def test_forward_matches_per_sample(separate):
    params = net.init_params(1, 6, 5, embed_dim=8, hidden=(16, 16), separate_critic=separate, dtype=np.float64)
    params.tensors["pi_w"][:] *= 100
    obs = np.array([0, 5, 3, 3, 1])
    logits, values = net.forward(params, obs)
    ref_l, ref_v = per_sample_forward(params, obs)
    np.testing.assert_allclose(logits, ref_l, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(values, ref_v, rtol=1e-12, atol=1e-14)


def test_forward_rejects_unknown_blocks():
    params = net.init_params(0, 4, 3, embed_dim=4, hidden=(4,))
    with pytest.raises(IndexError):
        net.forward(params, [4])
    with pytest.raises(IndexError):
        net.forward(params, [-1])


def test_outputs_do_not_depend_on_batch_company():
    params = net.init_params(0, 40, 20)
    a, va = net.forward(params, [7])
    b, vb = net.forward(params, np.arange(40))
    assert np.array_equal(a[0], b[7]) and va[0] == vb[7]


def test_init_scales():
    p = net.init_params(0, 40, 20, dtype=np.float64)
    w = p.tensors["actor/w1"]
    np.testing.assert_allclose(w.T @ w, 2.0 * np.eye(256), atol=1e-10)
    w0 = p.tensors["actor/w0"]  # 64 -> 256: orthonormal rows
    np.testing.assert_allclose(w0 @ w0.T, 2.0 * np.eye(64), atol=1e-10)
    pi = p.tensors["pi_w"]
    np.testing.assert_allclose(pi.T @ pi, 1e-4 * np.eye(20), atol=1e-14)
    v = p.tensors["v_w"]
    assert np.isclose(np.linalg.norm(v), 1.0)
    assert not any(p.tensors[k].any() for k in ("pi_b", "v_b", "actor/b0"))
    emb = p.tensors["actor/embed"]
    assert abs(emb.std() - 64**-0.5) < 0.01
    assert p.arch.separate_critic and "critic/w0" in p.tensors


def test_init_reproducible_and_float32_by_default():
    a = net.init_params(3, 10, 4)
    b = net.init_params(3, 10, 4)
    assert a.dtype == np.float32
    assert np.array_equal(a.flat, b.flat)
    assert not np.array_equal(a.flat, net.init_params(4, 10, 4).flat)


def test_tensors_are_views_of_flat():
    p = net.init_params(0, 4, 3, embed_dim=4, hidden=(4,))
    p.flat[:] = 0
    assert not any(t.any() for t in p.tensors.values())
    q = p.copy()
    q.flat[:] = 1
    assert not p.flat.any()


@pytest.mark.parametrize(
    "weights",
    [LossWeights(1.0, 0.5, 0.01), LossWeights(1.0, 0.0, 0.0), LossWeights(0.0, 1.0, 0.0), LossWeights(0.0, 0.0, 1.0)],
    ids=["combined", "policy", "value", "entropy"],
)
@pytest.mark.parametrize("separate", [True, False], ids=["separate", "shared"])
def test_gradients_match_finite_differences(weights, separate):
    params, batch = reduced_problem(seed=2, separate_critic=separate)
    worst = finite_difference_errors(params, batch, weights)
    assert max(worst.values()) < 1e-4, worst


def test_log_softmax_and_entropy():
    logits = np.array([[0.0, 0.0, 0.0, 0.0], [1000.0, 0.0, 0.0, 0.0]])
    lp = net.log_softmax(logits)
    np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0)
    ent = net.entropy_from_logp(lp)
    assert np.isclose(ent[0], np.log(4)) and abs(ent[1]) < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6))
def test_sampling_follows_probabilities(row):
    logits = np.array([row])
    probs = np.exp(net.log_softmax(logits))[0]
    u = (np.arange(20_000) + 0.5) / 20_000
    actions, logp = net.sample_actions(np.repeat(logits, len(u), axis=0), u)
    freq = np.bincount(actions, minlength=len(row)) / len(u)
    np.testing.assert_allclose(freq, probs, atol=2e-3)
    np.testing.assert_allclose(logp, np.log(probs)[actions])


def test_checkpoint_round_trip(tmp_path):
    p = net.init_params(5, 7, 3, embed_dim=4, hidden=(6, 5), separate_critic=False)
    path = tmp_path / "params.bin"
    net.save_params(p, path)
    q = net.load_params(path)
    assert q.arch == p.arch
    assert list(q.tensors) == list(p.tensors)
    assert np.array_equal(q.flat, p.flat)
    (tmp_path / "junk.bin").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        net.load_params(tmp_path / "junk.bin")
