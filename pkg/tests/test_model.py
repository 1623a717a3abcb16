import numpy as np
import pytest
import torch

from bgfinder.model import (
    Batch,
    Diverged,
    Learner,
    ModelConfig,
    PolicyValue,
    PolicyValueNet,
    compute_loss,
    count_parameters,
    embed,
    encode,
    hand_count,
    load_checkpoint,
    masked_softmax,
    save_checkpoint,
)

TINY = dict(d_model=32, n_heads=2, enc_layers=1, dec_layers=1, d_ff=64)


def rollout_states(env, signals, n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        s = env.reset(signals[k % len(signals)])
        for _ in range(int(rng.integers(0, 8))):
            if s.terminal:
                break
            s = env.step(s, int(rng.choice(np.flatnonzero(env.legal_actions(s)))))
        if s.terminal:
            s = env.reset(signals[k % len(signals)])
        out.append(s)
    return out


def make_batch(env, states, rng, n_sup=2):
    A = env.vocab.n_actions
    masks = np.stack([env.legal_actions(s) for s in states])
    pi = np.zeros((len(states), A))
    action = np.full(len(states), -1)
    weight = np.zeros(len(states))
    search = np.ones(len(states), bool)
    for i, m in enumerate(masks):
        legal = np.flatnonzero(m)
        if i < n_sup:
            search[i] = False
            action[i] = rng.choice(legal)
            weight[i] = 0.3
        else:
            pi[i, legal] = rng.dirichlet(np.ones(len(legal)))
    return Batch(states, masks, pi, rng.uniform(-0.3, 1, len(states)), search, action, weight)


def test_parameter_counts(env):
    cfg = ModelConfig.for_env(env)
    assert count_parameters(PolicyValueNet(cfg)) == hand_count(cfg) == 365_556
    tiny = ModelConfig.for_env(env, **TINY)
    assert count_parameters(PolicyValueNet(tiny)) == hand_count(tiny)


def test_masked_softmax_zero_outside_mask():
    logits = torch.randn(3, 5)
    mask = torch.tensor([[1, 0, 1, 0, 0], [0, 0, 0, 0, 1], [1, 1, 1, 1, 1]], dtype=torch.bool)
    p = masked_softmax(logits, mask)
    assert (p[~mask] == 0).all()
    torch.testing.assert_close(p.sum(-1), torch.ones(3))


def test_padding_does_not_change_outputs(env, signals):
    model = PolicyValueNet(ModelConfig.for_env(env, **TINY)).eval()
    states = rollout_states(env, signals["train"], 6)
    with torch.no_grad():
        lb, vb = model(*encode(states, model.cfg))
        for i, s in enumerate(states):
            l1, v1 = model(*encode([s], model.cfg))
            torch.testing.assert_close(l1[0], lb[i], atol=1e-5, rtol=1e-5)
            torch.testing.assert_close(v1[0], vb[i], atol=1e-5, rtol=1e-5)


def test_evaluator_priors_are_masked(env, signals):
    model = PolicyValueNet(ModelConfig.for_env(env, **TINY))
    states = rollout_states(env, signals["train"], 4)
    pri, val = PolicyValue(model, env)(states)
    for s, p in zip(states, pri):
        legal = env.legal_actions(s)
        assert p[~legal].sum() == 0 and p.sum() == pytest.approx(1.0)
    assert val.shape == (4,)


def test_overfits_small_batch(env, signals):
    torch.manual_seed(0)
    model = PolicyValueNet(ModelConfig.for_env(env, **TINY))
    batch = make_batch(env, rollout_states(env, signals["train"], 16), np.random.default_rng(0))
    batch.pi = (batch.pi == batch.pi.max(1, keepdims=True)) * batch.search[:, None] * 1.0  # one-hot: zero-entropy floor
    learner = Learner(model, lr=3e-3, weight_decay=0.0, divergence_factor=1e9)
    first = learner.step(batch, 0.1)["loss"]
    for _ in range(200):
        last = learner.step(batch, 0.1)["loss"]
    assert last < 0.25 * first


def test_supervised_term_weighting(env, signals):
    model = PolicyValueNet(ModelConfig.for_env(env, **TINY))
    batch = make_batch(env, rollout_states(env, signals["train"], 6), np.random.default_rng(1))
    a = compute_loss(model, batch, 0.0)
    b = compute_loss(model, batch, 2.0)
    assert b.total.item() == pytest.approx(a.total.item() + 2.0 * b.supervised, rel=1e-5)


def test_divergence_guard(env, signals):
    model = PolicyValueNet(ModelConfig.for_env(env, **TINY))
    batch = make_batch(env, rollout_states(env, signals["train"], 6), np.random.default_rng(2))
    learner = Learner(model, divergence_factor=10.0)
    learner.step(batch, 0.1)
    learner.initial_loss = 1e-6
    with pytest.raises(Diverged):
        learner.step(batch, 0.1)


def test_checkpoint_roundtrip(tmp_path, env, signals):
    model = PolicyValueNet(ModelConfig.for_env(env, **TINY, seed=3))
    learner = Learner(model)
    path = tmp_path / "m.pt"
    save_checkpoint(path, model, learner, {"epoch": 7})
    back, opt, extra = load_checkpoint(path)
    assert extra == {"epoch": 7} and opt is not None
    states = rollout_states(env, signals["train"], 3)
    np.testing.assert_array_equal(embed(model, states), embed(back, states))


def test_bad_checkpoint_version(tmp_path):
    torch.save({"version": "other"}, tmp_path / "x.pt")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.pt")


def test_embeddings_unit_norm(env, signals):
    model = PolicyValueNet(ModelConfig.for_env(env, **TINY))
    e = embed(model, rollout_states(env, signals["train"], 5))
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, rtol=1e-9)
