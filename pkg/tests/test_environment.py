import numpy as np
import pytest

from bgfinder.decays import validate
from bgfinder.environment import DONE, TRUNCATED, IllegalAction, SignalTooLong, dump_trajectories, load_trajectories
from bgfinder.oracle import enumerate_backgrounds


def test_vocab_layout(env):
    v = env.vocab
    assert v.n_actions == 51 and v.size == 53
    assert v.m_mother.sum() == 4
    assert v.text(v.sep) == "SEP" and v.text(v.pad) == "PAD"
    for tok in range(v.size):
        assert v.parse_text(v.text(tok)) == tok


def test_first_move_is_a_mother(env, signals):
    s = env.reset(signals["train"][0])
    assert (env.legal_actions(s) == env.vocab.m_mother).all()


def test_index_forces_matching_charge(env, cat, signals):
    v = env.vocab
    s = env.reset(signals["train"][0])  # first detectable is pi+
    s = env.step(s, v.token_of[cat["B0"].id])
    s = env.step(s, v.index_token(1))
    legal = np.flatnonzero(env.legal_actions(s))
    assert legal.size and all(cat.particles[v.pid(a)].charge == 1 for a in legal)


def test_illegal_action_raises(env, signals):
    s = env.reset(signals["train"][0])
    with pytest.raises(IllegalAction):
        env.step(s, env.vocab.end)


def test_roundtrip_first_signals(env, cat, signals, trees):
    for sig in signals["train"][:3]:
        for e in enumerate_backgrounds(sig, cat, trees=trees).entries:
            end = env.replay(sig, env.tree_to_trajectory(sig, e.tree))
            assert end.status == DONE and end.reward == e.reward


def test_signal_replays_to_ln2(env, signals):
    import math

    sig = signals["train"][0]
    end = env.replay(sig, env.tree_to_trajectory(sig, sig))
    assert end.reward.r == pytest.approx(math.log(2))


def test_random_rollouts_terminate_validly(env, cat, signals):
    rng = np.random.default_rng(0)
    statuses = set()
    for ep in range(300):
        sig = signals["train"][ep % 17]
        s = env.reset(sig)
        while not s.terminal:
            s = env.step(s, int(rng.choice(np.flatnonzero(env.legal_actions(s)))))
        statuses.add(s.status)
        assert len(s.tokens) <= env.max_len
        if s.status == DONE:
            tree, _ = env.decode(s.tokens)
            assert validate(tree, cat).structural_ok
        else:
            assert s.value == env.params.truncation_penalty
    assert TRUNCATED in statuses


def test_signal_too_long(cat, signals):
    from bgfinder.environment import Environment

    with pytest.raises(SignalTooLong):
        Environment(cat, max_len=8).reset(signals["train"][0])


def test_trajectory_text_io(env, signals, tmp_path):
    sig = signals["train"][0]
    traj = env.tree_to_trajectory(sig, sig)
    path = tmp_path / "t.txt"
    dump_trajectories(env, [traj, traj[:3]], path)
    assert load_trajectories(env, path) == [traj, traj[:3]]
