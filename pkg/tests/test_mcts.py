import numpy as np
import pytest

from bgfinder.mcts import Node, SearchParams, sample_action, search, search_many, temperature_scale, uniform_evaluator

from fakes import ArmsEnv, ArmState, flat_evaluator


def test_params_validation():
    with pytest.raises(ValueError):
        SearchParams(simulations=0)
    with pytest.raises(ValueError):
        SearchParams(temperature=0)


def test_two_arms_prefers_better_payoff():
    env = ArmsEnv()
    v = search(env, ArmState(), flat_evaluator(2), SearchParams(simulations=400), np.random.default_rng(0), noise=False)
    assert v.argmax() == 1 and v.sum() == pytest.approx(1.0, abs=1e-12)


def test_forced_move_gets_all_visits():
    env = ArmsEnv(3, legal=[False, True, False])
    v = search(env, ArmState(payoff=(0, 0, 0)), flat_evaluator(3), SearchParams(simulations=50), np.random.default_rng(0))
    assert v.tolist() == [0.0, 1.0, 0.0]


def test_lockstep_matches_single():
    env = ArmsEnv()
    p = SearchParams(simulations=64)
    single = [search(env, ArmState(), flat_evaluator(2), p, np.random.default_rng(k)) for k in range(3)]
    many = search_many(env, [Node(ArmState()) for _ in range(3)], flat_evaluator(2), p, [np.random.default_rng(k) for k in range(3)])
    for a, b in zip(single, many):
        np.testing.assert_array_equal(a, b)


def test_real_env_visits_only_legal(env, signals):
    s = env.reset(signals["train"][0])
    v = search(env, s, uniform_evaluator(env), SearchParams(simulations=32), np.random.default_rng(0))
    legal = env.legal_actions(s)
    assert v[~legal].sum() == 0 and v.sum() == pytest.approx(1.0)


def test_temperature_scale():
    p = np.array([0.8, 0.2])
    np.testing.assert_array_equal(temperature_scale(p, 1.0), p)
    assert temperature_scale(p, 1e-4).tolist() == [1.0, 0.0]
    q = temperature_scale(p, 1e6)
    assert q == pytest.approx([0.5, 0.5], abs=1e-5)
    assert temperature_scale(np.array([0.0, 1.0]), 2.5).tolist() == [0.0, 1.0]


def test_sample_action_argmax_when_cold():
    assert sample_action(np.array([0.1, 0.6, 0.3]), 0.0005, np.random.default_rng(0)) == 1
