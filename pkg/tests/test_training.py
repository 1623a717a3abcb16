import numpy as np
import pytest

from bgfinder.mcts import SearchParams, uniform_evaluator
from bgfinder.model import ModelConfig, PolicyValueNet
from bgfinder.oracle import enumerate_backgrounds
from bgfinder.training import (
    DiscoveredSet,
    Episode,
    ExpertSet,
    NoDemonstrations,
    TrainConfig,
    assemble_batches,
    common_prefix,
    fine_tune,
    fine_tune_config,
    play_episodes,
    supervision_tuples,
    train,
)

TINY = dict(d_model=32, n_heads=2, enc_layers=1, dec_layers=1, d_ff=64)


@pytest.fixture(scope="module")
def small(cat, signals, trees):
    """The two training signals with the fewest oracle entries, plus their oracle."""
    gts = [(len(g), i, g) for i, g in ((i, enumerate_backgrounds(s, cat, trees=trees)) for i, s in enumerate(signals["train"]))]
    picked = sorted(gts, key=lambda t: (t[0], t[1]))[:2]
    return [signals["train"][i] for _, i, _ in picked], [g for _, _, g in picked]


def quick_cfg(**kw):
    base = dict(epochs=1, episodes_per_epoch=4, parallel_episodes=4, train_iterations_per_epoch=1, batch_size=32, search=SearchParams(simulations=4))
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(method="other")
    with pytest.raises(ValueError):
        TrainConfig(p_force=2)
    assert isinstance(TrainConfig(search={"simulations": 8}).search, SearchParams)


def test_common_prefix():
    assert common_prefix([1, 2, 3, 4], [1, 2, 3, 9, 9]) == 3
    assert common_prefix([], [1]) == 0
    assert common_prefix([5], [6]) == 0


def test_supervision_tuples_prefix_and_weight(env, small):
    sigs, gts = small
    sig = sigs[0]
    experts = ExpertSet()
    bg = gts[0].entries[0].tree
    experts.add(env, sig, bg)
    demo = experts.get(env.signal_info(sig).key)[0]
    a = list(demo.actions)
    e1 = Episode(0, [None] * len(a), a[:3] + [a[3] + 1000], [])
    e2 = Episode(0, [None] * 2, a[:2] + [-1], [])
    forced = Episode(0, [None] * len(a), a, [], forced=True)
    rows = supervision_tuples([e1, e2, forced], experts, env, [sig])
    assert [(e, t) for e, t, _, _ in rows] == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1)]
    assert all(act == a[t] for _, t, act, _ in rows)
    assert all(w == pytest.approx(demo.R / 5) for *_, w in rows)


def test_expert_set_rejects_irrelevant(env, signals, dec):
    ex = ExpertSet()
    sig = signals["train"][0]
    assert not ex.add(env, sig, sig)  # the signal itself is skipped
    with pytest.raises(ValueError):
        ex.add(env, sig, dec("B+ -> pi+ pi0"))


def test_forced_episodes_replay_demonstrations(env, small):
    sigs, gts = small
    experts = ExpertSet()
    for s, g in zip(sigs, gts):
        for e in g.entries:
            experts.add(env, s, e.tree)
    cfg = quick_cfg(method="peg", p_force=1.0, episodes_per_epoch=6)
    eps = play_episodes(env, uniform_evaluator(env), sigs, list(range(6)), experts, cfg, 1)
    for ep in eps:
        assert ep.forced
        demos = {d.actions for d in experts.get(env.signal_info(sigs[ep.signal_index]).key)}
        assert tuple(ep.actions) in demos
        assert all(t.max() == 1.0 for t in ep.targets)


def test_batches_have_no_supervision_for_peg(env, small):
    sigs, gts = small
    experts = ExpertSet()
    experts.add(env, sigs[0], gts[0].entries[0].tree)
    cfg = quick_cfg(method="peg", p_force=0.0)
    eps = play_episodes(env, uniform_evaluator(env), sigs, list(range(4)), experts, cfg, 1)
    batches = assemble_batches(eps, experts, env, sigs, cfg, np.random.default_rng(0))
    assert all(b.search.all() for b in batches)
    assert sum(len(b.states) for b in batches) == sum(len(e.states) for e in eps)


def test_train_is_deterministic(tmp_path, env, small):
    sigs, _ = small
    runs = []
    for k in range(2):
        cfg = quick_cfg(epochs=2, seed=5)
        train(env, sigs, cfg, model_cfg=ModelConfig.for_env(env, **TINY), out_dir=tmp_path / str(k))
        runs.append([(tmp_path / str(k) / f).read_bytes() for f in ("metrics.csv", "discovered.json")])
    assert runs[0] == runs[1]
    assert (tmp_path / "0" / "checkpoint.pt").exists() and (tmp_path / "0" / "timing.csv").exists()


def test_discovered_json_roundtrip(env, small):
    sigs, gts = small
    d = DiscoveredSet()
    skey = env.signal_info(sigs[0]).key
    tree = gts[0].entries[0].tree
    d.add(skey, gts[0].entries[0].key, env.tree_to_trajectory(sigs[0], tree))
    back = DiscoveredSet.from_json(d.to_json(env, sigs), env)
    assert back.by_signal == d.by_signal


def test_fine_tune_needs_demonstrations(env, small):
    sigs, _ = small
    model = PolicyValueNet(ModelConfig.for_env(env, **TINY))
    with pytest.raises(NoDemonstrations):
        fine_tune(env, model, sigs, DiscoveredSet(), "pgsu_all", quick_cfg())
    assert fine_tune_config(quick_cfg(), "peg_all").p_force == 1.0
    with pytest.raises(ValueError):
        fine_tune_config(quick_cfg(), "other")
