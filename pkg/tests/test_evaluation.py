import csv
import json

import pytest

from bgfinder.environment import Environment
from bgfinder.evaluation import (
    EvalConfig,
    MissingOracle,
    UnsoundResult,
    budgets,
    determine_all,
    determine_backgrounds,
    export_embeddings,
    score,
)
from bgfinder.model import ModelConfig, PolicyValueNet
from bgfinder.oracle import enumerate_backgrounds
from bgfinder.report import render_dir

TINY = dict(d_model=32, n_heads=2, enc_layers=1, dec_layers=1, d_ff=64)


@pytest.fixture(scope="module")
def model(cat):
    return PolicyValueNet(ModelConfig.for_env(Environment(cat), **TINY))


def test_budgets():
    assert budgets(10, 3) == [4, 3, 3]
    assert sum(budgets(100_000, 17)) == 100_000
    with pytest.raises(ValueError):
        EvalConfig(temperature=0)


def test_sampling_is_sound_and_monotone(model, env, signals, trees, cat):
    sig = signals["train"][3]
    small = determine_backgrounds(model, env, sig, 64, seed=1, batch=32)
    big = determine_backgrounds(model, env, sig, 256, seed=1, batch=100)
    assert set(small) <= set(big)
    gt = enumerate_backgrounds(sig, cat, trees=trees)
    assert set(big) <= gt.keys()
    assert env.signal_info(sig).key not in big


def test_score_and_report(tmp_path, model, env, signals, trees, cat):
    sigs = signals["train"][:2]
    oracle = {env.signal_info(s).key: enumerate_backgrounds(s, cat, trees=trees) for s in sigs}
    found = {env.signal_info(s).key: determine_backgrounds(model, env, s, 64) for s in sigs}
    rep = score(found, oracle, env, "train")
    (f, o) = rep.totals()["train"]
    assert o == sum(len(g) for g in oracle.values()) and f == sum(len(v) for v in found.values())
    rep.save(tmp_path / "recall.json")
    rep.append_csv(tmp_path / "recall.csv", "a")
    rep.append_csv(tmp_path / "recall.csv", "b")
    rows = list(csv.reader(open(tmp_path / "recall.csv")))
    assert rows[0][0] == "label" and len(rows) == 1 + 2 * len(sigs)
    assert json.loads((tmp_path / "recall.json").read_text())["totals"]["train"]["oracle"] == o
    assert [p.name for p in render_dir(tmp_path)] == ["recall.png"]


def test_score_rejects_unknown(env, signals, trees, cat, dec):
    s = signals["train"][0]
    key = env.signal_info(s).key
    gt = enumerate_backgrounds(s, cat, trees=trees)
    with pytest.raises(MissingOracle):
        score({key: {}}, {}, env)
    bogus = dec("B+ -> pi+ pi0")
    with pytest.raises(UnsoundResult):
        score({key: {"not-a-key": (bogus, 0.1)}}, {key: gt}, env)


def test_determine_all_keys(model, env, signals):
    sigs = signals["gen"][:2]
    out = determine_all(model, env, sigs, EvalConfig(episodes=20, batch=10))
    assert list(out) == [env.signal_info(s).key for s in sigs]


def test_embedding_export(tmp_path, model, env, signals, trees, cat):
    sig = signals["train"][0]
    gt = enumerate_backgrounds(sig, cat, trees=trees)
    pairs = [(sig, e.tree) for e in gt.entries[:5]]
    n = export_embeddings(model, env, pairs, tmp_path / "emb.csv")
    rows = list(csv.DictReader(open(tmp_path / "emb.csv")))
    assert n == len(rows) == 5
    assert {"signal", "decay", "n_resonances", "final_state", "r", "e0", "e31"} <= set(rows[0])
    assert float(rows[0]["r"]) == pytest.approx(gt.entries[0].reward.r)
