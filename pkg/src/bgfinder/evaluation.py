"""Background determination by temperature sampling, recall scoring, embedding export."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .decays import DecayTree, background_key, format_decay
from .environment import DONE, Environment
from .model import PolicyValueNet, embed, encode
from .oracle import GroundTruth


class MissingOracle(KeyError):
    pass


class UnsoundResult(AssertionError):
    pass


@dataclass
class EvalConfig:
    episodes: int = 100_000
    temperature: float = 2.5
    batch: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.episodes < 0:
            raise ValueError("episodes must be non-negative")


def budgets(total: int, n: int) -> list[int]:
    """Floor split with the remainder going to the first signals."""
    base, rem = divmod(total, n)
    return [base + (i < rem) for i in range(n)]


@torch.no_grad()
def _sample_batch(model: PolicyValueNet, env: Environment, signal: DecayTree, rngs, temperature: float):
    states = [env.reset(signal) for _ in rngs]
    live = list(range(len(states)))
    model.eval()
    while live:
        batch = [states[i] for i in live]
        logits, _ = model(*encode(batch, model.cfg))
        mask = torch.from_numpy(np.stack([env.legal_actions(s) for s in batch]))
        # q_i ∝ p_i^(1/T), computed in the log domain
        logq = logits.double().masked_fill(~mask, float("-inf")).log_softmax(-1) / temperature
        q = logq.softmax(-1).numpy()
        nxt = []
        for row, i in enumerate(live):
            cdf = np.cumsum(q[row])
            a = int(np.searchsorted(cdf, rngs[i].random() * cdf[-1], side="right"))
            a = min(a, len(cdf) - 1)
            while not mask[row, a]:  # guard against a zero-width bin at the edge
                a -= 1
            states[i] = env.step(states[i], a)
            if not states[i].terminal:
                nxt.append(i)
        live = nxt
    return states


def determine_backgrounds(
    model: PolicyValueNet,
    env: Environment,
    signal: DecayTree,
    episodes: int,
    temperature: float = 2.5,
    seed: int = 0,
    batch: int = 256,
    stream: int = 0,
) -> dict[str, tuple[DecayTree, float]]:
    """Sample ``episodes`` episodes from the temperature-scaled policy; relevant decays keyed by background key.

    Episode j always uses the RNG stream (seed, stream, j), so a larger budget finds a superset.
    """
    info = env.signal_info(signal)
    found: dict[str, tuple[DecayTree, float]] = {}
    for start in range(0, episodes, batch):
        rngs = [np.random.default_rng([seed, stream, j]) for j in range(start, min(episodes, start + batch))]
        for s in _sample_batch(model, env, signal, rngs, temperature):
            if s.status == DONE and s.reward.relevant:
                tree = env.decode(s.tokens)[0]
                key = background_key(tree)
                if key != info.key and key not in found:
                    found[key] = (tree, s.reward.r)
    return found


def determine_all(model, env: Environment, signals: Sequence[DecayTree], cfg: EvalConfig, rng=None) -> dict[str, set[str]]:
    seed = cfg.seed if rng is None else int(rng.integers(2**31))
    out = {}
    for k, (sig, n) in enumerate(zip(signals, budgets(cfg.episodes, len(signals)))):
        out[env.signal_info(sig).key] = set(determine_backgrounds(model, env, sig, n, cfg.temperature, seed, cfg.batch, k))
    return out


@dataclass
class SignalRecall:
    signal: str
    split: str
    found: list[tuple[str, float]]
    oracle_size: int

    @property
    def recall(self) -> int:
        return len(self.found)


@dataclass
class RecallReport:
    signals: list[SignalRecall] = field(default_factory=list)

    def totals(self) -> dict[str, tuple[int, int]]:
        out: dict[str, list[int]] = {}
        for s in self.signals:
            t = out.setdefault(s.split, [0, 0])
            t[0] += s.recall
            t[1] += s.oracle_size
        return {k: (v[0], v[1]) for k, v in out.items()}

    def to_json(self) -> dict:
        return {
            "totals": {k: {"found": f, "oracle": o} for k, (f, o) in sorted(self.totals().items())},
            "signals": [
                {"signal": s.signal, "split": s.split, "recall": s.recall, "oracle": s.oracle_size,
                 "found": [{"decay": d, "r": r} for d, r in s.found]}
                for s in self.signals
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    def append_csv(self, path, label: str) -> None:
        """Learning-curve rows: label, split, signal, recall, oracle. Header written once."""
        p = Path(path)
        new = not p.exists()
        with open(p, "a", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(["label", "split", "signal", "recall", "oracle"])
            for s in self.signals:
                w.writerow([label, s.split, s.signal, s.recall, s.oracle_size])


def score(
    found: dict[str, dict[str, tuple[DecayTree, float]]],
    oracle: dict[str, GroundTruth],
    env: Environment,
    split: str | dict[str, str] = "train",
) -> RecallReport:
    """Intersect found sets with the oracle. Anything outside the oracle is a soundness failure."""
    c = env.catalog
    report = RecallReport()
    for skey, entries in found.items():
        gt = oracle.get(skey)
        if gt is None:
            raise MissingOracle(skey)
        extra = set(entries) - gt.keys()
        if extra:
            raise UnsoundResult(f"found decays outside the oracle: {sorted(extra)}")
        rows = sorted(((format_decay(t, c), r) for t, r in entries.values()), key=lambda x: (-x[1], x[0]))
        sp = split if isinstance(split, str) else split[skey]
        report.signals.append(SignalRecall(format_decay(gt.signal, c), sp, rows, len(gt)))
    return report


def final_state_tag(tree: DecayTree, env: Environment) -> str:
    names = Counter(env.catalog.name(leaf.pid) for leaf in tree.leaves())
    return " ".join(f"{n}x{k}" if k > 1 else n for n, k in sorted(names.items()))


def export_embeddings(model: PolicyValueNet, env: Environment, pairs: Sequence[tuple[DecayTree, DecayTree]], path, normalise: bool = True) -> int:
    """One CSV row per (signal, background): metadata then the embedding of the finished background sequence."""
    c = env.catalog
    states, meta = [], []
    for sig, bg in pairs:
        s = env.replay(sig, env.tree_to_trajectory(sig, bg))
        states.append(s)
        r = s.reward.r if s.reward is not None else 0.0
        meta.append([format_decay(sig, c), format_decay(bg, c), bg.n_resonances, final_state_tag(bg, env), f"{r:.10g}"])
    vecs = np.zeros((0, model.cfg.d_model))
    for start in range(0, len(states), 256):
        vecs = np.vstack([vecs, embed(model, states[start : start + 256], normalise)])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["signal", "decay", "n_resonances", "final_state", "r"] + [f"e{i}" for i in range(model.cfg.d_model)])
        for m, v in zip(meta, vecs):
            w.writerow(m + [f"{x:.8g}" for x in v])
    return len(meta)
