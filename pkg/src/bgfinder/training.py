"""Self-play training: PGSU (supervised term on expert prefixes) and PEG (forced expert episodes), plus fine-tuning."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .catalog import Catalog
from .decays import DecayTree, background_key, format_decay, parse_decay
from .environment import DONE, EnvState, Environment
from .ga import load_hall_of_fame
from .mcts import Node, SearchParams, sample_action, search_many
from .model import Batch, Learner, ModelConfig, PolicyValue, PolicyValueNet, load_checkpoint, save_checkpoint
from .oracle import all_catalog_trees, enumerate_backgrounds
from .rewards import RewardParams

log = logging.getLogger(__name__)

METHODS = ("pgsu", "peg")
METRIC_FIELDS = (
    "epoch", "loss", "policy_loss", "value_loss", "supervised_loss",
    "episodes", "forced_episodes", "relevant_episodes", "new_discoveries",
    "train_recall", "train_oracle", "gen_recall", "gen_oracle",
)


class NoDemonstrations(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    episodes_per_epoch: int = 4500
    train_iterations_per_epoch: int = 5
    batch_size: int = 128
    temperature: float = 1.25
    method: str = "pgsu"
    lam: float = 0.1
    p_force: float = 0.05
    lr: float = 1e-3
    weight_decay: float = 1e-4
    parallel_episodes: int = 64  # episodes advanced in lockstep to batch network calls
    workers: int = 1
    seed: int = 0
    search: SearchParams = field(default_factory=SearchParams)
    gen_eval_episodes: int = 0  # per-epoch sampling budget on generalisation signals; 0 disables

    def __post_init__(self):
        if isinstance(self.search, dict):
            self.search = SearchParams(**self.search)
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not 0.0 <= self.p_force <= 1.0:
            raise ValueError("p_force must lie in [0, 1]")
        for name in ("epochs", "episodes_per_epoch", "train_iterations_per_epoch", "batch_size", "parallel_episodes", "workers"):
            if getattr(self, name) < (0 if name in ("epochs", "episodes_per_epoch") else 1):
                raise ValueError(f"{name} out of range")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


# --- expert demonstrations -------------------------------------------------

@dataclass(frozen=True)
class ExpertTrajectory:
    actions: tuple[int, ...]
    R: float
    key: str
    source: str = "ga"


class ExpertSet:
    """Per-signal demonstrations, deduplicated by background key."""

    def __init__(self):
        self.by_signal: dict[str, list[ExpertTrajectory]] = {}

    def __len__(self) -> int:
        return sum(len(v) for v in self.by_signal.values())

    def get(self, signal_key: str) -> list[ExpertTrajectory]:
        return self.by_signal.get(signal_key, [])

    def add(self, env: Environment, signal: DecayTree, tree: DecayTree, source: str = "ga") -> bool:
        info = env.signal_info(signal)
        key = background_key(tree)
        if key == info.key or any(t.key == key for t in self.get(info.key)):
            return False
        actions = env.tree_to_trajectory(signal, tree)
        end = env.replay(signal, actions)
        if end.status != DONE or not end.reward.relevant:
            raise ValueError(f"demonstration does not replay to a relevant background: {format_decay(tree, env.catalog)}")
        self.by_signal.setdefault(info.key, []).append(ExpertTrajectory(tuple(actions), end.reward.final_R, key, source))
        return True

    @classmethod
    def from_hall_of_fame(cls, env: Environment, signals: Sequence[DecayTree], path) -> "ExpertSet":
        c = env.catalog
        rows = load_hall_of_fame(path, c)
        by_text = {format_decay(s, c): s for s in signals}
        out = cls()
        for sig_text, trees in rows.items():
            sig = by_text.get(sig_text)
            if sig is None:
                continue
            for t in trees:
                out.add(env, sig, t, "ga")
        return out


class DiscoveredSet:
    """Relevant backgrounds met in self-play, per signal key, with the trajectory that produced them."""

    def __init__(self):
        self.by_signal: dict[str, dict[str, tuple[int, ...]]] = {}

    def __len__(self) -> int:
        return sum(len(v) for v in self.by_signal.values())

    def add(self, signal_key: str, bg_key: str, actions) -> bool:
        d = self.by_signal.setdefault(signal_key, {})
        if bg_key in d:
            return False
        d[bg_key] = tuple(actions)
        return True

    def count(self, signal_keys) -> int:
        return sum(len(self.by_signal.get(k, {})) for k in signal_keys)

    def as_experts(self, env: Environment, signals: Sequence[DecayTree]) -> ExpertSet:
        out = ExpertSet()
        for sig in signals:
            info = env.signal_info(sig)
            for key, actions in sorted(self.by_signal.get(info.key, {}).items()):
                end = env.replay(sig, actions)
                out.by_signal.setdefault(info.key, []).append(ExpertTrajectory(actions, end.reward.final_R, key, "replay"))
        return out

    def to_json(self, env: Environment, signals: Sequence[DecayTree]) -> dict:
        c = env.catalog
        data = {}
        for sig in signals:
            info = env.signal_info(sig)
            entries = self.by_signal.get(info.key, {})
            data[format_decay(sig, c)] = [
                {"decay": format_decay(env.decode(a)[0], c), "actions": env.format_trajectory(a)} for _, a in sorted(entries.items())
            ]
        return data

    @classmethod
    def from_json(cls, data: dict, env: Environment) -> "DiscoveredSet":
        out = cls()
        for sig_text, rows in data.items():
            sig = parse_decay(sig_text, env.catalog)
            skey = env.signal_info(sig).key
            for row in rows:
                actions = env.parse_trajectory(row["actions"])
                out.add(skey, background_key(env.decode(actions)[0]), actions)
        return out


# --- self-play -------------------------------------------------------------

@dataclass
class Episode:
    signal_index: int
    states: list[EnvState]
    actions: list[int]
    targets: list[np.ndarray]
    reward: float = 0.0
    status: str = ""
    forced: bool = False
    relevant_key: str | None = None
    error: str | None = None


def episode_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def play_episodes(
    env: Environment,
    evaluator,
    signals: Sequence[DecayTree],
    indices: Sequence[int],
    experts: ExpertSet | None,
    cfg: TrainConfig,
    epoch: int,
) -> list[Episode]:
    """Play the given global episode indices; each has its own RNG so the split across workers is irrelevant."""
    out = []
    n_act = env.vocab.n_actions
    p_force = cfg.p_force if cfg.method == "peg" else 0.0
    for start in range(0, len(indices), cfg.parallel_episodes):
        chunk = indices[start : start + cfg.parallel_episodes]
        eps, roots, rngs, forced = [], [], [], []
        for idx in chunk:
            k = idx % len(signals)
            rng = episode_rng(cfg.seed, epoch, idx)
            s0 = env.reset(signals[k])
            demos = experts.get(s0.signal.key) if experts else []
            force = None
            if demos and rng.random() < p_force:
                force = demos[int(rng.integers(len(demos)))].actions
            eps.append(Episode(k, [], [], [], forced=force is not None))
            roots.append(Node(s0))
            rngs.append(rng)
            forced.append(force)

        while True:
            live = [i for i, r in enumerate(roots) if r is not None and not r.terminal]
            if not live:
                break
            searched = [i for i in live if forced[i] is None]
            visits = dict(zip(searched, search_many(env, [roots[i] for i in searched], evaluator, cfg.search, [rngs[i] for i in searched])))
            for i in live:
                ep, node = eps[i], roots[i]
                try:
                    if forced[i] is not None:
                        a = forced[i][len(ep.actions)]
                        target = np.zeros(n_act)
                        target[a] = 1.0
                    else:
                        target = visits[i]
                        a = sample_action(target, cfg.temperature, rngs[i])
                    nxt = node.child_for_action(a) if cfg.search.reuse_tree else None
                    if nxt is None:
                        nxt = Node(env.step(node.state, a))
                    ep.states.append(node.state)
                    ep.actions.append(a)
                    ep.targets.append(target)
                    roots[i] = nxt
                except Exception as exc:  # an environment fault ends this episode only
                    log.warning("episode aborted: %s", exc)
                    ep.error = str(exc)
                    roots[i] = None
        for ep, node in zip(eps, roots):
            if node is None:
                continue
            st = node.state
            ep.reward, ep.status = st.value, st.status
            if st.status == DONE and st.reward.relevant:
                key = background_key(env.decode(st.tokens)[0])
                if key != st.signal.key:
                    ep.relevant_key = key
        out.extend(eps)
    return out


def _worker_play(args):
    cfg_model, weights, env_args, signals_text, indices, experts, cfg, epoch = args
    torch.set_num_threads(1)
    c, params, max_len, max_index = env_args
    env = Environment(c, params, max_len, max_index)
    model = PolicyValueNet(ModelConfig(**cfg_model))
    model.load_state_dict(weights)
    signals = [parse_decay(t, c) for t in signals_text]
    return play_episodes(env, PolicyValue(model, env), signals, indices, experts, cfg, epoch)


def self_play_epoch(
    env: Environment,
    model: PolicyValueNet,
    signals: Sequence[DecayTree],
    experts: ExpertSet | None,
    cfg: TrainConfig,
    epoch: int,
) -> list[Episode]:
    """``episodes_per_epoch`` episodes, signals round-robin; workers get contiguous index blocks."""
    indices = list(range(cfg.episodes_per_epoch))
    if cfg.workers <= 1:
        return play_episodes(env, PolicyValue(model, env), signals, indices, experts, cfg, epoch)
    blocks = [b.tolist() for b in np.array_split(np.array(indices, dtype=int), cfg.workers) if len(b)]
    weights = {k: v.detach().clone() for k, v in model.state_dict().items()}
    env_args = (env.catalog, env.params, env.max_len, env.vocab.max_index)
    texts = [format_decay(s, env.catalog) for s in signals]
    jobs = [(asdict(model.cfg), weights, env_args, texts, b, experts, cfg, epoch) for b in blocks]
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        parts = list(pool.map(_worker_play, jobs))
    return [ep for part in parts for ep in part]


# --- batches ---------------------------------------------------------------

def common_prefix(a: Sequence[int], b: Sequence[int]) -> int:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


def supervision_tuples(episodes: Sequence[Episode], experts: ExpertSet, env: Environment, signals: Sequence[DecayTree]):
    """(episode, step, expert action, weight) for every state on the common prefix of an episode with an expert.

    Weight is R_i / T_i, with T_i the number of such states for trajectory i over the epoch.
    """
    hits: dict[tuple[str, int], list[tuple[int, int, int]]] = {}
    for e, ep in enumerate(episodes):
        if ep.forced or not ep.actions:
            continue
        skey = env.signal_info(signals[ep.signal_index]).key
        for j, demo in enumerate(experts.get(skey)):
            n = common_prefix(ep.actions, demo.actions)
            for t in range(n):
                hits.setdefault((skey, j), []).append((e, t, demo.actions[t]))
    out = []
    for (skey, j), rows in hits.items():
        w = experts.get(skey)[j].R / len(rows)
        out.extend((e, t, a, w) for e, t, a in rows)
    return out


def assemble_batches(
    episodes: Sequence[Episode],
    experts: ExpertSet | None,
    env: Environment,
    signals: Sequence[DecayTree],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> list[Batch]:
    """Search samples from every recorded state plus supervision rows (PGSU only), shuffled into batches."""
    n_act = env.vocab.n_actions
    rows = []  # (state, pi, z, search, action, weight)
    for ep in episodes:
        if ep.error is not None:
            continue
        for s, pi in zip(ep.states, ep.targets):
            rows.append((s, pi, ep.reward, True, -1, 0.0))
    if cfg.method == "pgsu" and experts is not None and cfg.lam != 0:
        for e, t, a, w in supervision_tuples(episodes, experts, env, signals):
            rows.append((episodes[e].states[t], None, 0.0, False, a, w))
    order = rng.permutation(len(rows))
    batches = []
    for start in range(0, len(rows), cfg.batch_size):
        part = [rows[i] for i in order[start : start + cfg.batch_size]]
        states = [r[0] for r in part]
        pi = np.zeros((len(part), n_act))
        for k, r in enumerate(part):
            if r[1] is not None:
                pi[k] = r[1]
        batches.append(
            Batch(
                states=states,
                masks=np.stack([env.legal_actions(s) for s in states]),
                pi=pi,
                z=np.array([r[2] for r in part], dtype=np.float64),
                search=np.array([r[3] for r in part], dtype=bool),
                action=np.array([r[4] for r in part], dtype=np.int64),
                weight=np.array([r[5] for r in part], dtype=np.float64),
            )
        )
    return batches


# --- outer loop ------------------------------------------------------------

@dataclass
class TrainResult:
    model: PolicyValueNet
    discovered: DiscoveredSet
    metrics: list[dict]


def oracle_sets(signals: Sequence[DecayTree], c: Catalog, p: RewardParams) -> dict[str, set[str]]:
    trees = all_catalog_trees(c)
    return {background_key(s): enumerate_backgrounds(s, c, p, trees=trees).keys() for s in signals}


def _fmt(v) -> str:
    return f"{v:.10g}" if isinstance(v, float) else str(v)


def write_metrics(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in METRIC_FIELDS})


def train(
    env: Environment,
    signals: Sequence[DecayTree],
    cfg: TrainConfig,
    model: PolicyValueNet | None = None,
    model_cfg: ModelConfig | None = None,
    experts: ExpertSet | None = None,
    gen_signals: Sequence[DecayTree] = (),
    out_dir=None,
    discovered: DiscoveredSet | None = None,
    oracle: dict[str, set[str]] | None = None,
) -> TrainResult:
    """Self-play, then ``train_iterations_per_epoch`` passes over the epoch's batches; metrics and checkpoint per epoch.

    Training recall is the number of oracle backgrounds in the cumulative discovered set
    (non-forced episodes only); generalisation recall uses policy sampling when enabled.
    """
    torch.manual_seed(cfg.seed)
    if model is None:
        model = PolicyValueNet(model_cfg or ModelConfig.for_env(env, seed=cfg.seed))
    learner = Learner(model, cfg.lr, cfg.weight_decay)
    discovered = discovered or DiscoveredSet()
    oracle = oracle if oracle is not None else oracle_sets(list(signals) + list(gen_signals), env.catalog, env.params)
    train_keys = [env.signal_info(s).key for s in signals]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics, timing = [], []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        episodes = self_play_epoch(env, model, signals, experts, cfg, epoch)
        t_play = time.perf_counter() - t0
        new = 0
        for ep in episodes:
            if ep.relevant_key is None or ep.forced:
                continue
            skey = train_keys[ep.signal_index]
            if ep.relevant_key not in oracle[skey]:
                raise AssertionError(f"discovered background outside the oracle set: {ep.relevant_key}")
            new += discovered.add(skey, ep.relevant_key, ep.actions)
        rng = np.random.default_rng([cfg.seed, epoch, 1 << 20])
        batches = assemble_batches(episodes, experts, env, signals, cfg, rng)
        sums = {"loss": 0.0, "policy_loss": 0.0, "value_loss": 0.0, "supervised_loss": 0.0}
        n_steps = 0
        for _ in range(cfg.train_iterations_per_epoch):
            for b in batches:
                parts = learner.step(b, cfg.lam if cfg.method == "pgsu" else 0.0)
                for k in sums:
                    sums[k] += parts[k]
                n_steps += 1
        row = {k: v / max(n_steps, 1) for k, v in sums.items()}
        row.update(
            epoch=epoch,
            episodes=len(episodes),
            forced_episodes=sum(ep.forced for ep in episodes),
            relevant_episodes=sum(ep.relevant_key is not None and not ep.forced for ep in episodes),
            new_discoveries=new,
            train_recall=discovered.count(train_keys),
            train_oracle=sum(len(oracle[k]) for k in train_keys),
        )
        if gen_signals and cfg.gen_eval_episodes > 0:
            from .evaluation import EvalConfig, determine_all

            found = determine_all(model, env, gen_signals, EvalConfig(cfg.gen_eval_episodes), np.random.default_rng([cfg.seed, epoch, 2]))
            row["gen_recall"] = sum(len(f & oracle[k]) for k, f in found.items())
            row["gen_oracle"] = sum(len(oracle[env.signal_info(s).key]) for s in gen_signals)
        metrics.append(row)
        timing.append({"epoch": epoch, "self_play_s": round(t_play, 3), "total_s": round(time.perf_counter() - t0, 3)})
        log.info("epoch %d: %s", epoch, {k: row[k] for k in ("loss", "train_recall", "new_discoveries")})
        if out is not None:
            write_metrics(metrics, out / "metrics.csv")
            with open(out / "timing.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.DictWriter(fh, fieldnames=["epoch", "self_play_s", "total_s"], lineterminator="\n")
                w.writeheader()
                w.writerows(timing)
            with open(out / "discovered.json", "w", encoding="utf-8") as fh:
                json.dump(discovered.to_json(env, signals), fh, indent=1, sort_keys=True)
            save_checkpoint(out / "checkpoint.pt", model, learner, {"epoch": epoch, "method": cfg.method})
    return TrainResult(model, discovered, metrics)


FINETUNE_MODES = ("pgsu_all", "peg_all")


def fine_tune_config(base: TrainConfig, mode: str, epochs: int = 20, episodes: int = 80) -> TrainConfig:
    if mode not in FINETUNE_MODES:
        raise ValueError(f"mode must be one of {FINETUNE_MODES}")
    d = asdict(base)
    d.update(epochs=epochs, episodes_per_epoch=episodes)
    if mode == "pgsu_all":
        d["method"] = "pgsu"
    else:
        d.update(method="peg", p_force=1.0)
    return TrainConfig(**d)


def fine_tune(
    env: Environment,
    model: PolicyValueNet,
    signals: Sequence[DecayTree],
    discovered: DiscoveredSet,
    mode: str,
    cfg: TrainConfig,
    out_dir=None,
    oracle: dict[str, set[str]] | None = None,
    experts: ExpertSet | None = None,
) -> TrainResult:
    """Specialise on every known background: PGSU on all of them, or PEG with every episode forced.

    Known means discovered in self-play plus any original demonstrations passed as ``experts``.
    """
    merged = discovered.as_experts(env, signals)
    for skey, demos in (experts.by_signal.items() if experts else ()):
        have = {d.key for d in merged.get(skey)}
        merged.by_signal.setdefault(skey, []).extend(d for d in demos if d.key not in have)
    if len(merged) == 0:
        raise NoDemonstrations("fine-tuning needs at least one demonstration")
    experts = merged
    return train(env, signals, cfg, model=model, experts=experts, out_dir=out_dir, discovered=discovered, oracle=oracle)


def load_model(path) -> PolicyValueNet:
    return load_checkpoint(path)[0]
