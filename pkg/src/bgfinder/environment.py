"""Token-sequence environment: one background token per step, masked actions, terminal scoring."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .catalog import Catalog
from .decays import (
    MAX_LOST,
    MAX_RESONANCES,
    DecayTree,
    Leaf,
    Resonance,
    background_key,
    best_alignment,
    chain_br,
    neutrino_count,
    signal_detectables,
)
from .rewards import RewardBreakdown, RewardParams, breakdown, invalid_breakdown, signal_br

MAX_LEN = 32
MAX_INDEX = 8

RUNNING, DONE, TRUNCATED = "running", "done", "truncated"
_LOST_PENDING = -1


class IllegalAction(RuntimeError):
    pass


class SignalTooLong(ValueError):
    pass


class Vocab:
    """Action tokens followed by the two non-action tokens (sep, pad).

    Order: mothers, intermediates, detectables, neutrinos, IDX1..IDXn, LOST, ')', END.
    """

    def __init__(self, c: Catalog, max_index: int = MAX_INDEX):
        self.catalog = c
        self.max_index = max_index
        roles = ("mother", "intermediate", "detectable", "neutrino")
        self.particle_ids = [p.id for r in roles for p in c.by_role(r)]
        self.token_of = {pid: i for i, pid in enumerate(self.particle_ids)}
        n = len(self.particle_ids)
        self.idx0 = n
        self.lost = n + max_index
        self.close = self.lost + 1
        self.end = self.close + 1
        self.n_actions = self.end + 1
        self.sep = self.n_actions
        self.pad = self.sep + 1
        self.size = self.pad + 1

        def mask(pids):
            m = np.zeros(self.n_actions, dtype=bool)
            m[[self.token_of[p] for p in pids]] = True
            return m

        self.m_mother = mask(p.id for p in c.by_role("mother"))
        self.m_inter = mask(p.id for p in c.by_role("intermediate"))
        self.m_nu = mask(p.id for p in c.by_role("neutrino"))
        dets = c.by_role("detectable")
        self.m_det = mask(p.id for p in dets)
        self.m_det_q = {q: mask(p.id for p in dets if p.charge == q) for q in (-1, 0, 1)}
        self.m_lost_target = self.m_det | self.m_nu

    def pid(self, tok: int) -> int | None:
        return self.particle_ids[tok] if tok < self.idx0 else None

    def index_token(self, i: int) -> int:
        """Token for signal index i (1-based)."""
        return self.idx0 + i - 1

    def kind(self, tok: int) -> str:
        if tok < self.idx0:
            return self.catalog.particles[self.particle_ids[tok]].role
        if tok < self.lost:
            return "index"
        return {self.lost: "lost", self.close: "close_paren", self.end: "end", self.sep: "sep", self.pad: "pad"}[tok]

    def text(self, tok: int) -> str:
        kind = self.kind(tok)
        if kind == "mother":
            return self.catalog.name(self.pid(tok)) + "->"
        if kind == "intermediate":
            return self.catalog.name(self.pid(tok)) + "("
        if kind in ("detectable", "neutrino"):
            return self.catalog.name(self.pid(tok))
        if kind == "index":
            return f"IDX{tok - self.idx0 + 1}"
        return {"lost": "LOST", "close_paren": ")", "end": "END", "sep": "SEP", "pad": "PAD"}[kind]

    def parse_text(self, word: str) -> int:
        c = self.catalog
        if word.startswith("IDX"):
            return self.index_token(int(word[3:]))
        special = {"LOST": self.lost, ")": self.close, "END": self.end, "SEP": self.sep, "PAD": self.pad}
        if word in special:
            return special[word]
        if word.endswith("->"):
            return self.token_of[c[word[:-2]].id]
        if word.endswith("("):
            return self.token_of[c[word[:-1]].id]
        return self.token_of[c[word].id]

    def format(self, tokens) -> str:
        return " ".join(self.text(t) for t in tokens)

    def parse(self, line: str) -> list[int]:
        return [self.parse_text(w) for w in line.split()]


@dataclass(frozen=True)
class SignalInfo:
    tree: DecayTree
    key: str
    tokens: tuple[int, ...]
    detectables: tuple[int, ...]
    charges: tuple[int, ...]
    mother_charge: int
    br_s: float
    n_nu: int


@dataclass(frozen=True)
class EnvState:
    signal: SignalInfo
    tokens: tuple[int, ...] = ()
    stack: tuple[tuple[int, int, int], ...] = ()  # open resonances: (pid, child charge, child count)
    root_charge: int = 0
    root_count: int = 0
    mother_charge: int = 0
    used: int = 0  # bitmask over signal indices
    n_res: int = 0
    n_lost: int = 0
    pending: int = 0  # index awaiting its particle (1-based), or -1 after LOST
    status: str = RUNNING
    reward: RewardBreakdown | None = None
    value: float = 0.0

    @property
    def terminal(self) -> bool:
        return self.status != RUNNING

    def __len__(self) -> int:
        return len(self.tokens)


class Environment:
    def __init__(self, c: Catalog, params: RewardParams | None = None, max_len: int = MAX_LEN, max_index: int = MAX_INDEX):
        self.catalog = c
        self.params = params or RewardParams()
        self.max_len = max_len
        self.vocab = Vocab(c, max_index)
        self._signals: dict[str, SignalInfo] = {}

    # -- signal encoding --------------------------------------------------

    def signal_info(self, signal: DecayTree) -> SignalInfo:
        key = background_key(signal)
        info = self._signals.get(key)
        if info is None:
            info = self._encode_signal(signal, key)
            self._signals[key] = info
        return info

    def _encode_signal(self, signal: DecayTree, key: str) -> SignalInfo:
        c, v = self.catalog, self.vocab
        toks = [v.token_of[signal.mother]]
        counter = 0

        def emit(node):
            nonlocal counter
            if isinstance(node, Leaf):
                if c.particles[node.pid].role == "detectable":
                    counter += 1
                    if counter > v.max_index:
                        raise SignalTooLong(f"signal has more than {v.max_index} detectables")
                    toks.append(v.index_token(counter))
                toks.append(v.token_of[node.pid])
            else:
                toks.append(v.token_of[node.pid])
                for ch in node.children:
                    emit(ch)
                toks.append(v.close)

        for node in signal.children:
            emit(node)
        if len(toks) > self.max_len:
            raise SignalTooLong(f"signal needs {len(toks)} tokens, budget is {self.max_len}")
        dets = tuple(signal_detectables(signal, c))
        return SignalInfo(
            signal,
            key,
            tuple(toks),
            dets,
            tuple(c.particles[p].charge for p in dets),
            c.particles[signal.mother].charge,
            signal_br(signal, c),
            neutrino_count(signal, c),
        )

    # -- dynamics ---------------------------------------------------------

    def reset(self, signal: DecayTree) -> EnvState:
        return EnvState(self.signal_info(signal))

    def legal_actions(self, s: EnvState) -> np.ndarray:
        v = self.vocab
        if s.terminal or len(s.tokens) >= self.max_len:
            return np.zeros(v.n_actions, dtype=bool)
        if not s.tokens:
            return v.m_mother.copy()
        if s.pending > 0:
            return v.m_det_q[s.signal.charges[s.pending - 1]].copy()
        if s.pending == _LOST_PENDING:
            return v.m_lost_target.copy()

        m = np.zeros(v.n_actions, dtype=bool)
        n_sig = len(s.signal.detectables)
        remaining = n_sig - bin(s.used).count("1")
        room = self.max_len - len(s.tokens)
        for i in range(n_sig):
            # an index needs two tokens plus closing the open resonances and END
            if not s.used >> i & 1 and 2 * remaining + len(s.stack) + 1 <= room:
                m[v.index_token(i + 1)] = True
        if s.n_lost < MAX_LOST:
            m[v.lost] = room >= 2
            m |= v.m_nu
        if s.n_res < MAX_RESONANCES and self._min_completion(s, opened=1) + 1 <= room:
            m |= v.m_inter
        if s.stack:
            pid, q, n = s.stack[-1]
            if n >= 2 and q == self.catalog.particles[pid].charge:
                m[v.close] = True
        elif remaining == 0 and s.root_count >= 2 and s.root_charge == s.mother_charge:
            m[v.end] = True
        return m

    def _min_completion(self, s: EnvState, opened: int = 0) -> int:
        """Lower bound on tokens still needed (after opening ``opened`` new resonances)."""
        remaining = len(s.signal.detectables) - bin(s.used).count("1")
        shortfall = sum(max(0, 2 - n) for _, _, n in s.stack) + 2 * opened
        shortfall += max(0, 2 - s.root_count - (1 if s.stack or opened else 0))
        # remaining indices can fill child slots; extra slots need at least one token each
        return 2 * remaining + max(0, shortfall - remaining) + len(s.stack) + opened + 1

    def step(self, s: EnvState, a: int) -> EnvState:
        legal = self.legal_actions(s)
        if not 0 <= a < len(legal) or not legal[a]:
            raise IllegalAction(f"action {a} ({self.vocab.text(a) if 0 <= a < self.vocab.size else '?'}) is not legal")
        v, c = self.vocab, self.catalog
        tokens = s.tokens + (a,)
        kind = v.kind(a)
        new = s
        if kind == "mother":
            new = replace(s, tokens=tokens, mother_charge=c.particles[v.pid(a)].charge)
        elif kind == "index":
            i = a - v.idx0 + 1
            new = replace(s, tokens=tokens, pending=i, used=s.used | (1 << (i - 1)))
        elif kind == "lost":
            new = replace(s, tokens=tokens, pending=_LOST_PENDING, n_lost=s.n_lost + 1)
        elif kind in ("detectable", "neutrino"):
            q = c.particles[v.pid(a)].charge
            n_lost = s.n_lost
            if kind == "neutrino" and s.pending != _LOST_PENDING:
                n_lost += 1
            new = self._add_child(replace(s, tokens=tokens, pending=0, n_lost=n_lost), q)
        elif kind == "intermediate":
            new = replace(s, tokens=tokens, stack=s.stack + ((v.pid(a), 0, 0),), n_res=s.n_res + 1)
        elif kind == "close_paren":
            pid = s.stack[-1][0]
            new = self._add_child(replace(s, tokens=tokens, stack=s.stack[:-1]), c.particles[pid].charge)
        elif kind == "end":
            rb = self.terminal_breakdown(s.signal, tokens)
            return replace(s, tokens=tokens, status=DONE, reward=rb, value=rb.final_R)
        if not self.legal_actions(new).any():
            return replace(new, status=TRUNCATED, value=self.params.truncation_penalty)
        return new

    @staticmethod
    def _add_child(s: EnvState, q: int) -> EnvState:
        if s.stack:
            pid, acc, n = s.stack[-1]
            return replace(s, stack=s.stack[:-1] + ((pid, acc + q, n + 1),))
        return replace(s, root_charge=s.root_charge + q, root_count=s.root_count + 1)

    # -- decoding and scoring ---------------------------------------------

    def decode(self, tokens) -> tuple[DecayTree, list[tuple[int, int]]]:
        """Tree plus declared (signal index, leaf position) pairs, both 0-based."""
        v, _c = self.vocab, self.catalog
        toks = [t for t in tokens if t != v.end]
        mother = v.pid(toks[0])
        frames: list[tuple[int | None, list]] = [(mother, [])]
        pairs = []
        leaf_pos = 0
        k = 1
        while k < len(toks):
            t = toks[k]
            kind = v.kind(t)
            if kind == "index":
                pid = v.pid(toks[k + 1])
                pairs.append((t - v.idx0, leaf_pos))
                frames[-1][1].append(Leaf(pid, False))
                leaf_pos += 1
                k += 2
                continue
            if kind == "lost":
                frames[-1][1].append(Leaf(v.pid(toks[k + 1]), True))
                leaf_pos += 1
                k += 2
                continue
            if kind == "neutrino":
                frames[-1][1].append(Leaf(v.pid(t), True))
                leaf_pos += 1
            elif kind == "detectable":
                raise IllegalAction("detectable without index or LOST prefix")
            elif kind == "intermediate":
                frames.append((v.pid(t), []))
            elif kind == "close_paren":
                pid, kids = frames.pop()
                frames[-1][1].append(Resonance(pid, tuple(kids)))
            k += 1
        if len(frames) != 1:
            raise IllegalAction("unclosed resonance")
        return DecayTree(mother, tuple(frames[0][1])), sorted(pairs)

    def terminal_breakdown(self, info: SignalInfo, tokens) -> RewardBreakdown:
        """Reward under the declared alignment: a misID is a declared pair with different particles."""
        c = self.catalog
        tree, pairs = self.decode(tokens)
        leaves = tree.leaves()
        n_miss = sum(1 for leaf in leaves if leaf.lost)
        br_b = chain_br(tree, c)
        if br_b <= 0 or tree.n_resonances > MAX_RESONANCES or n_miss > MAX_LOST:
            return invalid_breakdown(br_b, info.br_s, n_miss, info.n_nu)
        n_misid = sum(1 for i, pos in pairs if leaves[pos].pid != info.detectables[i])
        return breakdown(br_b, info.br_s, n_misid, n_miss, info.n_nu, self.params)

    def tree_to_trajectory(self, signal: DecayTree, tree: DecayTree) -> list[int]:
        """Action tokens that rebuild ``tree`` with the minimal-misID index assignment."""
        c, v = self.catalog, self.vocab
        al = best_alignment(tree, signal, c)
        if not al.valid:
            raise ValueError("background cannot be aligned with the signal")
        index_of = {pos: i for i, pos in al.pairs}
        out = [v.token_of[tree.mother]]
        pos = 0

        def emit(node):
            nonlocal pos
            if isinstance(node, Leaf):
                if node.lost:
                    if c.particles[node.pid].role != "neutrino":
                        out.append(v.lost)
                else:
                    out.append(v.index_token(index_of[pos] + 1))
                out.append(v.token_of[node.pid])
                pos += 1
            else:
                out.append(v.token_of[node.pid])
                for ch in node.children:
                    emit(ch)
                out.append(v.close)

        for node in tree.children:
            emit(node)
        out.append(v.end)
        return out

    def replay(self, signal: DecayTree, actions) -> EnvState:
        s = self.reset(signal)
        for a in actions:
            s = self.step(s, a)
        return s

    def format_trajectory(self, actions) -> str:
        return self.vocab.format(actions)

    def parse_trajectory(self, line: str) -> list[int]:
        return self.vocab.parse(line)


def dump_trajectories(env: Environment, episodes, path) -> None:
    """One episode per line, space-separated tokens."""
    with open(path, "w", encoding="utf-8") as fh:
        for actions in episodes:
            fh.write(env.format_trajectory(actions) + "\n")


def load_trajectories(env: Environment, path) -> list[list[int]]:
    with open(path, encoding="utf-8") as fh:
        return [env.parse_trajectory(line) for line in fh if line.strip()]
