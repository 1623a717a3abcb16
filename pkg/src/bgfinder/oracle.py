"""Exhaustive ground truth over the closed toy universe, plus GA search-space counting."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product
from math import comb
from pathlib import Path

from .catalog import Catalog
from .decays import (
    MAX_LOST,
    MAX_RESONANCES,
    DecayTree,
    Leaf,
    Node,
    Resonance,
    background_key,
    canonical_form,
    format_decay,
    parse_decay,
    signal_detectables,
)
from .rewards import RewardBreakdown, RewardParams, evaluate, signal_br

DEFAULT_CAP = 10**8


class BudgetExceeded(RuntimeError):
    pass


class UnsupportedProfile(ValueError):
    pass


@dataclass
class GroundTruthEntry:
    tree: DecayTree
    canonical: str
    key: str
    reward: RewardBreakdown


@dataclass
class GroundTruth:
    signal: DecayTree
    entries: list[GroundTruthEntry]
    constraints: dict = field(default_factory=lambda: {"max_resonances": MAX_RESONANCES, "max_lost": MAX_LOST})

    def keys(self) -> set[str]:
        return {e.key for e in self.entries}

    def __len__(self) -> int:
        return len(self.entries)

    def by_key(self) -> dict[str, GroundTruthEntry]:
        return {e.key: e for e in self.entries}

    def to_json(self, c: Catalog) -> dict:
        return {
            "signal": format_decay(self.signal, c),
            "constraints": self.constraints,
            "entries": [
                {
                    "decay": format_decay(e.tree, c),
                    "br_b": e.reward.br_b,
                    "n_misid": e.reward.n_misid,
                    "n_miss": e.reward.n_miss,
                    "raw": e.reward.raw,
                    "r": e.reward.r,
                }
                for e in self.entries
            ],
        }

    def dumps(self, c: Catalog) -> str:
        return json.dumps(self.to_json(c), indent=1) + "\n"

    @classmethod
    def from_json(cls, data: dict, c: Catalog, p: RewardParams | None = None) -> "GroundTruth":
        p = p or RewardParams()
        signal = parse_decay(data["signal"], c)
        br_s = signal_br(signal, c)
        entries = []
        for row in data["entries"]:
            tree = parse_decay(row["decay"], c)
            entries.append(
                GroundTruthEntry(tree, canonical_form(tree), background_key(tree), evaluate(tree, signal, c, p, br_s))
            )
        return cls(signal, entries, data.get("constraints", {"max_resonances": MAX_RESONANCES, "max_lost": MAX_LOST}))


def _cls(q: int) -> int:
    return 0 if q > 0 else (1 if q < 0 else 2)


def expand_channel_trees(c: Catalog, pid: int, budget: int) -> list[tuple[tuple[Node, ...], int]]:
    """All child tuples for ``pid`` built from catalog channels with at most ``budget`` resonances.

    Returns (children, resonances used) pairs.
    """
    out = []
    for ch in c.channels.get(pid, []):
        options: list[list[tuple[Node, int]]] = []
        ok = True
        for prod_id in ch.products:
            part = c.particles[prod_id]
            if part.is_final:
                options.append([(Leaf(prod_id, part.role == "neutrino"), 0)])
            elif part.role == "intermediate":
                subs = [(Resonance(prod_id, kids), used + 1) for kids, used in expand_channel_trees(c, prod_id, budget - 1)] if budget > 0 else []
                if not subs:
                    ok = False
                    break
                options.append(subs)
            else:
                ok = False
                break
        if not ok:
            continue
        for combo in product(*options):
            used = sum(u for _, u in combo)
            if used <= budget:
                out.append((tuple(n for n, _ in combo), used))
    return out


def all_catalog_trees(c: Catalog, max_resonances: int = MAX_RESONANCES) -> list[DecayTree]:
    """Every tree rooted at a mother built purely from catalog channels, unique by canonical form."""
    seen, out = set(), []
    for mother in c.by_role("mother"):
        for kids, _ in expand_channel_trees(c, mother.id, max_resonances):
            tree = DecayTree(mother.id, kids)
            key = canonical_form(tree)
            if key not in seen:
                seen.add(key)
                out.append(tree)
    return out


def lost_assignments(tree: DecayTree, c: Catalog, target: Counter) -> list[DecayTree]:
    """Lost-flag choices (at most one lost leaf, neutrinos always lost) whose reconstructed
    per-charge-class counts equal ``target``."""
    leaves = tree.leaves()
    nus = [leaf for leaf in leaves if c.particles[leaf.pid].role == "neutrino"]
    if len(nus) > MAX_LOST:
        return []
    reco = Counter(_cls(c.particles[leaf.pid].charge) for leaf in leaves if not leaf.lost)
    if reco == target:
        return [tree]
    if nus:
        return []
    extra = reco - target
    if sum(extra.values()) != 1 or (target - reco):
        return []
    (cls,) = extra
    out, seen = [], set()
    n_leaf = len(leaves)
    for idx in range(n_leaf):
        leaf = leaves[idx]
        if _cls(c.particles[leaf.pid].charge) != cls:
            continue
        flagged = _flag_leaf(tree, idx)
        key = canonical_form(flagged)
        if key not in seen:
            seen.add(key)
            out.append(flagged)
    return out


def _flag_leaf(tree: DecayTree, target: int) -> DecayTree:
    counter = 0

    def conv(node: Node) -> Node:
        nonlocal counter
        if isinstance(node, Leaf):
            hit = counter == target
            counter += 1
            return Leaf(node.pid, True) if hit else node
        return Resonance(node.pid, tuple(conv(n) for n in node.children))

    return DecayTree(tree.mother, tuple(conv(n) for n in tree.children))


def enumerate_backgrounds(
    signal: DecayTree,
    c: Catalog,
    p: RewardParams | None = None,
    cap: int = DEFAULT_CAP,
    trees: list[DecayTree] | None = None,
    include_signal: bool = False,
) -> GroundTruth:
    """All relevant backgrounds of ``signal``: one entry per physical decay, best lost choice kept."""
    p = p or RewardParams()
    br_s = signal_br(signal, c)
    target = Counter(_cls(c.particles[pid].charge) for pid in signal_detectables(signal, c))
    signal_key = background_key(signal)
    if trees is None:
        trees = all_catalog_trees(c)
    best: dict[str, GroundTruthEntry] = {}
    visited = 0
    for tree in trees:
        for cand in lost_assignments(tree, c, target):
            visited += 1
            if visited > cap:
                raise BudgetExceeded(f"candidate count exceeded cap {cap}")
            rb = evaluate(cand, signal, c, p, br_s)
            if not rb.relevant:
                continue
            key = background_key(cand)
            if key == signal_key and not include_signal:
                continue
            entry = GroundTruthEntry(cand, canonical_form(cand), key, rb)
            prev = best.get(key)
            if prev is None or (rb.r, prev.canonical) > (prev.reward.r, entry.canonical):
                best[key] = entry
    entries = sorted(best.values(), key=lambda e: (-e.reward.r, e.canonical))
    return GroundTruth(signal, entries)


def save_ground_truth(gt: GroundTruth, c: Catalog, path: str | Path) -> None:
    Path(path).write_text(gt.dumps(c), encoding="utf-8")


def load_ground_truth(path: str | Path, c: Catalog, p: RewardParams | None = None) -> GroundTruth:
    return GroundTruth.from_json(json.loads(Path(path).read_text(encoding="utf-8")), c, p)


@dataclass(frozen=True)
class SpaceConstraints:
    max_resonances: int = MAX_RESONANCES
    max_lost: int = MAX_LOST
    min_root_children: int = 1
    min_resonance_children: int = 2


def ga_space_size(profile: tuple[int, int, int], c: Catalog, constraints: SpaceConstraints | None = None) -> int:
    """Number of distinct GA individuals for a reconstructed (n+, n-, n0) profile.

    Individuals are unordered trees (children form a multiset), identified by
    their lost-free canonical form, since the GA genome carries no lost flags (the
    lost leaf is chosen when scoring). Neutrinos sit in the neutral class. With
    max_lost = 1 the evolutions with one extra leaf in any charge class are added.
    Only vertex charge conservation is imposed.
    """
    k = constraints or SpaceConstraints()
    if len(profile) != 3 or min(profile) < 0 or sum(profile) < 1:
        raise UnsupportedProfile(f"unsupported profile {profile!r}")
    if k.max_lost not in (0, 1) or k.max_resonances not in (0, 1, 2):
        raise UnsupportedProfile("only max_lost in {0,1} and max_resonances in {0,1,2} are supported")
    charges = (1, -1, 0)
    finals = [sum(1 for p in c.particles if p.is_final and p.charge == q) for q in charges]
    classes = list(zip(charges, finals))
    inter = Counter(p.charge for p in c.by_role("intermediate"))
    mothers = Counter(p.charge for p in c.by_role("mother"))
    profiles = [tuple(profile)]
    if k.max_lost:
        profiles += [tuple(n + (i == j) for j, n in enumerate(profile)) for i in range(3)]
    return sum(mothers.get(_charge(p, classes), 0) * _count_children(p, classes, inter, k) for p in profiles)


def _charge(p: tuple[int, ...], classes) -> int:
    return sum(classes[i][0] * n for i, n in enumerate(p))


def _count_children(profile, classes, inter, k: SpaceConstraints) -> int:
    K = len(classes)

    def leaves(p):
        out = 1
        for i in range(K):
            out *= comb(classes[i][1] + p[i] - 1, p[i])
        return out

    def minus(a, b):
        return tuple(x - y for x, y in zip(a, b))

    def subs(p):
        return product(*[range(x + 1) for x in p])

    @lru_cache(maxsize=None)
    def kids(p, r, mn):
        # multisets of children covering leaf profile p with exactly r resonances below
        if r == 0:
            return leaves(p) if sum(p) >= mn else 0
        total = 0
        for q in subs(p):
            rest = minus(p, q)
            if 1 + sum(rest) >= mn:
                total += item(q, r) * leaves(rest)
        if r == 2:
            for q1 in subs(p):
                for q2 in subs(minus(p, q1)):
                    if q1 > q2:
                        continue
                    rest = minus(minus(p, q1), q2)
                    if 2 + sum(rest) < mn:
                        continue
                    t1, t2 = item(q1, 1), item(q2, 1)
                    total += (comb(t1 + 1, 2) if q1 == q2 else t1 * t2) * leaves(rest)
        return total

    @lru_cache(maxsize=None)
    def item(q, r):
        # distinct resonance subtrees with leaf profile q holding r resonances (itself included)
        if sum(q) < 1:
            return 0
        return inter.get(_charge(q, classes), 0) * kids(q, r - 1, k.min_resonance_children)

    return sum(kids(profile, r, k.min_root_children) for r in range(k.max_resonances + 1))
