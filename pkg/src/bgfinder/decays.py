"""Decay trees: parsing, validation, chain BRs, signal alignment and signal variants."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator, Union

from .catalog import Catalog

MAX_RESONANCES = 2
MAX_LOST = 1
LOST_PREFIX = "LOST:"


class DecayParseError(ValueError):
    pass


@dataclass(frozen=True)
class Leaf:
    pid: int
    lost: bool = False


@dataclass(frozen=True)
class Resonance:
    pid: int
    children: tuple["Node", ...]


Node = Union[Leaf, Resonance]


@dataclass(frozen=True)
class DecayTree:
    mother: int
    children: tuple[Node, ...]

    def walk(self) -> Iterator[Node]:
        """Pre-order traversal of all nodes below the root."""
        stack = list(reversed(self.children))
        while stack:
            node = stack.pop()
            yield node
            if isinstance(node, Resonance):
                stack.extend(reversed(node.children))

    def leaves(self) -> list[Leaf]:
        return [n for n in self.walk() if isinstance(n, Leaf)]

    def resonances(self) -> list[Resonance]:
        return [n for n in self.walk() if isinstance(n, Resonance)]

    @property
    def n_resonances(self) -> int:
        return sum(1 for n in self.walk() if isinstance(n, Resonance))

    def vertices(self) -> list[tuple[int, tuple[int, ...]]]:
        """(parent pid, child pids) for the root and every resonance, root first then pre-order."""
        out = [(self.mother, tuple(n.pid for n in self.children))]
        for node in self.walk():
            if isinstance(node, Resonance):
                out.append((node.pid, tuple(n.pid for n in node.children)))
        return out


# --- parsing and printing -------------------------------------------------

_TOKEN = re.compile(r"->|\(|\)|[^\s()]+")


def parse_decay(text: str, c: Catalog) -> DecayTree:
    """Parse ``B0 -> pi+ D*-( pi- D0bar( K+ pi- ) )``; ``LOST:pi0`` marks a lost leaf."""
    tokens = _TOKEN.findall(text)
    if len(tokens) < 3 or tokens[1] != "->":
        raise DecayParseError(f"expected '<mother> -> ...' in {text!r}")
    pos = 2

    def lookup(name: str) -> int:
        if name not in c:
            raise DecayParseError(f"unknown particle {name!r} in {text!r}")
        return c[name].id

    def parse_nodes() -> tuple[Node, ...]:
        nonlocal pos
        nodes: list[Node] = []
        while pos < len(tokens) and tokens[pos] != ")":
            tok = tokens[pos]
            pos += 1
            if tok in ("(", "->"):
                raise DecayParseError(f"unexpected {tok!r} in {text!r}")
            if pos < len(tokens) and tokens[pos] == "(":
                pos += 1
                kids = parse_nodes()
                if pos >= len(tokens) or tokens[pos] != ")":
                    raise DecayParseError(f"unbalanced parenthesis in {text!r}")
                pos += 1
                nodes.append(Resonance(lookup(tok), kids))
            elif tok.startswith(LOST_PREFIX):
                nodes.append(Leaf(lookup(tok[len(LOST_PREFIX):]), True))
            else:
                nodes.append(Leaf(lookup(tok), False))
        return tuple(nodes)

    children = parse_nodes()
    if pos != len(tokens):
        raise DecayParseError(f"trailing tokens in {text!r}")
    tree = DecayTree(lookup(tokens[0]), children)
    # neutrinos are never reconstructed
    return mark_neutrinos_lost(tree, c)


def mark_neutrinos_lost(tree: DecayTree, c: Catalog) -> DecayTree:
    def fix(node: Node) -> Node:
        if isinstance(node, Leaf):
            if c.particles[node.pid].role == "neutrino" and not node.lost:
                return Leaf(node.pid, True)
            return node
        return Resonance(node.pid, tuple(fix(n) for n in node.children))

    return DecayTree(tree.mother, tuple(fix(n) for n in tree.children))


def format_decay(tree: DecayTree, c: Catalog) -> str:
    def fmt(node: Node) -> str:
        if isinstance(node, Leaf):
            name = c.name(node.pid)
            if node.lost and c.particles[node.pid].role != "neutrino":
                return LOST_PREFIX + name
            return name
        return f"{c.name(node.pid)}( " + " ".join(fmt(n) for n in node.children) + " )"

    return f"{c.name(tree.mother)} -> " + " ".join(fmt(n) for n in tree.children)


# --- canonical forms ------------------------------------------------------

def _canon(node: Node, keep_lost: bool) -> str:
    if isinstance(node, Leaf):
        return f"~{node.pid}" if (node.lost and keep_lost) else str(node.pid)
    return f"{node.pid}(" + ",".join(sorted(_canon(n, keep_lost) for n in node.children)) + ")"


def canonical_form(tree: DecayTree) -> str:
    """Order-insensitive identity string; lost flags included."""
    return f"{tree.mother}>" + ",".join(sorted(_canon(n, True) for n in tree.children))


def background_key(tree: DecayTree) -> str:
    """Identity of the physical decay, ignoring which leaf is flagged lost."""
    return f"{tree.mother}>" + ",".join(sorted(_canon(n, False) for n in tree.children))


def canonicalize(tree: DecayTree) -> DecayTree:
    """Same tree with children sorted by canonical order at every level."""

    def norm(node: Node) -> tuple[str, Node]:
        if isinstance(node, Leaf):
            return _canon(node, True), node
        kids = sorted((norm(n) for n in node.children), key=lambda kv: kv[0])
        new = Resonance(node.pid, tuple(n for _, n in kids))
        return _canon(new, True), new

    kids = sorted((norm(n) for n in tree.children), key=lambda kv: kv[0])
    return DecayTree(tree.mother, tuple(n for _, n in kids))


# --- structure, charges, BRs ----------------------------------------------

def node_charge(node: Node, c: Catalog) -> int:
    return c.particles[node.pid].charge


def charge_signature(node: Node, c: Catalog) -> tuple[int, int, int]:
    """(n_plus, n_minus, n_neutral) over the node's final-state leaves (neutrinos are neutral)."""
    if isinstance(node, Leaf):
        q = c.particles[node.pid].charge
        return (int(q > 0), int(q < 0), int(q == 0))
    plus = minus = neutral = 0
    for child in node.children:
        a, b, n = charge_signature(child, c)
        plus, minus, neutral = plus + a, minus + b, neutral + n
    return plus, minus, neutral


def tree_profile(tree: DecayTree, c: Catalog) -> tuple[int, int, int]:
    plus = minus = neutral = 0
    for leaf in tree.leaves():
        q = c.particles[leaf.pid].charge
        plus += q > 0
        minus += q < 0
        neutral += q == 0
    return plus, minus, neutral


def lost_count(tree: DecayTree) -> int:
    return sum(1 for leaf in tree.leaves() if leaf.lost)


@dataclass
class ValidationReport:
    charge_ok: list[bool]
    in_db: list[bool]
    structural_ok: bool
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.structural_ok and all(self.charge_ok) and all(self.in_db)


def validate(tree: DecayTree, c: Catalog) -> ValidationReport:
    charge_ok, in_db = [], []
    for parent, kids in tree.vertices():
        charge_ok.append(sum(c.particles[k].charge for k in kids) == c.particles[parent].charge)
        in_db.append(c.channel(parent, kids) is not None)
    problems = []
    if c.particles[tree.mother].role != "mother":
        problems.append(f"root {c.name(tree.mother)} is not a mother particle")
    for node in tree.walk():
        role = c.particles[node.pid].role
        if isinstance(node, Resonance):
            if role != "intermediate":
                problems.append(f"{c.name(node.pid)} cannot be a resonance")
            if len(node.children) < 2:
                problems.append(f"resonance {c.name(node.pid)} has fewer than 2 children")
        else:
            if role not in ("detectable", "neutrino"):
                problems.append(f"{c.name(node.pid)} cannot be a final-state leaf")
            if role == "neutrino" and not node.lost:
                problems.append("neutrino leaf not flagged lost")
    if len(tree.children) < 2:
        problems.append("mother has fewer than 2 children")
    if tree.n_resonances > MAX_RESONANCES:
        problems.append(f"more than {MAX_RESONANCES} resonances")
    if lost_count(tree) > MAX_LOST:
        problems.append(f"more than {MAX_LOST} non-reconstructed particles")
    return ValidationReport(charge_ok, in_db, not problems, problems)


def chain_br(tree: DecayTree, c: Catalog) -> float:
    """Product of channel BRs over the root and every resonance; 0 if any vertex is unknown."""
    brs = []
    for parent, kids in tree.vertices():
        ch = c.channel(parent, kids)
        if ch is None:
            return 0.0
        brs.append(ch.br)
    # fixed multiplication order keeps CP images bit-identical
    total = 1.0
    for br in sorted(brs):
        total *= br
    return total


# --- alignment --------------------------------------------------------------

def signal_detectables(signal: DecayTree, c: Catalog) -> list[int]:
    """Detectable pids of the signal in serialisation order; position i carries index token i+1."""
    return [leaf.pid for leaf in signal.leaves() if c.particles[leaf.pid].role == "detectable"]


def neutrino_count(tree: DecayTree, c: Catalog) -> int:
    return sum(1 for leaf in tree.leaves() if c.particles[leaf.pid].role == "neutrino")


@dataclass
class Alignment:
    pairs: list[tuple[int, int]]  # (signal index, background leaf position), both 0-based
    n_misid: int
    n_miss: int
    br_b: float
    valid: bool


def _charge_class(q: int) -> int:
    return 0 if q > 0 else (1 if q < 0 else 2)


def best_alignment(tree: DecayTree, signal: DecayTree, c: Catalog) -> Alignment:
    """Minimal-misID charge-respecting matching of reconstructed background leaves to signal detectables."""
    sig = signal_detectables(signal, c)
    leaves = tree.leaves()
    n_miss = sum(1 for leaf in leaves if leaf.lost)
    reco = [(pos, leaf.pid) for pos, leaf in enumerate(leaves) if not leaf.lost]
    br_b = chain_br(tree, c)

    sig_classes = Counter(_charge_class(c.particles[p].charge) for p in sig)
    bg_classes = Counter(_charge_class(c.particles[p].charge) for _, p in reco)
    if sig_classes != bg_classes:
        return Alignment([], 0, n_miss, br_b, False)

    free = list(reco)
    pairs: list[tuple[int, int]] = []
    unmatched = []
    for i, pid in enumerate(sig):
        for k, (pos, bpid) in enumerate(free):
            if bpid == pid:
                pairs.append((i, pos))
                del free[k]
                break
        else:
            unmatched.append(i)
    n_misid = 0
    for i in unmatched:
        cls = _charge_class(c.particles[sig[i]].charge)
        for k, (pos, bpid) in enumerate(free):
            if _charge_class(c.particles[bpid].charge) == cls:
                pairs.append((i, pos))
                del free[k]
                n_misid += 1
                break
    pairs.sort()
    return Alignment(pairs, n_misid, n_miss, br_b, True)


def misid_lower_bound(tree: DecayTree, signal: DecayTree, c: Catalog) -> int:
    """Closed form: per charge class, class size minus multiset intersection."""
    sig = Counter(signal_detectables(signal, c))
    bg = Counter(leaf.pid for leaf in tree.leaves() if not leaf.lost)
    return sum(sig.values()) - sum((sig & bg).values())


# --- transformations ------------------------------------------------------

def map_particles(tree: DecayTree, mapping: dict[int, int]) -> DecayTree:
    def conv(node: Node) -> Node:
        if isinstance(node, Leaf):
            return Leaf(mapping.get(node.pid, node.pid), node.lost)
        return Resonance(mapping.get(node.pid, node.pid), tuple(conv(n) for n in node.children))

    return DecayTree(mapping.get(tree.mother, tree.mother), tuple(conv(n) for n in tree.children))


def cp_conjugate(tree: DecayTree, c: Catalog) -> DecayTree:
    return map_particles(tree, {p.id: p.cp_partner for p in c.particles})


def flatten(tree: DecayTree) -> DecayTree:
    """Drop every resonance, attaching its final-state leaves to the mother."""
    return DecayTree(tree.mother, tuple(tree.leaves()))


def strip_lost(tree: DecayTree, c: Catalog) -> DecayTree:
    def conv(node: Node) -> Node:
        if isinstance(node, Leaf):
            return Leaf(node.pid, c.particles[node.pid].role == "neutrino")
        return Resonance(node.pid, tuple(conv(n) for n in node.children))

    return DecayTree(tree.mother, tuple(conv(n) for n in tree.children))


LEPTON_SWAP = [("e+", "mu+"), ("e-", "mu-"), ("nu_e", "nu_mu"), ("nu_ebar", "nu_mubar")]


def lepton_swapped(tree: DecayTree, c: Catalog) -> DecayTree:
    mapping = {}
    for a, b in LEPTON_SWAP:
        if a in c and b in c:
            mapping[c[a].id] = c[b].id
            mapping[c[b].id] = c[a].id
    return map_particles(tree, mapping)


def signal_variants(signal: DecayTree, c: Catalog) -> list[DecayTree]:
    """Signal, CP conjugate, resonance-free form and e/mu swap; deduplicated, in that order."""
    out, seen = [], set()
    for t in (signal, cp_conjugate(signal, c), flatten(signal), lepton_swapped(signal, c)):
        key = canonical_form(t)
        if key not in seen:
            seen.add(key)
            out.append(t)
    return out


SPLITS = ("train", "gen")


def parse_signals(text: str, c: Catalog) -> dict[str, list[DecayTree]]:
    """``<split>: <decay>`` lines; ``#`` starts a comment."""
    out: dict[str, list[DecayTree]] = {s: [] for s in SPLITS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        split, sep, decay = line.partition(":")
        if not sep or split.strip() not in out:
            raise DecayParseError(f"line {lineno}: expected 'train: <decay>' or 'gen: <decay>'")
        out[split.strip()].append(parse_decay(decay.strip(), c))
    return out


def load_signals(c: Catalog, path=None) -> dict[str, list[DecayTree]]:
    if path is None:
        from importlib import resources

        text = resources.files("bgfinder.data").joinpath("signals.txt").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return parse_signals(text, c)
