"""Genetic search over decay-tree genomes with a fixed final-state charge profile per evolution."""

from __future__ import annotations

import csv
import json
import random
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .catalog import Catalog, KnowledgeBase
from .decays import (
    MAX_RESONANCES,
    DecayTree,
    Leaf,
    Resonance,
    background_key,
    canonical_form,
    charge_signature,
    format_decay,
    parse_decay,
    signal_detectables,
    signal_variants,
)
from .oracle import lost_assignments
from .rewards import RewardBreakdown, RewardParams, evaluate, signal_br


class InfeasibleProfile(ValueError):
    pass


@dataclass
class GAConfig:
    population_size: int = 6000
    generations: int = 40
    p_crossover_gene: float = 0.5
    p_mutation: float = 0.1
    p_resonance_construction: float = 0.7
    p_naive: float = 0.1
    p_inherit_signal: float = 0.5
    tournament_size: int = 3
    kb_seed_fraction: float = 1.0
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        for name in ("p_crossover_gene", "p_mutation", "p_resonance_construction", "p_naive", "p_inherit_signal", "kb_seed_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.tournament_size < 2:
            raise ValueError("tournament_size must be at least 2")
        if self.population_size < 1 or self.generations < 0:
            raise ValueError("population_size must be positive and generations non-negative")


@dataclass
class Individual:
    tree: DecayTree
    fitness: float = 0.0
    evaluated: bool = False
    best: DecayTree | None = None  # lost-flagged form that scored ``fitness``
    reward: RewardBreakdown | None = None

    @property
    def key(self) -> str:
        return canonical_form(self.tree)


def n_res(node) -> int:
    if isinstance(node, Leaf):
        return 0
    return 1 + sum(n_res(ch) for ch in node.children)


class Pools:
    """Particle pools by charge used by the variation operators."""

    def __init__(self, c: Catalog):
        self.catalog = c
        self.finals = {q: [p.id for p in c.particles if p.is_final and p.charge == q] for q in (-1, 0, 1)}
        self.inter = {q: [p.id for p in c.by_role("intermediate") if p.charge == q] for q in (-1, 0, 1)}
        self.mothers = {q: [p.id for p in c.by_role("mother") if p.charge == q] for q in (-1, 0, 1)}
        self.neutrino = {p.id for p in c.by_role("neutrino")}

    def leaf(self, pid: int) -> Leaf:
        return Leaf(pid, pid in self.neutrino)

    def charge(self, node) -> int:
        return self.catalog.particles[node.pid].charge


# --- fitness --------------------------------------------------------------

class Fitness:
    """Best reward over lost-leaf choices, cached by physical decay."""

    def __init__(self, signal: DecayTree, c: Catalog, p: RewardParams):
        self.signal, self.c, self.p = signal, c, p
        self.br_s = signal_br(signal, c)
        self.target = Counter(_cls(c.particles[pid].charge) for pid in signal_detectables(signal, c))
        self.signal_key = background_key(signal)
        self.cache: dict[str, tuple[float, DecayTree | None, RewardBreakdown | None]] = {}

    def score(self, tree: DecayTree) -> tuple[float, DecayTree | None, RewardBreakdown | None]:
        key = background_key(tree)
        hit = self.cache.get(key)
        if hit is None:
            hit = _best_assignment(tree, self.signal, self.c, self.p, self.br_s, self.target, self.signal_key)
            self.cache[key] = hit
        return hit

    def evaluate_all(self, inds: list[Individual], workers: int = 1) -> None:
        todo = [ind for ind in inds if not ind.evaluated]
        if workers > 1:
            fresh = {}
            for ind in todo:
                k = background_key(ind.tree)
                if k not in self.cache and k not in fresh:
                    fresh[k] = ind.tree
            if fresh:
                keys = list(fresh)
                args = [(fresh[k], self.signal, self.c, self.p, self.br_s, self.target, self.signal_key) for k in keys]
                with ProcessPoolExecutor(max_workers=workers) as ex:
                    for k, res in zip(keys, ex.map(_best_assignment_star, args, chunksize=64)):
                        self.cache[k] = res
        for ind in todo:
            ind.fitness, ind.best, ind.reward = self.score(ind.tree)
            ind.evaluated = True


def _cls(q: int) -> int:
    return 0 if q > 0 else (1 if q < 0 else 2)


def _best_assignment(tree, signal, c, p, br_s, target, signal_key):
    # the signal itself is not a background: no selection pressure towards it
    if background_key(tree) == signal_key:
        return (0.0, None, None)
    best = (0.0, None, None)
    best_canon = None
    for cand in lost_assignments(tree, c, target):
        if background_key(cand) == signal_key:
            continue
        rb = evaluate(cand, signal, c, p, br_s)
        canon = canonical_form(cand)
        if best[1] is None or rb.r > best[0] or (rb.r == best[0] and canon < best_canon):
            best, best_canon = (rb.r, cand, rb), canon
    return best


def _best_assignment_star(args):
    return _best_assignment(*args)


# --- hall of fame -----------------------------------------------------------

@dataclass
class HallOfFame:
    entries: dict[str, tuple[DecayTree, RewardBreakdown]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def add(self, tree: DecayTree, rb: RewardBreakdown) -> bool:
        key = background_key(tree)
        prev = self.entries.get(key)
        if prev is None or (rb.r, canonical_form(prev[0])) > (prev[1].r, canonical_form(tree)):
            self.entries[key] = (tree, rb)
            return prev is None
        return False

    def absorb(self, inds, r_eps: float, exclude: str | None = None) -> list[str]:
        """Add relevant individuals; ``exclude`` is the signal's own key (it scores but is no background)."""
        new = []
        for ind in inds:
            if ind.best is not None and background_key(ind.best) != exclude and ind.reward is not None and ind.reward.relevant and ind.fitness >= r_eps:
                if self.add(ind.best, ind.reward):
                    new.append(background_key(ind.best))
        return new

    def merge(self, other: "HallOfFame") -> None:
        for tree, rb in other.entries.values():
            self.add(tree, rb)

    def sorted(self) -> list[tuple[DecayTree, RewardBreakdown]]:
        return sorted(self.entries.values(), key=lambda e: (-e[1].r, canonical_form(e[0])))

    def rows(self, signal: DecayTree, c: Catalog) -> list[dict]:
        sig = format_decay(signal, c)
        return [{"signal": sig, "decay": format_decay(t, c), "r": rb.r, **rb.to_dict()} for t, rb in self.sorted()]


def save_hall_of_fame(rows: list[dict], path) -> None:
    Path(path).write_text(json.dumps(rows, indent=1) + "\n", encoding="utf-8")


def load_hall_of_fame(path, c: Catalog) -> dict[str, list[DecayTree]]:
    """Signal string -> background trees, in file order."""
    out: dict[str, list[DecayTree]] = {}
    for row in json.loads(Path(path).read_text(encoding="utf-8")):
        out.setdefault(row["signal"], []).append(parse_decay(row["decay"], c))
    return out


# --- operators --------------------------------------------------------------

def signal_profile(signal: DecayTree, c: Catalog) -> tuple[int, int, int]:
    """Charge-class counts of the signal's reconstructed particles."""
    qs = [c.particles[p].charge for p in signal_detectables(signal, c)]
    return sum(q > 0 for q in qs), sum(q < 0 for q in qs), sum(q == 0 for q in qs)


def evolution_profiles(signal: DecayTree, c: Catalog) -> list[tuple[int, int, int]]:
    """Signal profile plus one extra particle in each class; profiles with no mother are skipped."""
    base = signal_profile(signal, c)
    mothers = {p.charge for p in c.by_role("mother")}
    out = []
    for extra in (None, 0, 1, 2):
        prof = tuple(n + (i == extra) for i, n in enumerate(base))
        if prof[0] - prof[1] in mothers and prof not in out:
            out.append(prof)
    return out


def random_individual(profile, pools: Pools, rng: random.Random) -> Individual:
    q = profile[0] - profile[1]
    mothers = pools.mothers.get(q, [])
    if not mothers:
        raise InfeasibleProfile(f"no mother of charge {q} for profile {profile}")
    mother = rng.choice(mothers)
    leaves = []
    for charge, n in zip((1, -1, 0), profile):
        leaves += [pools.leaf(rng.choice(pools.finals[charge])) for _ in range(n)]
    rng.shuffle(leaves)
    return Individual(DecayTree(mother, tuple(leaves)))


def init_population(signal: DecayTree, profile, cfg: GAConfig, rng: random.Random, pools: Pools) -> list[Individual]:
    return [random_individual(profile, pools, rng) for _ in range(cfg.population_size)]


def crossover(a: Individual, b: Individual, rng: random.Random, pools: Pools, p_gene: float = 0.5):
    """Swap equal-signature root genes; each gene takes part in at most one swap."""
    c = pools.catalog
    ga, gb = list(a.tree.children), list(b.tree.children)
    sa = [charge_signature(g, c) for g in ga]
    sb = [charge_signature(g, c) for g in gb]
    ra, rb = sum(n_res(g) for g in ga), sum(n_res(g) for g in gb)
    done_b = set()
    changed = False
    for i in range(len(ga)):
        if rng.random() >= p_gene:
            continue
        ni = n_res(ga[i])
        cands = [
            j
            for j in range(len(gb))
            if j not in done_b
            and sb[j] == sa[i]
            and ra - ni + n_res(gb[j]) <= MAX_RESONANCES
            and rb - n_res(gb[j]) + ni <= MAX_RESONANCES
        ]
        if not cands:
            continue
        j = rng.choice(cands)
        nj = n_res(gb[j])
        ga[i], gb[j] = gb[j], ga[i]
        ra, rb = ra - ni + nj, rb - nj + ni
        done_b.add(j)
        changed = True
    if not changed:
        return a, b
    return Individual(DecayTree(a.tree.mother, tuple(ga))), Individual(DecayTree(b.tree.mother, tuple(gb)))


def mutate(ind: Individual, cfg: GAConfig, rng: random.Random, pools: Pools) -> Individual:
    if cfg.p_mutation <= 0:
        return ind
    genes = list(ind.tree.children)
    changed = False
    for i, g in enumerate(genes):
        if isinstance(g, Leaf) and rng.random() < cfg.p_mutation:
            pool = [pid for pid in pools.finals[pools.charge(g)] if pid != g.pid]
            if pool:
                genes[i] = pools.leaf(rng.choice(pool))
                changed = True
    return Individual(DecayTree(ind.tree.mother, tuple(genes))) if changed else ind


def construct_resonance(ind: Individual, kb: KnowledgeBase, cfg: GAConfig, rng: random.Random, pools: Pools) -> Individual:
    genes = list(ind.tree.children)
    if len(genes) < 2 or ind.tree.n_resonances >= MAX_RESONANCES:
        return ind
    while True:  # each gene joins with probability 1/2; at least two are needed
        picked = [i for i in range(len(genes)) if rng.random() < 0.5]
        if len(picked) >= 2:
            break
    subset = [genes[i] for i in picked]
    q = sum(pools.charge(g) for g in subset)
    if rng.random() < cfg.p_naive:
        pool = pools.inter.get(q, [])
        if not pool:
            return ind
        pid = rng.choice(pool)
    else:
        c = pools.catalog
        chans = [ch for ch in kb.channels_with_products(g.pid for g in subset) if c.particles[ch.mother].role == "intermediate"]
        if not chans:
            return ind
        pid = rng.choices([ch.mother for ch in chans], weights=[ch.br for ch in chans])[0]
    rest = [g for i, g in enumerate(genes) if i not in picked]
    return Individual(DecayTree(ind.tree.mother, tuple(rest) + (Resonance(pid, tuple(subset)),)))


def inherit_from_signal(ind: Individual, variants: list[DecayTree], cfg: GAConfig, rng: random.Random, pools: Pools) -> Individual:
    """Clone genes from a randomly chosen signal variant instead of from the individual.

    Every donor gene of the variant replaces an equal-signature part of the genome:
    either one root gene or a group of root leaf genes with the same combined
    signature. Donor resonances are opened one level with probability 1/2, so
    partial signal structures are inherited too. The profile is always preserved.
    """
    if not variants:
        return ind
    c = pools.catalog
    variant = rng.choice(variants)
    donors = []
    for g in variant.children:
        if isinstance(g, Resonance) and rng.random() < 0.5:
            donors.extend(g.children)
        else:
            donors.append(g)
    rng.shuffle(donors)
    genes = list(ind.tree.children)
    taken = [False] * len(genes)
    total = sum(n_res(g) for g in genes)
    changed = False
    for vg in donors:
        vs = charge_signature(vg, c)
        vr = n_res(vg)
        free = [i for i in range(len(genes)) if not taken[i]]
        single = [i for i in free if charge_signature(genes[i], c) == vs and total - n_res(genes[i]) + vr <= MAX_RESONANCES]
        if single:
            i = rng.choice(single)
            total += vr - n_res(genes[i])
            changed |= genes[i] != vg
            genes[i] = vg
            taken[i] = True
            continue
        if sum(vs) < 2 or total + vr > MAX_RESONANCES:
            continue
        pools_by_cls = [[i for i in free if isinstance(genes[i], Leaf) and charge_signature(genes[i], c)[k]] for k in range(3)]
        if any(len(pools_by_cls[k]) < vs[k] for k in range(3)):
            continue
        group = [j for k in range(3) for j in rng.sample(pools_by_cls[k], vs[k])]
        keep = group[0]
        for j in group:
            genes[j] = None
        genes[keep] = vg
        total += vr
        taken[keep] = True
        changed = True
        genes_taken = [(g, t) for g, t in zip(genes, taken) if g is not None]
        genes = [g for g, _ in genes_taken]
        taken = [t for _, t in genes_taken]
    if not changed:
        return ind
    return Individual(DecayTree(ind.tree.mother, tuple(genes)))


def tournament(pop: list[Individual], k: int, rng: random.Random) -> Individual:
    best = None
    for _ in range(k):
        cand = pop[rng.randrange(len(pop))]
        if best is None or cand.fitness > best.fitness:
            best = cand
    return best


def learn_channels(kb: KnowledgeBase, inds, c: Catalog) -> int:
    new = 0
    for ind in inds:
        for parent, kids in ind.tree.vertices():
            ch = c.channel(parent, kids)
            if ch is not None and ch not in kb:
                kb.learn(ch)
                new += 1
    return new


def evolve_generation(
    pop: list[Individual],
    profile,
    variants: list[DecayTree],
    kb: KnowledgeBase,
    cfg: GAConfig,
    rng: random.Random,
    pools: Pools,
    fitness: Fitness,
    hof: HallOfFame,
    r_eps: float,
) -> tuple[list[Individual], list[str]]:
    """One generation: clone, vary, immigrate, evaluate, select. Returns (next population, new hall-of-fame keys)."""
    # cloning: some clones copy genes from a signal variant instead of their parent
    clones = [inherit_from_signal(ind, variants, cfg, rng, pools) if rng.random() < cfg.p_inherit_signal else ind for ind in pop]
    order = list(range(len(clones)))
    rng.shuffle(order)
    for a, b in zip(order[::2], order[1::2]):
        clones[a], clones[b] = crossover(clones[a], clones[b], rng, pools, cfg.p_crossover_gene)
    seen = {ind.key for ind in pop}
    for i in range(len(clones)):
        ind = mutate(clones[i], cfg, rng, pools)
        if rng.random() < cfg.p_resonance_construction:
            ind = construct_resonance(ind, kb, cfg, rng, pools)
        # random immigration: a clone identical to an original is replaced
        if canonical_form(ind.tree) in seen:
            ind = random_individual(profile, pools, rng)
        clones[i] = ind
    fitness.evaluate_all(clones, cfg.workers)
    learn_channels(kb, clones, pools.catalog)
    new_keys = hof.absorb(clones, r_eps, fitness.signal_key)

    merged = pop + clones
    elites, seen = [], set()
    for ind in sorted(merged, key=lambda x: -x.fitness):
        if ind.fitness < r_eps:
            break
        k = ind.key
        if k not in seen:
            seen.add(k)
            elites.append(ind)
    nxt = elites[: cfg.population_size]
    while len(nxt) < cfg.population_size:
        nxt.append(tournament(merged, cfg.tournament_size, rng))
    return nxt, new_keys


@dataclass
class GenerationStats:
    signal: str
    profile: str
    generation: int
    best_fitness: float
    mean_fitness: float
    n_elite: int
    hof_size: int
    kb_size: int


def run_evolutions(
    signal: DecayTree,
    c: Catalog,
    cfg: GAConfig,
    p: RewardParams | None = None,
    kb: KnowledgeBase | None = None,
    stats: list[GenerationStats] | None = None,
) -> HallOfFame:
    """One evolution per charge profile; the hall of fame is shared across them."""
    p = p or RewardParams()
    pools = Pools(c)
    if kb is None:
        kb = KnowledgeBase.seeded(c, cfg.kb_seed_fraction, random.Random(cfg.seed))
    variants = signal_variants(signal, c)
    fitness = Fitness(signal, c, p)
    hof = HallOfFame()
    sig_text = format_decay(signal, c)
    for k, profile in enumerate(evolution_profiles(signal, c)):
        rng = random.Random(f"{cfg.seed}:{k}")
        pop = init_population(signal, profile, cfg, rng, pools)
        fitness.evaluate_all(pop, cfg.workers)
        learn_channels(kb, pop, c)
        hof.absorb(pop, p.r_eps, fitness.signal_key)
        for gen in range(cfg.generations):
            pop, _ = evolve_generation(pop, profile, variants, kb, cfg, rng, pools, fitness, hof, p.r_eps)
            if stats is not None:
                fits = [ind.fitness for ind in pop]
                stats.append(
                    GenerationStats(
                        sig_text,
                        "/".join(map(str, profile)),
                        gen + 1,
                        max(fits),
                        sum(fits) / len(fits),
                        sum(f >= p.r_eps for f in fits),
                        len(hof),
                        len(kb),
                    )
                )
    return hof


def write_stats(stats: list[GenerationStats], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(GenerationStats.__dataclass_fields__))
        w.writeheader()
        for s in stats:
            row = asdict(s)
            row["best_fitness"] = f"{s.best_fitness:.10g}"
            row["mean_fitness"] = f"{s.mean_fitness:.10g}"
            w.writerow(row)
