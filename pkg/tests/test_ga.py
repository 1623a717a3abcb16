import random
from collections import Counter

import pytest

from bgfinder.catalog import KnowledgeBase
from bgfinder.decays import MAX_RESONANCES, Leaf, background_key, charge_signature, signal_variants
from bgfinder.ga import (
    Fitness,
    GAConfig,
    Individual,
    InfeasibleProfile,
    Pools,
    construct_resonance,
    crossover,
    evolution_profiles,
    inherit_from_signal,
    mutate,
    random_individual,
    run_evolutions,
    signal_profile,
    tournament,
)
from bgfinder.oracle import enumerate_backgrounds
from bgfinder.rewards import RewardParams


def leaf_profile(ind, c):
    qs = Counter(c.particles[l.pid].charge for l in ind.tree.leaves())
    return qs[1], qs[-1], qs[0]


@pytest.fixture(scope="module")
def pools(cat):
    return Pools(cat)


def test_config_validation():
    with pytest.raises(ValueError):
        GAConfig(p_mutation=1.5)
    with pytest.raises(ValueError):
        GAConfig(tournament_size=1)


def test_profiles(cat, signals):
    for sig in signals["train"]:
        profs = evolution_profiles(sig, cat)
        assert profs[0] == signal_profile(sig, cat)
        assert 3 <= len(profs) <= 4


def test_random_individual_matches_profile(cat, pools):
    rng = random.Random(0)
    for prof in [(2, 1, 1), (1, 1, 2), (3, 2, 0)]:
        ind = random_individual(prof, pools, rng)
        assert leaf_profile(ind, cat) == prof
    with pytest.raises(InfeasibleProfile):
        random_individual((3, 0, 0), pools, rng)


def test_operators_preserve_profile(cat, pools, signals):
    rng = random.Random(1)
    cfg = GAConfig(p_mutation=0.5)
    kb = KnowledgeBase.seeded(cat, 1.0)
    sig = signals["train"][0]
    prof = signal_profile(sig, cat)
    variants = signal_variants(sig, cat)
    pop = [random_individual(prof, pools, rng) for _ in range(60)]
    for _ in range(5):
        nxt = []
        for a, b in zip(pop[::2], pop[1::2]):
            nxt.extend(crossover(a, b, rng, pools))
        pop = [construct_resonance(mutate(inherit_from_signal(i, variants, cfg, rng, pools), cfg, rng, pools), kb, cfg, rng, pools) for i in nxt]
        for ind in pop:
            assert leaf_profile(ind, cat) == prof
            assert ind.tree.n_resonances <= MAX_RESONANCES


def test_crossover_swaps_equal_signatures(cat, pools):
    rng = random.Random(2)
    a = random_individual((2, 1, 1), pools, rng)
    b = random_individual((2, 1, 1), pools, rng)
    x, y = crossover(a, b, rng, pools, p_gene=1.0)
    sig = lambda ind: sorted(charge_signature(g, cat) for g in ind.tree.children)
    assert sig(x) == sig(a) and sig(y) == sig(b)


def test_mutation_keeps_charge(cat, pools):
    rng = random.Random(3)
    ind = random_individual((2, 1, 1), pools, rng)
    m = mutate(ind, GAConfig(p_mutation=1.0), rng, pools)
    for g0, g1 in zip(ind.tree.children, m.tree.children):
        assert isinstance(g1, Leaf)
        assert cat.particles[g0.pid].charge == cat.particles[g1.pid].charge
        assert g0.pid != g1.pid


def test_tournament_picks_best_of_draws():
    pop = [Individual(None, fitness=f) for f in (0.1, 0.2, 0.9)]
    rng = random.Random(0)
    assert max(tournament(pop, 50, rng).fitness for _ in range(3)) == 0.9


def test_signal_has_zero_fitness(cat, signals):
    sig = signals["train"][0]
    f = Fitness(sig, cat, RewardParams())
    assert f.score(sig)[0] == 0.0


def test_small_run_is_sound_and_deterministic(cat, signals, trees):
    sig = signals["train"][2]
    cfg = GAConfig(population_size=150, generations=3, seed=4)
    h1 = run_evolutions(sig, cat, cfg)
    h2 = run_evolutions(sig, cat, cfg)
    assert list(h1.entries) == list(h2.entries)
    gt = enumerate_backgrounds(sig, cat, trees=trees)
    assert set(h1.entries) <= gt.keys()
    assert background_key(sig) not in h1.entries
