import itertools

import pytest
from hypothesis import given, settings, strategies as st

from bgfinder.decays import (
    DecayParseError,
    DecayTree,
    Leaf,
    Resonance,
    background_key,
    best_alignment,
    canonical_form,
    chain_br,
    cp_conjugate,
    flatten,
    format_decay,
    misid_lower_bound,
    parse_decay,
    parse_signals,
    signal_variants,
    validate,
)


def test_parse_format_roundtrip(cat, all_signals):
    for sig in all_signals:
        text = format_decay(sig, cat)
        assert parse_decay(text, cat) == sig


def test_neutrinos_are_lost(dec):
    t = dec("B+ -> mu+ nu_mu D0bar( K+ pi- )")
    nu = [leaf for leaf in t.leaves() if leaf.lost]
    assert len(nu) == 1


def test_lost_prefix(cat, dec):
    t = dec("B0 -> pi+ pi- D0bar( K+ pi- LOST:pi0 )")
    assert sum(leaf.lost for leaf in t.leaves()) == 1
    assert "LOST:pi0" in format_decay(t, cat)


@pytest.mark.parametrize("bad", ["B0 ->", "B0 -> pi+ Q+", "B0 -> pi+ D0bar( K+ pi-", "B0 pi+ pi-", "B0 -> pi+ ) pi-"])
def test_parse_errors(cat, bad):
    with pytest.raises(DecayParseError):
        parse_decay(bad, cat)


def test_chain_br_product(cat, dec):
    t = dec("B0 -> pi+ D*-( pi- D0bar( K+ pi- pi0 ) )")
    expect = (
        cat.branching_ratio(cat["B0"], [cat["pi+"], cat["D*-"]])
        * cat.branching_ratio(cat["D*-"], [cat["pi-"], cat["D0bar"]])
        * cat.branching_ratio(cat["D0bar"], [cat["K+"], cat["pi-"], cat["pi0"]])
    )
    assert chain_br(t, cat) == pytest.approx(expect, rel=1e-15)
    assert chain_br(dec("B0 -> pi+ pi- pi0 pi0"), cat) == 0.0


def test_validate_reports(cat, dec):
    assert validate(dec("B0 -> pi+ D*-( pi- D0bar( K+ pi- pi0 ) )"), cat).ok
    rep = validate(dec("B0 -> pi+ pi+ pi-"), cat)
    assert not rep.ok and not all(rep.charge_ok)
    one_child = DecayTree(cat["B0"].id, (Resonance(cat["D0"].id, (Leaf(cat["K-"].id), Leaf(cat["pi+"].id))),))
    assert not validate(one_child, cat).structural_ok


def test_canonical_ignores_order(dec):
    a = dec("B0 -> pi+ pi- D0bar( K+ pi- pi0 )")
    b = dec("B0 -> D0bar( pi0 pi- K+ ) pi- pi+")
    assert canonical_form(a) == canonical_form(b)


def test_background_key_ignores_lost(dec):
    a = dec("B0 -> pi+ pi- D0bar( K+ pi- LOST:pi0 )")
    b = dec("B0 -> pi+ pi- D0bar( K+ pi- pi0 )")
    assert canonical_form(a) != canonical_form(b)
    assert background_key(a) == background_key(b)


def test_cp_involution_and_br(cat, all_signals):
    for sig in all_signals:
        cp = cp_conjugate(sig, cat)
        assert cp_conjugate(cp, cat) == sig
        assert chain_br(cp, cat) == chain_br(sig, cat)


def test_signal_variants(cat, dec):
    sig = dec("B0 -> e+ pi- nu_e D0bar( K+ pi- )")
    names = [format_decay(v, cat) for v in signal_variants(sig, cat)]
    assert names[0] == format_decay(sig, cat)
    assert any("mu+" in n for n in names)
    assert format_decay(flatten(sig), cat) in names


def _brute_misid(tree, signal, c):
    from bgfinder.decays import signal_detectables

    sig = signal_detectables(signal, c)
    reco = [leaf.pid for leaf in tree.leaves() if not leaf.lost]
    best = None
    for perm in itertools.permutations(reco):
        if all(c.particles[a].charge == c.particles[b].charge for a, b in zip(sig, perm)):
            n = sum(a != b for a, b in zip(sig, perm))
            best = n if best is None else min(best, n)
    return best


def test_alignment_matches_bruteforce_small(cat, dec):
    sig = dec("B0 -> pi+ D*-( pi- D0bar( K+ pi- pi0 ) )")
    for text in ["B0 -> pi+ D-( K+ pi- pi- pi0 )", "B0 -> K+ pi- pi0 D-( pi+ pi- )", "B0 -> K+ K- pi+ pi- pi0"]:
        t = dec(text)
        al = best_alignment(t, sig, cat)
        assert al.valid and al.n_misid == _brute_misid(t, sig, cat) == misid_lower_bound(t, sig, cat)


def test_alignment_invalid_when_classes_differ(cat, dec):
    sig = dec("B0 -> pi+ pi- pi0 pi0")
    assert not best_alignment(dec("B0 -> pi+ pi-"), sig, cat).valid


def test_signals_file_errors(cat):
    with pytest.raises(DecayParseError):
        parse_signals("test: B0 -> pi+ pi-\n", cat)
    assert len(parse_signals("# c\n\ngen: B0 -> pi+ pi-\n", cat)["gen"]) == 1


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_property_permutation_and_cp(cat, trees, data):
    t = data.draw(st.sampled_from(trees))
    kids = list(t.children)
    perm = data.draw(st.permutations(kids))
    shuffled = DecayTree(t.mother, tuple(perm))
    assert canonical_form(shuffled) == canonical_form(t)
    assert chain_br(shuffled, cat) == chain_br(t, cat)
    cp = cp_conjugate(t, cat)
    assert chain_br(cp, cat) == chain_br(t, cat)
    assert parse_decay(format_decay(t, cat), cat) == t
