import pytest

from bgfinder.catalog import (
    CatalogError,
    ChargeViolation,
    KnowledgeBase,
    KnowledgeBaseError,
    UnknownParticle,
    cp_closure_problems,
    kb_load,
    kb_save,
    parse_catalog,
)

MINI = """
P pi+ +1 detectable pi-
P pi- -1 detectable pi+
P pi0 0 detectable pi0
P X0 0 intermediate X0
P B+ +1 mother B-
P B- -1 mother B+
C B+ -> pi+ X0 @ 0.5
C B- -> pi- X0 @ 0.5
C X0 -> pi+ pi- @ 0.9
"""


def test_shipped_catalog_shape(cat):
    assert len(cat.particles) == 40
    assert sum(1 for _ in cat.iter_channels()) == 166
    assert {r: len(cat.by_role(r)) for r in ("mother", "intermediate", "detectable", "neutrino")} == {
        "mother": 4, "intermediate": 18, "detectable": 12, "neutrino": 6}
    assert cp_closure_problems(cat) == []


def test_lepton_universality(cat):
    e = cat.branching_ratio(cat["B0"], [cat["e+"], cat["nu_e"], cat["D-"]])
    mu = cat.branching_ratio(cat["B0"], [cat["mu+"], cat["nu_mu"], cat["D-"]])
    assert e is not None and e == mu


def test_lookup_is_order_free(cat):
    a = cat.branching_ratio(cat["B+"], [cat["pi+"], cat["D0bar"]])
    b = cat.branching_ratio(cat["B+"], [cat["D0bar"], cat["pi+"]])
    assert a == b == 0.007236
    assert cat.branching_ratio(cat["B+"], [cat["pi+"], cat["pi0"]]) is None


def test_cp_partner_is_involution(cat):
    for p in cat.particles:
        assert cat.conjugate(cat.conjugate(p)).id == p.id
        assert cat.conjugate(p).charge == -p.charge


@pytest.mark.parametrize(
    "line, exc",
    [
        ("C B+ -> pi+ pi+ @ 0.1", ChargeViolation),
        ("C B+ -> pi+ Y0 @ 0.1", UnknownParticle),
        ("C pi+ -> pi+ pi0 @ 0.1", CatalogError),
        ("C B+ -> pi+ X0 @ 0.2", CatalogError),  # duplicate
        ("Q nonsense", CatalogError),
    ],
)
def test_malformed_lines(line, exc):
    with pytest.raises(exc) as info:
        parse_catalog(MINI + line + "\n")
    assert "line" in str(info.value)


def test_mini_catalog_parses():
    c = parse_catalog(MINI)
    assert len(c.particles) == 6
    assert cp_closure_problems(c) == []


def test_kb_seed_learn_roundtrip(cat, tmp_path):
    kb = KnowledgeBase.seeded(cat)
    assert len(kb) == 166
    ch = next(iter(cat.iter_channels()))
    assert kb.learn(ch) is False
    empty = KnowledgeBase(cat)
    assert empty.learn(ch) is True and empty.provenance(ch) == "learned"
    path = tmp_path / "kb.json"
    kb_save(kb, path)
    assert kb_load(path, cat) == kb


def test_kb_rejects_unknown_channel(cat):
    from bgfinder.catalog import Channel

    kb = KnowledgeBase(cat)
    with pytest.raises(KnowledgeBaseError):
        kb.learn(Channel(cat["B+"].id, (cat["pi+"].id, cat["pi0"].id), 0.1))


def test_channels_with_products(cat):
    kb = KnowledgeBase.seeded(cat)
    mothers = {cat.name(ch.mother) for ch in kb.channels_with_products([cat["K+"].id, cat["pi-"].id])}
    assert {"K*0", "D0bar"} <= mothers
