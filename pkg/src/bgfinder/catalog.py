"""Particle table, decay-channel database and the GA knowledge base."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

ROLES = ("neutrino", "detectable", "intermediate", "mother")
KB_VERSION = "bgfinder-kb/1"


class CatalogError(ValueError):
    """Raised when a DB file is malformed or violates a catalog invariant."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ChargeViolation(CatalogError):
    pass


class UnknownParticle(CatalogError):
    pass


class KnowledgeBaseError(ValueError):
    pass


@dataclass(frozen=True)
class Particle:
    id: int
    name: str
    charge: int
    role: str
    cp_partner: int

    @property
    def is_final(self) -> bool:
        return self.role in ("detectable", "neutrino")


@dataclass(frozen=True)
class Channel:
    mother: int
    products: tuple[int, ...]  # sorted by particle id
    br: float

    @property
    def key(self) -> tuple[int, tuple[int, ...]]:
        return self.mother, self.products


@dataclass
class Catalog:
    particles: list[Particle]
    channels: dict[int, list[Channel]]
    version: str = "toy-1"
    _by_name: dict[str, Particle] = field(init=False, repr=False)
    _index: dict[tuple[int, tuple[int, ...]], Channel] = field(init=False, repr=False)

    def __post_init__(self):
        self._by_name = {p.name: p for p in self.particles}
        self._index = {}
        for chs in self.channels.values():
            for ch in chs:
                self._index[ch.key] = ch

    def __getitem__(self, name: str) -> Particle:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownParticle(f"unknown particle {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def particle(self, pid: int) -> Particle:
        return self.particles[pid]

    def name(self, pid: int) -> str:
        return self.particles[pid].name

    def by_role(self, role: str) -> list[Particle]:
        return [p for p in self.particles if p.role == role]

    def with_charge(self, charge: int, roles: Iterable[str]) -> list[Particle]:
        roles = set(roles)
        return [p for p in self.particles if p.charge == charge and p.role in roles]

    def conjugate(self, p: Particle | int) -> Particle:
        pid = p if isinstance(p, int) else p.id
        return self.particles[self.particles[pid].cp_partner]

    def iter_channels(self) -> Iterable[Channel]:
        for mother in sorted(self.channels):
            yield from self.channels[mother]

    def channel(self, mother: int, products: Iterable[int]) -> Channel | None:
        return self._index.get((mother, tuple(sorted(products))))

    def branching_ratio(self, mother: Particle | int, products: Iterable[Particle | int]) -> float | None:
        """BR of the channel with this product multiset, or None if the DB has no such channel."""
        mid = mother if isinstance(mother, int) else mother.id
        pids = [p if isinstance(p, int) else p.id for p in products]
        ch = self.channel(mid, pids)
        return None if ch is None else ch.br

    def format_channel(self, ch: Channel) -> str:
        return f"{self.name(ch.mother)} -> " + " ".join(self.name(p) for p in ch.products)

    def with_brs(self, overrides: dict[tuple[int, tuple[int, ...]], float]) -> "Catalog":
        """Copy of the catalog with some channel BRs replaced (keys as Channel.key)."""
        channels = {
            m: [Channel(c.mother, c.products, overrides.get(c.key, c.br)) for c in chs]
            for m, chs in self.channels.items()
        }
        return Catalog(list(self.particles), channels, self.version + "+mod")


def _parse_channel(rest: str, names: dict[str, int], lineno: int) -> tuple[int, tuple[int, ...], float]:
    if "@" not in rest or "->" not in rest:
        raise CatalogError("channel line must read 'C <mother> -> <products> @ <br>'", lineno)
    lhs, br_text = rest.rsplit("@", 1)
    mother_text, products_text = lhs.split("->", 1)
    try:
        br = float(br_text)
    except ValueError:
        raise CatalogError(f"bad branching ratio {br_text.strip()!r}", lineno) from None
    if not 0.0 < br <= 1.0:
        raise CatalogError(f"branching ratio {br} outside (0, 1]", lineno)
    tokens = [mother_text.strip(), *products_text.split()]
    ids = []
    for tok in tokens:
        if tok not in names:
            raise UnknownParticle(f"unknown particle {tok!r}", lineno)
        ids.append(names[tok])
    return ids[0], tuple(sorted(ids[1:])), br


def parse_catalog(text: str, version: str = "toy-1") -> Catalog:
    particle_rows: list[tuple[str, int, str, str, int]] = []
    channel_rows: list[tuple[str, int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, _, rest = line.partition(" ")
        if kind == "P":
            parts = rest.split()
            if len(parts) != 4:
                raise CatalogError("particle line must read 'P <name> <charge> <role> <cp_partner>'", lineno)
            name, charge, role, partner = parts
            try:
                q = int(charge)
            except ValueError:
                raise CatalogError(f"bad charge {charge!r}", lineno) from None
            if q not in (-1, 0, 1):
                raise CatalogError(f"charge {q} not in {{-1, 0, 1}}", lineno)
            if role not in ROLES:
                raise CatalogError(f"unknown role {role!r}", lineno)
            if any(r[0] == name for r in particle_rows):
                raise CatalogError(f"duplicate particle {name!r}", lineno)
            particle_rows.append((name, q, role, partner, lineno))
        elif kind == "C":
            channel_rows.append((rest, lineno))
        else:
            raise CatalogError(f"unknown record type {kind!r}", lineno)

    names = {row[0]: i for i, row in enumerate(particle_rows)}
    particles = []
    for i, (name, q, role, partner, lineno) in enumerate(particle_rows):
        if partner not in names:
            raise UnknownParticle(f"unknown CP partner {partner!r}", lineno)
        particles.append(Particle(i, name, q, role, names[partner]))
    for p in particles:
        partner = particles[p.cp_partner]
        if partner.cp_partner != p.id:
            raise CatalogError(f"CP partner of {p.name} is not an involution")
        if partner.charge != -p.charge or partner.role != p.role:
            raise CatalogError(f"CP partner of {p.name} has mismatched charge or role")

    channels: dict[int, list[Channel]] = {}
    seen = set()
    for rest, lineno in channel_rows:
        mother, products, br = _parse_channel(rest, names, lineno)
        label = rest.split("@")[0].strip()
        if particles[mother].role not in ("mother", "intermediate"):
            raise CatalogError(f"{particles[mother].name} cannot decay (role {particles[mother].role})", lineno)
        if len(products) < 2:
            raise CatalogError(f"channel {label!r} needs at least two products", lineno)
        for pid in products:
            if particles[pid].role == "mother":
                raise CatalogError(f"mother particle {particles[pid].name} cannot be a product", lineno)
        if sum(particles[pid].charge for pid in products) != particles[mother].charge:
            raise ChargeViolation(f"charge not conserved in {label!r}", lineno)
        if (mother, products) in seen:
            raise CatalogError(f"duplicate channel {label!r}", lineno)
        seen.add((mother, products))
        channels.setdefault(mother, []).append(Channel(mother, products, br))
    return Catalog(particles, channels, version)


def load_catalog(path: str | Path | None = None) -> Catalog:
    """Load a DB file; with no path, load the shipped toy DB."""
    if path is None:
        text = resources.files("bgfinder.data").joinpath("toy.db").read_text(encoding="utf-8")
        return parse_catalog(text)
    return parse_catalog(Path(path).read_text(encoding="utf-8"))


def conjugate(c: Catalog, p: Particle | int) -> Particle:
    return c.conjugate(p)


def branching_ratio(c: Catalog, mother, products) -> float | None:
    return c.branching_ratio(mother, products)


def cp_closure_problems(c: Catalog) -> list[str]:
    """Channels whose CP image is missing or carries a different BR."""
    problems = []
    for ch in c.iter_channels():
        image = c.channel(c.conjugate(ch.mother).id, [c.conjugate(p).id for p in ch.products])
        if image is None:
            problems.append(f"missing CP image of {c.format_channel(ch)}")
        elif image.br != ch.br:
            problems.append(f"BR mismatch for CP image of {c.format_channel(ch)}")
    return problems


class KnowledgeBase:
    """Decay channels the GA currently knows, with where each came from."""

    def __init__(self, catalog: Catalog):
        self.catalog = catalog
        self.entries: dict[int, dict[tuple[int, ...], str]] = {}

    @classmethod
    def seeded(cls, catalog: Catalog, fraction: float = 1.0, rng=None) -> "KnowledgeBase":
        kb = cls(catalog)
        for ch in catalog.iter_channels():
            if fraction >= 1.0 or (rng is not None and rng.random() < fraction):
                kb.entries.setdefault(ch.mother, {})[ch.products] = "seeded"
        return kb

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def __contains__(self, ch: Channel) -> bool:
        return ch.products in self.entries.get(ch.mother, {})

    def __eq__(self, other) -> bool:
        return isinstance(other, KnowledgeBase) and self.entries == other.entries

    def provenance(self, ch: Channel) -> str | None:
        return self.entries.get(ch.mother, {}).get(ch.products)

    def learn(self, ch: Channel) -> bool:
        """Insert a catalog channel; returns True if it was new."""
        if self.catalog.channel(ch.mother, ch.products) is None:
            raise KnowledgeBaseError(f"channel {self.catalog.format_channel(ch)} is not in the catalog")
        known = self.entries.setdefault(ch.mother, {})
        if ch.products in known:
            return False
        known[ch.products] = "learned"
        return True

    def channels_with_products(self, products: Iterable[int]) -> list[Channel]:
        """Known channels (any mother) whose product multiset equals ``products``."""
        key = tuple(sorted(products))
        out = []
        for mother in sorted(self.entries):
            if key in self.entries[mother]:
                out.append(self.catalog.channel(mother, key))
        return out

    def snapshot(self) -> "KnowledgeBase":
        kb = KnowledgeBase(self.catalog)
        kb.entries = {m: dict(v) for m, v in self.entries.items()}
        return kb

    def to_json(self) -> dict:
        c = self.catalog
        entries = {}
        for mother in sorted(self.entries):
            rows = [
                {"products": [c.name(p) for p in prods], "provenance": prov}
                for prods, prov in sorted(self.entries[mother].items())
            ]
            entries[c.name(mother)] = rows
        return {"version": KB_VERSION, "catalog": c.version, "entries": entries}

    @classmethod
    def from_json(cls, data: dict, catalog: Catalog) -> "KnowledgeBase":
        if data.get("version") != KB_VERSION:
            raise KnowledgeBaseError(f"unsupported knowledge-base version {data.get('version')!r}")
        kb = cls(catalog)
        for mother_name, rows in data["entries"].items():
            mother = catalog[mother_name].id
            for row in rows:
                prods = tuple(sorted(catalog[n].id for n in row["products"]))
                if catalog.channel(mother, prods) is None:
                    raise KnowledgeBaseError(f"channel {mother_name} -> {row['products']} is not in the catalog")
                if row["provenance"] not in ("seeded", "learned"):
                    raise KnowledgeBaseError(f"bad provenance {row['provenance']!r}")
                kb.entries.setdefault(mother, {})[prods] = row["provenance"]
        return kb


def kb_learn(kb: KnowledgeBase, ch: Channel) -> KnowledgeBase:
    kb.learn(ch)
    return kb


def kb_save(kb: KnowledgeBase, path: str | Path) -> None:
    Path(path).write_text(json.dumps(kb.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def kb_load(path: str | Path, catalog: Catalog) -> KnowledgeBase:
    return KnowledgeBase.from_json(json.loads(Path(path).read_text(encoding="utf-8")), catalog)
