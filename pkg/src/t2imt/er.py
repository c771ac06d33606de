"""Entity/relation triples, class canonicalization and ER pools.

A caption is reduced to a set of (subject, predicate, object) triples whose
elements are canonical classes from a fixed registry. Surface forms such as
"man" or "sleep on" are folded onto registered classes through an alias
table before anything downstream sees them.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Literal, Sequence

from .errors import InvalidInput, PoolBuildError, RegistryError, UnknownSurfaceForm

logger = logging.getLogger(__name__)

Kind = Literal["entity", "relation"]
SurfaceTriple = tuple[str, str, str]

DEFAULT_MAX_ENTITIES = 150
DEFAULT_MAX_RELATIONS = 50


@dataclass(frozen=True, order=True)
class EntityClass:
    id: int
    label: str

    def __str__(self) -> str:
        return self.label


@dataclass(frozen=True, order=True)
class RelationClass:
    id: int
    label: str

    def __str__(self) -> str:
        return self.label


@dataclass(frozen=True)
class ERTriple:
    subject: EntityClass
    predicate: RelationClass
    object: EntityClass

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.subject.id, self.predicate.id, self.object.id)

    def labels(self) -> SurfaceTriple:
        return (self.subject.label, self.predicate.label, self.object.label)

    def __str__(self) -> str:
        return "({}, {}, {})".format(*self.labels())


@dataclass(frozen=True)
class ERPool:
    """Canonical set of triples for one caption.

    Triples are deduplicated and stored sorted by class ids, so two pools
    built from the same triples in any order compare (and iterate) equal.
    The source caption is carried along but ignored by equality.
    """

    triples: tuple[ERTriple, ...] = ()
    source_caption: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        canonical = tuple(sorted(set(self.triples), key=lambda t: t.key))
        object.__setattr__(self, "triples", canonical)

    @property
    def entity_set(self) -> frozenset[EntityClass]:
        return pool_entity_set(self)

    @property
    def relation_set(self) -> frozenset[RelationClass]:
        return pool_relation_set(self)

    @property
    def density(self) -> int:
        return len(self.triples)

    def __iter__(self) -> Iterator[ERTriple]:
        return iter(self.triples)

    def __len__(self) -> int:
        return len(self.triples)

    def __contains__(self, triple: object) -> bool:
        return triple in self.triples

    def labels(self) -> list[SurfaceTriple]:
        return [t.labels() for t in self.triples]


def pool_entity_set(pool: ERPool) -> frozenset[EntityClass]:
    return frozenset(e for t in pool.triples for e in (t.subject, t.object))


def pool_relation_set(pool: ERPool) -> frozenset[RelationClass]:
    return frozenset(t.predicate for t in pool.triples)


_LABEL_RE = re.compile(r"^\S(.*\S)?$")


def _check_label(label: str) -> str:
    if not isinstance(label, str) or not label or label != label.lower() or not _LABEL_RE.match(label):
        raise RegistryError(f"invalid class label {label!r}: must be non-empty, lowercase, trimmed")
    return label


@dataclass(frozen=True)
class Registry:
    entities: tuple[EntityClass, ...]
    relations: tuple[RelationClass, ...]
    _entity_index: dict[str, EntityClass] = field(init=False, repr=False, compare=False)
    _relation_index: dict[str, RelationClass] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_entity_index", {e.label: e for e in self.entities})
        object.__setattr__(self, "_relation_index", {r.label: r for r in self.relations})

    @classmethod
    def from_labels(
        cls,
        entities: Sequence[str],
        relations: Sequence[str],
        *,
        max_entities: int = DEFAULT_MAX_ENTITIES,
        max_relations: int = DEFAULT_MAX_RELATIONS,
    ) -> "Registry":
        for labels, limit, what in ((entities, max_entities, "entity"), (relations, max_relations, "relation")):
            if len(labels) > limit:
                raise RegistryError(f"{len(labels)} {what} classes exceed the configured limit of {limit}")
            if len(set(labels)) != len(labels):
                raise RegistryError(f"duplicate {what} labels in registry")
            for label in labels:
                _check_label(label)
        return cls(
            tuple(EntityClass(i, lab) for i, lab in enumerate(entities)),
            tuple(RelationClass(i, lab) for i, lab in enumerate(relations)),
        )

    def entity(self, label: str) -> EntityClass:
        return self._entity_index[label]

    def relation(self, label: str) -> RelationClass:
        return self._relation_index[label]

    def has_entity(self, label: str) -> bool:
        return label in self._entity_index

    def has_relation(self, label: str) -> bool:
        return label in self._relation_index


def _norm(surface: str) -> str:
    return " ".join(surface.lower().split())


@dataclass(frozen=True, eq=False)
class CanonMap:
    """Registry plus case-insensitive alias tables for both class kinds."""

    registry: Registry
    entity_aliases: dict[str, EntityClass] = field(default_factory=dict)
    relation_aliases: dict[str, RelationClass] = field(default_factory=dict)

    @classmethod
    def build(
        cls,
        registry: Registry,
        entity_aliases: dict[str, str] | None = None,
        relation_aliases: dict[str, str] | None = None,
    ) -> "CanonMap":
        ent: dict[str, EntityClass] = {}
        rel: dict[str, RelationClass] = {}
        for alias, label in (entity_aliases or {}).items():
            if not registry.has_entity(label):
                raise RegistryError(f"entity alias {alias!r} points at unregistered class {label!r}")
            ent[_norm(alias)] = registry.entity(label)
        for alias, label in (relation_aliases or {}).items():
            if not registry.has_relation(label):
                raise RegistryError(f"relation alias {alias!r} points at unregistered class {label!r}")
            rel[_norm(alias)] = registry.relation(label)
        return cls(registry, ent, rel)

    @classmethod
    def from_dict(cls, data: dict, **limits: int) -> "CanonMap":
        try:
            registry = Registry.from_labels(data["entities"], data["relations"], **limits)
        except KeyError as exc:
            raise RegistryError(f"registry file lacks field {exc}") from None
        return cls.build(registry, data.get("entity_aliases"), data.get("relation_aliases"))

    def surface_forms(self, kind: Kind) -> dict[str, EntityClass | RelationClass]:
        """Every recognized surface form of ``kind`` (aliases plus bare labels)."""
        if kind == "entity":
            forms: dict = {e.label: e for e in self.registry.entities}
            forms.update(self.entity_aliases)
        else:
            forms = {r.label: r for r in self.registry.relations}
            forms.update(self.relation_aliases)
        return forms

    def to_dict(self) -> dict:
        return {
            "entities": [e.label for e in self.registry.entities],
            "relations": [r.label for r in self.registry.relations],
            "entity_aliases": {k: v.label for k, v in sorted(self.entity_aliases.items())},
            "relation_aliases": {k: v.label for k, v in sorted(self.relation_aliases.items())},
        }


def load_canon_map(path: str | Path | None = None, **limits: int) -> CanonMap:
    """Load a registry/alias file; ``None`` selects the packaged default."""
    if path is None:
        text = resources.files("t2imt.data").joinpath("registry_v1.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return CanonMap.from_dict(json.loads(text), **limits)


def canonicalize(surface: str, kind: Kind, canon: CanonMap, strict: bool = False):
    """Map a surface form onto its registered class.

    Aliases win over bare labels. In non-strict mode an unknown surface
    yields ``None``; strict mode raises :class:`UnknownSurfaceForm`.
    """
    if not isinstance(surface, str) or not surface.strip():
        raise InvalidInput(f"empty {kind} surface form")
    key = _norm(surface)
    if kind == "entity":
        hit = canon.entity_aliases.get(key)
        if hit is None and canon.registry.has_entity(key):
            hit = canon.registry.entity(key)
    elif kind == "relation":
        hit = canon.relation_aliases.get(key)
        if hit is None and canon.registry.has_relation(key):
            hit = canon.registry.relation(key)
    else:
        raise InvalidInput(f"unknown kind {kind!r}")
    if hit is None and strict:
        raise UnknownSurfaceForm(surface, kind)
    return hit


def build_pool(
    caption: str,
    triples: Iterable[Sequence[str]],
    canon: CanonMap,
    strict: bool = True,
) -> ERPool:
    """Canonicalize surface triples into an :class:`ERPool`.

    Strict mode collects every failing triple and raises one
    :class:`PoolBuildError`; non-strict mode drops them with a warning.
    """
    out: list[ERTriple] = []
    errors: list[tuple[int, tuple[str, str, str], str]] = []
    for i, raw in enumerate(triples):
        raw = tuple(raw)
        if len(raw) != 3:
            errors.append((i, raw, "expected (subject, predicate, object)"))
            continue
        subj, pred, obj = raw
        try:
            parts = (
                canonicalize(subj, "entity", canon, strict=True),
                canonicalize(pred, "relation", canon, strict=True),
                canonicalize(obj, "entity", canon, strict=True),
            )
        except (UnknownSurfaceForm, InvalidInput) as exc:
            errors.append((i, raw, str(exc)))
            continue
        out.append(ERTriple(*parts))
    if errors:
        if strict:
            raise PoolBuildError(caption, errors)
        for i, raw, msg in errors:
            logger.warning("dropping triple #%d %s of %r: %s", i, raw, caption, msg)
    return ERPool(tuple(out), caption)


# --- naive extraction ----------------------------------------------------

_TOKEN_RE = re.compile(r"[a-z0-9']+|[,.;:!?]")
_ARTICLES = frozenset({"a", "an", "the", "some"})
_BREAKS = frozenset({",", ".", ";", ":", "!", "?"})
_CONJUNCTIONS = frozenset({"and"})


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _alias_table(forms: Iterable[str]) -> dict[tuple[str, ...], str]:
    return {tuple(f.split()): f for f in forms}


def _longest_at(tokens: Sequence[str], i: int, table: dict[tuple[str, ...], str], max_len: int) -> int:
    for n in range(min(max_len, len(tokens) - i), 0, -1):
        if tuple(tokens[i:i + n]) in table:
            return n
    return 0


def naive_extract(caption: str, canon: CanonMap) -> list[SurfaceTriple]:
    """Greedy pattern extractor: ``entity relation entity`` chains.

    Entity mentions are found left to right by longest alias match. Each
    pair of adjacent mentions becomes a triple when the words between them
    contain a relation alias (longest, then leftmost, wins). Punctuation in
    the gap separates clauses; so does a bare "and" right after a completed
    triple, which lets "a dog on a bed and a cat on a bed" read as two
    clauses while "a dog and a cat" still yields (dog, and, cat).
    """
    tokens = tokenize(caption)
    if not tokens:
        return []
    ent_table = _alias_table(canon.surface_forms("entity"))
    rel_table = _alias_table(canon.surface_forms("relation"))
    ent_max = max((len(k) for k in ent_table), default=0)
    rel_max = max((len(k) for k in rel_table), default=0)

    mentions: list[tuple[int, int, str]] = []
    i = 0
    while i < len(tokens):
        n = _longest_at(tokens, i, ent_table, ent_max)
        if n:
            mentions.append((i, i + n, ent_table[tuple(tokens[i:i + n])]))
            i += n
        else:
            i += 1

    triples: list[SurfaceTriple] = []
    prev_object_at = -1
    for k in range(len(mentions) - 1):
        _, left_end, left = mentions[k]
        right_start, _, right = mentions[k + 1]
        gap = tokens[left_end:right_start]
        if any(t in _BREAKS for t in gap):
            continue
        content = [t for t in gap if t not in _ARTICLES]
        if prev_object_at == k and len(content) == 1 and content[0] in _CONJUNCTIONS:
            continue
        best: tuple[int, int] | None = None
        for j in range(len(gap)):
            n = _longest_at(gap, j, rel_table, rel_max)
            if n and (best is None or n > best[1]):
                best = (j, n)
        if best is None:
            continue
        j, n = best
        triples.append((left, rel_table[tuple(gap[j:j + n])], right))
        prev_object_at = k + 1
    return triples


# --- seed corpus ---------------------------------------------------------

@dataclass(frozen=True)
class Seed:
    id: str
    caption: str
    pool: ERPool


def load_seed_corpus(path: str | Path, canon: CanonMap, strict: bool = True) -> list[Seed]:
    """Read a line-delimited seed corpus ``{id, caption, triples}``.

    Records without a ``triples`` field fall back to :func:`naive_extract`.
    """
    seeds: list[Seed] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                sid = str(rec["id"])
                caption = rec["caption"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise InvalidInput(f"{path}:{lineno}: malformed seed record ({exc})") from None
            if sid in seen:
                raise InvalidInput(f"{path}:{lineno}: duplicate seed id {sid!r}")
            seen.add(sid)
            triples = rec.get("triples")
            if triples is None:
                triples = naive_extract(caption, canon)
            seeds.append(Seed(sid, caption, build_pool(caption, triples, canon, strict=strict)))
    return seeds
