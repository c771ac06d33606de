"""Mutation operators over ER pools and density bookkeeping.

Operators:

* ``EC``   - entity changing: one entity class is swapped for a candidate
  not yet present in the pool, everywhere it occurs.
* ``ER_R`` - removes one triple (needs density > 1).
* ``ER_A`` - attaches one (relation, entity) candidate to an existing entity.
* ``SS``   - baseline synonym substitution on the caption text; the pool is
  left untouched.

Every operator takes either an integer seed or a shared ``random.Random``
so that compound operators can run on one stream.
"""

from __future__ import annotations

import itertools
import json
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .er import CanonMap, EntityClass, ERPool, ERTriple, RelationClass, canonicalize
from .errors import (
    EmptyPool,
    InsufficientDensity,
    InvalidInput,
    NoEligibleAugmentation,
    NoEligibleReplacement,
    NoSubstitutableWord,
)

EC, ER_R, ER_A, SS = "EC", "ER_R", "ER_A", "SS"
EC_ER_R, EC_ER_A = "EC+ER_R", "EC+ER_A"
ORIG = "ORIG"

POOL_OPERATORS = (EC, ER_R, ER_A)
COMBINED_OPERATORS = (EC_ER_R, EC_ER_A)
ALL_OPERATORS = (SS, EC, ER_R, ER_A, EC_ER_R, EC_ER_A)

DEFAULT_AUGMENT_RETRIES = 32


def make_rng(rng: int | random.Random) -> random.Random:
    if isinstance(rng, random.Random):
        return rng
    return random.Random(int(rng))


@dataclass(frozen=True)
class CandidatePool:
    """Replacement entities (weighted) and (relation, entity) attachments."""

    entities: tuple[tuple[EntityClass, float], ...] = ()
    er_attachments: tuple[tuple[RelationClass, EntityClass], ...] = ()

    def __post_init__(self) -> None:
        for ent, weight in self.entities:
            if not weight > 0:
                raise InvalidInput(f"candidate weight for {ent.label!r} must be positive, got {weight}")

    def to_dict(self) -> dict:
        return {
            "entities": [{"label": e.label, "weight": w} for e, w in self.entities],
            "attachments": [[r.label, e.label] for r, e in self.er_attachments],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], canon: CanonMap) -> "CandidatePool":
        ents = []
        for item in data.get("entities", []):
            ent = canonicalize(item["label"], "entity", canon, strict=True)
            ents.append((ent, float(item.get("weight", 1.0))))
        atts = []
        for pred, obj in data.get("attachments", []):
            atts.append((
                canonicalize(pred, "relation", canon, strict=True),
                canonicalize(obj, "entity", canon, strict=True),
            ))
        return cls(tuple(ents), tuple(dict.fromkeys(atts)))


def load_candidate_pool(path: str | Path, canon: CanonMap) -> CandidatePool:
    return CandidatePool.from_dict(json.loads(Path(path).read_text(encoding="utf-8")), canon)


def registry_candidate_pool(canon: CanonMap) -> CandidatePool:
    """Uniform candidates: every registered entity, every (relation, entity) pair."""
    reg = canon.registry
    return CandidatePool(
        tuple((e, 1.0) for e in reg.entities),
        tuple((r, e) for r in reg.relations for e in reg.entities),
    )


def build_candidate_pool(pools: Iterable[ERPool]) -> CandidatePool:
    """Candidates from corpus co-occurrence.

    Entities are weighted by the number of pools mentioning them;
    attachments are every observed (predicate, object) pair.
    """
    freq: Counter[EntityClass] = Counter()
    atts: set[tuple[RelationClass, EntityClass]] = set()
    for pool in pools:
        freq.update(pool.entity_set)
        atts.update((t.predicate, t.object) for t in pool)
    ents = tuple((e, float(n)) for e, n in sorted(freq.items(), key=lambda kv: kv[0].id))
    return CandidatePool(ents, tuple(sorted(atts, key=lambda a: (a[0].id, a[1].id))))


@dataclass(frozen=True)
class MutationRecord:
    seed_pool: ERPool
    operator: str
    params: dict = field(compare=False)
    follow_pool: ERPool
    rng_seed: int | None = None

    @property
    def seed_density(self) -> int:
        return self.seed_pool.density

    @property
    def follow_density(self) -> int:
        return self.follow_pool.density

    def to_dict(self) -> dict:
        return {
            "operator": self.operator,
            "params": self.params,
            "rng_seed": self.rng_seed,
            "seed_pool": self.seed_pool.labels(),
            "follow_pool": self.follow_pool.labels(),
            "seed_density": self.seed_density,
            "follow_density": self.follow_density,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], canon: CanonMap) -> "MutationRecord":
        from .er import build_pool

        return cls(
            seed_pool=build_pool("", data["seed_pool"], canon),
            operator=data["operator"],
            params=dict(data.get("params", {})),
            follow_pool=build_pool("", data["follow_pool"], canon),
            rng_seed=data.get("rng_seed"),
        )


def record_violations(record: MutationRecord) -> list[str]:
    """Brute-force check of the per-operator record invariants; empty if sound."""
    seed, follow = record.seed_pool, record.follow_pool
    s_t, f_t = set(seed.triples), set(follow.triples)
    problems: list[str] = []
    if record.operator == EC:
        if follow.density != seed.density:
            problems.append("EC changed density")
        only_seed = seed.entity_set - follow.entity_set
        only_follow = follow.entity_set - seed.entity_set
        if len(only_seed) != 1 or len(only_follow) != 1:
            problems.append(f"EC entity difference is not one-for-one: {only_seed} / {only_follow}")
        if sorted(t.predicate.id for t in seed) != sorted(t.predicate.id for t in follow):
            problems.append("EC altered the relation multiset")
    elif record.operator == ER_R:
        if follow.density != seed.density - 1:
            problems.append("ER_R density did not drop by one")
        if not f_t < s_t:
            problems.append("ER_R follow triples are not a strict subset of the seed")
    elif record.operator == ER_A:
        if follow.density != seed.density + 1:
            problems.append("ER_A density did not grow by one")
        if not s_t < f_t:
            problems.append("ER_A seed triples are not a strict subset of the follow-up")
    elif record.operator == SS:
        if seed != follow:
            problems.append("SS modified the ER pool")
    else:
        problems.append(f"unknown operator {record.operator!r}")
    return problems


def _seed_value(rng: int | random.Random) -> int | None:
    return rng if isinstance(rng, int) else None


def mutate_ec(
    seed: ERPool,
    cands: CandidatePool,
    rng_seed: int | random.Random,
    *,
    weighted: bool = True,
) -> MutationRecord:
    if seed.density == 0:
        raise EmptyPool("EC needs at least one triple")
    present = seed.entity_set
    eligible = [(e, w) for e, w in cands.entities if e not in present]
    if not eligible:
        raise NoEligibleReplacement("every candidate entity already occurs in the pool")
    rng = make_rng(rng_seed)
    e1 = rng.choice(sorted(present))
    if weighted:
        e2 = rng.choices([e for e, _ in eligible], weights=[w for _, w in eligible], k=1)[0]
    else:
        e2 = rng.choice([e for e, _ in eligible])

    def swap(e: EntityClass) -> EntityClass:
        return e2 if e == e1 else e

    follow = ERPool(
        tuple(ERTriple(swap(t.subject), t.predicate, swap(t.object)) for t in seed),
        seed.source_caption,
    )
    return MutationRecord(seed, EC, {"e1": e1.label, "e2": e2.label}, follow, _seed_value(rng_seed))


def mutate_er_r(seed: ERPool, rng_seed: int | random.Random) -> MutationRecord:
    if seed.density <= 1:
        raise InsufficientDensity(f"ER_R needs density > 1, pool has {seed.density}")
    rng = make_rng(rng_seed)
    removed = rng.choice(seed.triples)
    follow = ERPool(tuple(t for t in seed if t != removed), seed.source_caption)
    return MutationRecord(seed, ER_R, {"removed": list(removed.labels())}, follow, _seed_value(rng_seed))


def mutate_er_a(
    seed: ERPool,
    cands: CandidatePool,
    rng_seed: int | random.Random,
    *,
    max_retries: int = DEFAULT_AUGMENT_RETRIES,
) -> MutationRecord:
    if not cands.er_attachments:
        raise NoEligibleAugmentation("candidate pool has no attachments")
    rng = make_rng(rng_seed)
    anchors = sorted(seed.entity_set)
    if not anchors and not cands.entities:
        raise NoEligibleAugmentation("empty pool and no candidate entity to anchor on")
    for _ in range(max_retries):
        relation, new_entity = rng.choice(cands.er_attachments)
        if anchors:
            anchor = rng.choice(anchors)
        else:
            anchor = rng.choices([e for e, _ in cands.entities], weights=[w for _, w in cands.entities], k=1)[0]
        added = ERTriple(anchor, relation, new_entity)
        if added not in seed:
            follow = ERPool(seed.triples + (added,), seed.source_caption)
            return MutationRecord(seed, ER_A, {"added": list(added.labels())}, follow, _seed_value(rng_seed))
    raise NoEligibleAugmentation(f"no non-duplicate triple after {max_retries} draws")


_WORD_RE = re.compile(r"[A-Za-z][A-Za-z'-]*")


def _match_case(template: str, word: str) -> str:
    if template.isupper() and len(template) > 1:
        return word.upper()
    if template[:1].isupper():
        return word[:1].upper() + word[1:]
    return word


def substitute_synonym(
    caption: str,
    lexicon: Mapping[str, Sequence[str]],
    rng_seed: int | random.Random,
) -> tuple[str, tuple[str, str]]:
    """Replace one lexicon word; returns the new caption and the (old, new) pair."""
    table = {k.lower(): list(v) for k, v in lexicon.items() if v}
    hits = [m for m in _WORD_RE.finditer(caption) if m.group(0).lower() in table]
    if not hits:
        raise NoSubstitutableWord(f"no lexicon word in {caption!r}")
    rng = make_rng(rng_seed)
    m = rng.choice(hits)
    old = m.group(0)
    new = _match_case(old, rng.choice(table[old.lower()]))
    return caption[:m.start()] + new + caption[m.end():], (old, new)


def mutate_ss(caption: str, lexicon: Mapping[str, Sequence[str]], rng_seed: int | random.Random) -> str:
    return substitute_synonym(caption, lexicon, rng_seed)[0]


def mutate_ss_record(
    seed: ERPool,
    caption: str,
    lexicon: Mapping[str, Sequence[str]],
    rng_seed: int | random.Random,
) -> tuple[MutationRecord, str]:
    text, (old, new) = substitute_synonym(caption, lexicon, rng_seed)
    record = MutationRecord(seed, SS, {"substituted": [old, new], "caption": text}, seed, _seed_value(rng_seed))
    return record, text


def load_lexicon(path: str | Path | None = None) -> dict[str, list[str]]:
    if path is None:
        text = resources.files("t2imt.data").joinpath("synonyms_v1.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    data = json.loads(text)
    return {k: list(v) for k, v in data.get("synonyms", data).items()}


def apply_operator(
    operator: str,
    seed: ERPool,
    cands: CandidatePool,
    rng_seed: int,
    *,
    weighted: bool = True,
) -> list[MutationRecord]:
    """Run a pool operator, or an ``EC+X`` composition, on one rng stream.

    Compositions return two records: the EC step and the second step, whose
    seed pool is the EC output.
    """
    rng = random.Random(rng_seed)
    if operator == EC:
        steps = [mutate_ec(seed, cands, rng, weighted=weighted)]
    elif operator == ER_R:
        steps = [mutate_er_r(seed, rng)]
    elif operator == ER_A:
        steps = [mutate_er_a(seed, cands, rng)]
    elif operator in COMBINED_OPERATORS:
        first = mutate_ec(seed, cands, rng, weighted=weighted)
        if operator == EC_ER_R:
            second = mutate_er_r(first.follow_pool, rng)
        else:
            second = mutate_er_a(first.follow_pool, cands, rng)
        steps = [first, second]
    else:
        raise InvalidInput(f"not a pool operator: {operator!r}")
    return [_with_seed(r, rng_seed) for r in steps]


def _with_seed(record: MutationRecord, rng_seed: int) -> MutationRecord:
    return MutationRecord(record.seed_pool, record.operator, record.params, record.follow_pool, rng_seed)


# --- density stratification ---------------------------------------------

@dataclass(frozen=True)
class Stratification:
    means: dict[int, float]
    counts: dict[int, int]
    distances: dict[tuple[int, int], float]
    flagged: list[tuple[int, int]]
    empty_levels: list[int]
    epsilon: float

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "levels": [
                {"level": lv, "mean": self.means[lv], "count": self.counts[lv]} for lv in sorted(self.means)
            ],
            "distances": [
                {"a": a, "b": b, "distance": d, "flagged": (a, b) in self.flagged}
                for (a, b), d in sorted(self.distances.items())
            ],
            "empty_levels": self.empty_levels,
        }


def absolute_distance(a: float, b: float) -> float:
    return abs(a - b)


def stratify_by_density(
    scores: Iterable[tuple[int, float]],
    levels: Iterable[int] | None = None,
    epsilon: float = 0.1,
    distance: Callable[[float, float], float] = absolute_distance,
) -> Stratification:
    """Group ``(level, score)`` pairs by density level and compare level means.

    Every pair of populated levels ``a < b`` gets a distance; pairs with
    distance >= ``epsilon`` are flagged. Requested ``levels`` with no cases
    are listed in ``empty_levels`` and left out of the tables.
    """
    if epsilon < 0:
        raise InvalidInput("epsilon must be non-negative")
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for level, score in scores:
        if level < 0:
            raise InvalidInput(f"negative density level {level}")
        sums[level] = sums.get(level, 0.0) + float(score)
        counts[level] = counts.get(level, 0) + 1
    means = {lv: sums[lv] / counts[lv] for lv in sorted(counts)}
    empty = sorted(set(levels or ()) - set(counts))
    distances = {(a, b): distance(means[a], means[b]) for a, b in itertools.combinations(sorted(means), 2)}
    flagged = [pair for pair, d in distances.items() if d >= epsilon]
    return Stratification(means, counts, distances, flagged, empty, epsilon)


def density_weighted_score(
    scores: Iterable[tuple[int, float]],
    weight: Callable[[int], float] | None = None,
) -> float:
    """Aggregate of per-scenario scores weighted by density level.

    Each level ``d`` contributes ``weight(d)`` times its mean score (scenarios
    within a level are equally likely); weights are normalized over the
    populated levels. ``weight=None`` treats all levels alike.
    """
    strat = stratify_by_density(scores, epsilon=0.0)
    if not strat.means:
        raise InvalidInput("no scores to aggregate")
    w = {lv: (1.0 if weight is None else float(weight(lv))) for lv in strat.means}
    total = sum(w.values())
    if total <= 0:
        raise InvalidInput("density weights must have a positive sum")
    return sum(w[lv] * strat.means[lv] for lv in strat.means) / total
