"""Metamorphic relations over detected entity/relation class sets.

With ``S`` the seed image's detections, ``A`` the follow-up's, and
``K = S & A`` computed separately for entities and relations:

* EC   - ``K_e == S_e - {e1}``, ``K_e == A_e - {e2}``, ``K_r == S_r``, ``K_r == A_r``
* ER_R - ``K_e == A_e``, ``K_r == A_r``   (follow-up contained in seed)
* ER_A - ``K_e == S_e``, ``K_r == S_r``   (seed contained in follow-up)
* SS   - ``A_e`` and ``A_r`` equal the input pool's sets exactly

A violated entity clause sets ``p_e``; a violated relation clause sets ``p_r``.
All comparisons are exact set equalities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import AbstractSet, Iterable

from .detection import DetectionResult, to_er_sets
from .er import EntityClass, ERPool
from .errors import EmptyVerdictSet, OperatorMismatch, ZeroDenominator
from .mutation import EC, ER_A, ER_R, SS, MutationRecord


@dataclass(frozen=True)
class MRCase:
    record: MutationRecord
    seed_detection: DetectionResult | None
    follow_detection: DetectionResult


@dataclass(frozen=True)
class MRVerdict:
    p_e: bool
    p_r: bool
    violated_clauses: tuple[str, ...] = ()
    witness: dict = field(default_factory=dict, compare=False)

    def to_record(self, case_id: str, operator: str) -> dict:
        return {
            "case_id": case_id,
            "operator": operator,
            "p_e": self.p_e,
            "p_r": self.p_r,
            "violated_clauses": list(self.violated_clauses),
            "witness": self.witness,
        }


def _labels(items: Iterable) -> list[str]:
    return sorted(x.label for x in items)


def _verdict(violated: list[str], witness: dict) -> MRVerdict:
    p_e = any(".entity" in c for c in violated)
    p_r = any(".relation" in c for c in violated)
    return MRVerdict(p_e, p_r, tuple(violated), {k: _labels(v) for k, v in witness.items()})


# Pure set-level clause evaluation; the check_* wrappers only extract sets.

def ec_violations(
    seed_e: AbstractSet, seed_r: AbstractSet, follow_e: AbstractSet, follow_r: AbstractSet, e1, e2
) -> list[str]:
    k_e = seed_e & follow_e
    k_r = seed_r & follow_r
    out = []
    if k_e != seed_e - {e1}:
        out.append("EC.entity.seed")
    if k_e != follow_e - {e2}:
        out.append("EC.entity.follow")
    if k_r != seed_r:
        out.append("EC.relation.seed")
    if k_r != follow_r:
        out.append("EC.relation.follow")
    return out


def er_r_violations(seed_e: AbstractSet, seed_r: AbstractSet, follow_e: AbstractSet, follow_r: AbstractSet) -> list[str]:
    out = []
    if seed_e & follow_e != follow_e:
        out.append("ER_R.entity")
    if seed_r & follow_r != follow_r:
        out.append("ER_R.relation")
    return out


def er_a_violations(seed_e: AbstractSet, seed_r: AbstractSet, follow_e: AbstractSet, follow_r: AbstractSet) -> list[str]:
    out = []
    if seed_e & follow_e != seed_e:
        out.append("ER_A.entity")
    if seed_r & follow_r != seed_r:
        out.append("ER_A.relation")
    return out


def ss_violations(input_e: AbstractSet, input_r: AbstractSet, follow_e: AbstractSet, follow_r: AbstractSet) -> list[str]:
    out = []
    if follow_e != input_e:
        out.append("SS.entity")
    if follow_r != input_r:
        out.append("SS.relation")
    return out


def _require(case: MRCase, operator: str) -> None:
    if case.record.operator != operator:
        raise OperatorMismatch(f"case was produced by {case.record.operator}, not {operator}")
    if operator != SS and case.seed_detection is None:
        raise OperatorMismatch(f"{operator} needs a seed detection")


def _find_entity(record: MutationRecord, label: str) -> EntityClass:
    for e in record.seed_pool.entity_set | record.follow_pool.entity_set:
        if e.label == label:
            return e
    raise OperatorMismatch(f"EC parameter {label!r} does not occur in the record's pools")


def check_ec(case: MRCase) -> MRVerdict:
    _require(case, EC)
    params = case.record.params
    if "e1" not in params or "e2" not in params or params["e1"] == params["e2"]:
        raise OperatorMismatch("EC case needs distinct replaced entities e1 and e2")
    e1, e2 = _find_entity(case.record, params["e1"]), _find_entity(case.record, params["e2"])
    se, sr = to_er_sets(case.seed_detection)  # type: ignore[arg-type]
    ae, ar = to_er_sets(case.follow_detection)
    violated = ec_violations(se, sr, ae, ar, e1, e2)
    return _verdict(violated, {"seed_entities": se, "follow_entities": ae, "shared_entities": se & ae,
                               "seed_relations": sr, "follow_relations": ar, "shared_relations": sr & ar})


def check_er_r(case: MRCase) -> MRVerdict:
    _require(case, ER_R)
    se, sr = to_er_sets(case.seed_detection)  # type: ignore[arg-type]
    ae, ar = to_er_sets(case.follow_detection)
    violated = er_r_violations(se, sr, ae, ar)
    # witness: what the follow-up shows that the seed did not
    return _verdict(violated, {"extra_entities": ae - se, "extra_relations": ar - sr})


def check_er_a(case: MRCase) -> MRVerdict:
    _require(case, ER_A)
    se, sr = to_er_sets(case.seed_detection)  # type: ignore[arg-type]
    ae, ar = to_er_sets(case.follow_detection)
    violated = er_a_violations(se, sr, ae, ar)
    return _verdict(violated, {"lost_entities": se - ae, "lost_relations": sr - ar})


def check_ss(case: MRCase) -> MRVerdict:
    _require(case, SS)
    pool = case.record.seed_pool
    ae, ar = to_er_sets(case.follow_detection)
    violated = ss_violations(pool.entity_set, pool.relation_set, ae, ar)
    return _verdict(violated, {
        "missing_entities": pool.entity_set - ae, "extra_entities": ae - pool.entity_set,
        "missing_relations": pool.relation_set - ar, "extra_relations": ar - pool.relation_set,
    })


CHECKS = {EC: check_ec, ER_R: check_er_r, ER_A: check_er_a, SS: check_ss}


def check(case: MRCase) -> MRVerdict:
    try:
        fn = CHECKS[case.record.operator]
    except KeyError:
        raise OperatorMismatch(f"no metamorphic relation for operator {case.record.operator!r}") from None
    return fn(case)


def error_rates(verdicts: Iterable[MRVerdict]) -> tuple[float, float]:
    verdicts = list(verdicts)
    if not verdicts:
        raise EmptyVerdictSet("no verdicts to aggregate")
    n = len(verdicts)
    return sum(v.p_e for v in verdicts) / n, sum(v.p_r for v in verdicts) / n


@dataclass(frozen=True)
class MissCounts:
    """Corpus-level numerators/denominators behind the miss rates."""

    hit_e: int = 0
    total_e: int = 0
    hit_r: int = 0
    total_r: int = 0

    def __add__(self, other: "MissCounts") -> "MissCounts":
        return MissCounts(self.hit_e + other.hit_e, self.total_e + other.total_e,
                          self.hit_r + other.hit_r, self.total_r + other.total_r)

    @property
    def miss_e(self) -> float | None:
        return None if self.total_e == 0 else 1.0 - self.hit_e / self.total_e

    @property
    def miss_r(self) -> float | None:
        return None if self.total_r == 0 else 1.0 - self.hit_r / self.total_r


def miss_counts(pool: ERPool, detection: DetectionResult) -> MissCounts:
    de, dr = to_er_sets(detection)
    ie, ir = pool.entity_set, pool.relation_set
    return MissCounts(len(de & ie), len(ie), len(dr & ir), len(ir))


def miss_rates(cases: Iterable[tuple[ERPool, DetectionResult]]) -> tuple[float, float]:
    """Share of input classes not detected, as a ratio of corpus-wide sums."""
    total = MissCounts()
    for pool, det in cases:
        total = total + miss_counts(pool, det)
    if total.total_e == 0:
        raise ZeroDenominator("no input entity across the cases")
    if total.total_r == 0:
        raise ZeroDenominator("no input relation across the cases")
    return total.miss_e, total.miss_r  # type: ignore[return-value]
