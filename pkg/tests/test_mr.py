import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import ec_oracle, er_a_oracle, er_r_oracle, ss_oracle, subsets
from t2imt.detection import DetectionResult, EntityDetection, RelationDetection
from t2imt.er import ERPool, ERTriple, build_pool, load_canon_map
from t2imt.errors import EmptyVerdictSet, OperatorMismatch, ZeroDenominator
from t2imt.mr import (
    MissCounts,
    MRCase,
    check,
    ec_violations,
    er_a_violations,
    er_r_violations,
    error_rates,
    miss_counts,
    miss_rates,
    ss_violations,
)
from t2imt.mutation import EC, ER_A, ER_R, SS, MutationRecord

CANON = load_canon_map()
E = {x: CANON.registry.entity(x) for x in ("person", "bench", "plate", "dog", "cat", "bed")}
R = {x: CANON.registry.relation(x) for x in ("sitting on", "on", "with", "holding")}


def detection(entities, relations=()):
    """Build a detection whose class sets are exactly the given sets."""
    ents = sorted(entities)
    rels = []
    for r in sorted(relations):
        assert ents, "relations need an entity to hang on"
        rels.append(RelationDetection(0, r, 0, 0.9))
    return DetectionResult("img", tuple(EntityDetection(e, 0.9) for e in ents), tuple(rels))


def record(op, seed=(), follow=(), **params):
    return MutationRecord(ERPool(tuple(seed)), op, params, ERPool(tuple(follow)))


def ec_record(e1, e2):
    r = R["sitting on"]
    return record(EC, [ERTriple(e1, r, e1)], [ERTriple(e2, r, e2)], e1=e1.label, e2=e2.label)


def test_ec_consistent_case():
    v = check(MRCase(ec_record(E["bench"], E["plate"]),
                     detection({E["person"], E["bench"]}, {R["sitting on"]}),
                     detection({E["person"], E["plate"]}, {R["sitting on"]})))
    assert (v.p_e, v.p_r) == (False, False) and v.violated_clauses == ()


def test_ec_follow_missing_new_entity_is_not_flagged():
    # K_e = {person} equals both S_e - {bench} and A_e - {plate}
    v = check(MRCase(ec_record(E["bench"], E["plate"]),
                     detection({E["person"], E["bench"]}, {R["sitting on"]}),
                     detection({E["person"]}, {R["sitting on"]})))
    assert (v.p_e, v.p_r) == (False, False)


def test_ec_lost_shared_entity_is_flagged():
    v = check(MRCase(ec_record(E["bench"], E["plate"]),
                     detection({E["person"], E["bench"]}, {R["sitting on"]}),
                     detection({E["plate"]}, set())))
    assert v.p_e and v.p_r
    assert set(v.violated_clauses) == {"EC.entity.seed", "EC.relation.seed"}
    assert v.witness["shared_entities"] == []


def test_ec_requires_distinct_entities_and_seed():
    same = record(EC, [ERTriple(E["dog"], R["on"], E["dog"])], [ERTriple(E["dog"], R["on"], E["dog"])], e1="dog", e2="dog")
    with pytest.raises(OperatorMismatch):
        check(MRCase(same, detection({E["dog"]}), detection({E["dog"]})))
    with pytest.raises(OperatorMismatch):
        check(MRCase(ec_record(E["dog"], E["cat"]), None, detection({E["cat"]})))


def test_er_r_examples():
    seed = detection({E["dog"], E["cat"], E["bed"]}, {R["on"], R["with"]})
    rec = record(ER_R)
    assert not check(MRCase(rec, seed, detection({E["dog"], E["bed"]}, {R["on"]}))).p_e
    v = check(MRCase(rec, seed, detection({E["dog"], E["person"]}, {R["on"]})))
    assert v.p_e and not v.p_r and v.witness["extra_entities"] == ["person"]
    empty = check(MRCase(rec, seed, detection(set())))
    assert (empty.p_e, empty.p_r) == (False, False)


def test_er_a_examples():
    rec = record(ER_A)
    seed = detection({E["person"], E["bench"]}, {R["sitting on"]})
    assert not check(MRCase(rec, seed, detection({E["person"], E["bench"], E["dog"]}, {R["sitting on"], R["holding"]}))).p_e
    v = check(MRCase(rec, seed, detection({E["person"], E["dog"]}, {R["holding"]})))
    assert v.p_e and v.p_r and v.witness["lost_entities"] == ["bench"]
    blank = check(MRCase(rec, detection(set()), detection({E["dog"]})))
    assert (blank.p_e, blank.p_r) == (False, False)


def test_ss_examples():
    pool = build_pool("", [("person", "sitting on", "bench")], CANON)
    rec = MutationRecord(pool, SS, {}, pool)
    exact = check(MRCase(rec, None, detection({E["person"], E["bench"]}, {R["sitting on"]})))
    assert (exact.p_e, exact.p_r) == (False, False)
    missing = check(MRCase(rec, None, detection({E["person"]}, {R["sitting on"]})))
    assert missing.p_e and not missing.p_r and missing.witness["missing_entities"] == ["bench"]
    extra = check(MRCase(rec, None, detection({E["person"], E["bench"], E["dog"]}, {R["sitting on"]})))
    assert extra.p_e and extra.witness["extra_entities"] == ["dog"]


def test_operator_mismatch():
    with pytest.raises(OperatorMismatch):
        check(MRCase(record("ORIG"), None, detection(set())))
    with pytest.raises(OperatorMismatch):
        check(MRCase(record(ER_R), None, detection(set())))


def test_verdict_record_shape():
    v = check(MRCase(record(ER_A), detection({E["dog"]}), detection(set())))
    rec = v.to_record("c1", ER_A)
    assert set(rec) == {"case_id", "operator", "p_e", "p_r", "violated_clauses", "witness"}
    assert rec["violated_clauses"] == ["ER_A.entity"]


UE = [E[x] for x in ("person", "bench", "plate", "dog")]
UR = [R[x] for x in ("sitting on", "on", "with")]
SUB_E, SUB_R = subsets(UE), subsets(UR)


def test_pure_clauses_match_oracle_exhaustively():
    sides = [(e, r) for e in SUB_E for r in SUB_R]
    for (se, sr) in sides:
        for (ae, ar) in sides:
            got = er_r_violations(se, sr, ae, ar)
            assert (any(".entity" in c for c in got), any(".relation" in c for c in got)) == er_r_oracle(UE, UR, se, sr, ae, ar)
            got = er_a_violations(se, sr, ae, ar)
            assert (any(".entity" in c for c in got), any(".relation" in c for c in got)) == er_a_oracle(UE, UR, se, sr, ae, ar)
            got = ss_violations(se, sr, ae, ar)
            assert (bool([c for c in got if ".entity" in c]), bool([c for c in got if ".relation" in c])) == ss_oracle(UE, UR, se, sr, ae, ar)
            for e1 in UE:
                for e2 in UE:
                    if e1 == e2:
                        continue
                    got = ec_violations(se, sr, ae, ar, e1, e2)
                    assert (any(".entity" in c for c in got), any(".relation" in c for c in got)) == ec_oracle(UE, UR, se, sr, ae, ar, e1, e2)


def test_error_rates():
    verdicts = [check(MRCase(record(ER_A), detection({E["dog"]}), detection(set() if i < 3 else {E["dog"]}))) for i in range(5)]
    assert error_rates(verdicts) == (0.6, 0.0)
    ok = [check(MRCase(record(ER_A), detection(set()), detection(set())))] * 4
    assert error_rates(ok) == (0.0, 0.0)
    with pytest.raises(EmptyVerdictSet):
        error_rates([])


def test_miss_counts_and_rates():
    pool = build_pool("", [("dog", "on", "bed"), ("cat", "with", "dog")], CANON)
    det = detection({E["dog"], E["bed"]}, {R["on"]})
    assert miss_counts(pool, det) == MissCounts(2, 3, 1, 2)
    assert miss_rates([(pool, det)]) == pytest.approx((1 / 3, 0.5))
    full = detection(pool.entity_set, pool.relation_set)
    assert miss_rates([(pool, full)]) == (0.0, 0.0)
    with pytest.raises(ZeroDenominator):
        miss_rates([(ERPool(()), det)])


def test_miss_rate_is_ratio_of_sums():
    # 10 input entities corpus-wide, 7 detected
    big = build_pool("", [("dog", "on", "bed"), ("cat", "on", "person"), ("plate", "on", "bench"),
                          ("horse", "on", "tree"), ("car", "on", "street")], CANON)
    small = build_pool("", [], CANON)
    det = detection(set(sorted(big.entity_set)[:7]), big.relation_set)
    assert miss_counts(big, det).miss_e == pytest.approx(0.3)
    assert miss_rates([(big, det), (small, detection(set()))])[0] == pytest.approx(0.3)


side = st.tuples(st.sets(st.sampled_from(UE)), st.sets(st.sampled_from(UR)))


@given(side, side, st.sampled_from(UE))
def test_er_a_monotone_under_follow_removal(s, a, drop):
    se, sr = frozenset(s[0]), frozenset(s[1])
    ae, ar = frozenset(a[0]), frozenset(a[1])
    before = "ER_A.entity" in er_a_violations(se, sr, ae, ar)
    after = "ER_A.entity" in er_a_violations(se, sr, ae - {drop}, ar)
    assert not (before and not after)


@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=30), st.randoms(use_true_random=False))
def test_error_rates_permutation_invariant_and_bounded(flags, rnd):
    from t2imt.mr import MRVerdict

    vs = [MRVerdict(a, b) for a, b in flags]
    shuffled = list(vs)
    rnd.shuffle(shuffled)
    ee, er = error_rates(vs)
    assert (ee, er) == error_rates(shuffled)
    assert 0 <= ee <= 1 and 0 <= er <= 1


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5), st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=20),
       st.randoms(use_true_random=False))
def test_miss_totals_permutation_invariant(rows, rnd):
    counts = [MissCounts(min(h, t), t, min(hr, tr), tr) for h, t, hr, tr in rows]
    shuffled = list(counts)
    rnd.shuffle(shuffled)
    total = sum(counts, MissCounts())
    assert total == sum(shuffled, MissCounts())
    for m in (total.miss_e, total.miss_r):
        assert m is None or 0 <= m <= 1
