import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from t2imt.er import ERPool, ERTriple, build_pool, load_canon_map
from t2imt.errors import (
    EmptyPool,
    InsufficientDensity,
    InvalidInput,
    NoEligibleAugmentation,
    NoEligibleReplacement,
    NoSubstitutableWord,
)
from t2imt.mutation import (
    EC,
    EC_ER_A,
    EC_ER_R,
    ER_A,
    ER_R,
    SS,
    CandidatePool,
    MutationRecord,
    apply_operator,
    build_candidate_pool,
    density_weighted_score,
    load_lexicon,
    mutate_ec,
    mutate_er_a,
    mutate_er_r,
    mutate_ss,
    mutate_ss_record,
    record_violations,
    registry_candidate_pool,
    stratify_by_density,
    substitute_synonym,
)

CANON = load_canon_map()
REG = CANON.registry


def pool(*triples):
    return build_pool("", triples, CANON)


def cands(*labels, attachments=()):
    return CandidatePool(
        tuple((REG.entity(lab), 1.0) for lab in labels),
        tuple((REG.relation(r), REG.entity(e)) for r, e in attachments),
    )


def test_ec_replaces_one_class():
    seed = pool(("woman", "sitting on", "bench"))
    rec = mutate_ec(seed, cands("plate", "bench", "woman"), random.Random(0))
    # woman/bench already present, so plate is the only eligible replacement
    assert rec.params["e2"] == "plate"
    e1 = rec.params["e1"]
    expected = [tuple("plate" if x == e1 else x for x in seed.labels()[0])]
    assert rec.follow_pool.labels() == expected
    assert record_violations(rec) == []


def test_ec_replaces_every_occurrence():
    seed = pool(("man", "watching", "bird"), ("bird", "standing on", "stone"))
    for s in range(20):
        rec = mutate_ec(seed, cands("cat"), s)
        if rec.params["e1"] == "rock":
            assert rec.follow_pool.labels() == sorted(
                [("person", "watching", "bird"), ("bird", "standing on", "cat")],
                key=lambda t: (REG.entity(t[0]).id, REG.relation(t[1]).id, REG.entity(t[2]).id),
            )
            assert "rock" not in {e.label for e in rec.follow_pool.entity_set}
            break
    else:
        pytest.fail("rock never drawn as e1")


def test_ec_self_triple():
    rec = mutate_ec(pool(("dog", "with", "dog")), cands("cat"), 0)
    assert rec.follow_pool.labels() == [("cat", "with", "cat")]


def test_ec_preconditions():
    with pytest.raises(EmptyPool):
        mutate_ec(ERPool(()), cands("cat"), 0)
    with pytest.raises(NoEligibleReplacement):
        mutate_ec(pool(("dog", "on", "bed")), cands("dog", "bed"), 0)


def test_ec_weighted_draw_follows_weights():
    seed = pool(("dog", "on", "bed"))
    c = CandidatePool(((REG.entity("cat"), 9.0), (REG.entity("horse"), 1.0)))
    picks = [mutate_ec(seed, c, s).params["e2"] for s in range(2000)]
    assert 0.85 < picks.count("cat") / len(picks) < 0.95
    uniform = [mutate_ec(seed, c, s, weighted=False).params["e2"] for s in range(2000)]
    assert 0.45 < uniform.count("cat") / len(uniform) < 0.55


def test_er_r_example():
    seed = pool(("dog", "with", "cat"), ("dog", "on", "bed"), ("cat", "on", "bed"))
    for s in range(50):
        rec = mutate_er_r(seed, s)
        if rec.params["removed"] == ["dog", "with", "cat"]:
            assert rec.follow_density == 2
            assert rec.follow_pool.entity_set == seed.entity_set
            return
    pytest.fail("(dog, with, cat) never removed")


def test_er_r_projection_shrinks_entities():
    seed = pool(("dog", "on", "bed"), ("cat", "with", "person"))
    recs = {tuple(mutate_er_r(seed, s).params["removed"]): mutate_er_r(seed, s) for s in range(30)}
    rec = recs[("cat", "with", "person")]
    assert {e.label for e in rec.follow_pool.entity_set} == {"dog", "bed"}


def test_er_r_needs_density_two():
    with pytest.raises(InsufficientDensity):
        mutate_er_r(pool(("dog", "on", "bed")), 0)


def test_er_a_anchors_on_pool():
    seed = pool(("person", "sitting on", "bench"))
    c = cands(attachments=[("holding", "umbrella")])
    rec = mutate_er_a(seed, c, 0)
    assert rec.params["added"][1:] == ["holding", "umbrella"]
    assert rec.params["added"][0] in {"person", "bench"}
    assert rec.follow_density == 2 and record_violations(rec) == []
    hits = {mutate_er_a(seed, c, s).params["added"][0] for s in range(40)}
    assert ("person" in hits) and ("bench" in hits)


def test_er_a_on_empty_pool():
    c = cands("person", attachments=[("holding", "umbrella")])
    rec = mutate_er_a(ERPool(()), c, 0)
    assert rec.follow_pool.labels() == [("person", "holding", "umbrella")]
    assert (rec.seed_density, rec.follow_density) == (0, 1)


def test_er_a_retry_bound():
    seed = pool(("dog", "on", "bed"))
    # the only attachment anchored at dog reproduces the existing triple half the time;
    # with bed as anchor it adds (bed, on, bed); a pool holding both is saturated
    full = pool(("dog", "on", "bed"), ("bed", "on", "bed"))
    c = cands(attachments=[("on", "bed")])
    assert mutate_er_a(seed, c, 1).follow_density == 2
    with pytest.raises(NoEligibleAugmentation):
        mutate_er_a(full, c, 0)
    with pytest.raises(NoEligibleAugmentation):
        mutate_er_a(seed, CandidatePool(), 0)


def test_ss_example():
    lex = {"large": ["big", "huge"]}
    outs = {mutate_ss("a large dog", lex, s) for s in range(30)}
    assert outs == {"a big dog", "a huge dog"}
    assert mutate_ss("A Large dog", lex, 0) in {"A Big dog", "A Huge dog"}
    with pytest.raises(NoSubstitutableWord):
        mutate_ss("a dog", lex, 0)


def test_ss_deterministic_and_pool_preserving():
    lex = load_lexicon()
    seed = pool(("dog", "on", "bed"))
    rec1, text1 = mutate_ss_record(seed, "a small dog on a large bed", lex, 42)
    rec2, text2 = mutate_ss_record(seed, "a small dog on a large bed", lex, 42)
    assert text1 == text2 and rec1 == rec2
    assert rec1.follow_pool == seed and record_violations(rec1) == []
    old, new = rec1.params["substituted"]
    assert text1 != "a small dog on a large bed" and new in text1


def test_substitute_synonym_returns_pair():
    text, (old, new) = substitute_synonym("a large dog", {"large": ["big"]}, 0)
    assert (text, old, new) == ("a big dog", "large", "big")


@pytest.mark.parametrize("op", [EC, ER_R, ER_A, EC_ER_R, EC_ER_A])
def test_apply_operator_deterministic(op):
    seed = pool(("dog", "with", "cat"), ("dog", "on", "bed"))
    c = registry_candidate_pool(CANON)
    a = apply_operator(op, seed, c, 123)
    b = apply_operator(op, seed, c, 123)
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]
    assert all(r.rng_seed == 123 for r in a)


def test_combined_operator_chains_on_ec_output():
    seed = pool(("dog", "with", "cat"), ("dog", "on", "bed"))
    recs = apply_operator(EC_ER_R, seed, registry_candidate_pool(CANON), 5)
    assert [r.operator for r in recs] == [EC, ER_R]
    assert recs[1].seed_pool == recs[0].follow_pool
    assert recs[1].follow_density == 1
    recs = apply_operator(EC_ER_A, seed, registry_candidate_pool(CANON), 5)
    assert [r.operator for r in recs] == [EC, ER_A]
    assert recs[1].seed_pool == recs[0].follow_pool and recs[1].follow_density == 3


def test_apply_operator_rejects_ss():
    with pytest.raises(InvalidInput):
        apply_operator(SS, ERPool(()), CandidatePool(), 0)


def test_record_roundtrip():
    seed = pool(("dog", "with", "cat"))
    rec = mutate_ec(seed, cands("horse"), 9)
    back = MutationRecord.from_dict(rec.to_dict(), CANON)
    assert back == rec and back.params == rec.params


def test_candidate_pool_roundtrip_and_build():
    pools = [pool(("dog", "on", "bed")), pool(("dog", "with", "cat"))]
    c = build_candidate_pool(pools)
    weights = {e.label: w for e, w in c.entities}
    assert weights == {"dog": 2.0, "bed": 1.0, "cat": 1.0}
    assert {(r.label, e.label) for r, e in c.er_attachments} == {("on", "bed"), ("with", "cat")}
    assert CandidatePool.from_dict(c.to_dict(), CANON) == c
    with pytest.raises(InvalidInput):
        CandidatePool(((REG.entity("dog"), 0.0),))


SMALL_ENTS = [REG.entity(x) for x in ("dog", "cat", "bed", "person", "umbrella", "horse")]
SMALL_RELS = [REG.relation(x) for x in ("with", "on", "holding")]
triple_st = st.builds(ERTriple, st.sampled_from(SMALL_ENTS), st.sampled_from(SMALL_RELS), st.sampled_from(SMALL_ENTS))


@settings(max_examples=200)
@given(st.lists(triple_st, min_size=0, max_size=5), st.integers(0, 2**63 - 1), st.sampled_from([EC, ER_R, ER_A, EC_ER_R, EC_ER_A]))
def test_operator_invariants(triples, seed_value, op):
    seed = ERPool(tuple(triples))
    c = CandidatePool(tuple((e, 1.0 + i) for i, e in enumerate(SMALL_ENTS)),
                      tuple((r, e) for r in SMALL_RELS for e in SMALL_ENTS))
    try:
        recs = apply_operator(op, seed, c, seed_value)
    except (EmptyPool, InsufficientDensity, NoEligibleReplacement, NoEligibleAugmentation):
        return
    assert recs[0].seed_pool == seed
    for r in recs:
        assert record_violations(r) == []
    if op == EC:
        assert recs[0].params["e2"] not in {e.label for e in seed.entity_set}


def test_stratify_examples():
    flat = stratify_by_density([(1, 0.5), (2, 0.5), (3, 0.5)])
    assert all(d == 0 for d in flat.distances.values()) and flat.flagged == []
    s = stratify_by_density([(1, 0.9), (3, 0.6)], epsilon=0.2)
    assert s.distances == {(1, 3): pytest.approx(0.3)}
    assert s.flagged == [(1, 3)]
    single = stratify_by_density([(2, 0.4), (2, 0.6)], levels=[1, 2, 3])
    assert single.distances == {} and single.means == {2: 0.5} and single.empty_levels == [1, 3]
    with pytest.raises(InvalidInput):
        stratify_by_density([], epsilon=-1)


def test_density_weighted_score():
    scores = [(1, 1.0), (1, 0.0), (2, 0.2)]
    assert density_weighted_score(scores) == pytest.approx((0.5 + 0.2) / 2)
    assert density_weighted_score(scores, weight=lambda d: d) == pytest.approx((0.5 + 2 * 0.2) / 3)
