import json

import httpx
import pytest

from t2imt.detection import (
    DetectorGateway,
    FixtureDetector,
    HttpDetector,
    SidecarDetector,
    parse_detections,
    sidecar_to_payload,
    to_er_sets,
)
from t2imt.er import build_pool, naive_extract
from t2imt.errors import DetectorUnavailable, MalformedResponse, UnknownClassStrict
from t2imt.generation import GeneratorGateway, GenRequest, SimulatorBackend


def ent(label, conf=0.9):
    return {"label": label, "confidence": conf, "bbox": [0, 0, 1, 1]}


def rel(s, p, o, conf=0.9):
    return {"subject": s, "predicate": p, "object": o, "confidence": conf}


def names(classes):
    return {c.label for c in classes}


def test_threshold_excludes_low_confidence(canon):
    det = parse_detections({"entities": [ent("dog"), ent("cat", 0.05)], "relations": []}, canon)
    assert names(to_er_sets(det)[0]) == {"dog"}
    assert det.diagnostics.below_threshold_entities == 1
    assert det.diagnostics.discarded == 1


def test_relation_of_dropped_entity_is_follow_on_failure(canon):
    payload = {"entities": [ent("dog"), ent("cat", 0.01), ent("bed")],
               "relations": [rel(0, "with", 1), rel(0, "on", 2)]}
    det = parse_detections(payload, canon)
    assert det.diagnostics.orphaned_relations == 1
    # survivors are re-indexed: bed moves from index 2 to 1
    assert [(r.subject_index, r.predicate.label, r.object_index) for r in det.relations] == [(0, "on", 1)]
    assert names(to_er_sets(det)[1]) == {"on"}


def test_set_collapse_and_aliases(canon):
    payload = {"entities": [ent("person"), ent("man"), ent("bench")],
               "relations": [rel(0, "sitting on", 2), rel(1, "sit on", 2)]}
    e, r = to_er_sets(parse_detections(payload, canon))
    assert names(e) == {"person", "bench"} and names(r) == {"sitting on"}
    assert to_er_sets(parse_detections({"entities": [], "relations": []}, canon)) == (frozenset(), frozenset())


def test_separate_relation_threshold(canon):
    payload = {"entities": [ent("dog"), ent("bed")], "relations": [rel(0, "on", 1, 0.3)]}
    assert len(parse_detections(payload, canon, relation_threshold=0.5).relations) == 0
    assert len(parse_detections(payload, canon).relations) == 1


def test_unknown_classes(canon):
    payload = {"entities": [ent("dog"), ent("ufo")], "relations": [rel(0, "levitating", 1)]}
    det = parse_detections(payload, canon)
    assert det.diagnostics.unknown_entities == ("ufo",)
    assert det.diagnostics.unknown_relations == ("levitating",)
    with pytest.raises(UnknownClassStrict):
        parse_detections(payload, canon, strict=True)


@pytest.mark.parametrize(
    "payload",
    [
        [],
        {"entities": "dog"},
        {"entities": [{"confidence": 0.5}]},
        {"entities": [ent("dog", 1.5)]},
        {"entities": [ent("dog", float("nan"))]},
        {"entities": [{"label": "dog", "bbox": [0, 0, 1]}]},
        {"entities": [ent("dog")], "relations": [rel(0, "on", 3)]},
        {"entities": [ent("dog")], "relations": [rel(0, "", 0)]},
    ],
)
def test_malformed_payloads(canon, payload):
    with pytest.raises(MalformedResponse) as info:
        parse_detections(payload, canon)
    assert info.value.body is not None or payload == []


def test_sidecar_detector_closes_the_loop(tmp_path, canon):
    gw = GeneratorGateway(tmp_path, [SimulatorBackend(canon)])
    prompt = "a dog on a bed and a cat with a person"
    res = gw.generate(GenRequest(prompt, "simulator", 8, 8))
    det = DetectorGateway(SidecarDetector(), canon).detect(res.image_ref)
    pool = build_pool(prompt, naive_extract(prompt, canon), canon)
    assert to_er_sets(det) == (pool.entity_set, pool.relation_set)
    with pytest.raises(DetectorUnavailable):
        SidecarDetector().raw_detect(tmp_path / "missing.png")


def test_sidecar_to_payload_rejects_absent_entity():
    with pytest.raises(MalformedResponse):
        sidecar_to_payload({"entities": ["dog"], "relations": [["dog", "on", "bed"]]})


def test_fixture_detector(tmp_path, canon):
    (tmp_path / "img1.png.json").write_text(json.dumps({"entities": [ent("dog")], "relations": []}))
    (tmp_path / "img2.json").write_text(json.dumps({"entities": [ent("cat")], "relations": []}))
    gw = DetectorGateway(FixtureDetector(tmp_path), canon)
    assert names(to_er_sets(gw.detect("x/img1.png"))[0]) == {"dog"}
    assert names(to_er_sets(gw.detect("x/img2.png"))[0]) == {"cat"}
    with pytest.raises(DetectorUnavailable):
        gw.detect("x/img3.png")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(MalformedResponse):
        gw.detect("bad.png")


def test_http_detector(tmp_path, canon):
    seen = []

    def handler(request):
        seen.append(json.loads(request.content))
        return httpx.Response(200, json={"entities": [ent("dog")], "relations": []})

    client = httpx.Client(transport=httpx.MockTransport(handler))
    det = DetectorGateway(HttpDetector("https://det.example", client), canon).detect("images/abc.png")
    assert names(to_er_sets(det)[0]) == {"dog"} and seen == [{"image_ref": "images/abc.png"}]

    img = tmp_path / "a.png"
    img.write_bytes(b"\x89PNG")
    HttpDetector("https://det.example", client, send_image=True).raw_detect(img)
    assert seen[-1] == {"image_b64": "iVBORw=="}


def test_http_detector_errors():
    down = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(503)))
    with pytest.raises(DetectorUnavailable):
        HttpDetector("https://det", down).raw_detect("a.png")
    bad = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(200, text="<html>")))
    with pytest.raises(MalformedResponse):
        HttpDetector("https://det", bad).raw_detect("a.png")
