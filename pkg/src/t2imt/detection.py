"""Entity and relation detections for generated images.

Detections arrive in one wire format, whether from an external detector
service, a fixture file, or the simulator's sidecar annotation::

    {"entities":  [{"label": str, "confidence": float, "bbox": [x0, y0, x1, y1]}, ...],
     "relations": [{"subject": int, "predicate": str, "object": int, "confidence": float}, ...]}

``subject``/``object`` index into ``entities``. Parsing canonicalizes labels,
applies the confidence thresholds, re-indexes the survivors and drops any
relation whose endpoint did not survive. Nothing is dropped silently: the
counts land in :class:`DetectionDiagnostics`.
"""

from __future__ import annotations

import base64
import json
import math
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol

import httpx

from .er import CanonMap, EntityClass, RelationClass, canonicalize
from .errors import DetectorUnavailable, MalformedResponse, UnknownClassStrict

DEFAULT_THRESHOLD = 0.08

BBox = tuple[float, float, float, float]


@dataclass(frozen=True)
class EntityDetection:
    cls: EntityClass
    confidence: float
    bbox: BBox = (0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class RelationDetection:
    subject_index: int
    predicate: RelationClass
    object_index: int
    confidence: float


@dataclass(frozen=True)
class DetectionDiagnostics:
    below_threshold_entities: int = 0
    below_threshold_relations: int = 0
    unknown_entities: tuple[str, ...] = ()
    unknown_relations: tuple[str, ...] = ()
    orphaned_relations: int = 0

    @property
    def discarded(self) -> int:
        return (
            self.below_threshold_entities
            + self.below_threshold_relations
            + len(self.unknown_entities)
            + len(self.unknown_relations)
            + self.orphaned_relations
        )


@dataclass(frozen=True)
class DetectionResult:
    image_ref: str
    entities: tuple[EntityDetection, ...] = ()
    relations: tuple[RelationDetection, ...] = ()
    diagnostics: DetectionDiagnostics = field(default_factory=DetectionDiagnostics)

    def __post_init__(self) -> None:
        n = len(self.entities)
        for r in self.relations:
            if not (0 <= r.subject_index < n and 0 <= r.object_index < n):
                raise MalformedResponse(f"relation index out of range in detection for {self.image_ref}")

    def to_dict(self) -> dict:
        """Wire-format payload plus diagnostics."""
        return {
            "image_ref": self.image_ref,
            "entities": [
                {"label": e.cls.label, "confidence": e.confidence, "bbox": list(e.bbox)} for e in self.entities
            ],
            "relations": [
                {
                    "subject": r.subject_index,
                    "predicate": r.predicate.label,
                    "object": r.object_index,
                    "confidence": r.confidence,
                }
                for r in self.relations
            ],
            "diagnostics": asdict(self.diagnostics),
        }


def to_er_sets(d: DetectionResult) -> tuple[frozenset[EntityClass], frozenset[RelationClass]]:
    return frozenset(e.cls for e in d.entities), frozenset(r.predicate for r in d.relations)


def _number(value: Any, what: str, body: Any) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise MalformedResponse(f"{what} must be a finite number, got {value!r}", body)
    return float(value)


def _confidence(value: Any, what: str, body: Any) -> float:
    c = _number(value, what, body)
    if not 0.0 <= c <= 1.0:
        raise MalformedResponse(f"{what} must lie in [0, 1], got {c}", body)
    return c


def parse_detections(
    payload: Any,
    canon: CanonMap,
    image_ref: str | Path = "",
    *,
    entity_threshold: float = DEFAULT_THRESHOLD,
    relation_threshold: float | None = None,
    strict: bool = False,
) -> DetectionResult:
    """Validate a wire payload and turn it into a filtered :class:`DetectionResult`."""
    if relation_threshold is None:
        relation_threshold = entity_threshold
    if not isinstance(payload, Mapping):
        raise MalformedResponse("detection payload must be an object", payload)
    raw_ents = payload.get("entities", [])
    raw_rels = payload.get("relations", [])
    if not isinstance(raw_ents, list) or not isinstance(raw_rels, list):
        raise MalformedResponse("'entities' and 'relations' must be lists", payload)

    kept: list[EntityDetection] = []
    remap: dict[int, int] = {}
    low_e = 0
    unknown_e: list[str] = []
    for i, item in enumerate(raw_ents):
        if not isinstance(item, Mapping) or not isinstance(item.get("label"), str) or not item["label"].strip():
            raise MalformedResponse(f"entity #{i} lacks a label", payload)
        conf = _confidence(item.get("confidence", 1.0), f"entity #{i} confidence", payload)
        bbox_raw = item.get("bbox", [0, 0, 0, 0])
        if not isinstance(bbox_raw, (list, tuple)) or len(bbox_raw) != 4:
            raise MalformedResponse(f"entity #{i} bbox must have 4 numbers", payload)
        bbox = tuple(_number(v, f"entity #{i} bbox", payload) for v in bbox_raw)
        cls = canonicalize(item["label"], "entity", canon)
        if cls is None:
            if strict:
                raise UnknownClassStrict(f"unknown entity class {item['label']!r}")
            unknown_e.append(item["label"])
            continue
        if conf < entity_threshold:
            low_e += 1
            continue
        remap[i] = len(kept)
        kept.append(EntityDetection(cls, conf, bbox))  # type: ignore[arg-type]

    rels: list[RelationDetection] = []
    low_r = orphaned = 0
    unknown_r: list[str] = []
    for j, item in enumerate(raw_rels):
        if not isinstance(item, Mapping):
            raise MalformedResponse(f"relation #{j} must be an object", payload)
        s, o, pred = item.get("subject"), item.get("object"), item.get("predicate")
        for idx in (s, o):
            if isinstance(idx, bool) or not isinstance(idx, int) or not 0 <= idx < len(raw_ents):
                raise MalformedResponse(f"relation #{j} references invalid entity index {idx!r}", payload)
        if not isinstance(pred, str) or not pred.strip():
            raise MalformedResponse(f"relation #{j} lacks a predicate", payload)
        conf = _confidence(item.get("confidence", 1.0), f"relation #{j} confidence", payload)
        rcls = canonicalize(pred, "relation", canon)
        if rcls is None:
            if strict:
                raise UnknownClassStrict(f"unknown relation class {pred!r}")
            unknown_r.append(pred)
            continue
        if conf < relation_threshold:
            low_r += 1
            continue
        if s not in remap or o not in remap:
            # an endpoint failed detection, so the relation fails with it
            orphaned += 1
            continue
        rels.append(RelationDetection(remap[s], rcls, remap[o], conf))

    diag = DetectionDiagnostics(low_e, low_r, tuple(unknown_e), tuple(unknown_r), orphaned)
    return DetectionResult(str(image_ref), tuple(kept), tuple(rels), diag)


def sidecar_to_payload(sidecar: Mapping[str, Any]) -> dict:
    """Convert a simulator sidecar ``{entities, relations}`` to the wire format."""
    labels = list(sidecar.get("entities", []))
    index = {lab: i for i, lab in enumerate(labels)}
    rels = []
    for s, p, o in sidecar.get("relations", []):
        if s not in index or o not in index:
            raise MalformedResponse(f"sidecar relation ({s}, {p}, {o}) names an absent entity", sidecar)
        rels.append({"subject": index[s], "predicate": p, "object": index[o], "confidence": 1.0})
    return {
        "entities": [{"label": lab, "confidence": 1.0, "bbox": [0.0, 0.0, 0.0, 0.0]} for lab in labels],
        "relations": rels,
    }


class DetectorBackend(Protocol):
    backend_id: str

    def raw_detect(self, image_ref: Path) -> Any: ...


class SidecarDetector:
    """Mock detector reading the ``<hash>.json`` annotation beside a simulated image."""

    backend_id = "sidecar"

    def raw_detect(self, image_ref: Path) -> dict:
        sidecar = Path(image_ref).with_suffix(".json")
        if not Path(image_ref).exists() or not sidecar.exists():
            raise DetectorUnavailable(f"no image/sidecar pair at {image_ref}")
        try:
            data = json.loads(sidecar.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise MalformedResponse(f"sidecar {sidecar} is not JSON: {exc}") from exc
        return sidecar_to_payload(data)


class FixtureDetector:
    """Mock detector serving wire-format files from a directory.

    Looks up ``<dir>/<image name>.json`` first, then ``<dir>/<image stem>.json``.
    """

    backend_id = "fixture"

    def __init__(self, fixture_dir: str | Path):
        self.fixture_dir = Path(fixture_dir)

    def raw_detect(self, image_ref: Path) -> Any:
        image_ref = Path(image_ref)
        for name in (f"{image_ref.name}.json", f"{image_ref.stem}.json"):
            path = self.fixture_dir / name
            if path.exists():
                text = path.read_text(encoding="utf-8")
                try:
                    return json.loads(text)
                except ValueError as exc:
                    raise MalformedResponse(f"fixture {path} is not JSON: {exc}", text) from exc
        raise DetectorUnavailable(f"no fixture for {image_ref.name} in {self.fixture_dir}")


class HttpDetector:
    """POST ``{image_ref}`` (or ``{image_b64}``) to a detector service."""

    def __init__(
        self,
        endpoint: str,
        client: httpx.Client | None = None,
        *,
        send_image: bool = False,
        timeout: float = 60.0,
        backend_id: str = "http",
    ):
        self.endpoint = endpoint
        self.send_image = send_image
        self.backend_id = backend_id
        self._client = client or httpx.Client(timeout=timeout)

    def raw_detect(self, image_ref: Path) -> Any:
        if self.send_image:
            body = {"image_b64": base64.b64encode(Path(image_ref).read_bytes()).decode("ascii")}
        else:
            body = {"image_ref": str(image_ref)}
        try:
            resp = self._client.post(self.endpoint, json=body)
        except httpx.HTTPError as exc:
            raise DetectorUnavailable(f"detector at {self.endpoint} unreachable: {exc}") from exc
        if resp.status_code >= 500 or resp.status_code in (408, 429):
            raise DetectorUnavailable(f"detector answered HTTP {resp.status_code}: {resp.text[:200]}")
        if not 200 <= resp.status_code < 300:
            raise MalformedResponse(f"detector answered HTTP {resp.status_code}", resp.text)
        try:
            return resp.json()
        except ValueError as exc:
            raise MalformedResponse(f"detector response is not JSON: {exc}", resp.text) from exc


class DetectorGateway:
    def __init__(
        self,
        backend: DetectorBackend,
        canon: CanonMap,
        *,
        entity_threshold: float = DEFAULT_THRESHOLD,
        relation_threshold: float | None = None,
        strict: bool = False,
        max_in_flight: int = 4,
    ):
        self.backend = backend
        self.canon = canon
        self.entity_threshold = entity_threshold
        self.relation_threshold = entity_threshold if relation_threshold is None else relation_threshold
        self.strict = strict
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def detect(self, image_ref: str | Path) -> DetectionResult:
        with self._slots:
            payload = self.backend.raw_detect(Path(image_ref))
        return parse_detections(
            payload,
            self.canon,
            image_ref,
            entity_threshold=self.entity_threshold,
            relation_threshold=self.relation_threshold,
            strict=self.strict,
        )
