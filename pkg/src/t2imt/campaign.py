"""End-to-end test campaigns: seeds -> mutations -> prompts -> images -> detections -> verdicts.

A campaign is a grid of cells ``(seed, test set, backend)``. Test sets are
``ORIG`` (the seed caption itself) plus one per mutation operator. Every cell
ends in exactly one of ``completed``, ``inapplicable`` (operator
precondition not met) or ``failed`` (stage error, recorded and skipped).

Run directory layout::

    manifest.jsonl        append-only event log
    prompts/<cell>.json   prompts and mutation records
    images/               content-addressed images (+ sidecars, request index)
    detections/<image>.json  raw detector payloads
    cells/<cell>.json     per-cell evaluation (verdict, miss counts, density)
    verdicts/verdicts.jsonl
    report.json, report.csv, report.md
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

from .detection import (
    DEFAULT_THRESHOLD,
    DetectionResult,
    DetectorBackend,
    DetectorGateway,
    FixtureDetector,
    HttpDetector,
    SidecarDetector,
    parse_detections,
)
from .er import CanonMap, ERPool, Seed, load_canon_map, load_seed_corpus
from .errors import ConfigError, IncompleteRun, MutationInapplicable, T2IMTError
from .generation import (
    AdapterConfig,
    GeneratorBackend,
    GeneratorGateway,
    GenRequest,
    HttpBackend,
    RetryPolicy,
    SimulatorBackend,
    SimulatorConfig,
    sha256_bytes,
    sha256_file,
)
from .mr import MRCase, check, miss_counts
from .mutation import (
    ALL_OPERATORS,
    ORIG,
    SS,
    CandidatePool,
    apply_operator,
    build_candidate_pool,
    load_candidate_pool,
    load_lexicon,
    mutate_ss_record,
)
from .synth import TemplateSet, load_templates, render

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
TEST_SETS = (ORIG,) + ALL_OPERATORS
COMPLETED, INAPPLICABLE, FAILED = "completed", "inapplicable", "failed"
TERMINAL = (COMPLETED, INAPPLICABLE, FAILED)

# keys that may change between an interrupted run and its resumption
_RUNTIME_KEYS = {"max_workers", "max_in_flight", "rate_per_sec", "retry", "output_dir"}


@dataclass(frozen=True)
class CampaignConfig:
    seeds: Path
    output_dir: Path
    registry: Path | None = None
    candidates: Path | None = None
    lexicon: Path | None = None
    templates: Path | None = None
    generators: tuple[dict, ...] = ({"id": "simulator", "kind": "simulator"},)
    detector: dict = field(default_factory=lambda: {"kind": "sidecar"})
    operators: tuple[str, ...] = TEST_SETS
    rng_seed: int = 0
    epsilon: float = 0.1
    image_size: int = 512
    entity_threshold: float = DEFAULT_THRESHOLD
    relation_threshold: float | None = None
    weighted_ec: bool = True
    max_workers: int = 4
    max_in_flight: int = 4
    rate_per_sec: float | None = None
    retry: dict = field(default_factory=dict)
    quality_dir: Path | None = None

    def snapshot(self) -> dict:
        out: dict[str, Any] = {"version": CONFIG_VERSION}
        for k, v in asdict(self).items():
            if isinstance(v, Path):
                v = str(v)
            elif isinstance(v, tuple):
                v = list(v)
            out[k] = v
        return out

    def fingerprint(self) -> str:
        snap = {k: v for k, v in self.snapshot().items() if k not in _RUNTIME_KEYS}
        return hashlib.sha256(json.dumps(snap, sort_keys=True).encode("utf-8")).hexdigest()


_PATH_KEYS = ("seeds", "registry", "candidates", "lexicon", "templates", "quality_dir")
_FIELDS = set(CampaignConfig.__dataclass_fields__) | {"version"}


def validate_config(data: Mapping[str, Any], base_dir: str | Path = ".") -> list[str]:
    """Schema and cross-field checks on a raw config mapping; returns every problem found."""
    errors: list[str] = []
    base = Path(base_dir)
    if not isinstance(data, Mapping):
        return ["config must be a JSON object"]
    unknown = sorted(set(data) - _FIELDS)
    if unknown:
        errors.append(f"unknown config keys: {unknown}")
    if data.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        errors.append(f"unsupported config version {data.get('version')!r} (expected {CONFIG_VERSION})")
    if "seeds" not in data:
        errors.append("'seeds' (seed corpus path) is required")
    if "output_dir" not in data:
        errors.append("'output_dir' is required")
    for key in _PATH_KEYS:
        value = data.get(key)
        if value is None:
            continue
        if not isinstance(value, str) or not value:
            errors.append(f"'{key}' must be a path string")
        elif not (base / value).exists():
            errors.append(f"'{key}' path does not exist: {base / value}")

    ops = data.get("operators", list(TEST_SETS))
    if not isinstance(ops, list) or not ops:
        errors.append("'operators' must be a non-empty list")
    else:
        bad = [op for op in ops if op not in TEST_SETS]
        if bad:
            errors.append(f"unknown operators {bad}; choose from {list(TEST_SETS)}")
        if len(set(ops)) != len(ops):
            errors.append("'operators' contains duplicates")

    gens = data.get("generators", [{"id": "simulator", "kind": "simulator"}])
    if not isinstance(gens, list) or not gens:
        errors.append("'generators' must be a non-empty list")
        gens = []
    ids = []
    for i, g in enumerate(gens):
        if not isinstance(g, Mapping) or not isinstance(g.get("id"), str) or not g.get("id"):
            errors.append(f"generator #{i} needs a string 'id'")
            continue
        ids.append(g["id"])
        kind = g.get("kind")
        if kind == "simulator":
            try:
                SimulatorConfig(**{k: g[k] for k in ("p_drop_entity", "p_drop_relation", "p_swap_relation", "rng_seed") if k in g})
            except (T2IMTError, TypeError) as exc:
                errors.append(f"generator {g['id']!r}: {exc}")
        elif kind == "http":
            try:
                AdapterConfig.from_dict({"backend_id": g["id"], **{k: v for k, v in g.items() if k not in ("id", "kind")}})
            except (T2IMTError, TypeError) as exc:
                errors.append(f"generator {g['id']!r}: {exc}")
            if not g.get("endpoint"):
                errors.append(f"generator {g['id']!r}: http backend needs an 'endpoint'")
        else:
            errors.append(f"generator {g['id']!r}: unknown kind {kind!r} (simulator | http)")
    if len(set(ids)) != len(ids):
        errors.append("generator ids must be unique")

    det = data.get("detector", {"kind": "sidecar"})
    if not isinstance(det, Mapping):
        errors.append("'detector' must be an object")
    else:
        kind = det.get("kind")
        if kind == "fixture":
            if not det.get("dir") or not (base / det["dir"]).is_dir():
                errors.append("fixture detector needs an existing 'dir'")
        elif kind == "http":
            if not det.get("endpoint"):
                errors.append("http detector needs an 'endpoint'")
        elif kind != "sidecar":
            errors.append(f"unknown detector kind {kind!r} (sidecar | fixture | http)")

    eps = data.get("epsilon", 0.1)
    if not isinstance(eps, (int, float)) or isinstance(eps, bool) or eps < 0:
        errors.append(f"'epsilon' must be a non-negative number, got {eps!r}")
    for key in ("entity_threshold", "relation_threshold"):
        v = data.get(key)
        if v is not None and (not isinstance(v, (int, float)) or not 0 <= v <= 1):
            errors.append(f"'{key}' must lie in [0, 1], got {v!r}")
    for key in ("max_workers", "max_in_flight", "image_size"):
        v = data.get(key)
        if v is not None and (not isinstance(v, int) or isinstance(v, bool) or v < 1):
            errors.append(f"'{key}' must be a positive integer, got {v!r}")
    if not isinstance(data.get("rng_seed", 0), int):
        errors.append("'rng_seed' must be an integer")
    rate = data.get("rate_per_sec")
    if rate is not None and (not isinstance(rate, (int, float)) or rate <= 0):
        errors.append("'rate_per_sec' must be positive")
    retry = data.get("retry", {})
    if not isinstance(retry, Mapping) or set(retry) - {"max_attempts", "base_delay", "max_delay"}:
        errors.append("'retry' accepts only max_attempts, base_delay, max_delay")
    return errors


def config_from_dict(data: Mapping[str, Any], base_dir: str | Path = ".") -> CampaignConfig:
    errors = validate_config(data, base_dir)
    if errors:
        raise ConfigError(errors)
    base = Path(base_dir)
    kw: dict[str, Any] = {k: v for k, v in data.items() if k != "version"}
    for key in _PATH_KEYS + ("output_dir",):
        if kw.get(key) is not None:
            kw[key] = (base / kw[key]).resolve()
    if kw.get("detector", {}).get("dir"):
        kw["detector"] = {**kw["detector"], "dir": str((base / kw["detector"]["dir"]).resolve())}
    for key in ("generators", "operators"):
        if key in kw:
            kw[key] = tuple(kw[key])
    return CampaignConfig(**kw)


def load_config(path: str | Path) -> CampaignConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from None
    except ValueError as exc:
        raise ConfigError([f"config {path} is not valid JSON: {exc}"]) from None
    return config_from_dict(data, path.parent)


# --- manifest ---------------------------------------------------------------

def cell_id(seed_id: str, operator: str, backend: str) -> str:
    return f"{seed_id}|{operator}|{backend}"


_UNSAFE = re.compile(r"[^A-Za-z0-9._+-]+")


def cell_filename(cid: str) -> str:
    readable = _UNSAFE.sub("_", cid.replace("|", "__"))[:80]
    return f"{readable}-{hashlib.sha256(cid.encode('utf-8')).hexdigest()[:8]}.json"


class RunManifest:
    """Append-only JSONL event log of a run directory; writes are serialized."""

    def __init__(self, run_dir: str | Path):
        self.run_dir = Path(run_dir)
        self.path = self.run_dir / "manifest.jsonl"
        self._lock = threading.Lock()
        self.events: list[dict] = []
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        try:
                            self.events.append(json.loads(line))
                        except ValueError:
                            logger.warning("skipping torn manifest line in %s", self.path)

    def append(self, event: dict) -> None:
        with self._lock:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(event, sort_keys=True) + "\n")
                fh.flush()
            self.events.append(event)

    @property
    def start(self) -> dict | None:
        starts = [e for e in self.events if e.get("event") == "start"]
        return starts[-1] if starts else None

    def cells(self) -> dict[str, dict]:
        """Latest terminal event per cell."""
        out: dict[str, dict] = {}
        for e in self.events:
            if e.get("event") == "cell":
                out[e["cell"]] = e
        return out

    def expected_cells(self) -> list[tuple[str, str, str]]:
        start = self.start
        if not start:
            return []
        plan = start["plan"]
        return [(s, op, b) for s in plan["seeds"] for op in plan["operators"] for b in plan["backends"]]

    def verify(self, event: dict) -> bool:
        """True when every artifact recorded for a cell exists with its recorded hash."""
        for rel, digest in event.get("artifacts", {}).items():
            path = self.run_dir / rel
            if not path.exists() or sha256_file(path) != digest:
                return False
        return True


# --- campaign execution --------------------------------------------------------

def cell_rng_seed(rng_seed: int, seed_id: str, operator: str) -> int:
    digest = hashlib.sha256(f"{rng_seed}|{seed_id}|{operator}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _write_json(path: Path, data: Any) -> str:
    blob = (json.dumps(data, sort_keys=True, indent=1) + "\n").encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{threading.get_ident()}.tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return sha256_bytes(blob)


def _packaged_digest(name: str) -> str:
    return sha256_bytes(resources.files("t2imt.data").joinpath(name).read_bytes())


@dataclass
class Campaign:
    """Everything a run needs, resolved from a config (or injected by tests)."""

    config: CampaignConfig
    canon: CanonMap
    seeds: list[Seed]
    candidates: CandidatePool
    lexicon: dict[str, list[str]]
    templates: TemplateSet
    gateway: GeneratorGateway
    detector: DetectorGateway
    manifest: RunManifest
    backends: list[str]
    _detect_lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def run_dir(self) -> Path:
        return self.config.output_dir

    # -- stages --

    def _rel(self, path: Path) -> str:
        return Path(path).resolve().relative_to(self.run_dir.resolve()).as_posix()

    def _image_and_detection(self, prompt: str, backend: str, artifacts: dict) -> tuple[str, DetectionResult]:
        size = self.config.image_size
        res = self.gateway.generate(GenRequest(prompt, backend, size, size))
        artifacts[self._rel(res.image_ref)] = res.image_ref.stem
        if res.sidecar_ref is not None:
            artifacts[self._rel(res.sidecar_ref)] = sha256_file(res.sidecar_ref)
        det_path = self.run_dir / "detections" / f"{res.image_ref.stem}.{self.detector.backend.backend_id}.json"
        with self._detect_lock:
            cached = det_path.exists()
        if cached:
            payload = json.loads(det_path.read_text(encoding="utf-8"))
        else:
            payload = self.detector.backend.raw_detect(res.image_ref)
            _write_json(det_path, payload)
        artifacts[self._rel(det_path)] = sha256_file(det_path)
        det = parse_detections(
            payload,
            self.canon,
            self._rel(res.image_ref),
            entity_threshold=self.detector.entity_threshold,
            relation_threshold=self.detector.relation_threshold,
            strict=self.detector.strict,
        )
        return self._rel(res.image_ref), det

    def run_cell(self, seed: Seed, operator: str, backend: str) -> dict:
        cid = cell_id(seed.id, operator, backend)
        rng = cell_rng_seed(self.config.rng_seed, seed.id, operator)
        artifacts: dict[str, str] = {}
        records = []
        verdict = None
        seed_det = None
        images: dict[str, str] = {}
        if operator == ORIG:
            input_pool: ERPool = seed.pool
            prompts = {"follow": seed.caption}
        elif operator == SS:
            record, text = mutate_ss_record(seed.pool, seed.caption, self.lexicon, rng)
            records = [record]
            input_pool = seed.pool
            prompts = {"follow": text}
        else:
            records = apply_operator(operator, seed.pool, self.candidates, rng, weighted=self.config.weighted_ec)
            last = records[-1]
            input_pool = last.follow_pool
            prompts = {"seed": render(last.seed_pool, self.templates), "follow": render(last.follow_pool, self.templates)}

        prompt_file = self.run_dir / "prompts" / cell_filename(cid)
        artifacts[self._rel(prompt_file)] = _write_json(
            prompt_file, {"cell": cid, "prompts": prompts, "records": [r.to_dict() for r in records]}
        )
        if "seed" in prompts:
            images["seed"], seed_det = self._image_and_detection(prompts["seed"], backend, artifacts)
        images["follow"], follow_det = self._image_and_detection(prompts["follow"], backend, artifacts)
        if records:
            verdict = check(MRCase(records[-1], seed_det, follow_det)).to_record(cid, operator)
        miss = miss_counts(input_pool, follow_det)
        score = None if miss.total_e == 0 else miss.hit_e / miss.total_e
        cell = {
            "cell": cid,
            "seed": seed.id,
            "operator": operator,
            "backend": backend,
            "rng_seed": rng,
            "level": input_pool.density,
            "score": score,
            "prompts": prompts,
            "images": images,
            "detections": {
                k: d.to_dict() for k, d in (("seed", seed_det), ("follow", follow_det)) if d is not None
            },
            "verdict": verdict,
            "miss": asdict(miss),
        }
        cell_file = self.run_dir / "cells" / cell_filename(cid)
        artifacts[self._rel(cell_file)] = _write_json(cell_file, cell)
        return {"artifacts": artifacts}

    def _execute(self, seed: Seed, operator: str, backend: str) -> dict:
        cid = cell_id(seed.id, operator, backend)
        event: dict[str, Any] = {"event": "cell", "cell": cid, "seed": seed.id, "operator": operator, "backend": backend}
        try:
            out = self.run_cell(seed, operator, backend)
        except MutationInapplicable as exc:
            event.update(status=INAPPLICABLE, reason=f"{type(exc).__name__}: {exc}")
        except Exception as exc:  # per-cell isolation: record and move on
            logger.warning("cell %s failed: %s: %s", cid, type(exc).__name__, exc)
            event.update(status=FAILED, error=f"{type(exc).__name__}: {exc}")
        else:
            event.update(status=COMPLETED, artifacts=out["artifacts"])
        self.manifest.append(event)
        return event

    def pending(self) -> list[tuple[Seed, str, str]]:
        done = self.manifest.cells()
        todo = []
        for seed in self.seeds:
            for op in self.config.operators:
                for b in self.backends:
                    prev = done.get(cell_id(seed.id, op, b))
                    if prev is not None and prev["status"] == INAPPLICABLE:
                        continue
                    if prev is not None and prev["status"] == COMPLETED and self.manifest.verify(prev):
                        continue
                    todo.append((seed, op, b))
        return todo

    def execute(self) -> list[dict]:
        todo = self.pending()
        logger.info("%d of %d cells pending", len(todo), len(self.seeds) * len(self.config.operators) * len(self.backends))
        if self.config.max_workers <= 1:
            return [self._execute(*cell) for cell in todo]
        pool = ThreadPoolExecutor(max_workers=self.config.max_workers)
        try:
            futures = [pool.submit(self._execute, *cell) for cell in todo]
            return [f.result() for f in futures]
        finally:
            pool.shutdown(wait=True, cancel_futures=True)


def _build_generators(config: CampaignConfig, canon: CanonMap) -> list[GeneratorBackend]:
    out: list[GeneratorBackend] = []
    for g in config.generators:
        if g["kind"] == "simulator":
            cfg = SimulatorConfig(**{k: g[k] for k in ("p_drop_entity", "p_drop_relation", "p_swap_relation", "rng_seed") if k in g})
            out.append(SimulatorBackend(canon, cfg, g["id"]))
        else:
            out.append(HttpBackend(AdapterConfig.from_dict({"backend_id": g["id"], **{k: v for k, v in g.items() if k not in ("id", "kind")}})))
    return out


def _build_detector(config: CampaignConfig) -> DetectorBackend:
    det = config.detector
    if det["kind"] == "fixture":
        return FixtureDetector(det["dir"])
    if det["kind"] == "http":
        return HttpDetector(det["endpoint"], send_image=bool(det.get("send_image", False)))
    return SidecarDetector()


def prepare(
    config: CampaignConfig,
    *,
    generators: Sequence[GeneratorBackend] | None = None,
    detector: DetectorBackend | None = None,
) -> Campaign:
    """Load every input and wire the gateways; no backend is contacted yet."""
    canon = load_canon_map(config.registry)
    seeds = load_seed_corpus(config.seeds, canon)
    cands = load_candidate_pool(config.candidates, canon) if config.candidates else build_candidate_pool(s.pool for s in seeds)
    lexicon = load_lexicon(config.lexicon)
    templates = load_templates(config.templates)
    gens = list(generators) if generators is not None else _build_generators(config, canon)
    gateway = GeneratorGateway(
        config.output_dir,
        retry=RetryPolicy(**config.retry),
        max_in_flight=config.max_in_flight,
        rate_per_sec=config.rate_per_sec,
    )
    for g in gens:
        gateway.register(g)
    det_gateway = DetectorGateway(
        detector or _build_detector(config),
        canon,
        entity_threshold=config.entity_threshold,
        relation_threshold=config.relation_threshold,
        max_in_flight=config.max_in_flight,
    )
    return Campaign(config, canon, seeds, cands, lexicon, templates, gateway, det_gateway,
                    RunManifest(config.output_dir), [g.backend_id for g in gens])


def input_digests(config: CampaignConfig) -> dict[str, str]:
    return {
        "seeds": sha256_file(config.seeds),
        "registry": sha256_file(config.registry) if config.registry else _packaged_digest("registry_v1.json"),
        "candidates": sha256_file(config.candidates) if config.candidates else "derived",
        "lexicon": sha256_file(config.lexicon) if config.lexicon else _packaged_digest("synonyms_v1.json"),
        "templates": sha256_file(config.templates) if config.templates else _packaged_digest("templates_v1.json"),
    }


@dataclass
class RunOutcome:
    manifest: RunManifest
    report: Any
    generator_calls: int
    complete: bool


def run(
    config: CampaignConfig,
    *,
    generators: Sequence[GeneratorBackend] | None = None,
    detector: DetectorBackend | None = None,
) -> RunOutcome:
    """Execute (or resume) a campaign and write verdicts and reports."""
    from .report import build_report, write_report

    camp = prepare(config, generators=generators, detector=detector)
    previous = camp.manifest.start
    if previous is not None and previous.get("fingerprint") != config.fingerprint():
        raise ConfigError([f"{config.output_dir} holds a run with a different configuration; use a fresh output_dir"])
    camp.manifest.append({
        "event": "start",
        "resumed": previous is not None,
        "time": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "config": config.snapshot(),
        "fingerprint": config.fingerprint(),
        "inputs": input_digests(config),
        "plan": {"seeds": [s.id for s in camp.seeds], "operators": list(config.operators), "backends": camp.backends},
    })
    events = camp.execute()
    counts = {s: sum(e["status"] == s for e in camp.manifest.cells().values()) for s in TERMINAL}
    camp.manifest.append({"event": "finish", "counts": counts, "new_cells": len(events),
                          "generator_calls": dict(camp.gateway.calls)})
    write_verdicts(camp.manifest)
    try:
        report = build_report(config.output_dir)
        complete = counts[FAILED] == 0
    except IncompleteRun as exc:
        report, complete = exc.report, False
    write_report(report, config.output_dir)
    return RunOutcome(camp.manifest, report, sum(camp.gateway.calls.values()), complete)


def write_verdicts(manifest: RunManifest) -> Path:
    """Collect per-cell verdicts into one file, sorted by case id."""
    rows = []
    for cid, event in sorted(manifest.cells().items()):
        if event["status"] != COMPLETED:
            continue
        cell = json.loads((manifest.run_dir / "cells" / cell_filename(cid)).read_text(encoding="utf-8"))
        if cell.get("verdict") is not None:
            rows.append(cell["verdict"])
    path = manifest.run_dir / "verdicts" / "verdicts.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path
