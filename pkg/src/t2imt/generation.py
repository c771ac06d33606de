"""Text-to-image backends behind one retrying, rate-limited gateway.

Images are persisted content-addressed (``images/<sha256>.<ext>``) under the
run directory. A small index keyed by the request (backend, prompt, size,
seed) makes :meth:`GeneratorGateway.generate` idempotent: a request that was
already served is answered from disk without touching the backend.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import random
import struct
import threading
import time
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol

import httpx

from .er import CanonMap, build_pool, naive_extract
from .errors import (
    BackendError,
    BackendNotRegistered,
    BackendRejected,
    BackendTimeout,
    InvalidInput,
    PersistFailure,
    RateLimited,
    UnparseablePrompt,
)

logger = logging.getLogger(__name__)

DEFAULT_SIZE = 512


@dataclass(frozen=True)
class GenRequest:
    prompt: str
    backend_id: str
    width: int = DEFAULT_SIZE
    height: int = DEFAULT_SIZE
    request_seed: int | None = None

    def __post_init__(self) -> None:
        if not self.prompt or not self.prompt.strip():
            raise InvalidInput("prompt must be non-empty")
        if self.width <= 0 or self.height <= 0:
            raise InvalidInput(f"image size must be positive, got {self.width}x{self.height}")

    def cache_key(self) -> str:
        blob = json.dumps(
            [self.backend_id, self.prompt, self.width, self.height, self.request_seed],
            ensure_ascii=False,
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class RenderedImage:
    """Raw backend output: encoded image bytes plus an optional annotation."""

    data: bytes
    suffix: str = ".png"
    sidecar: dict | None = None


@dataclass(frozen=True)
class GenResult:
    image_ref: Path
    backend_id: str
    latency_ms: float
    attempt_count: int
    cached: bool = False
    sidecar_ref: Path | None = None


class GeneratorBackend(Protocol):
    backend_id: str

    def render(self, req: GenRequest) -> RenderedImage: ...


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def sniff_suffix(data: bytes) -> str:
    if data.startswith(b"\x89PNG\r\n\x1a\n"):
        return ".png"
    if data.startswith(b"\xff\xd8\xff"):
        return ".jpg"
    if data[:4] == b"RIFF" and data[8:12] == b"WEBP":
        return ".webp"
    return ".img"


# --- rate limiting and retries -------------------------------------------

class TokenBucket:
    """Thread-safe token bucket; ``acquire`` blocks until a token is free."""

    def __init__(
        self,
        rate: float,
        capacity: float | None = None,
        *,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if rate <= 0:
            raise InvalidInput("rate must be positive")
        self.rate = float(rate)
        self.capacity = float(capacity if capacity is not None else max(1.0, rate))
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            self._sleep(wait)


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 5
    base_delay: float = 0.5
    max_delay: float = 30.0

    def delay(self, attempt: int) -> float:
        return min(self.max_delay, self.base_delay * 2 ** (attempt - 1))


@dataclass
class _Lane:
    backend: GeneratorBackend
    slots: threading.BoundedSemaphore
    limiter: TokenBucket | None


class GeneratorGateway:
    """Uniform entry point for every registered generator backend."""

    def __init__(
        self,
        run_dir: str | Path,
        backends: Iterable[GeneratorBackend] = (),
        *,
        retry: RetryPolicy = RetryPolicy(),
        max_in_flight: int = 4,
        rate_per_sec: float | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.image_dir = Path(run_dir) / "images"
        self.index_dir = self.image_dir / "index"
        self.retry = retry
        self.max_in_flight = max_in_flight
        self.rate_per_sec = rate_per_sec
        self._sleep = sleep
        self._lanes: dict[str, _Lane] = {}
        self._key_locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()
        # successful backend invocations, per backend
        self.calls: Counter[str] = Counter()
        self.attempts: Counter[str] = Counter()
        for b in backends:
            self.register(b)

    def register(
        self,
        backend: GeneratorBackend,
        *,
        max_in_flight: int | None = None,
        rate_per_sec: float | None = None,
    ) -> None:
        rate = rate_per_sec if rate_per_sec is not None else self.rate_per_sec
        self._lanes[backend.backend_id] = _Lane(
            backend,
            threading.BoundedSemaphore(max_in_flight or self.max_in_flight),
            TokenBucket(rate, sleep=self._sleep) if rate else None,
        )

    @property
    def backend_ids(self) -> list[str]:
        return sorted(self._lanes)

    def _key_lock(self, key: str) -> threading.Lock:
        with self._guard:
            return self._key_locks.setdefault(key, threading.Lock())

    def lookup(self, req: GenRequest) -> GenResult | None:
        """Return the persisted result for ``req`` if it exists and verifies."""
        entry_path = self.index_dir / f"{req.cache_key()}.json"
        if not entry_path.exists():
            return None
        try:
            entry = json.loads(entry_path.read_text(encoding="utf-8"))
            image = self.image_dir / entry["image"]
            if sha256_file(image) != image.stem:
                logger.warning("cached image %s fails its hash check; regenerating", image)
                return None
            sidecar = self.image_dir / entry["sidecar"] if entry.get("sidecar") else None
            if sidecar is not None and not sidecar.exists():
                return None
        except (OSError, ValueError, KeyError):
            return None
        return GenResult(image, req.backend_id, 0.0, 0, cached=True, sidecar_ref=sidecar)

    def generate(self, req: GenRequest) -> GenResult:
        lane = self._lanes.get(req.backend_id)
        if lane is None:
            raise BackendNotRegistered(f"no backend registered as {req.backend_id!r}")
        with self._key_lock(req.cache_key()):
            cached = self.lookup(req)
            if cached is not None:
                return cached
            start = time.monotonic()
            rendered, attempts = self._call_with_retry(lane, req)
            latency = (time.monotonic() - start) * 1000.0
            return self._persist(req, rendered, latency, attempts)

    def _call_with_retry(self, lane: _Lane, req: GenRequest) -> tuple[RenderedImage, int]:
        last: BackendError | None = None
        for attempt in range(1, self.retry.max_attempts + 1):
            if lane.limiter is not None:
                lane.limiter.acquire()
            with self._guard:
                self.attempts[req.backend_id] += 1
            try:
                with lane.slots:
                    rendered = lane.backend.render(req)
            except BackendError as exc:
                last = exc
                if not exc.retryable or attempt == self.retry.max_attempts:
                    raise
                if isinstance(exc, RateLimited) and exc.retry_after is not None:
                    wait = exc.retry_after
                else:
                    wait = self.retry.delay(attempt)
                logger.info("%s attempt %d failed (%s); retrying in %.2fs", req.backend_id, attempt, exc, wait)
                self._sleep(wait)
                continue
            with self._guard:
                self.calls[req.backend_id] += 1
            return rendered, attempt
        raise last or BackendTimeout("no attempts made")

    def _persist(self, req: GenRequest, rendered: RenderedImage, latency: float, attempts: int) -> GenResult:
        digest = sha256_bytes(rendered.data)
        suffix = rendered.suffix or sniff_suffix(rendered.data)
        image = self.image_dir / f"{digest}{suffix}"
        sidecar = None
        try:
            self.index_dir.mkdir(parents=True, exist_ok=True)
            if not image.exists() or sha256_file(image) != digest:
                _atomic_write(image, rendered.data)
            if rendered.sidecar is not None:
                sidecar = self.image_dir / f"{digest}.json"
                if not sidecar.exists():
                    _atomic_write(sidecar, json.dumps(rendered.sidecar, sort_keys=True).encode("utf-8"))
            entry = {
                "image": image.name,
                "sidecar": sidecar.name if sidecar else None,
                "backend_id": req.backend_id,
                "prompt": req.prompt,
                "width": req.width,
                "height": req.height,
                "request_seed": req.request_seed,
            }
            _atomic_write(self.index_dir / f"{req.cache_key()}.json", json.dumps(entry, sort_keys=True).encode("utf-8"))
        except OSError as exc:
            raise PersistFailure(f"cannot persist image for {req.backend_id}: {exc}") from exc
        return GenResult(image, req.backend_id, latency, attempts, cached=False, sidecar_ref=sidecar)


# --- remote HTTP backend -------------------------------------------------

@dataclass(frozen=True)
class AdapterConfig:
    """Vendor quirks for the generic HTTP contract.

    ``field_map`` renames request fields (``prompt``, ``width``, ``height``,
    ``seed``); ``extra`` adds constant body fields.
    """

    backend_id: str
    endpoint: str
    api_key_env: str | None = None
    auth_header: str = "Authorization"
    auth_prefix: str = "Bearer "
    field_map: Mapping[str, str] = field(default_factory=dict)
    extra: Mapping[str, Any] = field(default_factory=dict)
    image_b64_field: str = "image_b64"
    image_url_field: str = "image_url"
    timeout: float = 120.0

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AdapterConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known - {"kind"}
        if unknown:
            raise InvalidInput(f"unknown adapter fields: {sorted(unknown)}")
        return cls(**{k: v for k, v in data.items() if k in known})


def _retry_after(value: str | None) -> float | None:
    if not value:
        return None
    try:
        return max(0.0, float(value))
    except ValueError:
        return None


class HttpBackend:
    """POST ``{prompt, width, height, seed?}``; expects ``{image_b64 | image_url}``."""

    def __init__(
        self,
        adapter: AdapterConfig,
        client: httpx.Client | None = None,
        env: Mapping[str, str] | None = None,
    ):
        self.adapter = adapter
        self.backend_id = adapter.backend_id
        self._client = client or httpx.Client(timeout=adapter.timeout)
        self._env = os.environ if env is None else env

    def _headers(self) -> dict[str, str]:
        a = self.adapter
        if not a.api_key_env:
            return {}
        key = self._env.get(a.api_key_env)
        if not key:
            raise BackendRejected(401, f"environment variable {a.api_key_env} is not set")
        return {a.auth_header: f"{a.auth_prefix}{key}"}

    def payload(self, req: GenRequest) -> dict[str, Any]:
        body: dict[str, Any] = {"prompt": req.prompt, "width": req.width, "height": req.height}
        if req.request_seed is not None:
            body["seed"] = req.request_seed
        fm = self.adapter.field_map
        out = {fm.get(k, k): v for k, v in body.items()}
        out.update(self.adapter.extra)
        return out

    def _send(self, method: str, url: str, **kw: Any) -> httpx.Response:
        try:
            resp = self._client.request(method, url, **kw)
        except httpx.TimeoutException as exc:
            raise BackendTimeout(f"{self.backend_id}: {exc}") from exc
        except httpx.TransportError as exc:
            raise BackendTimeout(f"{self.backend_id}: transport failure: {exc}") from exc
        if resp.status_code == 429:
            raise RateLimited(_retry_after(resp.headers.get("retry-after")), resp.text)
        if not 200 <= resp.status_code < 300:
            raise BackendRejected(resp.status_code, resp.text)
        return resp

    def render(self, req: GenRequest) -> RenderedImage:
        resp = self._send("POST", self.adapter.endpoint, json=self.payload(req), headers=self._headers())
        try:
            body = resp.json()
        except ValueError:
            raise BackendRejected(resp.status_code, resp.text) from None
        if not isinstance(body, dict):
            raise BackendRejected(resp.status_code, resp.text)
        if body.get(self.adapter.image_b64_field):
            try:
                data = base64.b64decode(body[self.adapter.image_b64_field], validate=True)
            except ValueError:
                raise BackendRejected(resp.status_code, "image_b64 is not valid base64") from None
        elif body.get(self.adapter.image_url_field):
            data = self._send("GET", body[self.adapter.image_url_field]).content
        else:
            raise BackendRejected(resp.status_code, f"response has neither image field: {resp.text}")
        return RenderedImage(data, sniff_suffix(data))


def load_adapters(path: str | Path) -> list[AdapterConfig]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    items = data.get("backends", data) if isinstance(data, dict) else data
    return [AdapterConfig.from_dict(item) for item in items]


# --- simulator -----------------------------------------------------------

@dataclass(frozen=True)
class SimulatorConfig:
    p_drop_entity: float = 0.0
    p_drop_relation: float = 0.0
    p_swap_relation: float = 0.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("p_drop_entity", "p_drop_relation", "p_swap_relation"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InvalidInput(f"{name} must lie in [0, 1], got {p}")
        if self.p_drop_relation + self.p_swap_relation > 1.0:
            raise InvalidInput("p_drop_relation + p_swap_relation must not exceed 1")


def _request_rng(cfg: SimulatorConfig, req: GenRequest) -> random.Random:
    blob = json.dumps([cfg.rng_seed, req.prompt, req.width, req.height, req.request_seed], ensure_ascii=False)
    return random.Random(int.from_bytes(hashlib.sha256(blob.encode("utf-8")).digest()[:8], "big"))


def simulate(req: GenRequest, cfg: SimulatorConfig, canon: CanonMap) -> dict:
    """Decide what a simulated image "shows" for ``req``.

    The prompt is parsed back into a pool; each entity class survives with
    probability ``1 - p_drop_entity``. A triple survives only if both its
    endpoints do, and then loses its predicate with ``p_drop_relation`` or
    has it swapped for another registered relation with ``p_swap_relation``.
    """
    pool = build_pool(req.prompt, naive_extract(req.prompt, canon), canon, strict=False)
    if pool.density == 0:
        raise UnparseablePrompt(f"no triple could be extracted from {req.prompt!r}")
    rng = _request_rng(cfg, req)
    kept = [e for e in sorted(pool.entity_set) if rng.random() >= cfg.p_drop_entity]
    alive = set(kept)
    relations: list[list[str]] = []
    others = canon.registry.relations
    for t in pool:
        if t.subject not in alive or t.object not in alive:
            continue
        u = rng.random()
        if u < cfg.p_drop_relation:
            continue
        pred = t.predicate
        if u < cfg.p_drop_relation + cfg.p_swap_relation and len(others) > 1:
            pred = rng.choice([r for r in others if r != t.predicate])
        row = [t.subject.label, pred.label, t.object.label]
        if row not in relations:
            relations.append(row)
    return {"entities": [e.label for e in kept], "relations": relations}


def placeholder_png(width: int, height: int, rgb: tuple[int, int, int], text: Mapping[str, str] = {}) -> bytes:
    """Solid-colour RGB PNG with optional ``tEXt`` chunks."""

    def chunk(tag: bytes, payload: bytes) -> bytes:
        return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", zlib.crc32(tag + payload))

    row = b"\x00" + bytes(rgb) * width
    raw = row * height
    ihdr = struct.pack(">IIBBBBB", width, height, 8, 2, 0, 0, 0)
    out = [b"\x89PNG\r\n\x1a\n", chunk(b"IHDR", ihdr)]
    for k, v in text.items():
        out.append(chunk(b"tEXt", k.encode("latin-1") + b"\x00" + v.encode("utf-8")))
    out += [chunk(b"IDAT", zlib.compress(raw, 9)), chunk(b"IEND", b"")]
    return b"".join(out)


class SimulatorBackend:
    """In-process stand-in for a T2I service with controllable faults."""

    def __init__(self, canon: CanonMap, cfg: SimulatorConfig = SimulatorConfig(), backend_id: str = "simulator"):
        self.canon = canon
        self.cfg = cfg
        self.backend_id = backend_id

    def render(self, req: GenRequest) -> RenderedImage:
        sidecar = simulate(req, self.cfg, self.canon)
        blob = json.dumps(sidecar, sort_keys=True)
        rgb = tuple(hashlib.sha256(blob.encode("utf-8")).digest()[:3])
        # the annotation is embedded so distinct scenes never share an image hash
        data = placeholder_png(req.width, req.height, rgb, {"t2imt-scene": blob})
        return RenderedImage(data, ".png", sidecar)
