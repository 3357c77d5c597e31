"""Prompt builders and chat-completion transports for teacher and judge models.

Every model call goes through a :class:`Transport`. The replay transport
answers from a fixture directory keyed by request digest, so pipelines run
offline and byte-for-byte reproducibly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import httpx

from .core import BBox, Region, RelationCategory, SceneGraph
from .defaults import (
    GENERATION_TEMPERATURE,
    GENERATION_TOP_P,
    JUDGE_TEMPERATURE,
    MIN_SUBJECTS,
)
from .geometry import normalize_box, union_box
from .sgtext import SgTextError, extract_object_literal, region_listing

log = logging.getLogger(__name__)

JUDGE_QUESTION = "Does this relation correctly describe the image? Answer with Yes or No."


@lru_cache(maxsize=None)
def system_template(name: str) -> str:
    """Load a bundled system prompt (``relation`` or ``edit``)."""
    path = resources.files("sgengine").joinpath(f"data/prompts/{name}_system.txt")
    return path.read_text(encoding="utf-8")


@dataclass(frozen=True, slots=True)
class ChatRequest:
    system_prompt: str
    user_prompt: str
    image_refs: tuple[str, ...] = ()
    temperature: float = GENERATION_TEMPERATURE
    top_p: float = GENERATION_TOP_P
    max_tokens: int = 2048

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be positive, got {self.max_tokens}")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["image_refs"] = list(self.image_refs)
        return d

    @property
    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False,
                             separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# transports


class TransportError(RuntimeError):
    retryable = True


class TransientTransportError(TransportError):
    retryable = True


class NonRetryableTransportError(TransportError):
    retryable = False


class ReplayMissError(NonRetryableTransportError):
    """The replay fixture directory has no response for this request."""


class RetryExhaustedError(TransportError):
    retryable = False

    def __init__(self, attempts: int, last_error: BaseException):
        super().__init__(f"gave up after {attempts} attempt(s): {last_error}")
        self.attempts = attempts
        self.last_error = last_error


class Transport(Protocol):
    def send(self, request: ChatRequest) -> str: ...


class ReplayTransport:
    """Serve canned responses from ``<fixtures>/<request digest>.txt``."""

    def __init__(self, fixture_dir: str | Path):
        self.fixture_dir = Path(fixture_dir)
        self.calls = 0
        self._lock = threading.Lock()

    def path_for(self, request: ChatRequest) -> Path:
        return self.fixture_dir / f"{request.digest}.txt"

    def send(self, request: ChatRequest) -> str:
        with self._lock:
            self.calls += 1
        path = self.path_for(request)
        try:
            return path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise ReplayMissError(f"no replay fixture {path.name} in {self.fixture_dir}") from None


class CachingTransport:
    """Wrap a transport with an on-disk response cache keyed by request digest.

    The cache directory uses the replay layout, so a populated cache can be
    served later by :class:`ReplayTransport`.
    """

    def __init__(self, inner: Transport, cache_dir: str | Path):
        self.inner = inner
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def send(self, request: ChatRequest) -> str:
        path = self.cache_dir / f"{request.digest}.txt"
        if path.exists():
            with self._lock:
                self.hits += 1
            return path.read_text(encoding="utf-8")
        text = self.inner.send(request)
        with self._lock:
            self.misses += 1
        tmp = path.with_suffix(f".tmp{threading.get_ident()}")
        tmp.write_text(text, encoding="utf-8")
        tmp.replace(path)
        return text


class ScriptedTransport:
    """Return (or raise) scripted outcomes in order; the last one repeats."""

    def __init__(self, outcomes: Sequence[str | BaseException]):
        if not outcomes:
            raise ValueError("ScriptedTransport needs at least one outcome")
        self.outcomes = list(outcomes)
        self.calls = 0
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()

    def send(self, request: ChatRequest) -> str:
        with self._lock:
            idx = min(self.calls, len(self.outcomes) - 1)
            self.calls += 1
            self.requests.append(request)
        outcome = self.outcomes[idx]
        if isinstance(outcome, BaseException):
            raise outcome
        return outcome


class ResponderTransport:
    """Answer each request with ``responder(request)``; used to author fixtures."""

    def __init__(self, responder: Callable[[ChatRequest], str]):
        self.responder = responder
        self.calls = 0

    def send(self, request: ChatRequest) -> str:
        self.calls += 1
        return self.responder(request)


class BoundedTransport:
    """Cap the number of concurrent in-flight sends on ``inner``."""

    def __init__(self, inner: Transport, max_in_flight: int = 4):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.inner = inner
        self._sem = threading.BoundedSemaphore(max_in_flight)

    def send(self, request: ChatRequest) -> str:
        with self._sem:
            return self.inner.send(request)


_NON_RETRYABLE_STATUS = {400, 401, 403, 404, 405, 413, 422}


class RemoteTransport:
    """Chat-completions client over HTTP.

    Sends ``POST {endpoint}/chat/completions`` with an OpenAI-style body;
    image refs become ``image_url`` content parts. Authorization and
    malformed-request statuses raise :class:`NonRetryableTransportError`,
    throttling, timeouts and server errors raise
    :class:`TransientTransportError`.
    """

    def __init__(self, endpoint: str, model: str, api_key: str | None = None,
                 timeout: float = 60.0, client: httpx.Client | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.client = client or httpx.Client(timeout=timeout)

    def payload(self, request: ChatRequest) -> dict[str, Any]:
        content: list[dict[str, Any]] = [{"type": "text", "text": request.user_prompt}]
        content += [{"type": "image_url", "image_url": {"url": ref}} for ref in request.image_refs]
        messages = []
        if request.system_prompt:
            messages.append({"role": "system", "content": request.system_prompt})
        messages.append({"role": "user", "content": content})
        return {
            "model": self.model,
            "messages": messages,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        }

    def send(self, request: ChatRequest) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self.client.post(f"{self.endpoint}/chat/completions",
                                    json=self.payload(request), headers=headers)
        except httpx.TimeoutException as exc:
            raise TransientTransportError(f"timeout: {exc}") from exc
        except httpx.TransportError as exc:
            raise TransientTransportError(f"connection error: {exc}") from exc
        if resp.status_code in _NON_RETRYABLE_STATUS:
            raise NonRetryableTransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code >= 400:
            raise TransientTransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            content = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransientTransportError(f"unexpected response body: {resp.text[:200]}") from exc
        if isinstance(content, list):
            content = "".join(part.get("text", "") for part in content if isinstance(part, dict))
        return content or ""


# ---------------------------------------------------------------------------
# retries


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_delay: float = 0.5
    multiplier: float = 2.0
    max_delay: float = 8.0
    jitter: float = 0.25

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    def delay(self, attempt: int, rng: random.Random) -> float:
        """Sleep before retry number ``attempt`` (1-based)."""
        base = min(self.base_delay * self.multiplier ** (attempt - 1), self.max_delay)
        return base * (1 + self.jitter * rng.random())


def call_with_retry(
    transport: Transport,
    request: ChatRequest,
    policy: RetryPolicy | None = None,
    sleep: Callable[[float], None] = time.sleep,
    rng: random.Random | None = None,
) -> str:
    policy = policy or RetryPolicy()
    rng = rng or random.Random()
    last: BaseException | None = None
    for attempt in range(1, policy.max_attempts + 1):
        try:
            return transport.send(request)
        except TransportError as exc:
            if not exc.retryable:
                raise
            last = exc
        except (OSError, TimeoutError) as exc:
            last = exc
        log.warning("attempt %d/%d failed: %s", attempt, policy.max_attempts, last)
        if attempt < policy.max_attempts:
            sleep(policy.delay(attempt, rng))
    raise RetryExhaustedError(policy.max_attempts, last)


def send_all(
    transport: Transport,
    requests: Sequence[ChatRequest],
    policy: RetryPolicy | None = None,
    max_workers: int = 4,
    sleep: Callable[[float], None] = time.sleep,
) -> list[str]:
    """Send requests concurrently; results come back in request order."""
    if max_workers <= 1 or len(requests) <= 1:
        return [call_with_retry(transport, r, policy, sleep) for r in requests]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda r: call_with_retry(transport, r, policy, sleep), requests))


@dataclass
class TransportConfig:
    transport: Transport
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    name: str = "default"


def load_transport(config: str | Path | Mapping[str, Any], name: str | None = None,
                   base_dir: str | Path | None = None) -> TransportConfig:
    """Build a transport from a config file or mapping.

    Keys: ``kind`` (``replay`` or ``remote``); ``fixtures`` for replay;
    ``endpoint``, ``model``, ``api_key_env``, ``timeout`` for remote;
    optional ``cache`` directory, ``max_in_flight`` and ``retry`` settings.
    Relative paths resolve against the config file's directory.
    """
    if isinstance(config, (str, Path)):
        path = Path(config)
        data = json.loads(path.read_text(encoding="utf-8"))
        base = Path(base_dir) if base_dir else path.parent
    else:
        data = dict(config)
        base = Path(base_dir) if base_dir else Path.cwd()

    def resolve(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else base / q

    kind = data.get("kind", "replay")
    if kind == "replay":
        if "fixtures" not in data:
            raise ValueError("replay transport needs a 'fixtures' directory")
        transport: Transport = ReplayTransport(resolve(data["fixtures"]))
    elif kind == "remote":
        missing = [k for k in ("endpoint", "model") if k not in data]
        if missing:
            raise ValueError(f"remote transport config missing {missing}")
        key_env = data.get("api_key_env", "OPENAI_API_KEY")
        transport = RemoteTransport(data["endpoint"], data["model"], os.environ.get(key_env),
                                    timeout=float(data.get("timeout", 60.0)))
    else:
        raise ValueError(f"unknown transport kind {kind!r}")
    if data.get("cache"):
        transport = CachingTransport(transport, resolve(data["cache"]))
    if data.get("max_in_flight"):
        transport = BoundedTransport(transport, int(data["max_in_flight"]))
    retry = RetryPolicy(**data.get("retry", {}))
    return TransportConfig(transport, retry, name or data.get("name", kind))


# ---------------------------------------------------------------------------
# prompt builders


def _norm_list(region: Region, graph: SceneGraph) -> str:
    if region.bbox is None:
        return "[]"
    nb = normalize_box(region.bbox, graph.image_width, graph.image_height)
    return f"[{nb.x1},{nb.y1},{nb.x2},{nb.y2}]"


def _section(title: str, lines: Iterable[str]) -> str:
    body = "\n".join(lines)
    return f"[{title}]\n{body}" if body else f"[{title}]"


RESPONSE_FORMAT = (
    'Respond with one JSON object: {"subjects": [{"id": <object_id>, '
    '"description": "<dense description>", "relations": {"spatial": '
    '[["<relation>", <object_id>], ...], "interactional": [...], "functional": [...], '
    '"social": [...], "emotional": [...]}}]}'
)


def build_relation_prompt(
    graph: SceneGraph,
    captions: Sequence[str] = (),
    region_captions: Sequence[str] = (),
    qas: Sequence[str] = (),
    min_subjects: int = MIN_SUBJECTS,
) -> ChatRequest:
    regions = graph.region_map()
    objects = [f"{r.id}: {_norm_list(r, graph)} {r.name}" for r in graph.regions]
    rels_by_subject: dict[int, list[str]] = {}
    for rel in graph.relations:
        rels_by_subject.setdefault(rel.subject_id, []).append(f"{rel.predicate} {rel.object_id}")
    scene = []
    for r in graph.regions:
        loc = _norm_list(r, graph)
        if r.depth is not None:
            loc += f", depth {r.depth}"
        scene.append(f"{r.id}: ({loc}) [] {r.name} [{'; '.join(rels_by_subject.get(r.id, []))}]")
    user = "\n\n".join([
        _section("Captions", (f"- {c}" for c in captions)),
        _section("Region Captions", (f"- {c}" for c in region_captions)),
        _section("Objects", objects),
        _section("Scene Graph", scene),
        _section("QAs", (f"- {q}" for q in qas)),
        _section("Regions", [region_listing(graph)] if regions else []),
        f"Select at least {min_subjects} subjects among the objects above. For each subject, "
        "give its description and the list of its relationships with other objects, "
        "grouped by category.\n" + RESPONSE_FORMAT,
    ])
    return ChatRequest(system_template("relation"), user, (graph.image_id,),
                       GENERATION_TEMPERATURE, GENERATION_TOP_P, 4096)


def judge_crop_box(subject: Region, object: Region) -> BBox:
    if subject.bbox is None or object.bbox is None:
        raise ValueError("judge crops need boxes on both regions")
    return union_box(subject.bbox, object.bbox)


def crop_ref(image_id: str, box: BBox) -> str:
    return f"{image_id}#crop={box.x1:g},{box.y1:g},{box.x2:g},{box.y2:g}"


def build_judge_prompt(subject: Region, predicate: str, object: Region,
                       image_id: str = "") -> ChatRequest:
    phrase = f"{subject.name} {predicate} {object.name}"
    user = f'Relation: "{phrase}"\n{JUDGE_QUESTION}'
    if subject.bbox is None or object.bbox is None:
        refs: tuple[str, ...] = (image_id,)
    else:
        refs = (crop_ref(image_id, judge_crop_box(subject, object)),)
    return ChatRequest("", user, refs, JUDGE_TEMPERATURE, 1.0, 8)


def edit_prompt_graph(graph: SceneGraph) -> dict[str, dict[str, Any]]:
    """The object-dictionary shape the edit prompt describes."""
    out: dict[str, dict[str, Any]] = {}
    for r in graph.regions:
        entry: dict[str, Any] = {"name": r.name}
        if r.bbox is not None:
            entry["bbox"] = list(normalize_box(r.bbox, graph.image_width,
                                               graph.image_height).as_tuple())
        rel: dict[str, list[int]] = {}
        for x in graph.relations:
            if x.subject_id == r.id:
                rel.setdefault(x.predicate, []).append(x.object_id)
        entry["rel"] = rel
        out[str(r.id)] = entry
    return out


def build_edit_prompt(graph: SceneGraph, dense_caption: str) -> ChatRequest:
    scene = json.dumps(edit_prompt_graph(graph), ensure_ascii=False, separators=(",", ":"))
    user = f"Dense caption: {dense_caption}\nScene graph: {scene}"
    refs = (graph.image_id,) + tuple(f"{graph.image_id}#highlight={r.id}" for r in graph.regions)
    return ChatRequest(system_template("edit"), user, refs,
                       GENERATION_TEMPERATURE, GENERATION_TOP_P, 4096)


# ---------------------------------------------------------------------------
# teacher response parsing


@dataclass(frozen=True, slots=True)
class SubjectAnnotation:
    id: int
    description: str | None
    relations: tuple[tuple[str, int, RelationCategory | None], ...]


def _as_int(v: Any) -> int | None:
    if isinstance(v, bool):
        return None
    if isinstance(v, int):
        return v
    if isinstance(v, float) and v.is_integer():
        return int(v)
    if isinstance(v, str):
        s = v.strip().lower().removeprefix("region").removeprefix("obj_").strip()
        if s.isdigit():
            return int(s)
    return None


def _relation_items(value: Any, category: RelationCategory | None, notes: list[str]):
    if isinstance(value, Mapping):
        for pred, ids in value.items():
            for oid in ids if isinstance(ids, list) else [ids]:
                o = _as_int(oid)
                if o is None:
                    notes.append(f"ignored object id {oid!r}")
                else:
                    yield str(pred), o, category
        return
    if not isinstance(value, list):
        notes.append(f"ignored relation block {value!r}")
        return
    for item in value:
        if isinstance(item, (list, tuple)) and len(item) >= 2:
            o = _as_int(item[1])
            if o is None:
                notes.append(f"ignored relation {item!r}")
            else:
                yield str(item[0]), o, category
        elif isinstance(item, Mapping):
            pred = item.get("predicate") or item.get("relation")
            o = _as_int(item.get("object", item.get("object_id")))
            cat = category
            if item.get("category") is not None:
                try:
                    cat = RelationCategory.parse(item["category"])
                except ValueError:
                    notes.append(f"unknown category {item['category']!r}")
            if not pred or o is None:
                notes.append(f"ignored relation {item!r}")
            else:
                yield str(pred), o, cat
        else:
            notes.append(f"ignored relation {item!r}")


def parse_relation_response(text: str) -> tuple[list[SubjectAnnotation], list[str]]:
    """Decode a teacher's relation annotation into per-subject entries.

    Returns the annotations and a list of notes for anything skipped.
    """
    notes: list[str] = []
    try:
        obj = extract_object_literal(text)
    except SgTextError as exc:
        return [], [str(exc)]
    subjects = obj.get("subjects")
    if subjects is None:
        subjects = [dict(v, id=k) for k, v in obj.items() if isinstance(v, Mapping)]
    out: list[SubjectAnnotation] = []
    for entry in subjects if isinstance(subjects, list) else []:
        if not isinstance(entry, Mapping):
            notes.append(f"ignored subject entry {entry!r}")
            continue
        sid = _as_int(entry.get("id"))
        if sid is None:
            notes.append(f"subject without id: {entry!r}")
            continue
        desc = entry.get("description")
        rels_raw = entry.get("relations", {})
        items: list[tuple[str, int, RelationCategory | None]] = []
        if isinstance(rels_raw, Mapping):
            for cat_name, block in rels_raw.items():
                try:
                    cat = RelationCategory.parse(cat_name)
                except ValueError:
                    # e.g. "hierarchical": keep the relations, uncategorized
                    notes.append(f"subject {sid}: unknown category {cat_name!r}; kept uncategorized")
                    cat = None
                items.extend(_relation_items(block, cat, notes))
        else:
            items.extend(_relation_items(rels_raw, None, notes))
        out.append(SubjectAnnotation(sid, desc if isinstance(desc, str) and desc.strip()
                                     else None, tuple(items)))
    return out, notes
