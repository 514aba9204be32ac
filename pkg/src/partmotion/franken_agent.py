"""LLM-assisted decomposition of sequence/action annotations into part tracks.

A request carries the source sequence and action labels of one clip. The
request is rendered into a prompt, sent to a backend (a deterministic
rule-table mock or an OpenAI-compatible HTTP endpoint), and the reply is
parsed strictly: one JSON object, integer frame bounds in range, no overlaps,
source boundaries untouched. Parse failures are retried with the reason
appended to the prompt. Every attempt is written to a transcript.

:func:`gwet_ac1` computes the chance-corrected agreement of binary ratings.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import IO, Callable, Mapping, Protocol, Sequence

import numpy as np

from .annotation_schema import (
    UNKNOWN, UNKNOWN_TOKEN, HierarchicalAnnotation, PartId, TimedLabel, fill_unknown_gaps,
    normalize_label, tokenize,
)
from .errors import AgentError, AgentParseError, AnnotationError, TemplateError

PLACEHOLDERS = ("duration", "fps", "parts", "sequence", "actions", "schema")

RESPONSE_SCHEMA = json.dumps({
    "sequence": [{"label": "<text>", "start": 0, "end": "<num_frames>"}],
    "actions": [{"label": "<text>", "start": "<int>", "end": "<int>"}],
    "parts": {p.key: [{"label": "<text or unknown>", "start": "<int>", "end": "<int>"}] for p in PartId},
}, indent=2)


def _resource(name: str) -> str:
    return resources.files("partmotion").joinpath("resources", name).read_text()


def default_template() -> str:
    return _resource("decompose_prompt.txt")


# --------------------------------------------------------------------------- requests and prompts


@dataclass(frozen=True)
class AgentRequest:
    num_frames: int
    fps: float
    sequence: tuple = ()  # TimedLabel, at most one, spanning [0, T)
    actions: tuple = ()  # TimedLabel, sorted, non-overlapping
    parts: tuple = tuple(p.key for p in PartId)
    id: str = ""

    def __post_init__(self):
        # raises AnnotationError on bad source tracks
        fill_unknown_gaps(self.num_frames, self.fps, self.sequence, self.actions)


def request_from_annotation(ann: HierarchicalAnnotation) -> AgentRequest:
    """Source request from the sequence and known action labels of ``ann``."""
    seq = tuple(s for s in ann.sequence if s.known)
    acts = tuple(s for s in ann.actions if s.known)
    return AgentRequest(ann.num_frames, ann.fps, seq, acts, id=ann.id)


def _segments_json(segs) -> list[dict]:
    return [{"label": UNKNOWN_TOKEN if s.label is UNKNOWN else s.label, "start": s.start, "end": s.end}
            for s in segs]


def build_decomposition_prompt(req: AgentRequest, template: str | None = None) -> str:
    """Substitute the request into ``template`` (the packaged prompt by default)."""
    template = default_template() if template is None else template
    present = set(re.findall(r"\{(\w+)\}", template))
    for name in PLACEHOLDERS:
        if name not in present:
            raise TemplateError("MISSING_PLACEHOLDER", f"template lacks {{{name}}}", {"placeholder": name})
    seq = req.sequence or (TimedLabel(UNKNOWN, 0, req.num_frames),)
    values = {
        "duration": f"{req.num_frames} frames ({req.num_frames / req.fps:.2f} s)",
        "fps": f"{req.fps:g}",
        "parts": ", ".join(req.parts),
        "sequence": json.dumps({"sequence": _segments_json(seq)}),
        "actions": json.dumps({"actions": _segments_json(req.actions)}),
        "schema": RESPONSE_SCHEMA,
    }
    return re.sub(r"\{(\w+)\}", lambda m: values.get(m.group(1), m.group(0)), template)


def retry_prompt(prompt: str, reason: str) -> str:
    return (f"{prompt}\n\nYour previous output was invalid because {reason}. "
            "Reply again with only the corrected JSON object.")


# --------------------------------------------------------------------------- parsing


@dataclass(frozen=True)
class AgentResponse:
    sequence: tuple
    actions: tuple
    parts: Mapping[PartId, tuple] = field(default_factory=dict)

    def to_annotation(self, num_frames: int, fps: float, id: str = "") -> HierarchicalAnnotation:
        return fill_unknown_gaps(num_frames, fps, self.sequence, self.actions, self.parts, id=id)


def _fragment(obj) -> str:
    text = obj if isinstance(obj, str) else json.dumps(obj, default=str)
    return text if len(text) <= 200 else text[:197] + "..."


def extract_json_object(raw: str) -> str | None:
    """The first brace-balanced ``{...}`` span of ``raw`` (string-literal aware)."""
    start = raw.find("{")
    if start < 0:
        return None
    depth, in_str, escape = 0, False, False
    for i in range(start, len(raw)):
        c = raw[i]
        if in_str:
            if escape:
                escape = False
            elif c == "\\":
                escape = True
            elif c == '"':
                in_str = False
        elif c == '"':
            in_str = True
        elif c == "{":
            depth += 1
        elif c == "}":
            depth -= 1
            if depth == 0:
                return raw[start:i + 1]
    return None


def _load_object(raw: str) -> dict:
    try:
        obj = json.loads(raw)
    except (json.JSONDecodeError, TypeError):
        span = extract_json_object(raw or "")
        if span is None:
            raise AgentParseError("MALFORMED_JSON", "no JSON object in response", _fragment(raw or ""))
        try:
            obj = json.loads(span)
        except json.JSONDecodeError as e:
            raise AgentParseError("MALFORMED_JSON", f"invalid JSON: {e.msg}", _fragment(span)) from None
    if not isinstance(obj, dict):
        raise AgentParseError("SCHEMA_VIOLATION", "top level must be an object", _fragment(obj))
    return obj


def _parse_track(obj, where: str, num_frames: int) -> tuple:
    if not isinstance(obj, list):
        raise AgentParseError("SCHEMA_VIOLATION", f"{where} must be a list", _fragment(obj))
    segs = []
    for i, s in enumerate(obj):
        if (not isinstance(s, dict) or set(s) != {"label", "start", "end"} or not isinstance(s["label"], str)
                or any(isinstance(s[k], bool) or not isinstance(s[k], int) for k in ("start", "end"))):
            raise AgentParseError("SCHEMA_VIOLATION", f"{where}[{i}] must be {{label: str, start: int, end: int}}",
                                  _fragment(s))
        if s["start"] < 0 or s["end"] > num_frames or s["start"] >= s["end"]:
            raise AgentParseError("TIME_OUT_OF_RANGE", f"{where}[{i}] = [{s['start']}, {s['end']}) "
                                  f"outside [0, {num_frames}]", _fragment(s))
        segs.append(TimedLabel(normalize_label(s["label"]), s["start"], s["end"]))
    segs.sort(key=lambda s: (s.start, s.end))
    for a, b in zip(segs, segs[1:]):
        if b.start < a.end:
            raise AgentParseError("OVERLAP", f"{where}: [{a.start}, {a.end}) overlaps [{b.start}, {b.end})",
                                  _fragment(_segments_json([a, b])))
    return tuple(segs)


def parse_agent_response(raw: str, num_frames: int, fps: float) -> AgentResponse:
    """Strictly parse a backend reply; see the module docstring for the rules."""
    obj = _load_object(raw)
    if set(obj) != {"sequence", "actions", "parts"}:
        raise AgentParseError("SCHEMA_VIOLATION", "expected exactly the keys sequence, actions, parts",
                              _fragment(sorted(obj)))
    if not isinstance(obj["parts"], dict):
        raise AgentParseError("SCHEMA_VIOLATION", "parts must be an object", _fragment(obj["parts"]))
    parts = {}
    for key, track in obj["parts"].items():
        try:
            part = PartId.from_key(key)
        except (AnnotationError, KeyError, ValueError):
            raise AgentParseError("SCHEMA_VIOLATION", f"unknown body part {key!r}", _fragment(key)) from None
        parts[part] = _parse_track(track, f"parts.{key}", num_frames)
    sequence = _parse_track(obj["sequence"], "sequence", num_frames)
    if len(sequence) > 1:
        raise AgentParseError("SCHEMA_VIOLATION", "sequence must hold a single segment",
                              _fragment(obj["sequence"]))
    resp = AgentResponse(sequence, _parse_track(obj["actions"], "actions", num_frames), parts)
    try:
        resp.to_annotation(num_frames, fps)
    except AnnotationError as e:
        raise AgentParseError("SCHEMA_VIOLATION", e.message, e.detail) from None
    return resp


def check_boundaries(req: AgentRequest, resp: AgentResponse) -> None:
    """Refinement may reword source labels but never re-time them."""
    T = req.num_frames
    if resp.sequence and (resp.sequence[0].start, resp.sequence[0].end) != (0, T):
        raise AgentParseError("BOUNDARY_CHANGED", f"sequence must span [0, {T})",
                              _fragment(_segments_json(resp.sequence)))
    want = [(s.start, s.end) for s in req.actions]
    got = [(s.start, s.end) for s in resp.actions if s.known]
    if got != want:
        raise AgentParseError("BOUNDARY_CHANGED", f"action windows {got} differ from source {want}",
                              _fragment(_segments_json(resp.actions)))


# --------------------------------------------------------------------------- transcripts


class TranscriptLogger:
    """Thread-safe newline-delimited JSON transcript of agent attempts."""

    def __init__(self, path: str | Path | None = None, stream: IO[str] | None = None):
        self._lock = threading.Lock()
        self._stream = stream
        self._path = Path(path) if path is not None else None
        self.records: list[dict] = []

    def log(self, **record) -> None:
        line = json.dumps(record, sort_keys=True)
        with self._lock:
            self.records.append(record)
            if self._path is not None:
                with self._path.open("a") as f:
                    f.write(line + "\n")
            if self._stream is not None:
                self._stream.write(line + "\n")


# --------------------------------------------------------------------------- backends


class AgentBackend(Protocol):
    def complete(self, prompt: str) -> str: ...


class RateLimiter:
    """Token bucket; ``acquire`` blocks until a request may be sent.

    Waiting callers reserve their token under the lock before sleeping, so
    concurrent callers are spaced correctly.
    """

    def __init__(self, per_minute: float = 30.0, burst: int = 1,
                 clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        if per_minute <= 0 or burst < 1:
            raise ValueError("rate and burst must be positive")
        self.rate = per_minute / 60.0
        self.capacity = float(burst)
        self._tokens = float(burst)
        self._clock, self._sleep = clock, sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        with self._lock:
            now = self._clock()
            self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
            self._last = now
            self._tokens -= 1.0
            wait = max(0.0, -self._tokens / self.rate)
        if wait > 0:
            self._sleep(wait)
        return wait


def _load_rules(path: str | Path | None) -> list[dict]:
    text = Path(path).read_text() if path is not None else _resource("mock_rules.json")
    return json.loads(text)["rules"]


def _json_objects(text: str):
    dec = json.JSONDecoder()
    i = text.find("{")
    while i >= 0:
        try:
            obj, end = dec.raw_decode(text, i)
        except json.JSONDecodeError:
            i = text.find("{", i + 1)
            continue
        yield obj
        i = text.find("{", end)


class MockBackend:
    """Deterministic backend driven by a keyword rule table.

    It recovers the source tracks from the JSON blocks embedded in the prompt
    and maps each action window (or the sequence label when there are no
    actions) through the first matching rule. Unmatched windows stay UNKNOWN
    for every part.
    """

    def __init__(self, rules_path: str | Path | None = None, seed: int = 0):
        self.rules = _load_rules(rules_path)
        self.seed = seed
        self.calls = 0

    def match(self, label) -> dict:
        if label is UNKNOWN:
            return {}
        tokens = set(tokenize(label))
        for rule in self.rules:
            if tokens & set(rule["any"]) and set(rule.get("all", ())) <= tokens:
                return rule["parts"]
        return {}

    def respond(self, sequence: list[dict], actions: list[dict]) -> dict:
        windows = actions or sequence
        parts: dict[str, list] = {p.key: [] for p in PartId}
        for w in windows:
            label = normalize_label(w["label"])
            mapped = self.match(label)
            for p in PartId:
                parts[p.key].append({"label": mapped.get(p.key, UNKNOWN_TOKEN), "start": w["start"], "end": w["end"]})
        return {"sequence": sequence, "actions": actions, "parts": parts}

    def complete(self, prompt: str) -> str:
        self.calls += 1
        sequence = actions = None
        for obj in _json_objects(prompt):
            if isinstance(obj, dict) and set(obj) == {"sequence"} and sequence is None:
                sequence = obj["sequence"]
            elif isinstance(obj, dict) and set(obj) == {"actions"} and actions is None:
                actions = obj["actions"]
        if sequence is None or actions is None:
            return "I could not find the source annotation in the request."
        return json.dumps(self.respond(sequence, actions))


_THINK = re.compile(r"<think>.*?</think>", re.DOTALL)


class HTTPBackend:
    """OpenAI-compatible chat-completions endpoint.

    The API key is read from ``FRANKEN_AGENT_API_KEY``. Transport failures are
    retried ``max_retries`` times with exponential backoff and then surface as
    ``AGENT_UNAVAILABLE``.
    """

    def __init__(self, endpoint: str, model: str, timeout: float = 120.0, max_retries: int = 3,
                 rate_limit: float = 30.0, temperature: float = 0.0, session=None):
        import requests

        self.endpoint, self.model = endpoint, model
        self.timeout, self.max_retries, self.temperature = timeout, max_retries, temperature
        self.limiter = RateLimiter(rate_limit)
        self.session = session or requests.Session()
        self._exc = requests.RequestException

    def complete(self, prompt: str) -> str:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get("FRANKEN_AGENT_API_KEY")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = {"model": self.model, "temperature": self.temperature,
                "messages": [{"role": "user", "content": prompt}]}
        last = None
        for attempt in range(self.max_retries + 1):
            self.limiter.acquire()
            try:
                r = self.session.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
                if r.status_code == 429 or r.status_code >= 500:
                    last = f"HTTP {r.status_code}"
                else:
                    r.raise_for_status()
                    content = r.json()["choices"][0]["message"]["content"]
                    return _THINK.sub("", content).strip()
            except (self._exc, KeyError, IndexError, ValueError) as e:
                last = f"{type(e).__name__}: {e}"
            if attempt < self.max_retries:
                time.sleep(min(2.0 ** attempt, 30.0))
        raise AgentError("AGENT_UNAVAILABLE", f"{self.endpoint}: {last}")


def make_backend(kind: str = "mock", **kw) -> AgentBackend:
    if kind == "mock":
        return MockBackend(kw.get("rules_path"), kw.get("seed", 0))
    if kind == "http":
        return HTTPBackend(kw["endpoint"], kw["model"], float(kw.get("timeout", 120)),
                           int(kw.get("max_retries", 3)), float(kw.get("rate_limit", 30)))
    raise AgentError("BAD_BACKEND", f"unknown backend {kind!r}")


# --------------------------------------------------------------------------- driver


def annotate_sequence(req: AgentRequest, backend: AgentBackend, max_attempts: int = 3,
                      logger: TranscriptLogger | None = None, template: str | None = None) -> HierarchicalAnnotation:
    """Decompose one clip; retries on parse failures, never on transport failures."""
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    request_id = req.id or uuid.uuid4().hex
    base = build_decomposition_prompt(req, template)
    prompt, last = base, None
    for attempt in range(1, max_attempts + 1):
        raw = backend.complete(prompt)
        try:
            resp = parse_agent_response(raw, req.num_frames, req.fps)
            check_boundaries(req, resp)
            ann = resp.to_annotation(req.num_frames, req.fps, id=req.id)
        except AgentParseError as e:
            last = e
            if logger:
                logger.log(request_id=request_id, attempt=attempt, prompt=prompt, response=raw,
                           status=e.code, reason=e.message)
            prompt = retry_prompt(base, f"{e.code}: {e.message}")
            continue
        if logger:
            logger.log(request_id=request_id, attempt=attempt, prompt=prompt, response=raw, status="OK")
        return ann
    raise AgentError("EXHAUSTED_RETRIES", f"{max_attempts} attempts failed for {request_id}",
                     {"last_error": last.to_dict()}) from last


def annotate_many(requests: Sequence[AgentRequest], backend: AgentBackend, max_attempts: int = 3,
                  parallelism: int = 4, logger: TranscriptLogger | None = None,
                  template: str | None = None) -> list:
    """Annotate clips concurrently; failed items come back as their :class:`AgentError`."""

    def one(req):
        try:
            return annotate_sequence(req, backend, max_attempts, logger, template)
        except AgentError as e:
            return e

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        return list(pool.map(one, requests))


# --------------------------------------------------------------------------- agreement


def gwet_ac1(ratings) -> float:
    """Gwet's AC1 for binary ratings, rows = items, columns = raters.

    ``p_a`` is the per-item share of agreeing rater pairs averaged over
    items; chance agreement is ``2 pi (1 - pi)`` with ``pi`` the pooled rate
    of positive ratings.
    """
    r = np.asarray(ratings)
    if r.ndim != 2 or r.shape[0] < 1 or r.shape[1] < 2 or not np.isin(r, (0, 1)).all():
        raise AgentError("BAD_RATINGS", "ratings must be a 0/1 matrix with >= 1 item and >= 2 raters")
    n = r.shape[1]
    c1 = r.sum(axis=1).astype(np.float64)
    c0 = n - c1
    p_a = np.mean((c1 * (c1 - 1) + c0 * (c0 - 1)) / (n * (n - 1)))
    pi = r.mean()
    p_e = 2 * pi * (1 - pi)
    if p_e == 1:
        raise AgentError("DEGENERATE", "chance agreement is 1")
    return float((p_a - p_e) / (1 - p_e))
