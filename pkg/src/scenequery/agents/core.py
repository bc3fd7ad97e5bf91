"""Requests, transcripts and the retrying runner shared by every agent backend."""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Protocol, Sequence, Union, runtime_checkable

import jsonschema

from ..errors import ParseFailure

FREE_TEXT = "free_text"
JSON_CORRECTION = "Your previous reply could not be parsed. Respond with valid JSON only."
TEXT_CORRECTION = "Your previous reply was empty or could not be parsed. Answer with a short plain-text reply."

SCHEMAS: dict[str, dict] = {
    "stage1": {
        "type": "object",
        "required": ["candidates", "relations"],
        "properties": {
            "candidates": {"type": "array", "items": {"type": "integer"}},
            "relations": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["subject", "relation", "object"],
                    "properties": {
                        "subject": {"type": "integer"},
                        "relation": {"type": "string"},
                        "object": {"type": ["integer", "null"]},
                    },
                },
            },
            "rationale": {"type": "string"},
        },
    },
    "stage2": {
        "type": "object",
        "required": ["target", "rationale"],
        "properties": {"target": {"type": "integer"}, "rationale": {"type": "string"}},
    },
}


@dataclass(frozen=True)
class ImageRef:
    frame_id: int
    bbox: tuple[int, int, int, int]
    data_url: Optional[str] = None

    def to_dict(self) -> dict:
        return {"frame_id": self.frame_id, "bbox": list(self.bbox), "data_url": self.data_url}


@dataclass(frozen=True)
class Message:
    role: str
    text: str
    image: Optional[ImageRef] = None

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown message role {self.role!r}")

    def to_dict(self) -> dict:
        d = {"role": self.role, "text": self.text}
        if self.image is not None:
            d["image"] = self.image.to_dict()
        return d


@dataclass(frozen=True)
class AgentRequest:
    """A prompt for an LLM/LVLM backend.

    ``task`` and ``context`` are local metadata: they never reach the wire and
    are excluded from the request hash. The oracle backend reads them.
    """

    messages: tuple[Message, ...]
    response_format: str = FREE_TEXT
    max_retries: int = 2
    task: str = ""
    context: Any = field(default=None, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if not any(m.role == "user" for m in self.messages):
            raise ValueError("request needs at least one user message")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        if self.response_format != FREE_TEXT and self.response_format not in SCHEMAS:
            raise ValueError(f"unknown response schema {self.response_format!r}")

    def wire_dict(self) -> dict:
        return {"messages": [m.to_dict() for m in self.messages], "response_format": self.response_format}

    def to_dict(self) -> dict:
        return {**self.wire_dict(), "max_retries": self.max_retries, "task": self.task}

    @classmethod
    def from_dict(cls, doc: dict) -> "AgentRequest":
        msgs = []
        for m in doc["messages"]:
            img = m.get("image")
            ref = None if img is None else ImageRef(int(img["frame_id"]), tuple(img["bbox"]), img.get("data_url"))
            msgs.append(Message(m["role"], m["text"], ref))
        return cls(tuple(msgs), doc.get("response_format", FREE_TEXT), int(doc.get("max_retries", 2)),
                   doc.get("task", ""))

    def corrected(self, attempt: int) -> "AgentRequest":
        """The request re-sent on retry ``attempt`` (1-based): one corrective message per failure."""
        if attempt == 0:
            return self
        note = TEXT_CORRECTION if self.response_format == FREE_TEXT else JSON_CORRECTION
        return replace(self, messages=self.messages + (Message("user", note),) * attempt)


def request_hash(request: AgentRequest) -> str:
    blob = json.dumps(request.wire_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@runtime_checkable
class AgentProvider(Protocol):
    name: str

    def complete(self, request: AgentRequest) -> str: ...


@dataclass
class AgentTranscript:
    request: AgentRequest
    raw_response: str
    parsed: Any = None
    attempt_count: int = 1
    provider_name: str = ""
    wall_time_ms: float = 0.0
    responses: list[str] = field(default_factory=list)
    ok: bool = True

    def to_dict(self) -> dict:
        return {
            "request_hash": request_hash(self.request),
            "request": self.request.to_dict(),
            "raw_response": self.raw_response,
            "responses": list(self.responses),
            "parsed": self.parsed if self.ok else None,
            "ok": self.ok,
            "attempt_count": self.attempt_count,
            "provider_name": self.provider_name,
            "wall_time_ms": round(self.wall_time_ms, 3),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AgentTranscript":
        return cls(AgentRequest.from_dict(doc["request"]), doc["raw_response"], doc.get("parsed"),
                   int(doc["attempt_count"]), doc.get("provider_name", ""), float(doc.get("wall_time_ms", 0.0)),
                   list(doc.get("responses", [doc["raw_response"]])), bool(doc.get("ok", True)))

    def digest(self) -> str:
        """Content hash of the exchange, independent of timing."""
        blob = json.dumps({"request": request_hash(self.request), "responses": self.responses}, sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


class TranscriptLog:
    """Append-only, thread-safe transcript sink; optionally mirrored to a JSON-lines file."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = None if path is None else Path(path)
        self.entries: list[AgentTranscript] = []
        self._lock = threading.Lock()

    def append(self, transcript: AgentTranscript) -> None:
        with self._lock:
            self.entries.append(transcript)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(transcript.to_dict(), sort_keys=True) + "\n")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(list(self.entries))

    def dump(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for t in self.entries:
                fh.write(json.dumps(t.to_dict(), sort_keys=True) + "\n")

    @staticmethod
    def load(path: Union[str, Path]) -> list[AgentTranscript]:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return [AgentTranscript.from_dict(json.loads(l)) for l in lines if l.strip()]


def parse_json_response(raw: str, schema_name: str) -> Any:
    text = raw.strip()
    if text.startswith("```"):
        text = text.strip("`")
        if text.lower().startswith("json"):
            text = text[4:]
    try:
        value = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseFailure(f"response is not JSON: {exc}") from exc
    try:
        jsonschema.validate(value, SCHEMAS[schema_name])
    except jsonschema.ValidationError as exc:
        raise ParseFailure(f"response violates schema {schema_name}: {exc.message}") from exc
    return value


class Agent:
    """Runs requests against a provider with parse-and-retry, recording one transcript per call."""

    def __init__(self, provider: AgentProvider, log: Optional[TranscriptLog] = None):
        self.provider = provider
        self.log = log if log is not None else TranscriptLog()

    @property
    def name(self) -> str:
        return getattr(self.provider, "name", type(self.provider).__name__)

    def run(self, request: AgentRequest, parse: Optional[Callable[[str], Any]] = None) -> AgentTranscript:
        if parse is None:
            if request.response_format == FREE_TEXT:
                parse = _parse_free_text
            else:
                parse = lambda raw: parse_json_response(raw, request.response_format)  # noqa: E731
        start = time.perf_counter()
        responses: list[str] = []
        error: Optional[ParseFailure] = None
        for attempt in range(request.max_retries + 1):
            raw = self.provider.complete(request.corrected(attempt))
            responses.append(raw)
            try:
                parsed = parse(raw)
            except ParseFailure as exc:
                error = exc
                continue
            transcript = AgentTranscript(request, raw, parsed, attempt + 1, self.name,
                                         (time.perf_counter() - start) * 1e3, responses)
            self.log.append(transcript)
            return transcript
        transcript = AgentTranscript(request, responses[-1], None, len(responses), self.name,
                                     (time.perf_counter() - start) * 1e3, responses, ok=False)
        self.log.append(transcript)
        failure = ParseFailure(f"{request.task or 'request'} failed after {len(responses)} attempts: {error}")
        failure.transcript = transcript
        raise failure


def _parse_free_text(raw: str) -> str:
    text = (raw or "").strip()
    if not text:
        raise ParseFailure("empty response")
    return text
