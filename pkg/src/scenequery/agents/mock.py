"""Scripted backend: replies looked up by request hash (fixture file or recorded transcripts)."""

from __future__ import annotations

import json
import threading
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

from ..errors import ProviderUnavailable
from .core import AgentRequest, AgentTranscript, TranscriptLog, request_hash


class MockProvider:
    """Deterministic replies.

    Lookup order: exact request hash in ``responses``; then ``by_task`` (a
    string, or a list consumed one reply per call); then ``default``.
    """

    name = "mock"

    def __init__(self, responses: Optional[Mapping[str, str]] = None,
                 by_task: Optional[Mapping[str, Union[str, Sequence[str]]]] = None,
                 default: Optional[str] = None):
        self.responses = dict(responses or {})
        self._queues = {k: ([v] if isinstance(v, str) else list(v)) for k, v in (by_task or {}).items()}
        self._fixed = {k for k, v in (by_task or {}).items() if isinstance(v, str)}
        self.default = default
        self.calls: list[AgentRequest] = []
        self._lock = threading.Lock()

    def complete(self, request: AgentRequest) -> str:
        with self._lock:
            self.calls.append(request)
            key = request_hash(request)
            if key in self.responses:
                return self.responses[key]
            queue = self._queues.get(request.task)
            if queue:
                return queue[0] if request.task in self._fixed else queue.pop(0)
            if self.default is not None:
                return self.default
        raise ProviderUnavailable(f"mock has no reply for {request.task or 'request'} ({key[:12]})")

    @classmethod
    def from_fixture(cls, path: Union[str, Path]) -> "MockProvider":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def from_transcripts(cls, transcripts: Union[str, Path, Iterable[AgentTranscript]]) -> "MockProvider":
        """Replay a transcript log: every recorded attempt becomes one hash-keyed reply."""
        if isinstance(transcripts, (str, Path)):
            transcripts = TranscriptLog.load(transcripts)
        table: dict[str, str] = {}
        for t in transcripts:
            for attempt, raw in enumerate(t.responses or [t.raw_response]):
                table[request_hash(t.request.corrected(attempt))] = raw
        return cls(table)

    def save_fixture(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.responses, sort_keys=True, indent=1), encoding="utf-8")
