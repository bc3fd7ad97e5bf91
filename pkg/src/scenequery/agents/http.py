"""OpenAI-compatible wire client (chat completions and embeddings)."""

from __future__ import annotations

import json
import logging
import os
import socket
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from ..errors import AuthError, ProviderUnavailable, RateLimited
from .core import FREE_TEXT, AgentRequest

logger = logging.getLogger(__name__)

ENV_BASE = "FREEQ_API_BASE"
ENV_KEY = "FREEQ_API_KEY"
ENV_MODEL = "FREEQ_MODEL"


@dataclass
class HttpEndpoint:
    base_url: str
    api_key: str = ""
    model: str = "gpt-4o"
    timeout: float = 60.0
    backoff_base: float = 1.0
    backoff_factor: float = 2.0
    max_in_flight: int = 4
    sleep: Callable[[float], None] = field(default=time.sleep, repr=False)

    def __post_init__(self):
        self.base_url = self.base_url.rstrip("/")
        self._slots = threading.BoundedSemaphore(self.max_in_flight)

    @classmethod
    def from_env(cls, base_url: Optional[str] = None, api_key: Optional[str] = None,
                 model: Optional[str] = None, **kwargs) -> "HttpEndpoint":
        base = base_url or os.environ.get(ENV_BASE)
        if not base:
            raise ValueError(f"no API base configured (set {ENV_BASE} or pass --api-base)")
        return cls(base, api_key or os.environ.get(ENV_KEY, ""), model or os.environ.get(ENV_MODEL, "gpt-4o"), **kwargs)


def post_json(endpoint: HttpEndpoint, path: str, body: dict, max_retries: int = 2) -> tuple[Any, int]:
    """POST ``body`` and decode the JSON reply. Returns ``(reply, attempts)``.

    401/403 fail immediately. 429, 5xx and transport errors are retried with
    exponential backoff, up to ``max_retries`` extra attempts.
    """
    data = json.dumps(body).encode("utf-8")
    headers = {"Content-Type": "application/json"}
    if endpoint.api_key:
        headers["Authorization"] = f"Bearer {endpoint.api_key}"
    url = endpoint.base_url + path
    last: Exception = ProviderUnavailable("no attempt made")
    for attempt in range(max_retries + 1):
        if attempt:
            endpoint.sleep(endpoint.backoff_base * endpoint.backoff_factor ** (attempt - 1))
        req = urllib.request.Request(url, data=data, headers=headers, method="POST")
        try:
            with endpoint._slots:
                with urllib.request.urlopen(req, timeout=endpoint.timeout) as resp:
                    payload = resp.read()
            try:
                return json.loads(payload.decode("utf-8")), attempt + 1
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise ProviderUnavailable(f"{url}: undecodable reply: {exc}") from exc
        except urllib.error.HTTPError as exc:
            if exc.code in (401, 403):
                raise AuthError(f"{url}: HTTP {exc.code}") from exc
            if exc.code == 429:
                last = RateLimited(f"{url}: HTTP 429 after {attempt + 1} attempts")
            elif exc.code >= 500:
                last = ProviderUnavailable(f"{url}: HTTP {exc.code} after {attempt + 1} attempts")
            else:
                raise ProviderUnavailable(f"{url}: HTTP {exc.code}") from exc
            logger.warning("attempt %d to %s failed with HTTP %d", attempt + 1, url, exc.code)
        except (urllib.error.URLError, socket.timeout, ConnectionError) as exc:
            last = ProviderUnavailable(f"{url}: {exc} after {attempt + 1} attempts")
            logger.warning("attempt %d to %s failed: %s", attempt + 1, url, exc)
    raise last


def chat_body(request: AgentRequest, model: str) -> dict:
    messages = []
    for m in request.messages:
        if m.image is not None and m.image.data_url:
            content: Any = [{"type": "text", "text": m.text},
                            {"type": "image_url", "image_url": {"url": m.image.data_url}}]
        else:
            content = m.text
        messages.append({"role": m.role, "content": content})
    body = {"model": model, "messages": messages, "temperature": 0}
    if request.response_format != FREE_TEXT:
        body["response_format"] = {"type": "json_object"}
    return body


def http_complete(request: AgentRequest, endpoint: HttpEndpoint) -> tuple[str, int]:
    """Send a chat completion; returns the first choice's text and the attempt count."""
    reply, attempts = post_json(endpoint, "/chat/completions", chat_body(request, endpoint.model),
                                request.max_retries)
    try:
        text = reply["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ProviderUnavailable(f"malformed chat completion reply: {exc}") from exc
    return text or "", attempts


class HttpProvider:
    def __init__(self, endpoint: HttpEndpoint):
        self.endpoint = endpoint
        self.name = f"http:{endpoint.model}"

    def complete(self, request: AgentRequest) -> str:
        text, _ = http_complete(request, self.endpoint)
        return text
