"""Chat-completion client with bounded retries and bounded concurrency."""

from __future__ import annotations

import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import httpx

from clapaug.errors import EndpointError, GenerationError

log = logging.getLogger(__name__)

RETRYABLE_STATUS = {408, 425, 429, 500, 502, 503, 504}

Messages = list[dict[str, str]]


@dataclass(frozen=True)
class LlmClientConfig:
    endpoint: str = "http://localhost:8000/v1/chat/completions"
    model: str = "llama-3.1-8b-instruct"
    api_key_env: str = "LLM_API_KEY"
    max_in_flight: int = 4
    timeout: float = 60.0
    retries: int = 3
    backoff_base: float = 1.0
    backoff_factor: float = 2.0
    temperature: float = 0.7

    def __post_init__(self):
        if self.retries < 0:
            raise ValueError("retries must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "LlmClientConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown llm config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class ChatClient:
    """POSTs ``{model, messages, temperature}`` and returns the first choice's content."""

    def __init__(self, config: LlmClientConfig, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self._sleep = sleep
        self._http = httpx.Client(transport=transport, timeout=config.timeout)
        self.attempts = 0

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def payload(self, messages: Messages) -> dict:
        return {"model": self.config.model, "messages": messages,
                "temperature": self.config.temperature}

    def _headers(self) -> dict:
        key = os.environ.get(self.config.api_key_env)
        return {"Authorization": f"Bearer {key}"} if key else {}

    def complete(self, messages: Messages) -> str:
        cfg = self.config
        last = "no attempt made"
        for attempt in range(cfg.retries + 1):
            if attempt:
                self._sleep(cfg.backoff_base * cfg.backoff_factor ** (attempt - 1))
            self.attempts += 1
            try:
                resp = self._http.post(cfg.endpoint, json=self.payload(messages), headers=self._headers())
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
                log.warning("chat request failed (attempt %d): %s", attempt + 1, last)
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last = f"HTTP {resp.status_code}"
                log.warning("chat request failed (attempt %d): %s", attempt + 1, last)
                continue
            if resp.status_code >= 400:
                raise EndpointError(f"endpoint returned HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise EndpointError(f"unexpected response body: {exc!r}") from exc
        raise EndpointError(f"endpoint failed after {cfg.retries + 1} attempts ({last})")

    def map(self, fn: Callable, items: Sequence) -> list:
        """Apply ``fn`` to items with at most ``max_in_flight`` running; results keep input order.

        Exceptions are returned in place of results rather than raised.
        """
        def guarded(item):
            try:
                return fn(item)
            except Exception as exc:  # reported per item by the caller
                return exc

        with ThreadPoolExecutor(max_workers=self.config.max_in_flight) as pool:
            return list(pool.map(guarded, items))


_ITEM_RE = re.compile(r"^\s*(?:\d+\s*[.)]|[-*•])\s*(.+?)\s*$")


class ParseError(GenerationError):
    pass


def parse_numbered_list(text: str) -> list[str]:
    """Items of a list marked ``1.``, ``1)`` or ``-``; any unmarked line is an error."""
    items = []
    for line in text.splitlines():
        if not line.strip():
            continue
        m = _ITEM_RE.match(line)
        if not m:
            raise ParseError(f"unparseable line in model output: {line.strip()[:80]!r}")
        items.append(m.group(1).strip().strip('"').strip())
    if not items:
        raise ParseError("model output contains no list items")
    return items
