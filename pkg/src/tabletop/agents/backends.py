"""Text-completion backends: a deterministic scripted table and a remote HTTP client."""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from pathlib import Path
from typing import Callable, Optional, Protocol

import httpx

ROLES = ("scene_comprehension", "overall_planner", "step_planner", "tool_mapper")


class BackendError(Exception):
    pass


class BackendTimeoutError(BackendError):
    """The retry budget ran out on timeouts."""


class BackendResponseError(BackendError):
    """The endpoint kept answering with errors or malformed payloads."""


class ScriptedLookupError(BackendError, KeyError):
    pass


class CompletionBackend(Protocol):
    def complete(self, role: str, prompt: str, context: dict) -> str: ...


def canonical_json(context: dict) -> str:
    return json.dumps(context, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def context_digest(context: dict) -> str:
    return hashlib.sha256(canonical_json(context).encode("utf-8")).hexdigest()[:32]


Responder = Callable[[dict], str]


class ScriptedBackend:
    """Table-driven stand-in for a language model.

    Lookups are keyed on ``(role, digest of the canonical context)``; the prompt
    text is ignored so editing a template does not invalidate a table. Keys
    missing from the table go to the per-role ``responders`` when given.
    Every answer can be recorded and saved as a new table.
    """

    def __init__(self, table: Optional[dict] = None, responders: Optional[dict] = None, record: bool = False):
        self.table = dict(table or {})
        self.responders = dict(responders or {})
        self.record = record
        self.recorded: dict = {}
        self._lock = threading.Lock()

    @classmethod
    def default(cls, record: bool = False) -> "ScriptedBackend":
        from .scripted import RESPONDERS

        return cls(responders=RESPONDERS, record=record)

    def complete(self, role: str, prompt: str, context: dict) -> str:
        key = (role, context_digest(context))
        if key in self.table:
            out = self.table[key]
        elif role in self.responders:
            out = self.responders[role](context)
        else:
            raise ScriptedLookupError(f"no scripted response for role {role!r} digest {key[1]}")
        if self.record:
            with self._lock:
                self.recorded[key] = out
        return out

    def save(self, path) -> None:
        rows = [{"role": r, "digest": d, "output": o} for (r, d), o in sorted({**self.table, **self.recorded}.items())]
        Path(path).write_text(json.dumps(rows, indent=1, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path, responders: Optional[dict] = None) -> "ScriptedBackend":
        rows = json.loads(Path(path).read_text())
        return cls({(r["role"], r["digest"]): r["output"] for r in rows}, responders)


class RemoteBackend:
    """Chat-completion JSON over HTTP.

    The bearer token is read from the environment variable named by
    ``token_env`` at call time, never stored. Each attempt is bounded by
    ``timeout`` and the whole call by ``(max_retries + 1) * timeout``.
    """

    def __init__(self, endpoint: str, model: str, token_env: str = "TABLETOP_API_KEY", timeout: float = 30.0,
                 max_retries: int = 2, temperature: float = 0.0, transport: Optional[httpx.BaseTransport] = None):
        if timeout <= 0 or max_retries < 0:
            raise ValueError("timeout must be positive and max_retries non-negative")
        self.endpoint = endpoint
        self.model = model
        self.token_env = token_env
        self.timeout = float(timeout)
        self.max_retries = int(max_retries)
        self.temperature = temperature
        self._transport = transport

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _payload(self, role: str, prompt: str) -> dict:
        return {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": f"You are the {role.replace('_', ' ')} agent of a tabletop robot."},
                {"role": "user", "content": prompt},
            ],
        }

    @staticmethod
    def _content(resp: httpx.Response) -> str:
        try:
            doc = resp.json()
            content = doc["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendResponseError(f"malformed completion payload: {resp.text[:200]!r}") from exc
        if not isinstance(content, str):
            raise BackendResponseError("completion content is not text")
        return content

    def complete(self, role: str, prompt: str, context: dict) -> str:
        deadline = time.monotonic() + (self.max_retries + 1) * self.timeout
        last: Optional[BackendError] = None
        with httpx.Client(transport=self._transport) as client:
            for _ in range(self.max_retries + 1):
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                t = min(self.timeout, remaining)
                try:
                    resp = client.post(self.endpoint, json=self._payload(role, prompt), headers=self._headers(),
                                       timeout=httpx.Timeout(t))
                except httpx.TimeoutException as exc:
                    last = BackendTimeoutError(f"no answer within {t:.1f} s")
                    last.__cause__ = exc
                    continue
                except httpx.TransportError as exc:
                    last = BackendResponseError(f"transport error: {exc}")
                    continue
                if resp.status_code >= 400:
                    last = BackendResponseError(f"HTTP {resp.status_code}")
                    continue
                try:
                    return self._content(resp)
                except BackendResponseError as exc:
                    last = exc
        if last is None:
            last = BackendTimeoutError("retry budget exhausted")
        raise last
