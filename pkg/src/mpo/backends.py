"""Chat-completion backends: live HTTP, scripted, and record/replay.

Every backend exposes one operation, ``complete(turns, params) -> str``.  The
live backend speaks the common ``/v1/chat/completions`` wire protocol; the
scripted backend turns a constant or a callable into a deterministic stand-in;
the recording wrapper captures request/response pairs into a transcript and
the replay backend serves them back by request digest, so whole optimization
runs can be reproduced byte-for-byte without model access.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Sequence

import requests

logger = logging.getLogger(__name__)

API_KEY_ENV = "MPO_API_KEY"
BASE_URL_ENV = "MPO_BASE_URL"

_ROLES = ("system", "user", "assistant")


class BackendError(Exception):
    """Transport or provider failure that survived the retry policy."""


class ReplayMiss(Exception):
    """No unconsumed recorded response matches the request digest.

    Deliberately not a :class:`BackendError`: a miss means the run diverged
    from its recording, which must abort rather than be absorbed by
    per-section failure isolation.
    """


@dataclass(frozen=True)
class ChatTurn:
    """One message in a chat-completion request."""

    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in _ROLES:
            raise ValueError(f"role must be one of {_ROLES}, got {self.role!r}")
        if self.content is None:
            raise ValueError("content must not be None")

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class GenerationParams:
    """Decoding parameters, recorded alongside every transcript entry."""

    temperature: float = 0.0
    max_output_tokens: int = 512
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GenerationParams":
        return cls(
            temperature=data.get("temperature", 0.0),
            max_output_tokens=data.get("max_output_tokens", 512),
            seed=data.get("seed"),
        )


# Determinism-biased defaults: temperature 0 everywhere, output budgets sized
# per use (short critiques, longer consolidations, one-letter answers).
GRADIENT_PARAMS = GenerationParams(max_output_tokens=512)
CONSOLIDATION_PARAMS = GenerationParams(max_output_tokens=1024)
SOLVER_PARAMS = GenerationParams(max_output_tokens=64)


def request_digest(turns: Sequence[ChatTurn], params: GenerationParams) -> str:
    """Deterministic content hash of a request, stable across processes."""
    payload = {
        "turns": [turn.to_dict() for turn in turns],
        "params": params.to_dict(),
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class CriticBackend(ABC):
    """Abstract chat-completion provider.

    ``complete`` is total: it returns the response text or raises a typed
    error.  Implementations must be safe to call from multiple threads.
    """

    name: str = "abstract"
    model: str = ""

    @property
    def identity(self) -> str:
        return f"{self.name}:{self.model}"

    @abstractmethod
    def complete(self, turns: Sequence[ChatTurn], params: GenerationParams) -> str:
        raise NotImplementedError


@dataclass(frozen=True)
class TranscriptEntry:
    """One recorded request/response pair."""

    request_digest: str
    request: tuple[dict, ...]
    params: dict
    response: str
    timestamp: str

    def to_dict(self) -> dict:
        return {
            "request_digest": self.request_digest,
            "request": list(self.request),
            "params": self.params,
            "response": self.response,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TranscriptEntry":
        return cls(
            request_digest=data["request_digest"],
            request=tuple(data["request"]),
            params=data["params"],
            response=data["response"],
            timestamp=data["timestamp"],
        )

    def turns(self) -> tuple[ChatTurn, ...]:
        return tuple(ChatTurn(t["role"], t["content"]) for t in self.request)


class Transcript:
    """Append-only store of recorded backend calls.

    Appends are serialized internally; entries are exposed as an immutable
    snapshot.  Persisted as JSON Lines, one entry per line.
    """

    def __init__(self, entries: Iterable[TranscriptEntry] = ()) -> None:
        self._entries: list[TranscriptEntry] = list(entries)
        self._lock = threading.Lock()

    def append(self, entry: TranscriptEntry) -> None:
        with self._lock:
            self._entries.append(entry)

    @property
    def entries(self) -> tuple[TranscriptEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as handle:
            for entry in self.entries:
                handle.write(json.dumps(entry.to_dict(), ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Transcript":
        entries = []
        with Path(path).open("r", encoding="utf-8") as handle:
            for line in handle:
                if line.strip():
                    entries.append(TranscriptEntry.from_dict(json.loads(line)))
        return cls(entries)


class RecordingBackend(CriticBackend):
    """Wraps a backend and appends every call to a transcript.

    Responses pass through unchanged, and the wrapper keeps the inner
    backend's identity so recorded runs and live runs label their outputs the
    same way.
    """

    def __init__(self, inner: CriticBackend, store: Transcript) -> None:
        self.inner = inner
        self.store = store
        self.name = inner.name
        self.model = inner.model

    def complete(self, turns: Sequence[ChatTurn], params: GenerationParams) -> str:
        response = self.inner.complete(turns, params)
        self.store.append(
            TranscriptEntry(
                request_digest=request_digest(turns, params),
                request=tuple(turn.to_dict() for turn in turns),
                params=params.to_dict(),
                response=response,
                timestamp=datetime.now(timezone.utc).isoformat(),
            )
        )
        return response


class ReplayBackend(CriticBackend):
    """Serves recorded responses keyed by request digest.

    Duplicate digests are consumed first-unconsumed-first; consumption is
    serialized.  A request with no matching unconsumed entry raises
    :class:`ReplayMiss`, signalling that the run diverged from the recording.
    """

    name = "replay"
    model = "transcript"

    def __init__(self, store: Transcript) -> None:
        self._queues: dict[str, deque[str]] = {}
        for entry in store:
            self._queues.setdefault(entry.request_digest, deque()).append(entry.response)
        self._lock = threading.Lock()

    def complete(self, turns: Sequence[ChatTurn], params: GenerationParams) -> str:
        digest = request_digest(turns, params)
        with self._lock:
            queue = self._queues.get(digest)
            if not queue:
                raise ReplayMiss(
                    f"no unconsumed recorded response for request digest {digest}; "
                    "the run diverged from the recording"
                )
            return queue.popleft()


class ScriptedBackend(CriticBackend):
    """Deterministic backend driven by a constant string or a callable.

    The callable receives ``(turns, params)`` and returns the response text;
    it may raise :class:`BackendError` to simulate failures.
    """

    def __init__(
        self,
        script: str | Callable[[Sequence[ChatTurn], GenerationParams], str],
        name: str = "scripted",
        model: str = "script",
    ) -> None:
        self._script = script
        self.name = name
        self.model = model

    def complete(self, turns: Sequence[ChatTurn], params: GenerationParams) -> str:
        if callable(self._script):
            return self._script(turns, params)
        return self._script


class HTTPBackend(CriticBackend):
    """Live backend for OpenAI-compatible chat-completion endpoints.

    POSTs to ``{base_url}/v1/chat/completions`` with a bearer token.  Retries
    transport failures and 5xx responses up to three attempts with exponential
    backoff (1s then 2s); other HTTP errors fail immediately.
    """

    name = "http"

    def __init__(
        self,
        model: str,
        base_url: str | None = None,
        api_key: str | None = None,
        timeout: float = 60.0,
        max_attempts: int = 3,
        backoff_base: float = 1.0,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        base_url = base_url or os.environ.get(BASE_URL_ENV, "")
        if not base_url:
            raise ValueError(
                f"no base URL: pass base_url or set {BASE_URL_ENV}"
            )
        self.model = model
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self._session = session or requests.Session()
        self._sleep = sleep

    def complete(self, turns: Sequence[ChatTurn], params: GenerationParams) -> str:
        url = f"{self.base_url}/v1/chat/completions"
        body: dict = {
            "model": self.model,
            "messages": [turn.to_dict() for turn in turns],
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
        }
        if params.seed is not None:
            body["seed"] = params.seed
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        last_error: str = ""
        for attempt in range(self.max_attempts):
            if attempt:
                self._sleep(self.backoff_base * 2 ** (attempt - 1))
            try:
                response = self._session.post(
                    url, json=body, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = f"transport error: {exc}"
                logger.warning("attempt %d/%d failed: %s", attempt + 1, self.max_attempts, last_error)
                continue
            if response.status_code >= 500:
                last_error = f"server error {response.status_code}"
                logger.warning("attempt %d/%d failed: %s", attempt + 1, self.max_attempts, last_error)
                continue
            if response.status_code != 200:
                raise BackendError(
                    f"request failed with status {response.status_code}: "
                    f"{response.text[:500]}"
                )
            return self._extract_content(response)
        raise BackendError(
            f"request failed after {self.max_attempts} attempts: {last_error}"
        )

    @staticmethod
    def _extract_content(response: requests.Response) -> str:
        try:
            payload = response.json()
            content = payload["choices"][0]["message"]["content"]
        except (ValueError, LookupError, TypeError) as exc:
            raise BackendError(f"malformed completion response: {exc}") from exc
        if content is None:
            raise BackendError("completion response has null content")
        return content
