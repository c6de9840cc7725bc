"""Completion contract over remote chat APIs, scripted mocks and a replay cache.

Every completion is keyed by a fingerprint of the prompt and generation
config.  In ``strict_replay`` mode the cache is the only source of text, so a
pipeline run becomes a pure function of its inputs and the cache directory.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol, Union

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.1


class CacheMode(str, Enum):
    LIVE = "live"
    RECORD = "record"
    STRICT_REPLAY = "strict_replay"

    @classmethod
    def parse(cls, value: Union[str, "CacheMode"]) -> "CacheMode":
        return cls(str(getattr(value, "value", value)).replace("-", "_"))


class CacheStatus(str, Enum):
    LIVE = "live"
    REPLAYED = "replayed"
    MOCKED = "mocked"


class LLMError(RuntimeError):
    pass


class CacheMissError(LLMError):
    def __init__(self, fingerprint: str):
        super().__init__(f"no cached completion for fingerprint {fingerprint}")
        self.fingerprint = fingerprint


class BackendError(LLMError):
    pass


class RetryableBackendError(BackendError):
    pass


class TokenLimitError(BackendError):
    pass


@dataclass(frozen=True)
class GenerationConfig:
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = 1024
    model: str = "gpt-4"
    seed: Optional[int] = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class Completion:
    text: str
    backend: str
    fingerprint: str
    status: CacheStatus


def canonical_prompt(prompt: str) -> str:
    return prompt.replace("\r\n", "\n").replace("\r", "\n")


def fingerprint(prompt: str, config: GenerationConfig) -> str:
    """SHA-256 over the prompt (line endings canonicalized) and the
    temperature, max_tokens and model of ``config``."""
    payload = json.dumps(
        {
            "prompt": canonical_prompt(prompt),
            "temperature": repr(float(config.temperature)),
            "max_tokens": int(config.max_tokens),
            "model": config.model,
        },
        sort_keys=True,
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# backends


class Backend(Protocol):
    descriptor: str
    is_mock: bool

    def generate(self, prompt: str, config: GenerationConfig) -> str: ...


class ScriptedBackend:
    """Returns canned text keyed by fingerprint (or by exact prompt)."""

    is_mock = True

    def __init__(self, responses: Mapping[str, str], default: Optional[str] = None, descriptor: str = "scripted"):
        self.responses = dict(responses)
        self.default = default
        self.descriptor = descriptor
        self.calls: list[str] = []

    def generate(self, prompt: str, config: GenerationConfig) -> str:
        self.calls.append(prompt)
        fp = fingerprint(prompt, config)
        for key in (fp, prompt):
            if key in self.responses:
                return self.responses[key]
        if self.default is not None:
            return self.default
        raise BackendError(f"scripted backend has no response for fingerprint {fp}")


class FunctionBackend:
    """Mock backend delegating to ``fn(prompt, config) -> text``."""

    is_mock = True

    def __init__(self, fn: Callable[[str, GenerationConfig], str], descriptor: str = "function-mock"):
        self.fn = fn
        self.descriptor = descriptor

    def generate(self, prompt: str, config: GenerationConfig) -> str:
        return self.fn(prompt, config)


class HttpChatBackend:
    """JSON-over-HTTP chat/completions client.

    Posts ``{"model", "messages": [{"role": "user", "content": prompt}],
    "temperature", "max_tokens"}`` to ``{endpoint}/chat/completions`` and
    reads ``choices[0].message.content``.  Endpoint and key come from
    ``DALLM_LLM_ENDPOINT`` / ``DALLM_LLM_API_KEY`` unless given.
    """

    is_mock = False

    def __init__(self, endpoint: Optional[str] = None, api_key: Optional[str] = None, session=None,
                 attempts: int = 3, backoff: float = 1.0, timeout: float = 120.0):
        self.endpoint = (endpoint or os.environ.get("DALLM_LLM_ENDPOINT") or "").rstrip("/")
        self.api_key = api_key or os.environ.get("DALLM_LLM_API_KEY")
        if not self.endpoint:
            raise BackendError("no LLM endpoint configured (set DALLM_LLM_ENDPOINT)")
        if session is None:
            import requests

            session = requests.Session()
        self.session = session
        self.attempts = attempts
        self.backoff = backoff
        self.timeout = timeout
        self.descriptor = f"http:{self.endpoint}"

    def _once(self, prompt: str, config: GenerationConfig) -> str:
        body = {
            "model": config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": config.temperature,
            "max_tokens": config.max_tokens,
        }
        if config.seed is not None:
            body["seed"] = config.seed
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = self.session.post(f"{self.endpoint}/chat/completions", json=body, headers=headers,
                                     timeout=self.timeout)
        except Exception as exc:
            raise RetryableBackendError(f"transport error: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise RetryableBackendError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            text = resp.text[:300]
            if "context_length" in text or "maximum context" in text:
                raise TokenLimitError(text)
            raise BackendError(f"HTTP {resp.status_code}: {text}")
        choice = resp.json()["choices"][0]
        if choice.get("finish_reason") == "length":
            raise TokenLimitError(f"completion truncated at max_tokens={config.max_tokens}")
        return choice["message"]["content"]

    def generate(self, prompt: str, config: GenerationConfig) -> str:
        for attempt in range(self.attempts):
            try:
                return self._once(prompt, config)
            except RetryableBackendError as exc:
                if attempt == self.attempts - 1:
                    raise BackendError(f"giving up after {self.attempts} attempts: {exc}") from exc
                log.warning("LLM call failed (%s); retrying", exc)
                time.sleep(self.backoff * 2**attempt)
        raise AssertionError("unreachable")


# --------------------------------------------------------------------------
# cache


class ReplayCache:
    """Content-addressed completion store: ``<root>/<fp[:2]>/<fp>.json``.

    Writes go through a temp file and ``os.replace`` so readers never see a
    partial entry.
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self._lock = threading.Lock()

    def path(self, fp: str) -> Path:
        return self.root / fp[:2] / f"{fp}.json"

    def get(self, fp: str) -> Optional[dict]:
        p = self.path(fp)
        if not p.exists():
            return None
        return json.loads(p.read_text(encoding="utf-8"))

    def put(self, fp: str, prompt: str, config: GenerationConfig, text: str, backend: str) -> None:
        entry = {
            "fingerprint": fp,
            "backend": backend,
            "model": config.model,
            "temperature": config.temperature,
            "max_tokens": config.max_tokens,
            "prompt": canonical_prompt(prompt),
            "text": text,
        }
        p = self.path(fp)
        with self._lock:
            p.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=p.parent, prefix=".tmp-", suffix=".json")
            try:
                with os.fdopen(fd, "w", encoding="utf-8") as fh:
                    json.dump(entry, fh, indent=2, sort_keys=True, ensure_ascii=False)
                    fh.write("\n")
                os.replace(tmp, p)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise

    def __len__(self) -> int:
        return sum(1 for _ in self.root.glob("*/*.json")) if self.root.exists() else 0


class LLMClient:
    """Routes completions through the cache according to ``mode``.

    ``live`` always calls the backend; ``record`` replays hits and stores
    misses; ``strict_replay`` never calls the backend and fails on a miss.
    At most ``max_concurrent`` backend calls are in flight at once.
    """

    def __init__(self, backend: Optional[Backend], cache: Optional[ReplayCache] = None,
                 mode: Union[str, CacheMode] = CacheMode.STRICT_REPLAY, max_concurrent: int = 4,
                 config: Optional[GenerationConfig] = None):
        self.backend = backend
        self.cache = cache
        self.mode = CacheMode.parse(mode)
        self.config = config or GenerationConfig()
        self._slots = threading.BoundedSemaphore(max(1, max_concurrent))
        if self.mode is not CacheMode.LIVE and cache is None:
            raise ValueError(f"{self.mode.value} mode needs a cache")
        if self.mode is not CacheMode.STRICT_REPLAY and backend is None:
            raise ValueError(f"{self.mode.value} mode needs a backend")

    @property
    def descriptor(self) -> str:
        return self.backend.descriptor if self.backend is not None else "replay-only"

    def complete(self, prompt: str, config: Optional[GenerationConfig] = None) -> Completion:
        config = config or self.config
        if not prompt or not prompt.strip():
            raise ValueError("prompt must be non-empty")
        fp = fingerprint(prompt, config)
        if self.mode is not CacheMode.LIVE:
            hit = self.cache.get(fp)
            if hit is not None:
                return Completion(hit["text"], hit.get("backend", "cache"), fp, CacheStatus.REPLAYED)
            if self.mode is CacheMode.STRICT_REPLAY:
                raise CacheMissError(fp)
        with self._slots:
            text = self.backend.generate(prompt, config)
        if self.mode is CacheMode.RECORD:
            self.cache.put(fp, prompt, config, text, self.backend.descriptor)
        status = CacheStatus.MOCKED if getattr(self.backend, "is_mock", False) else CacheStatus.LIVE
        return Completion(text, self.backend.descriptor, fp, status)


def complete(prompt: str, config: GenerationConfig, backend: Union[Backend, LLMClient]) -> Completion:
    """One-shot completion; a bare backend is called in live mode."""
    client = backend if isinstance(backend, LLMClient) else LLMClient(backend, mode=CacheMode.LIVE)
    return client.complete(prompt, config)
