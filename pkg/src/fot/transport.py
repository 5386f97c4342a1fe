"""Backend-agnostic chat-completion access.

Two backends ship: a live HTTP chat-completion client and a deterministic
scripted mock for tests and offline runs. Both enforce per-stage output
token caps and account token usage on every exchange.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import requests

from .errors import MissingScript, StageCapExceeded, TransportError
from .domain import UsageSource, UsageStats

logger = logging.getLogger(__name__)


class Stage(str, Enum):
    SOLVE = "solve"
    REFLECT = "reflect"
    EXTRACT = "extract"
    PROFILE = "profile"
    BUILD_LIBRARY = "build_library"
    JUDGE = "judge"


@dataclass(frozen=True)
class GenerationParams:
    temperature: float
    top_p: float
    max_output_tokens: int
    repetition_penalty: float | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not (0 < self.top_p <= 1):
            raise ValueError("top_p must be in (0, 1]")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be > 0")


def default_stage_params() -> dict[Stage, GenerationParams]:
    """Per-stage generation defaults: temperature 0.7, top-p 0.9, and output
    caps of 32768 (solve), 16384 (reflect), 8192 (extract), 32768 (profile),
    16384 (build_library).

    The judge stage is uncapped by any reported setting; it reuses the
    16384 cap of the other JSON-producing server stage.
    """

    caps = {
        Stage.SOLVE: 32768,
        Stage.REFLECT: 16384,
        Stage.EXTRACT: 8192,
        Stage.PROFILE: 32768,
        Stage.BUILD_LIBRARY: 16384,
        Stage.JUDGE: 16384,
    }
    return {
        stage: GenerationParams(temperature=0.7, top_p=0.9, max_output_tokens=cap)
        for stage, cap in caps.items()
    }


class BackendKind(str, Enum):
    HTTP_CHAT = "http_chat"
    SCRIPTED_MOCK = "scripted_mock"


@dataclass(frozen=True)
class BackendSpec:
    """Configuration for one chat backend.

    ``credential_env`` names the environment variable holding the API key;
    credentials never appear in config files. ``script_path`` points the
    scripted mock at its response script.
    """

    kind: BackendKind
    model_name: str
    endpoint: str | None = None
    credential_env: str | None = None
    params_by_stage: Mapping[Stage, GenerationParams] = field(
        default_factory=default_stage_params
    )
    script_path: str | None = None
    max_attempts: int = 3
    retry_base_delay: float = 1.0
    request_timeout: float = 120.0
    max_in_flight: int | None = None

    def __post_init__(self) -> None:
        if self.kind is BackendKind.HTTP_CHAT:
            if not self.endpoint or not self.credential_env:
                raise ValueError("http_chat backend requires endpoint and credential_env")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    def params_for(self, stage: Stage) -> GenerationParams:
        try:
            return self.params_by_stage[stage]
        except KeyError:
            raise ValueError(f"no generation params configured for stage {stage.value}")


@dataclass(frozen=True)
class ChatExchange:
    stage: Stage
    prompt: str
    response: str
    usage: UsageStats
    backend_id: str


_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def approx_token_count(text: str) -> int:
    """Whitespace-and-punctuation token count, used when the provider does
    not report usage."""
    return len(_TOKEN_RE.findall(text))


def fingerprint(stage: Stage, prompt: str) -> str:
    """Stable short hash of (stage, whitespace-normalized prompt).

    Mock scripts key on this rather than the exact prompt string, so
    incidental whitespace differences do not break a script.
    """

    normalized = " ".join(prompt.split())
    digest = hashlib.sha256(f"{stage.value}\x1f{normalized}".encode("utf-8"))
    return digest.hexdigest()[:16]


def with_retry(
    call: Callable[[], Any],
    *,
    attempts: int = 3,
    base_delay: float = 1.0,
    sleep: Callable[[float], None] = time.sleep,
) -> Any:
    """Run ``call`` with exponential backoff on retryable transport failures.

    Only TransportError instances flagged retryable are retried; the final
    error is re-raised once the attempt budget is spent.
    """

    if attempts < 1:
        raise ValueError("attempts must be >= 1")
    for attempt in range(1, attempts + 1):
        try:
            return call()
        except TransportError as err:
            if not err.retryable or attempt == attempts:
                raise
            delay = base_delay * (2 ** (attempt - 1))
            logger.warning("transport failure (attempt %d/%d): %s; retrying in %.2fs",
                           attempt, attempts, err, delay)
            sleep(delay)


class ChatBackend:
    """Base backend: cap enforcement, usage accounting, optional throttling.

    Subclasses implement ``_respond`` and return the raw response text plus
    the provider-reported completion token count (or None when the provider
    reports nothing and usage must be approximated).
    """

    def __init__(self, spec: BackendSpec) -> None:
        self.spec = spec
        self._gate = (
            threading.Semaphore(spec.max_in_flight) if spec.max_in_flight else None
        )

    @property
    def backend_id(self) -> str:
        return self.spec.model_name or self.spec.kind.value

    def _respond(self, stage: Stage, prompt: str, params: GenerationParams) -> tuple[str, int | None]:
        raise NotImplementedError

    def complete(self, stage: Stage, prompt: str) -> ChatExchange:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        params = self.spec.params_for(stage)
        if self._gate is not None:
            self._gate.acquire()
        try:
            response, reported = self._respond(stage, prompt, params)
        finally:
            if self._gate is not None:
                self._gate.release()
        if reported is not None:
            if reported > params.max_output_tokens:
                raise StageCapExceeded(
                    f"stage {stage.value}: {reported} completion tokens exceed "
                    f"cap {params.max_output_tokens}"
                )
            usage = UsageStats(
                prompt_tokens=approx_token_count(prompt),
                completion_tokens=reported,
                source=UsageSource.PROVIDER_REPORTED,
            )
        else:
            usage = UsageStats(
                prompt_tokens=approx_token_count(prompt),
                completion_tokens=min(approx_token_count(response), params.max_output_tokens),
                source=UsageSource.APPROXIMATED,
            )
        return ChatExchange(
            stage=stage,
            prompt=prompt,
            response=response,
            usage=usage,
            backend_id=self.backend_id,
        )


#: HTTP status codes retried besides connection-level failures.
_RETRYABLE_STATUS = frozenset({408, 429, 500, 502, 503, 504})


class HttpChatBackend(ChatBackend):
    """Live chat-completion client.

    Wire format: request ``{model, messages: [{role, content}], temperature,
    top_p, max_tokens}``; response ``{choices: [{message: {content}}],
    usage: {prompt_tokens, completion_tokens}}``.
    """

    def __init__(self, spec: BackendSpec, session: requests.Session | None = None) -> None:
        super().__init__(spec)
        self._session = session or requests.Session()

    def _credential(self) -> str:
        import os

        key = os.environ.get(self.spec.credential_env or "")
        if not key:
            raise TransportError(
                f"credential env var {self.spec.credential_env!r} is not set",
                retryable=False,
            )
        return key

    def _request_once(self, stage: Stage, prompt: str, params: GenerationParams) -> tuple[str, int | None]:
        payload: dict[str, Any] = {
            "model": self.spec.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_output_tokens,
        }
        if params.repetition_penalty is not None:
            payload["repetition_penalty"] = params.repetition_penalty
        headers = {"Authorization": f"Bearer {self._credential()}"}
        try:
            resp = self._session.post(
                self.spec.endpoint,
                json=payload,
                headers=headers,
                timeout=self.spec.request_timeout,
            )
        except requests.RequestException as err:
            raise TransportError(f"request failed: {err}") from err
        if resp.status_code != 200:
            raise TransportError(
                f"HTTP {resp.status_code}: {resp.text[:200]}",
                retryable=resp.status_code in _RETRYABLE_STATUS,
            )
        try:
            body = resp.json()
            content = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as err:
            raise TransportError(f"malformed response body: {err}", retryable=False) from err
        usage = body.get("usage") or {}
        reported = usage.get("completion_tokens")
        return content, int(reported) if reported is not None else None

    def _respond(self, stage: Stage, prompt: str, params: GenerationParams) -> tuple[str, int | None]:
        return with_retry(
            lambda: self._request_once(stage, prompt, params),
            attempts=self.spec.max_attempts,
            base_delay=self.spec.retry_base_delay,
        )


@dataclass(frozen=True)
class ScriptEntry:
    """One scripted mock response.

    ``match`` is either the literal string "any" (consumed once, FIFO per
    stage) or a fingerprint as produced by :func:`fingerprint` (matched any
    number of times).
    """

    stage: Stage
    match: str
    response: str
    completion_tokens: int | None = None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScriptEntry":
        return cls(
            stage=Stage(data["stage"]),
            match=data.get("match", "any"),
            response=data["response"],
            completion_tokens=data.get("completion_tokens"),
        )


class ScriptedMockBackend(ChatBackend):
    """Deterministic mock: scripted replies, synthesized usage, no network.

    Fingerprint-keyed entries are referentially transparent (identical
    stage + prompt always returns the identical response); "any" entries
    form a per-stage queue consumed in script order.
    """

    def __init__(self, spec: BackendSpec, entries: Sequence[ScriptEntry] | None = None) -> None:
        super().__init__(spec)
        if entries is None:
            if not spec.script_path:
                raise ValueError("scripted_mock backend needs entries or a script_path")
            entries = load_script(spec.script_path)
        self._by_fingerprint: dict[tuple[Stage, str], ScriptEntry] = {}
        self._queues: dict[Stage, list[ScriptEntry]] = {}
        for entry in entries:
            if entry.match == "any":
                self._queues.setdefault(entry.stage, []).append(entry)
            else:
                self._by_fingerprint[(entry.stage, entry.match)] = entry
        self._lock = threading.Lock()
        self.calls: list[tuple[Stage, str]] = []

    def _respond(self, stage: Stage, prompt: str, params: GenerationParams) -> tuple[str, int | None]:
        fp = fingerprint(stage, prompt)
        with self._lock:
            self.calls.append((stage, prompt))
            entry = self._by_fingerprint.get((stage, fp))
            if entry is None:
                queue = self._queues.get(stage)
                if queue:
                    entry = queue.pop(0)
        if entry is None:
            raise MissingScript(f"no script for stage {stage.value}, fingerprint {fp}")
        return entry.response, entry.completion_tokens


def load_script(path: str | Path) -> list[ScriptEntry]:
    """Load mock script entries from a JSON file (a list of entry objects)."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValueError("mock script must be a JSON list")
    return [ScriptEntry.from_dict(item) for item in data]


def create_backend(spec: BackendSpec) -> ChatBackend:
    """Instantiate the backend a spec describes."""
    if spec.kind is BackendKind.HTTP_CHAT:
        return HttpChatBackend(spec)
    return ScriptedMockBackend(spec)


def complete(backend: ChatBackend, stage: Stage, prompt: str) -> ChatExchange:
    """Run one chat completion against an instantiated backend."""
    return backend.complete(stage, prompt)


def params_from_dict(data: Mapping[str, Any]) -> GenerationParams:
    return GenerationParams(
        temperature=float(data.get("temperature", 0.7)),
        top_p=float(data.get("top_p", 0.9)),
        max_output_tokens=int(data["max_output_tokens"]),
        repetition_penalty=(
            float(data["repetition_penalty"])
            if data.get("repetition_penalty") is not None
            else None
        ),
    )


def backend_spec_from_dict(data: Mapping[str, Any]) -> BackendSpec:
    """Build a BackendSpec from a config mapping, merging per-stage overrides
    into the defaults."""

    params = default_stage_params()
    for stage_name, p in (data.get("params_by_stage") or {}).items():
        params[Stage(stage_name)] = params_from_dict(p)
    return BackendSpec(
        kind=BackendKind(data["kind"]),
        model_name=data.get("model_name", ""),
        endpoint=data.get("endpoint"),
        credential_env=data.get("credential_env"),
        params_by_stage=params,
        script_path=data.get("script_path"),
        max_attempts=int(data.get("max_attempts", 3)),
        retry_base_delay=float(data.get("retry_base_delay", 1.0)),
        request_timeout=float(data.get("request_timeout", 120.0)),
        max_in_flight=(
            int(data["max_in_flight"]) if data.get("max_in_flight") is not None else None
        ),
    )
