"""Completion gateway with a live OpenAI-compatible backend and a scripted mock."""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Protocol, Sequence, Union

import httpx

from .errors import BackendError, ConfigError, InputError, ScriptError

logger = logging.getLogger(__name__)

STAGE_TAGS = ("extract", "group", "local", "select", "synthesize", "align", "judge")

# decoding defaults; the local reasoning stage samples a little
STAGE_TEMPERATURE = {tag: 0.0 for tag in STAGE_TAGS}
STAGE_TEMPERATURE["local"] = 0.3

RETRYABLE_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


@dataclass(frozen=True)
class CompletionRequest:
    stage_tag: str
    system_prompt: str
    user_prompt: str
    max_tokens: int = 1024
    temperature: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.stage_tag not in STAGE_TAGS:
            raise InputError(f"unknown stage tag {self.stage_tag!r}")
        if self.max_tokens < 1:
            raise InputError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise InputError("temperature must be >= 0")


@dataclass(frozen=True)
class CompletionResult:
    text: str
    backend_id: str
    latency_ms: int = 0
    attempt_count: int = 1


class Backend(Protocol):
    backend_id: str

    def complete(self, request: CompletionRequest) -> CompletionResult: ...


@dataclass(frozen=True)
class MockRule:
    """``match`` is a substring of the user prompt, or a regex when prefixed ``re:``.

    ``stage`` may be ``"*"`` to apply to every stage tag.
    """

    stage: str
    match: str
    response: str

    def matches(self, request: CompletionRequest) -> bool:
        if self.stage != "*" and self.stage != request.stage_tag:
            return False
        if self.match.startswith("re:"):
            return re.search(self.match[3:], request.user_prompt) is not None
        return self.match in request.user_prompt


@dataclass(frozen=True)
class MockScript:
    rules: tuple = ()
    default_response: Optional[str] = None

    def respond(self, request: CompletionRequest) -> str:
        for rule in self.rules:
            if rule.matches(request):
                return rule.response
        if self.default_response is None:
            raise ScriptError(
                f"no mock rule matches stage={request.stage_tag!r} and no default response; "
                f"prompt starts {request.user_prompt[:80]!r}"
            )
        return self.default_response

    @classmethod
    def from_records(cls, records: Sequence[Mapping]) -> "MockScript":
        rules: List[MockRule] = []
        default = None
        for rec in records:
            if "default" in rec:
                default = str(rec["default"])
                continue
            stage = str(rec["stage"])
            if stage != "*" and stage not in STAGE_TAGS:
                raise ConfigError(f"mock rule has unknown stage {stage!r}")
            rules.append(MockRule(stage, str(rec.get("match", "")), str(rec["response"])))
        return cls(tuple(rules), default)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MockScript":
        records = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"{path}:{lineno}: bad mock rule ({exc})") from exc
        try:
            return cls.from_records(records)
        except KeyError as exc:
            raise ConfigError(f"{path}: mock rule missing field {exc}") from exc


class MockBackend:
    def __init__(self, script: MockScript, backend_id: str = "mock") -> None:
        self.script = script
        self.backend_id = backend_id

    def complete(self, request: CompletionRequest) -> CompletionResult:
        return CompletionResult(self.script.respond(request), self.backend_id, 0, 1)


class HttpBackend:
    """POSTs OpenAI-style chat completions; retries transient failures with backoff."""

    def __init__(
        self,
        url: str,
        model: str,
        api_key_env: Optional[str] = "OPENAI_API_KEY",
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff: float = 1.0,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        url = url.rstrip("/")
        self.url = url if url.endswith("/chat/completions") else url + "/chat/completions"
        self.model = model
        self.api_key_env = api_key_env
        self.max_retries = max_retries
        self.backoff = backoff
        self._sleep = sleep
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self.backend_id = f"http:{model}"

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "") if self.api_key_env else ""
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def payload(self, request: CompletionRequest) -> dict:
        return {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "seed": request.seed,
        }

    def complete(self, request: CompletionRequest) -> CompletionResult:
        body = self.payload(request)
        last_error = "no attempt made"
        attempt = 0
        start = time.monotonic()
        while attempt < self.max_retries:
            attempt += 1
            try:
                resp = self._client.post(self.url, json=body, headers=self._headers())
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc!r}"
            else:
                if resp.status_code == 200:
                    try:
                        text = resp.json()["choices"][0]["message"]["content"] or ""
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise BackendError(f"malformed completion body: {exc!r}", attempt) from exc
                    latency = int((time.monotonic() - start) * 1000)
                    return CompletionResult(text, self.backend_id, latency, attempt)
                last_error = f"HTTP {resp.status_code}: {resp.text[:200]}"
                if resp.status_code not in RETRYABLE_STATUS:
                    raise BackendError(last_error, attempt)
            logger.warning("%s attempt %d/%d failed: %s", self.backend_id, attempt, self.max_retries, last_error)
            if attempt < self.max_retries:
                self._sleep(self.backoff * 2 ** (attempt - 1))
        raise BackendError(f"{self.backend_id} failed after {attempt} attempts: {last_error}", attempt)

    def close(self) -> None:
        self._client.close()


def complete(request: CompletionRequest, backend: Backend) -> CompletionResult:
    return backend.complete(request)


@dataclass
class Gateway:
    """Dispatches requests by stage tag, with a bound on concurrent calls."""

    default: Backend
    stages: Dict[str, Backend] = field(default_factory=dict)
    max_in_flight: int = 4

    def __post_init__(self) -> None:
        unknown = set(self.stages) - set(STAGE_TAGS)
        if unknown:
            raise ConfigError(f"unknown stage tags in routing: {sorted(unknown)}")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        self._slots = threading.BoundedSemaphore(self.max_in_flight)

    def backend_for(self, stage_tag: str) -> Backend:
        return self.stages.get(stage_tag, self.default)

    def complete(self, request: CompletionRequest) -> CompletionResult:
        with self._slots:
            return complete(request, self.backend_for(request.stage_tag))


def backend_from_config(cfg: Mapping, base_dir: Union[str, Path] = ".") -> Backend:
    kind = cfg.get("kind")
    if kind == "mock":
        if "script" in cfg:
            path = Path(base_dir) / cfg["script"]
            if not path.exists():
                raise ConfigError(f"mock script not found: {path}")
            script = MockScript.load(path)
        else:
            script = MockScript.from_records(cfg.get("rules", []))
            if "default_response" in cfg:
                script = MockScript(script.rules, str(cfg["default_response"]))
        return MockBackend(script, backend_id=str(cfg.get("id", "mock")))
    if kind == "http":
        for key in ("url", "model"):
            if not cfg.get(key):
                raise ConfigError(f"http backend needs backend.{key}")
        return HttpBackend(
            url=cfg["url"],
            model=cfg["model"],
            api_key_env=cfg.get("api_key_env", "OPENAI_API_KEY"),
            timeout=float(cfg.get("timeout", 60.0)),
            max_retries=int(cfg.get("max_retries", 3)),
        )
    raise ConfigError(f"backend.kind must be 'http' or 'mock', got {kind!r}")


def gateway_from_config(
    default_cfg: Mapping, stage_cfgs: Optional[Mapping] = None, base_dir: Union[str, Path] = "."
) -> Gateway:
    stage_cfgs = stage_cfgs or {}
    return Gateway(
        default=backend_from_config(default_cfg, base_dir),
        stages={tag: backend_from_config(c, base_dir) for tag, c in stage_cfgs.items()},
        max_in_flight=int(default_cfg.get("max_in_flight", 4)),
    )
