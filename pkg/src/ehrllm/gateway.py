"""Chat-completion client for remote endpoints and scripted stubs.

Both kinds go through :meth:`ModelEndpoint.complete`, which enforces the
token budget and appends every exchange to a :class:`RunJournal`. The HTTP
wire format is the common chat-completions shape::

    POST {base_url}{chat_path}
    {"model": ..., "messages": [{"role": ..., "content": ...}], "max_tokens": ..., "temperature": ...}

and the reply is read from ``choices[0].message.content``.

Budget accounting uses :func:`ehrllm.tokens.estimate_tokens`, which is an
approximation of provider token counts. A request is refused before any
network traffic when its prompt estimate does not fit in what is left of the
budget; a reply that would push the total over the cap is discarded and the
call fails with :class:`BudgetExhausted`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import httpx

from ehrllm.tokens import estimate_tokens

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
ENDPOINT_KINDS = ("http_chat", "scripted_stub")
RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}


class GatewayError(RuntimeError):
    pass


class BudgetExhausted(GatewayError):
    pass


class EndpointTimeout(GatewayError):
    pass


class TransportFailure(GatewayError):
    def __init__(self, message: str, attempts: int):
        self.attempts = attempts
        super().__init__(message)


class ProtocolError(GatewayError):
    def __init__(self, status: int, body: str):
        self.status = status
        self.body_excerpt = body[:500]
        super().__init__(f"endpoint returned HTTP {status}: {self.body_excerpt}")


class NoScriptMatch(GatewayError):
    pass


class ScriptError(ValueError):
    pass


# -- request / response / config --------------------------------------------

@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    model_id: str
    max_output_tokens: int = 512
    temperature: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        for i, m in enumerate(self.messages):
            if m.role not in ROLES:
                raise ValueError(f"message {i}: unknown role {m.role!r}")
            if m.role == "system" and i > 0:
                raise ValueError("only the first message may be a system message")
            if not m.content:
                raise ValueError(f"message {i}: empty content")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")

    @classmethod
    def simple(cls, model_id: str, user: str, system: str | None = None, **kwargs) -> "ChatRequest":
        msgs = [ChatMessage("system", system)] if system else []
        msgs.append(ChatMessage("user", user))
        return cls(tuple(msgs), model_id, **kwargs)

    def last_user_message(self) -> str:
        for m in reversed(self.messages):
            if m.role == "user":
                return m.content
        return ""

    def input_token_estimate(self) -> int:
        return sum(estimate_tokens(m.content) for m in self.messages)


@dataclass(frozen=True)
class ChatResponse:
    content: str
    input_token_estimate: int
    output_token_estimate: int
    latency: float
    endpoint_id: str


@dataclass(frozen=True)
class EndpointConfig:
    endpoint_id: str
    kind: str = "scripted_stub"
    base_url: str | None = None
    chat_path: str = "/chat/completions"
    model: str | None = None
    credential_ref: str | None = None
    auth_header: str = "Authorization"
    timeout: float = 60.0
    max_retries: int = 2
    backoff: float = 0.5
    budget: int | None = None
    script: str | None = None
    fallback: str | None = None  # stub reply for unmatched prompts; None raises NoScriptMatch

    def __post_init__(self):
        if self.kind not in ENDPOINT_KINDS:
            raise ValueError(f"endpoint {self.endpoint_id!r}: unknown kind {self.kind!r}")
        if self.kind == "http_chat" and not self.base_url:
            raise ValueError(f"endpoint {self.endpoint_id!r}: http_chat requires base_url")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.budget is not None and self.budget < 0:
            raise ValueError("budget must be >= 0")

    @property
    def wire_model(self) -> str:
        return self.model or self.endpoint_id


# -- journal ------------------------------------------------------------------

class RunJournal:
    """Append-only log of model exchanges, optionally mirrored to a JSONL file.

    Entries never contain credential values; only the request messages, the
    reply and accounting fields are recorded.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.entries: list[dict[str, Any]] = []
        self._lock = threading.Lock()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def append(self, entry: dict[str, Any]) -> None:
        with self._lock:
            entry = {"seq": len(self.entries) + 1, **entry}
            self.entries.append(entry)
            if self.path:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, ensure_ascii=False) + "\n")

    def charged_tokens(self) -> int:
        return sum(e.get("charged_tokens", 0) for e in self.entries)


# -- scripted stub ------------------------------------------------------------

def prompt_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


_MATCHERS = ("prompt", "prompt_hash", "contains", "ordinal", "any")


@dataclass(frozen=True)
class StubRule:
    """One script line. ``echo`` is a regex whose first group (or whole match)
    is returned from the prompt; an empty pattern echoes the whole prompt."""

    matcher: str
    value: Any
    reply: str | None = None
    echo: str | None = None

    def answer(self, prompt: str, ordinal: int) -> str | None:
        m = self.matcher
        if m == "prompt" and prompt != self.value:
            return None
        if m == "prompt_hash" and prompt_hash(prompt) != self.value:
            return None
        if m == "contains" and self.value not in prompt:
            return None
        if m == "ordinal" and ordinal != self.value:
            return None
        if self.reply is not None:
            return self.reply
        if not self.echo:
            return prompt
        found = re.search(self.echo, prompt)
        if not found:
            return None
        return found.group(1) if found.groups() else found.group(0)


def parse_stub_record(record: dict) -> StubRule:
    if not isinstance(record, dict):
        raise ScriptError("record must be a JSON object")
    present = [k for k in _MATCHERS if k in record]
    if len(present) != 1:
        raise ScriptError(f"record needs exactly one of {', '.join(_MATCHERS)}")
    matcher = present[0]
    value = record[matcher]
    if matcher == "ordinal" and (not isinstance(value, int) or value < 1):
        raise ScriptError("ordinal must be a positive integer")
    if matcher == "any" and value is not True:
        raise ScriptError('"any" must be true')
    if matcher in ("prompt", "prompt_hash", "contains") and not isinstance(value, str):
        raise ScriptError(f"{matcher} must be a string")
    has_reply, has_echo = "reply" in record, "echo" in record
    if has_reply == has_echo:
        raise ScriptError('record needs exactly one of "reply" or "echo"')
    if has_echo:
        try:
            re.compile(record["echo"])
        except re.error as exc:
            raise ScriptError(f"bad echo pattern: {exc}") from None
    reply = record.get("reply")
    if has_reply and not isinstance(reply, str):
        raise ScriptError("reply must be a string")
    return StubRule(matcher, value, reply, record.get("echo"))


class ScriptedStub:
    """Deterministic stand-in for a model: first matching rule wins.

    Rules match against the last user message of the request. Ordinals count
    calls made to this stub, starting at 1.
    """

    def __init__(self, rules: list[StubRule], fallback: str | None = None):
        self.rules = list(rules)
        self.fallback = fallback
        self.calls = 0
        self._lock = threading.Lock()

    @classmethod
    def from_records(cls, records: list[dict], fallback: str | None = None) -> "ScriptedStub":
        return cls([parse_stub_record(r) for r in records], fallback)

    def reply(self, request: ChatRequest) -> str:
        with self._lock:
            self.calls += 1
            ordinal = self.calls
        prompt = request.last_user_message()
        for rule in self.rules:
            answer = rule.answer(prompt, ordinal)
            if answer is not None:
                return answer
        if self.fallback is not None:
            return self.fallback
        raise NoScriptMatch(f"no script rule matches call {ordinal}: {prompt[:80]!r}")


def load_stub_script(path: str | Path, fallback: str | None = None) -> ScriptedStub:
    """Load a JSONL stub script; blank lines are skipped, bad lines are reported by number."""
    rules = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rules.append(parse_stub_record(json.loads(line)))
        except (json.JSONDecodeError, ScriptError) as exc:
            raise ScriptError(f"{path}:{lineno}: {exc}") from None
    return ScriptedStub(rules, fallback)


# -- endpoint -----------------------------------------------------------------

class ModelEndpoint:
    def __init__(
        self,
        config: EndpointConfig,
        journal: RunJournal | None = None,
        stub: ScriptedStub | None = None,
        transport: httpx.BaseTransport | None = None,
    ):
        self.config = config
        self.journal = journal if journal is not None else RunJournal()
        self.stub = stub
        if config.kind == "scripted_stub" and stub is None:
            if not config.script:
                raise ValueError(f"stub endpoint {config.endpoint_id!r} has no script")
            self.stub = load_stub_script(config.script, config.fallback)
        self._transport = transport
        self._lock = threading.Lock()
        self.tokens_used = 0
        self.attempts = 0  # HTTP attempts made, including retries

    @property
    def endpoint_id(self) -> str:
        return self.config.endpoint_id

    def _reserve(self, n: int) -> None:
        cap = self.config.budget
        with self._lock:
            if cap is not None and self.tokens_used + n > cap:
                raise BudgetExhausted(
                    f"{self.endpoint_id}: request needs ~{n} tokens, "
                    f"{cap - self.tokens_used} of {cap} left"
                )
            self.tokens_used += n

    def _settle(self, reserved: int, extra: int) -> bool:
        cap = self.config.budget
        with self._lock:
            if cap is not None and self.tokens_used + extra > cap:
                self.tokens_used -= reserved
                return False
            self.tokens_used += extra
            return True

    def _release(self, reserved: int) -> None:
        with self._lock:
            self.tokens_used -= reserved

    def _log(self, request: ChatRequest, status: str, **fields) -> None:
        self.journal.append({
            "endpoint_id": self.endpoint_id,
            "model_id": request.model_id,
            "status": status,
            "messages": [asdict(m) for m in request.messages],
            **fields,
        })

    def complete(self, request: ChatRequest) -> ChatResponse:
        n_in = request.input_token_estimate()
        self._reserve(n_in)
        start = time.perf_counter()
        try:
            if self.stub is not None:
                content = self.stub.reply(request)
            else:
                content = self._post(request)
        except GatewayError as exc:
            self._release(n_in)
            self._log(request, "error", error=f"{type(exc).__name__}: {exc}", charged_tokens=0)
            raise
        latency = 0.0 if self.stub is not None else time.perf_counter() - start
        n_out = estimate_tokens(content)
        if not self._settle(n_in, n_out):
            self._log(request, "budget_exhausted", reply=content, input_tokens=n_in,
                      output_tokens=n_out, charged_tokens=0)
            raise BudgetExhausted(f"{self.endpoint_id}: reply of ~{n_out} tokens exceeds the remaining budget")
        self._log(request, "ok", reply=content, input_tokens=n_in, output_tokens=n_out,
                  charged_tokens=n_in + n_out, latency_s=round(latency, 6))
        return ChatResponse(content, n_in, n_out, latency, self.endpoint_id)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        ref = self.config.credential_ref
        if ref:
            key = os.environ.get(ref)
            if not key:
                raise GatewayError(f"environment variable {ref} is not set")
            if self.config.auth_header.lower() == "authorization":
                headers["Authorization"] = f"Bearer {key}"
            else:
                headers[self.config.auth_header] = key
        return headers

    def _post(self, request: ChatRequest) -> str:
        cfg = self.config
        url = cfg.base_url.rstrip("/") + cfg.chat_path
        body = {
            "model": cfg.wire_model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "max_tokens": request.max_output_tokens,
            "temperature": request.temperature,
        }
        headers = self._headers()
        last: GatewayError | None = None
        total = cfg.max_retries + 1
        with httpx.Client(transport=self._transport, timeout=cfg.timeout) as client:
            for attempt in range(1, total + 1):
                if attempt > 1 and cfg.backoff > 0:
                    time.sleep(min(cfg.backoff * 2 ** (attempt - 2), 30.0))
                with self._lock:
                    self.attempts += 1
                try:
                    resp = client.post(url, json=body, headers=headers)
                except httpx.TimeoutException as exc:
                    last = EndpointTimeout(f"{self.endpoint_id}: timed out after {cfg.timeout}s ({exc})")
                    continue
                except httpx.TransportError as exc:
                    last = TransportFailure(f"{self.endpoint_id}: {type(exc).__name__}: {exc}", attempt)
                    continue
                if resp.status_code in RETRYABLE_STATUS:
                    last = ProtocolError(resp.status_code, resp.text)
                    continue
                if not 200 <= resp.status_code < 300:
                    raise ProtocolError(resp.status_code, resp.text)
                try:
                    content = resp.json()["choices"][0]["message"]["content"]
                except (ValueError, KeyError, IndexError, TypeError):
                    raise ProtocolError(resp.status_code, "malformed completion: " + resp.text) from None
                return content or ""
        if isinstance(last, TransportFailure):
            last.attempts = total
            raise TransportFailure(f"{last} (gave up after {total} attempts)", total)
        raise last


def connect(
    config: EndpointConfig,
    journal: RunJournal | None = None,
    transport: httpx.BaseTransport | None = None,
) -> ModelEndpoint:
    return ModelEndpoint(config, journal=journal, transport=transport)


def complete(endpoint: ModelEndpoint, request: ChatRequest) -> ChatResponse:
    return endpoint.complete(request)
