"""Chat-completion backends: HTTP, scripted rule table, transcript replay.

Every stage that would consult a language model goes through the `Backend`
protocol, so the whole pipeline runs offline and bit-reproducibly with the
scripted backend or a recorded transcript, and against a real
OpenAI-compatible endpoint when one is configured.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

from . import rdsl

__all__ = [
    "ChatRequest",
    "ChatResponse",
    "BackendError",
    "Backend",
    "ScriptedRule",
    "ScriptedBackend",
    "HttpBackend",
    "ReplayBackend",
    "TranscriptRecorder",
    "extract_component",
    "extract_code_block",
    "load_transcript",
]

DEFAULT_TEMPERATURE = 0.5
DEFAULT_TOP_P = 1.0


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[tuple[str, str], ...]  # (role, content)
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    max_tokens: int | None = None
    model: str = "scripted"
    template_id: str = ""

    def text(self) -> str:
        return "\n".join(content for _, content in self.messages)

    def to_dict(self) -> dict:
        return {
            "messages": [[r, c] for r, c in self.messages],
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
            "model": self.model,
            "template_id": self.template_id,
        }

    @staticmethod
    def from_dict(data: dict) -> "ChatRequest":
        return ChatRequest(
            messages=tuple((r, c) for r, c in data["messages"]),
            temperature=data.get("temperature", DEFAULT_TEMPERATURE),
            top_p=data.get("top_p", DEFAULT_TOP_P),
            max_tokens=data.get("max_tokens"),
            model=data.get("model", "scripted"),
            template_id=data.get("template_id", ""),
        )


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "latency_s": self.latency_s,
        }


class BackendError(Exception):
    """Backend failure; `kind` is one of auth, network, timeout, no-rule, exhausted, protocol."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.message = message


class Backend(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


@dataclass(frozen=True)
class ScriptedRule:
    """One deterministic responder: fires when `matches` accepts the prompt."""

    name: str
    matches: Callable[[ChatRequest], bool]
    respond: Callable[[ChatRequest], str]


class ScriptedBackend:
    """Ordered rule table; the first matching rule answers.

    A prompt no rule accepts is an error by design: scripted runs must be
    total over the scenarios they claim to cover, never silently creative.
    """

    def __init__(self, rules: Sequence[ScriptedRule]):
        self.rules = list(rules)

    def complete(self, request: ChatRequest) -> ChatResponse:
        for rule in self.rules:
            if rule.matches(request):
                return ChatResponse(text=rule.respond(request))
        head = request.text()[:200].replace("\n", " ")
        raise BackendError("no-rule", f"no scripted rule matches request ({request.template_id or 'no template id'}): {head!r}")


class HttpBackend:
    """OpenAI-compatible chat completions over HTTP.

    Retries transient network errors with exponential backoff; an auth
    rejection surfaces immediately.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "REWARDSEARCH_API_KEY",
        timeout_s: float = 60.0,
        max_attempts: int = 3,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s
        self.max_attempts = max_attempts

    def complete(self, request: ChatRequest) -> ChatResponse:
        import requests

        key = os.environ.get(self.api_key_env, "")
        if not key:
            raise BackendError("auth", f"environment variable {self.api_key_env} is not set")
        payload = {
            "model": self.model or request.model,
            "messages": [{"role": r, "content": c} for r, c in request.messages],
            "temperature": request.temperature,
            "top_p": request.top_p,
        }
        if request.max_tokens is not None:
            payload["max_tokens"] = request.max_tokens
        url = f"{self.base_url}/chat/completions"
        delay = 1.0
        last: Exception | None = None
        for attempt in range(self.max_attempts):
            t0 = time.perf_counter()
            try:
                resp = requests.post(
                    url,
                    json=payload,
                    headers={"Authorization": f"Bearer {key}"},
                    timeout=self.timeout_s,
                )
            except requests.Timeout as err:
                last = BackendError("timeout", str(err))
            except requests.RequestException as err:
                last = BackendError("network", str(err))
            else:
                if resp.status_code in (401, 403):
                    raise BackendError("auth", f"HTTP {resp.status_code}: {resp.text[:200]}")
                if resp.status_code >= 400:
                    last = BackendError("network", f"HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    body = resp.json()
                    usage = body.get("usage", {})
                    return ChatResponse(
                        text=body["choices"][0]["message"]["content"],
                        prompt_tokens=usage.get("prompt_tokens", 0),
                        completion_tokens=usage.get("completion_tokens", 0),
                        latency_s=time.perf_counter() - t0,
                    )
            if attempt + 1 < self.max_attempts:
                time.sleep(delay)
                delay *= 2.0
        raise last if last is not None else BackendError("network", "request failed")


def _entry_hash(index: int, request: ChatRequest, text: str, prev_hash: str) -> str:
    # timestamps and latency stay out of the hash so re-runs of identical
    # content chain identically
    blob = json.dumps(
        {
            "index": index,
            "request": {
                "messages": [[r, c] for r, c in request.messages],
                "temperature": request.temperature,
                "top_p": request.top_p,
                "model": request.model,
                "template_id": request.template_id,
            },
            "text": text,
            "prev": prev_hash,
        },
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class TranscriptRecorder:
    """Wraps any backend; records each exchange as one JSONL line.

    Entries carry a hash chain over (index, request content, response text),
    so a replayed transcript can prove it matches the prompts it is fed.
    """

    def __init__(self, inner: Backend, path: str | None = None):
        self.inner = inner
        self.path = path
        self.entries: list[dict] = []
        self._prev_hash = ""
        if path is not None:
            open(path, "w").close()

    def complete(self, request: ChatRequest) -> ChatResponse:
        response = self.inner.complete(request)
        index = len(self.entries)
        digest = _entry_hash(index, request, response.text, self._prev_hash)
        entry = {
            "index": index,
            "timestamp": time.time(),
            "request": request.to_dict(),
            "response": response.to_dict(),
            "prev_hash": self._prev_hash,
            "hash": digest,
        }
        self.entries.append(entry)
        self._prev_hash = digest
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        return response


def load_transcript(path: str) -> list[dict]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    return entries


class ReplayBackend:
    """Replays a recorded transcript in order, verifying the hash chain.

    Each replayed request must match the recorded one (content hash), so a
    drifted pipeline fails loudly instead of pairing prompts with stale
    answers.
    """

    def __init__(self, entries: Iterable[dict]):
        self.entries = list(entries)
        self.cursor = 0

    @staticmethod
    def from_file(path: str) -> "ReplayBackend":
        return ReplayBackend(load_transcript(path))

    def complete(self, request: ChatRequest) -> ChatResponse:
        if self.cursor >= len(self.entries):
            raise BackendError("exhausted", f"transcript has only {len(self.entries)} entries")
        entry = self.entries[self.cursor]
        recorded_prev = entry.get("prev_hash", "")
        text = entry["response"]["text"]
        expect = _entry_hash(self.cursor, request, text, recorded_prev)
        if expect != entry["hash"]:
            raise BackendError(
                "protocol",
                f"replay mismatch at entry {self.cursor}: request differs from the recorded one",
            )
        self.cursor += 1
        resp = entry["response"]
        return ChatResponse(
            text=text,
            prompt_tokens=resp.get("prompt_tokens", 0),
            completion_tokens=resp.get("completion_tokens", 0),
            latency_s=resp.get("latency_s", 0.0),
        )


def extract_code_block(response_text: str, label: str = "rdsl") -> str:
    """Last fenced code block with the given label."""
    marker = f"```{label}"
    start = response_text.rfind(marker)
    if start < 0:
        raise ValueError(f"no fenced {label} block in response")
    body_start = start + len(marker)
    end = response_text.find("```", body_start)
    if end < 0:
        raise ValueError(f"unterminated {label} block in response")
    return response_text[body_start:end].strip()


def extract_component(
    response_text: str,
    schema: Iterable[str],
) -> tuple[rdsl.RewardProgram, frozenset[str]]:
    """Parse the last ```rdsl block; returns (program, unresolved names).

    Unresolved names are not an error here: the caller decides whether to
    ask the user to provide them.
    """
    source = extract_code_block(response_text, "rdsl")
    program = rdsl.parse(source)
    unresolved = rdsl.check(program, schema)
    return program, unresolved
