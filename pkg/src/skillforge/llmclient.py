"""Pluggable chat-completion client: templates, transports, cache.

Three layers:

* `PromptTemplate` / `TemplateRegistry` -- named prompt bodies with
  ``{placeholder}`` slots.  ``{{`` and ``}}`` render as literal braces.
  Registration audits that the declared required placeholders are exactly
  the placeholders appearing in the body.
* transports -- `MockTransport` replays a script file (exact digest keys
  plus ordered regex-pattern fallback rules whose responses may reference
  capture groups, ``\\1`` style); `RemoteTransport` POSTs a chat-style
  request with bounded retries and exponential backoff.
* `ResponseCache` -- append-only JSONL cache keyed by a digest of
  (template name, rendered prompt, model id, sorted attachment URIs).
  A hit returns byte-identical text and skips the transport entirely.

All pipeline requests pin temperature to 0; attachments are URI strings
passed through untouched and are only legal for model ids the client is
configured to treat as multimodal.
"""
from __future__ import annotations

import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import requests

from .serde import sha256_text

_PLACEHOLDER_RE = re.compile(r"(\{\{)|(\}\})|\{([A-Za-z_][A-Za-z0-9_]*)\}|(\{)|(\})")


class LLMClientError(Exception):
    """Base class for client failures."""


class TemplateError(LLMClientError):
    """Bad template body or missing render variable."""


class TransportError(LLMClientError):
    """Remote transport exhausted its retries or request was invalid."""


class MockScriptMiss(LLMClientError):
    """Mock transport had neither an exact key nor a matching pattern."""


class CacheCorruptionError(LLMClientError):
    """Cache file contains an unreadable record."""


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str
    required_placeholders: frozenset[str]

    @classmethod
    def from_body(cls, name: str, body: str) -> "PromptTemplate":
        return cls(name=name, body=body, required_placeholders=frozenset(placeholders_in(body)))


def placeholders_in(body: str) -> set[str]:
    names = set()
    for match in _PLACEHOLDER_RE.finditer(body):
        if match.group(3):
            names.add(match.group(3))
        elif match.group(4) or match.group(5):
            raise TemplateError(f"unbalanced brace at offset {match.start()}")
    return names


def render(template: PromptTemplate, variables: Mapping[str, object]) -> str:
    """Pure substitution; extra variables are ignored, missing ones raise."""

    def sub(match: re.Match) -> str:
        if match.group(1):
            return "{"
        if match.group(2):
            return "}"
        name = match.group(3)
        if name:
            if name not in variables:
                raise TemplateError(f"missing placeholder: {name}")
            return str(variables[name])
        raise TemplateError(f"unbalanced brace at offset {match.start()}")

    missing = sorted(n for n in template.required_placeholders if n not in variables)
    if missing:
        raise TemplateError(f"missing placeholder: {missing[0]}")
    return _PLACEHOLDER_RE.sub(sub, template.body)


class TemplateRegistry:
    """Named templates with a registration-time placeholder audit."""

    def __init__(self) -> None:
        self._templates: dict[str, PromptTemplate] = {}

    def register(self, template: PromptTemplate) -> None:
        actual = frozenset(placeholders_in(template.body))
        if actual != template.required_placeholders:
            raise TemplateError(
                f"template {template.name!r}: declared placeholders "
                f"{sorted(template.required_placeholders)} != body placeholders {sorted(actual)}"
            )
        self._templates[template.name] = template

    def get(self, name: str) -> PromptTemplate:
        if name not in self._templates:
            raise TemplateError(f"unknown template: {name!r}")
        return self._templates[name]

    def names(self) -> list[str]:
        return sorted(self._templates)

    @classmethod
    def from_dir(cls, directory: Path | str) -> "TemplateRegistry":
        """Load every ``<name>.txt`` in a directory as a template."""
        registry = cls()
        for path in sorted(Path(directory).glob("*.txt")):
            registry.register(PromptTemplate.from_body(path.stem, path.read_text(encoding="utf-8")))
        return registry


@dataclass(frozen=True)
class LLMRequest:
    template_name: str
    variables: Mapping[str, object]
    model_id: str
    attachments: tuple[str, ...] = ()
    max_output_tokens: int = 1024
    temperature: float = 0.0
    suffix: str = ""  # appended after rendering; used for corrective retries


def request_key(template_name: str, rendered: str, model_id: str, attachments: Sequence[str]) -> str:
    payload = "\x1f".join([template_name, rendered, model_id, *sorted(attachments)])
    return sha256_text(payload)


@dataclass(frozen=True)
class CacheEntry:
    key: str
    response_text: str
    created_at: int


def _now() -> int:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    return int(epoch) if epoch else int(time.time())


class ResponseCache:
    """Append-only response cache over a JSONL file.

    Concurrent readers are safe; appends are serialized by an in-process
    lock (one writer process per cache file).
    """

    def __init__(self, path: Path | str) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[str, str] = {}
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        with open(self.path, "rb") as fh:
            offset = 0
            for raw in fh:
                try:
                    obj = json.loads(raw.decode("utf-8"))
                    self._entries[obj["key"]] = obj["response_text"]
                except (ValueError, KeyError) as exc:
                    raise CacheCorruptionError(
                        f"{self.path}: corrupt cache record at byte offset {offset}: {exc}"
                    ) from exc
                offset += len(raw)

    def get(self, key: str) -> str | None:
        with self._lock:
            return self._entries.get(key)

    def put(self, key: str, response_text: str) -> None:
        entry = CacheEntry(key=key, response_text=response_text, created_at=_now())
        line = json.dumps(
            {"created_at": entry.created_at, "key": entry.key, "response_text": entry.response_text},
            ensure_ascii=False,
            sort_keys=True,
        )
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = response_text
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def __len__(self) -> int:
        return len(self._entries)


@dataclass
class MockRule:
    template_name: str
    response: str
    digest: str | None = None
    pattern: str | None = None


class MockTransport:
    """Deterministic scripted transport.

    Lookup order: exact (template_name, sha256(rendered prompt)) key, then
    pattern rules for that template in script order (first ``re.search``
    match wins).  Pattern responses are expanded against the match, so
    ``\\1``-style group references echo prompt content back.
    """

    def __init__(self, rules: Sequence[MockRule] = ()) -> None:
        self.calls = 0
        self._exact: dict[tuple[str, str], str] = {}
        self._patterns: list[tuple[str, re.Pattern, str]] = []
        for rule in rules:
            self.add_rule(rule)

    def add_rule(self, rule: MockRule) -> None:
        if rule.digest:
            self._exact[(rule.template_name, rule.digest)] = rule.response
        elif rule.pattern:
            self._patterns.append((rule.template_name, re.compile(rule.pattern), rule.response))
        else:
            raise LLMClientError("mock rule needs a digest or a pattern")

    @classmethod
    def from_script(cls, path: Path | str) -> "MockTransport":
        transport = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise LLMClientError(f"{path}: bad script record on line {lineno}: {exc.msg}") from exc
                transport.add_rule(
                    MockRule(
                        template_name=obj["template_name"],
                        response=obj["response"],
                        digest=obj.get("digest"),
                        pattern=obj.get("pattern"),
                    )
                )
        return transport

    def send(self, template_name: str, rendered: str, request: LLMRequest) -> str:
        self.calls += 1
        digest = sha256_text(rendered)
        exact = self._exact.get((template_name, digest))
        if exact is not None:
            return exact
        for tname, pattern, response in self._patterns:
            if tname != template_name:
                continue
            match = pattern.search(rendered)
            if match:
                return match.expand(response)
        raise MockScriptMiss(f"no scripted response for template={template_name!r} digest={digest}")


@dataclass(frozen=True)
class RemoteLLMConfig:
    base_url: str
    auth_env: str = "SKILLFORGE_API_TOKEN"
    timeout_s: float = 60.0
    max_retries: int = 3
    backoff_s: float = 0.5


class RemoteTransport:
    """Chat-style HTTP transport with bounded retries on transient failures."""

    TRANSIENT_STATUS = frozenset({429, 500, 502, 503, 504})

    def __init__(self, config: RemoteLLMConfig, session: requests.Session | None = None) -> None:
        self.config = config
        self.calls = 0
        self._session = session or requests.Session()

    def send(self, template_name: str, rendered: str, request: LLMRequest) -> str:
        body: dict = {
            "model": request.model_id,
            "messages": [{"role": "user", "content": rendered}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.attachments:
            body["attachments"] = list(request.attachments)
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.config.auth_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"

        last_error = "no attempt made"
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                time.sleep(self.config.backoff_s * (2 ** (attempt - 1)))
            self.calls += 1
            try:
                resp = self._session.post(
                    self.config.base_url, json=body, headers=headers, timeout=self.config.timeout_s
                )
            except requests.RequestException as exc:
                last_error = f"request failed: {exc}"
                continue
            if resp.status_code in self.TRANSIENT_STATUS:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise TransportError(f"malformed completion response: {exc}") from exc
        raise TransportError(f"exhausted {self.config.max_retries} retries: {last_error}")


def _validate_request(request: LLMRequest, multimodal_model_ids: frozenset[str]) -> None:
    if request.temperature != 0.0:
        raise LLMClientError("pipeline requests must pin temperature to 0")
    if request.attachments and request.model_id not in multimodal_model_ids:
        raise LLMClientError(f"model {request.model_id!r} does not accept attachments")


def complete(
    request: LLMRequest,
    transport,
    registry: TemplateRegistry,
    multimodal_model_ids: frozenset[str] = frozenset(),
) -> str:
    """Render the request's template and send it through the transport."""
    _validate_request(request, multimodal_model_ids)
    template = registry.get(request.template_name)
    rendered = render(template, request.variables) + request.suffix
    return transport.send(request.template_name, rendered, request)


def cached_complete(
    request: LLMRequest,
    cache: ResponseCache | None,
    transport,
    registry: TemplateRegistry,
    multimodal_model_ids: frozenset[str] = frozenset(),
) -> str:
    """complete() with a read-through cache; hits never touch the transport."""
    _validate_request(request, multimodal_model_ids)
    if cache is None:
        return complete(request, transport, registry, multimodal_model_ids)
    template = registry.get(request.template_name)
    rendered = render(template, request.variables) + request.suffix
    key = request_key(request.template_name, rendered, request.model_id, request.attachments)
    hit = cache.get(key)
    if hit is not None:
        return hit
    text = transport.send(request.template_name, rendered, request)
    cache.put(key, text)
    return text


class LLMClient:
    """Convenience bundle of registry + transport + optional cache."""

    def __init__(
        self,
        transport,
        registry: TemplateRegistry,
        cache: ResponseCache | None = None,
        model_id: str = "mock-model",
        multimodal_model_ids: frozenset[str] = frozenset({"gemini-2.0-flash"}),
    ) -> None:
        self.transport = transport
        self.registry = registry
        self.cache = cache
        self.model_id = model_id
        self.multimodal_model_ids = multimodal_model_ids

    def complete(
        self,
        template_name: str,
        variables: Mapping[str, object],
        attachments: Sequence[str] = (),
        suffix: str = "",
        max_output_tokens: int = 1024,
    ) -> str:
        request = LLMRequest(
            template_name=template_name,
            variables=dict(variables),
            model_id=self.model_id,
            attachments=tuple(attachments),
            max_output_tokens=max_output_tokens,
            suffix=suffix,
        )
        return cached_complete(request, self.cache, self.transport, self.registry, self.multimodal_model_ids)
