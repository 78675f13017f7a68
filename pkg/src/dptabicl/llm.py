"""Completion backends, answer extraction and a deterministic mock.

Wire format (HTTP POST, JSON)::

    request:  {"model": str, "prompt": str, "max_tokens": int, "temperature": float}
    response: {"text": str}   or   {"choices": [{"text": str}, ...]}

The second response shape is what OpenAI-style ``/v1/completions`` servers
(vLLM, llama.cpp server, text-generation-inference) return.
"""

from __future__ import annotations

import enum
import os
import re
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from typing import Callable, Mapping, Protocol, Sequence

import httpx

from .errors import BackendError, MalformedResponseError, TransportError
from .serialize import Prompt

ENV_PREFIX = "DPTABICL_"
ANSWER_WINDOW = 16
_TOKEN = re.compile(r"[A-Za-z0-9']+")


class Verdict(enum.Enum):
    YES = "Yes"
    NO = "No"
    UNPARSED = "Unparsed"


def extract_answer(text: str) -> Verdict:
    """First standalone yes/no among the first 16 word tokens, case-insensitive."""
    for tok in _TOKEN.findall(text or "")[:ANSWER_WINDOW]:
        low = tok.lower()
        if low == "yes":
            return Verdict.YES
        if low == "no":
            return Verdict.NO
    return Verdict.UNPARSED


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str = "http://127.0.0.1:8000/v1/completions"
    model: str = "default"
    max_tokens: int = 8
    temperature: float = 0.0
    timeout: float = 60.0
    concurrency: int = 4
    retries: int = 2
    backoff: float = 0.5
    api_key: str | None = None

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")

    @classmethod
    def resolve(cls, file_values: Mapping | None = None, env: Mapping | None = None, **flags) -> "BackendConfig":
        """Merge settings with precedence flags > environment > file.

        Environment variables are ``DPTABICL_<FIELD>`` (e.g. ``DPTABICL_ENDPOINT``).
        ``None`` flags are ignored.
        """
        env = os.environ if env is None else env
        merged: dict = {}
        types = {f.name: f.type for f in fields(cls)}
        for name in types:
            if file_values and file_values.get(name) is not None:
                merged[name] = file_values[name]
            if env.get(ENV_PREFIX + name.upper()) is not None:
                merged[name] = env[ENV_PREFIX + name.upper()]
            if flags.get(name) is not None:
                merged[name] = flags[name]
        base = cls()
        for name, value in list(merged.items()):
            current = getattr(base, name)
            if isinstance(current, bool) or current is None:
                continue
            merged[name] = type(current)(value)
        return replace(base, **merged)


@dataclass(frozen=True)
class Completion:
    text: str
    latency: float
    backend_id: str


class Backend(Protocol):
    backend_id: str

    def complete(self, prompt: Prompt) -> Completion: ...


class HTTPBackend:
    """Completion endpoint client with bounded retries and exponential backoff."""

    def __init__(self, config: BackendConfig, client: httpx.Client | None = None, sleep=time.sleep):
        self.config = config
        self.backend_id = f"http:{config.model}@{config.endpoint}"
        self._client = client or httpx.Client(timeout=config.timeout)
        self._sleep = sleep

    def close(self):
        self._client.close()

    def _headers(self):
        h = {"Content-Type": "application/json"}
        if self.config.api_key:
            h["Authorization"] = f"Bearer {self.config.api_key}"
        return h

    def complete(self, prompt: Prompt) -> Completion:
        cfg = self.config
        body = {
            "model": cfg.model,
            "prompt": prompt.text,
            "max_tokens": cfg.max_tokens,
            "temperature": cfg.temperature,
        }
        attempts = cfg.retries + 1
        last = None
        start = time.perf_counter()
        for attempt in range(attempts):
            if attempt:
                self._sleep(cfg.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(cfg.endpoint, json=body, headers=self._headers(), timeout=cfg.timeout)
            except httpx.TimeoutException as exc:
                last = f"timeout after {cfg.timeout}s ({exc})"
                continue
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}: {exc}"
                continue
            if resp.status_code >= 500 or resp.status_code == 429:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise BackendError(f"{cfg.endpoint} rejected the request: HTTP {resp.status_code} {resp.text[:200]}")
            return Completion(parse_response(resp), time.perf_counter() - start, self.backend_id)
        err = TransportError(f"{cfg.endpoint}: giving up after {attempts} attempts; last error: {last}")
        err.attempts = attempts
        raise err


def parse_response(resp: httpx.Response) -> str:
    try:
        payload = resp.json()
    except ValueError:
        raise MalformedResponseError(f"response is not JSON: {resp.text[:200]!r}") from None
    if isinstance(payload, dict):
        if isinstance(payload.get("text"), str):
            return payload["text"]
        choices = payload.get("choices")
        if isinstance(choices, list) and choices and isinstance(choices[0], dict):
            text = choices[0].get("text")
            if isinstance(text, str):
                return text
    raise MalformedResponseError(f"response has neither 'text' nor 'choices[0].text': {str(payload)[:200]}")


class MockBackend:
    """Deterministic, seedless stand-in for an LLM.

    Modes:
      * ``"echo-majority"``: majority answer among the prompt's demonstrations,
        ties (including zero shots) answered "Yes";
      * ``"fixed"``: always ``answer``;
      * ``"oracle"``: ``oracle(query_record)``, which must return "Yes" or "No".
    """

    def __init__(self, mode="echo-majority", answer: str = "Yes", oracle: Callable | None = None):
        if mode not in ("echo-majority", "fixed", "oracle"):
            raise ValueError(f"unknown mock mode {mode!r}")
        if mode == "oracle" and oracle is None:
            raise ValueError("oracle mode needs a classifier")
        self.mode = mode
        self.answer = answer
        self.oracle = oracle
        self.backend_id = f"mock:{mode}" + (f":{answer}" if mode == "fixed" else "")
        self._lock = threading.Lock()
        self.calls = 0

    @classmethod
    def from_spec(cls, spec: str, oracle: Callable | None = None) -> "MockBackend":
        """Parse ``"echo-majority"``, ``"fixed:No"`` or ``"oracle"``."""
        mode, _, arg = spec.partition(":")
        if mode == "fixed":
            return cls("fixed", answer=arg or "Yes")
        return cls(mode, oracle=oracle)

    def complete(self, prompt: Prompt) -> Completion:
        with self._lock:
            self.calls += 1
        if self.mode == "fixed":
            text = self.answer
        elif self.mode == "oracle":
            text = self.oracle(prompt.query_record)
        else:
            votes = Counter(d.answer for d in prompt.demonstrations)
            text = "No" if votes["No"] > votes["Yes"] else "Yes"
        return Completion(text, 0.0, self.backend_id)


def complete(prompt: Prompt, backend) -> Completion:
    """Send one prompt. ``backend`` is a backend object or a BackendConfig."""
    if isinstance(backend, BackendConfig):
        b = HTTPBackend(backend)
        try:
            return b.complete(prompt)
        finally:
            b.close()
    return backend.complete(prompt)


def complete_many(prompts: Sequence[Prompt], backend, concurrency: int = 1) -> dict:
    """Complete all prompts with at most ``concurrency`` in flight.

    Returns completions keyed by ``prompt.query_id`` (or position when unset),
    so completion order never affects aggregation.
    """
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    keys = [p.query_id if p.query_id is not None else i for i, p in enumerate(prompts)]
    if len(set(keys)) != len(keys):
        raise ValueError("query ids must be unique")
    if concurrency == 1:
        return {k: backend.complete(p) for k, p in zip(keys, prompts)}
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        futures = {k: pool.submit(backend.complete, p) for k, p in zip(keys, prompts)}
        return {k: f.result() for k, f in futures.items()}
