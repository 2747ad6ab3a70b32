"""Chat and embedding backends, plus the scripted test double.

The remote backend speaks a plain OpenAI-style JSON protocol. Everything the
test suite depends on runs offline through ScriptedBackend and HashEmbedder.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import requests

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"

Vector = list[float]


class BackendError(Exception):
    """Base for everything a backend can raise."""


class CredentialError(BackendError):
    """The credential environment variable is missing or empty."""


class TransportError(BackendError):
    """Network failure that survived all retries."""


class ProtocolError(BackendError):
    """The remote endpoint answered, but not with a usable reply."""


class TranscriptExhausted(BackendError):
    """A scripted backend ran past the end of its transcript."""


class MatcherMismatch(BackendError):
    """A scripted entry's expected substring was absent from the request."""


class EmbeddingError(BackendError):
    """Bad embedding input or a malformed embedding table."""


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    png_bytes: bytes

    def __post_init__(self) -> None:
        if not self.png_bytes.startswith(PNG_SIGNATURE):
            raise ValueError("image part must carry PNG bytes")


Part = TextPart | ImagePart


@dataclass(frozen=True)
class ChatRequest:
    """One model call: ordered text/image parts plus a sampling temperature."""

    parts: tuple[Part, ...]
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if not self.parts:
            raise ValueError("a chat request needs at least one part")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")

    def text(self) -> str:
        """All text parts joined, the surface scripted matchers run against."""
        return "\n".join(p.text for p in self.parts if isinstance(p, TextPart))


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: dict | None = None


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str
    model: str
    credential_env: str = "LLM_API_KEY"
    timeout_s: float = 120.0
    max_retries: int = 2

    def __post_init__(self) -> None:
        if self.timeout_s <= 0:
            raise ValueError(f"timeout must be positive, got {self.timeout_s}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")


class ChatBackend(Protocol):
    def chat(self, req: ChatRequest) -> ChatResponse: ...


def _wire_messages(req: ChatRequest) -> list[dict]:
    content: list[dict] = []
    for part in req.parts:
        if isinstance(part, TextPart):
            content.append({"type": "text", "text": part.text})
        else:
            b64 = base64.b64encode(part.png_bytes).decode("ascii")
            content.append({"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}})
    return [{"role": "user", "content": content}]


class HttpChatBackend:
    """Chat over an OpenAI-style /chat/completions JSON endpoint.

    Only transport-level failures (connection errors, timeouts) are retried,
    with exponential backoff. Anything the server actually said is final.
    """

    def __init__(
        self,
        cfg: BackendConfig,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
        backoff_base_s: float = 0.5,
    ) -> None:
        self.cfg = cfg
        self._session = session or requests.Session()
        self._sleep = sleep
        self._backoff_base_s = backoff_base_s

    def _credential(self) -> str:
        key = os.environ.get(self.cfg.credential_env, "")
        if not key:
            raise CredentialError(
                f"environment variable {self.cfg.credential_env} is not set; "
                "remote backends read credentials from the environment only"
            )
        return key

    def chat(self, req: ChatRequest) -> ChatResponse:
        key = self._credential()
        payload = {
            "model": self.cfg.model,
            "temperature": req.temperature,
            "messages": _wire_messages(req),
        }
        headers = {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}
        last_exc: Exception | None = None
        for attempt in range(self.cfg.max_retries + 1):
            try:
                resp = self._session.post(
                    self.cfg.endpoint, json=payload, headers=headers, timeout=self.cfg.timeout_s
                )
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_exc = exc
                if attempt < self.cfg.max_retries:
                    self._sleep(self._backoff_base_s * (2**attempt))
                continue
            if resp.status_code != 200:
                raise ProtocolError(f"endpoint returned HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                body = resp.json()
                text = body["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ProtocolError(f"malformed response body: {exc}") from exc
            if not isinstance(text, str):
                raise ProtocolError(f"response content is {type(text).__name__}, expected string")
            return ChatResponse(text=text, usage=body.get("usage"))
        raise TransportError(
            f"chat call failed after {self.cfg.max_retries + 1} attempts: {last_exc}"
        ) from last_exc


@dataclass(frozen=True)
class ScriptedEntry:
    """One canned reply; `expect` optionally asserts a substring of the request text."""

    text: str
    expect: str | None = None


class ScriptedBackend:
    """Replays a fixed transcript, one entry per call, in order.

    Thread-safe: concurrent callers consume distinct entries. The full
    request/response log is kept for assertions.
    """

    def __init__(self, entries: Sequence[ScriptedEntry]) -> None:
        if not entries:
            raise ValueError("scripted transcript must not be empty")
        self._entries = list(entries)
        self._lock = threading.Lock()
        self._cursor = 0
        self.log: list[tuple[ChatRequest, ChatResponse]] = []

    @classmethod
    def from_file(cls, path: str) -> "ScriptedBackend":
        with open(path) as fh:
            raw = json.load(fh)
        if not isinstance(raw, list):
            raise ValueError(f"{path}: scripted transcript must be a JSON array")
        entries = []
        for i, item in enumerate(raw):
            if not isinstance(item, dict) or "text" not in item:
                raise ValueError(f"{path}: entry {i} must be an object with a 'text' key")
            entries.append(ScriptedEntry(text=item["text"], expect=item.get("expect")))
        return cls(entries)

    @property
    def calls_made(self) -> int:
        return self._cursor

    @property
    def remaining(self) -> int:
        return len(self._entries) - self._cursor

    def chat(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            idx = self._cursor
            if idx >= len(self._entries):
                raise TranscriptExhausted(
                    f"call {idx + 1} arrived but the transcript has only {len(self._entries)} entries"
                )
            entry = self._entries[idx]
            actual = req.text()
            if entry.expect is not None and entry.expect not in actual:
                raise MatcherMismatch(
                    f"call {idx + 1}: expected request text to contain {entry.expect!r}, "
                    f"got {actual[:200]!r}"
                )
            self._cursor += 1
            resp = ChatResponse(text=entry.text)
            self.log.append((req, resp))
            return resp


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    """Cosine similarity; rejects zero vectors and length mismatches."""
    if len(a) != len(b):
        raise EmbeddingError(f"vector lengths differ: {len(a)} vs {len(b)}")
    if not a:
        raise EmbeddingError("vectors must be nonempty")
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    if na == 0 or nb == 0:
        raise EmbeddingError("cosine undefined for zero vectors")
    return dot / (na * nb)


class HashEmbedder:
    """Deterministic stand-in embedder: sha256 expanded to a unit-free vector.

    No semantics, but identical inputs give identical vectors, which is all
    the offline tests need.
    """

    def __init__(self, dim: int = 64) -> None:
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        self.dim = dim

    def _expand(self, seed: bytes) -> Vector:
        out: Vector = []
        counter = 0
        while len(out) < self.dim:
            digest = hashlib.sha256(seed + counter.to_bytes(4, "big")).digest()
            for off in range(0, 32, 4):
                if len(out) >= self.dim:
                    break
                u = int.from_bytes(digest[off : off + 4], "big")
                out.append(u / 2**31 - 1.0)
            counter += 1
        return out

    def embed_text(self, text: str) -> Vector:
        if not text:
            raise EmbeddingError("cannot embed empty text")
        return self._expand(b"text\x00" + text.encode("utf-8"))

    def embed_joint(self, image_png: bytes, text: str) -> Vector:
        if not text:
            raise EmbeddingError("cannot embed empty text")
        if not image_png.startswith(PNG_SIGNATURE):
            raise EmbeddingError("joint embedding needs PNG image bytes")
        return self._expand(b"joint\x00" + hashlib.sha256(image_png).digest() + text.encode("utf-8"))


def load_embedding_table(path: str) -> dict[str, Vector]:
    """Load a JSON object mapping id -> vector; validates shape and finiteness."""
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise EmbeddingError(f"{path}: embedding table must be a JSON object")
    table: dict[str, Vector] = {}
    for key, val in raw.items():
        if not isinstance(val, list) or not val:
            raise EmbeddingError(f"{path}: entry {key!r} must be a nonempty array")
        vec: Vector = []
        for x in val:
            if not isinstance(x, (int, float)) or isinstance(x, bool) or not math.isfinite(x):
                raise EmbeddingError(f"{path}: entry {key!r} contains a non-finite value")
            vec.append(float(x))
        table[key] = vec
    return table
