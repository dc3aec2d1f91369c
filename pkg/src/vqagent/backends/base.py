"""Backend request/response types, fingerprints, usage accounting and retries."""

from __future__ import annotations

import hashlib
import json
import logging
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence, TypeVar

from ..errors import ImageLimitExceeded, RateLimited, Transport

log = logging.getLogger(__name__)

MAX_IMAGES = 10

T = TypeVar("T")


@dataclass(frozen=True)
class Message:
    role: str  # "system" | "user" | "assistant"
    content: str


@dataclass(frozen=True)
class BackendRequest:
    messages: tuple[Message, ...]
    images: tuple[bytes, ...] = ()
    temperature: float = 0.0
    max_tokens: int | None = None
    kind: str = "chat"

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        object.__setattr__(self, "images", tuple(self.images))

    @property
    def text(self) -> str:
        return "\n".join(m.content for m in self.messages)


def chat_request(system: str | None, *turns: tuple[str, str], images: Sequence[bytes] = (), **kw) -> BackendRequest:
    messages = [Message("system", system)] if system is not None else []
    messages += [Message(role, content) for role, content in turns]
    kind = "vision" if images else kw.pop("kind", "chat")
    return BackendRequest(tuple(messages), tuple(images), kind=kind, **kw)


@dataclass
class Usage:
    calls: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(
            self.calls + other.calls,
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
        )

    def as_dict(self) -> dict[str, int]:
        return {"calls": self.calls, "prompt_tokens": self.prompt_tokens, "completion_tokens": self.completion_tokens}


class UsageMeter:
    """Thread-safe running total of backend usage."""

    def __init__(self):
        self._lock = threading.Lock()
        self._total = Usage()

    def add(self, usage: Usage) -> None:
        with self._lock:
            self._total = self._total + usage

    @property
    def total(self) -> Usage:
        with self._lock:
            return Usage(**self._total.as_dict())


@dataclass(frozen=True)
class BackendResponse:
    text: str
    usage: Usage = field(default_factory=lambda: Usage(calls=1))


def check_request(request: BackendRequest, max_images: int = MAX_IMAGES) -> None:
    if len(request.images) > max_images:
        raise ImageLimitExceeded(f"request carries {len(request.images)} images; the limit is {max_images}")


def _normalize(text: str) -> str:
    return " ".join(text.split())


def fingerprint(request: BackendRequest) -> str:
    """Stable content hash of a request (whitespace-normalized text, image digests)."""
    canonical = {
        "kind": request.kind,
        "messages": [[m.role, _normalize(m.content)] for m in request.messages],
        "images": [hashlib.sha256(img).hexdigest() for img in request.images],
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    }
    blob = json.dumps(canonical, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def embed_request(texts: Sequence[str]) -> BackendRequest:
    return BackendRequest(tuple(Message("input", t) for t in texts), kind="embed")


def embed_images_request(images: Sequence[bytes]) -> BackendRequest:
    return BackendRequest((), tuple(images), kind="embed_images")


def transcribe_request(source: str) -> BackendRequest:
    return BackendRequest((Message("input", source),), kind="transcribe")


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_delay: float = 0.5
    max_delay: float = 8.0
    jitter: float = 0.5

    def delay(self, attempt: int, rng: random.Random | None = None) -> float:
        rng = rng or random
        d = min(self.max_delay, self.base_delay * (2 ** (attempt - 1)))
        return d * (1 + self.jitter * rng.random())


def call_with_retry(
    fn: Callable[[], T],
    policy: RetryPolicy,
    sleep: Callable[[float], None] = time.sleep,
) -> T:
    """Run ``fn``; retry transport errors and rate limits, never provider rejections."""
    attempt = 1
    while True:
        try:
            return fn()
        except (Transport, RateLimited) as exc:
            if attempt >= policy.max_attempts:
                raise
            wait = policy.delay(attempt)
            log.warning("backend call failed (%s); retry %d/%d in %.2fs", exc, attempt, policy.max_attempts - 1, wait)
            sleep(wait)
            attempt += 1


class Backend:
    """Common surface of every model backend.

    Subclasses override only the capabilities they provide. ``vision`` shares
    the chat path but enforces the image limit before anything is sent.
    """

    name = "backend"
    max_images = MAX_IMAGES

    def __init__(self, name: str | None = None):
        if name:
            self.name = name
        self.usage = UsageMeter()

    @property
    def identity(self) -> str:
        return self.name

    def chat(self, request: BackendRequest) -> BackendResponse:
        raise NotImplementedError(f"{type(self).__name__} does not support chat")

    def vision(self, request: BackendRequest) -> BackendResponse:
        check_request(request, self.max_images)
        return self.chat(request)

    def complete(self, request: BackendRequest) -> BackendResponse:
        """Dispatch to ``vision`` when images are attached, else ``chat``."""
        if request.images:
            return self.vision(request)
        return self.chat(request)

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        raise NotImplementedError(f"{type(self).__name__} does not support text embeddings")

    def embed_images(self, images: Sequence[bytes]) -> list[list[float]]:
        raise NotImplementedError(f"{type(self).__name__} does not support image embeddings")

    def transcribe(self, source: str) -> list[dict[str, Any]]:
        raise NotImplementedError(f"{type(self).__name__} does not support transcription")


@dataclass
class BackendSet:
    """Every remote model a session may touch. Reasoner and critic are independent."""

    reasoner: Backend
    critic: Backend | None = None
    vit: Backend | None = None
    embedder: Backend | None = None
    frame_embedder: Backend | None = None
    asr: Backend | None = None
    judge: Backend | None = None
    capabilities: dict[str, Backend] = field(default_factory=dict)

    def all(self) -> dict[str, Backend]:
        named = {
            "reasoner": self.reasoner,
            "critic": self.critic,
            "vit": self.vit,
            "embedder": self.embedder,
            "frame_embedder": self.frame_embedder,
            "asr": self.asr,
            "judge": self.judge,
        }
        named.update(self.capabilities)
        return {k: v for k, v in named.items() if v is not None}

    def total_usage(self) -> Usage:
        seen: set[int] = set()
        total = Usage()
        for backend in self.all().values():
            if id(backend) in seen:
                continue
            seen.add(id(backend))
            total = total + backend.usage.total
        return total
