"""Deterministic offline backends: canned scripts, callables and hashed embeddings."""

from __future__ import annotations

import hashlib
import io
import json
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from ..errors import ScriptExhausted, ScriptMismatch
from .base import (
    Backend,
    BackendRequest,
    BackendResponse,
    Usage,
    embed_images_request,
    embed_request,
    fingerprint,
    transcribe_request,
)

WILDCARD = "*"
TEXT_PREFIX = "text:"


def entry_matches(match: str, fp: str, request: BackendRequest) -> bool:
    """``"*"`` matches anything, ``"text:..."`` any request containing that text, else the fingerprint."""
    if match == WILDCARD:
        return True
    if match.startswith(TEXT_PREFIX):
        return match[len(TEXT_PREFIX):] in request.text
    return match == fp


@dataclass(frozen=True)
class ScriptEntry:
    response: Any
    match: str = WILDCARD


class ScriptedBackend(Backend):
    """Replays canned responses keyed by request fingerprint, request text or ``"*"``.

    In strict mode the next unconsumed entry must match the incoming request;
    in lenient mode the first matching unconsumed entry is used and an
    unmatched request returns ``default``. Entries are never reused.
    """

    name = "scripted"

    def __init__(
        self,
        script: Iterable[ScriptEntry | str | Any] = (),
        *,
        strict: bool = True,
        default: Any = None,
        name: str | None = None,
    ):
        super().__init__(name)
        self.entries = [e if isinstance(e, ScriptEntry) else ScriptEntry(e) for e in script]
        self.strict = strict
        self.default = default
        self.requests: list[BackendRequest] = []
        self._used = [False] * len(self.entries)
        self._lock = threading.Lock()

    @property
    def call_count(self) -> int:
        return len(self.requests)

    @property
    def remaining(self) -> int:
        return self._used.count(False)

    def push(self, response: Any, match: str = WILDCARD) -> None:
        with self._lock:
            self.entries.append(ScriptEntry(response, match))
            self._used.append(False)

    def _take(self, request: BackendRequest) -> Any:
        fp = fingerprint(request)
        with self._lock:
            self.requests.append(request)
            pending = [i for i, used in enumerate(self._used) if not used]
            if self.strict:
                if not pending:
                    raise ScriptExhausted(f"{self.name}: script exhausted after {len(self.requests) - 1} calls")
                i = pending[0]
                if not entry_matches(self.entries[i].match, fp, request):
                    raise ScriptMismatch(f"{self.name}: request {fp[:12]} does not match entry {i}")
            else:
                i = next((j for j in pending if entry_matches(self.entries[j].match, fp, request)), None)
                if i is None:
                    if self.default is None:
                        raise ScriptExhausted(f"{self.name}: no entry matches request {fp[:12]}")
                    return self.default
            self._used[i] = True
            return self.entries[i].response

    def chat(self, request: BackendRequest) -> BackendResponse:
        text = self._take(request)
        if not isinstance(text, str):
            text = json.dumps(text, ensure_ascii=False)
        usage = Usage(1, len(request.text.split()), len(text.split()))
        self.usage.add(usage)
        return BackendResponse(text, usage)

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        out = self._take(embed_request(texts))
        self.usage.add(Usage(calls=1))
        return [list(map(float, v)) for v in out]

    def embed_images(self, images: Sequence[bytes]) -> list[list[float]]:
        out = self._take(embed_images_request(images))
        self.usage.add(Usage(calls=1))
        return [list(map(float, v)) for v in out]

    def transcribe(self, source: str) -> list[dict[str, Any]]:
        out = self._take(transcribe_request(source))
        self.usage.add(Usage(calls=1))
        return list(out or [])


class CallableBackend(Backend):
    """Chat/vision backend whose answer is computed by a Python function of the request."""

    name = "callable"

    def __init__(self, fn: Callable[[BackendRequest], str], name: str | None = None):
        super().__init__(name)
        self.fn = fn
        self.requests: list[BackendRequest] = []
        self._lock = threading.Lock()

    @property
    def call_count(self) -> int:
        return len(self.requests)

    def chat(self, request: BackendRequest) -> BackendResponse:
        with self._lock:
            self.requests.append(request)
        text = self.fn(request)
        usage = Usage(1, len(request.text.split()), len(text.split()))
        self.usage.add(usage)
        return BackendResponse(text, usage)


_WORD_RE = re.compile(r"[a-z0-9]+")


def hashed_text_vector(text: str, dim: int = 64) -> list[float]:
    """Bag-of-words vector with hashed buckets; deterministic across processes."""
    vec = np.zeros(dim)
    for word in _WORD_RE.findall(text.lower()):
        bucket = int.from_bytes(hashlib.sha1(word.encode()).digest()[:4], "big") % (dim - 1)
        vec[bucket] += 1.0
    vec[dim - 1] = 0.1  # keeps empty strings away from the zero vector
    return vec.tolist()


def hashed_image_vector(image: bytes, dim: int = 64) -> list[float]:
    """Coarse 4x4 grayscale thumbnail followed by hashed padding."""
    from PIL import Image

    with Image.open(io.BytesIO(image)) as img:
        thumb = np.asarray(img.convert("L").resize((4, 4)), dtype=np.float64).ravel() / 255.0
    vec = np.zeros(dim)
    vec[: min(16, dim - 1)] = thumb[: min(16, dim - 1)]
    vec[dim - 1] = 0.1
    return vec.tolist()


class ScriptedEmbedder(Backend):
    """Embedding backend backed by a lookup table, with an optional hashed fallback."""

    name = "scripted-embedder"

    def __init__(
        self,
        table: Mapping[str, Sequence[float]] | None = None,
        *,
        image_fn: Callable[[bytes], Sequence[float]] | None = None,
        fallback: str | None = "hash",
        dim: int = 64,
        name: str | None = None,
    ):
        super().__init__(name)
        self.table = {k: list(map(float, v)) for k, v in (table or {}).items()}
        self.image_fn = image_fn
        self.fallback = fallback
        self.dim = dim
        self.text_calls = 0
        self.image_calls = 0

    @property
    def call_count(self) -> int:
        return self.text_calls + self.image_calls

    @property
    def identity(self) -> str:
        table = json.dumps(self.table, sort_keys=True)
        digest = hashlib.sha256(f"{table}|{self.fallback}|{self.dim}".encode()).hexdigest()[:12]
        return f"{self.name}#{digest}"

    def _text_vector(self, text: str) -> list[float]:
        if text in self.table:
            return self.table[text]
        if self.fallback == "hash":
            return hashed_text_vector(text, self.dim)
        raise ScriptExhausted(f"{self.name}: no embedding scripted for {text!r}")

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        self.text_calls += 1
        self.usage.add(Usage(calls=1))
        return [self._text_vector(t) for t in texts]

    def embed_images(self, images: Sequence[bytes]) -> list[list[float]]:
        self.image_calls += 1
        self.usage.add(Usage(calls=1))
        out = []
        for img in images:
            key = hashlib.sha256(img).hexdigest()
            if key in self.table:
                out.append(self.table[key])
            elif self.image_fn is not None:
                out.append(list(map(float, self.image_fn(img))))
            elif self.fallback == "hash":
                out.append(hashed_image_vector(img, self.dim))
            else:
                raise ScriptExhausted(f"{self.name}: no embedding scripted for image {key[:12]}")
        return out


# ---------------------------------------------------------------------------
# Script files
# ---------------------------------------------------------------------------


def load_script(path: str | Path) -> dict[str, Backend]:
    """Build scripted backends from a line-delimited script file.

    Each line is a JSON object with a ``backend`` role name and either a
    ``response`` (optionally with ``match``), or, for embedders, an
    ``embedder`` block (``table``/``fallback``/``dim``). A line carrying
    ``options`` sets ``strict``/``default`` for that role.
    """
    backends: dict[str, Backend] = {}
    options: dict[str, dict[str, Any]] = {}
    entries: dict[str, list[ScriptEntry]] = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{n}: invalid script line: {exc}") from exc
        role = rec["backend"]
        if "embedder" in rec:
            spec = rec["embedder"]
            backends[role] = ScriptedEmbedder(
                spec.get("table"), fallback=spec.get("fallback", "hash"), dim=spec.get("dim", 64), name=role
            )
        elif "options" in rec:
            options.setdefault(role, {}).update(rec["options"])
        else:
            entries.setdefault(role, []).append(ScriptEntry(rec["response"], rec.get("match", WILDCARD)))
    for role, script in entries.items():
        opts = options.get(role, {})
        backends[role] = ScriptedBackend(script, strict=opts.get("strict", True), default=opts.get("default"), name=role)
    for role, opts in options.items():
        if role not in backends:
            backends[role] = ScriptedBackend((), strict=opts.get("strict", False), default=opts.get("default"), name=role)
    return backends
