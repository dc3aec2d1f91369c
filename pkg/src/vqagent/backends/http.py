"""HTTPS backends speaking the common hosted-inference wire format.

Chat and vision go to ``{endpoint}/chat/completions`` as role-tagged
messages; images travel inline as base64 data URLs. Text embeddings use
``{endpoint}/embeddings``; image embeddings use the same route with
``{"type": "image", "data": <base64>}`` inputs. Transcription posts the
media file to ``{endpoint}/audio/transcriptions`` and reads timed segments.
"""

from __future__ import annotations

import base64
import io
import os
import threading
from pathlib import Path
from typing import Any, Callable, Sequence

import httpx

from ..errors import ProviderRejection, RateLimited, Transport
from .base import Backend, BackendRequest, BackendResponse, RetryPolicy, Usage, call_with_retry, check_request


def _data_url(image: bytes, max_dim: int | None) -> str:
    if max_dim:
        from PIL import Image

        with Image.open(io.BytesIO(image)) as img:
            if max(img.size) > max_dim:
                from ..media import encode_image

                image = encode_image(img, "PNG", max_dim)
    mime = "image/jpeg" if image[:3] == b"\xff\xd8\xff" else "image/png"
    return f"data:{mime};base64,{base64.b64encode(image).decode('ascii')}"


class HttpBackend(Backend):
    name = "http"

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        auth_env: str | None = None,
        name: str | None = None,
        timeout: float = 120.0,
        retry: RetryPolicy | None = None,
        concurrency: int = 4,
        max_image_dim: int | None = 768,
        max_images: int = 10,
        temperature: float | None = None,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] | None = None,
    ):
        super().__init__(name)
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.auth_env = auth_env
        self.retry = retry or RetryPolicy()
        self.max_image_dim = max_image_dim
        self.max_images = max_images
        self.temperature = temperature
        self._slots = threading.BoundedSemaphore(max(1, concurrency))
        self._client = client or httpx.Client(timeout=timeout)
        self._sleep = sleep
        self.attempts = 0

    @property
    def identity(self) -> str:
        return f"{self.endpoint}#{self.model}"

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.auth_env:
            token = os.environ.get(self.auth_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    def _post(self, path: str, **kw) -> dict[str, Any]:
        def attempt() -> dict[str, Any]:
            self.attempts += 1
            try:
                with self._slots:
                    resp = self._client.post(f"{self.endpoint}{path}", **kw)
            except httpx.TransportError as exc:
                raise Transport(f"{self.name}: {exc}") from exc
            if resp.status_code == 429:
                raise RateLimited(f"{self.name}: rate limited")
            if resp.status_code >= 500:
                raise Transport(f"{self.name}: server error {resp.status_code}")
            if resp.status_code >= 400:
                raise ProviderRejection(f"{self.name}: {resp.status_code} {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise Transport(f"{self.name}: response is not JSON") from exc

        if self._sleep is not None:
            return call_with_retry(attempt, self.retry, sleep=self._sleep)
        return call_with_retry(attempt, self.retry)

    def _messages(self, request: BackendRequest) -> list[dict[str, Any]]:
        out: list[dict[str, Any]] = [{"role": m.role, "content": m.content} for m in request.messages]
        if request.images:
            last_user = max((i for i, m in enumerate(out) if m["role"] == "user"), default=None)
            if last_user is None:
                out.append({"role": "user", "content": ""})
                last_user = len(out) - 1
            parts: list[dict[str, Any]] = [{"type": "text", "text": out[last_user]["content"]}]
            parts += [
                {"type": "image_url", "image_url": {"url": _data_url(img, self.max_image_dim)}} for img in request.images
            ]
            out[last_user] = {"role": "user", "content": parts}
        return out

    def chat(self, request: BackendRequest) -> BackendResponse:
        check_request(request, self.max_images)
        payload: dict[str, Any] = {
            "model": self.model,
            "messages": self._messages(request),
            "temperature": request.temperature if self.temperature is None else self.temperature,
        }
        if request.max_tokens:
            payload["max_tokens"] = request.max_tokens
        data = self._post("/chat/completions", json=payload, headers=self._headers())
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise Transport(f"{self.name}: unexpected chat response shape") from exc
        u = data.get("usage") or {}
        usage = Usage(1, int(u.get("prompt_tokens", 0)), int(u.get("completion_tokens", 0)))
        self.usage.add(usage)
        return BackendResponse(text, usage)

    def _embeddings(self, inputs: list[Any]) -> list[list[float]]:
        data = self._post("/embeddings", json={"model": self.model, "input": inputs}, headers=self._headers())
        try:
            rows = sorted(data["data"], key=lambda r: r.get("index", 0))
            vectors = [list(map(float, r["embedding"])) for r in rows]
        except (KeyError, TypeError) as exc:
            raise Transport(f"{self.name}: unexpected embedding response shape") from exc
        u = data.get("usage") or {}
        self.usage.add(Usage(1, int(u.get("prompt_tokens", 0)), 0))
        return vectors

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        return self._embeddings(list(texts))

    def embed_images(self, images: Sequence[bytes]) -> list[list[float]]:
        return self._embeddings([{"type": "image", "data": base64.b64encode(i).decode("ascii")} for i in images])

    def transcribe(self, source: str) -> list[dict[str, Any]]:
        headers = {k: v for k, v in self._headers().items() if k != "Content-Type"}
        path = Path(source)
        with open(path, "rb") as fh:
            content = fh.read()
        data = self._post(
            "/audio/transcriptions",
            files={"file": (path.name, content)},
            data={"model": self.model, "response_format": "verbose_json"},
            headers=headers,
        )
        self.usage.add(Usage(calls=1))
        segments = data.get("segments") or []
        return [{"start": s["start"], "end": s["end"], "text": s.get("text", "")} for s in segments]


class HttpToolEndpoint:
    """Handler for a config-declared custom tool: POSTs the arguments, returns the body text."""

    def __init__(self, endpoint: str, auth_env: str | None = None, timeout: float = 60.0, client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.auth_env = auth_env
        self._client = client or httpx.Client(timeout=timeout)

    def __call__(self, args: dict[str, str], ctx: Any = None) -> str:
        headers = {}
        if self.auth_env and os.environ.get(self.auth_env):
            headers["Authorization"] = f"Bearer {os.environ[self.auth_env]}"
        try:
            resp = self._client.post(self.endpoint, json=args, headers=headers)
        except httpx.TransportError as exc:
            raise Transport(str(exc)) from exc
        if resp.status_code >= 400:
            raise ProviderRejection(f"tool endpoint returned {resp.status_code}")
        return resp.text.strip()
