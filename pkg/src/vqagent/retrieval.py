"""Exact cosine-similarity search over transcript phrases and sampled frames."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image

from .errors import DimensionMismatch, EmbedderFailure, EmptyTranscript, IndexFormatError, ZeroVector
from .media import Timestamp, TranscriptPhrase, encode_image, format_timestamp, midpoint, parse_timestamp

MAGIC = b"VQAIDX"
FORMAT_VERSION = 1


def _as_vector(v: Sequence[float]) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).ravel()


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    a = _as_vector(a)
    b = _as_vector(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"dimension {a.shape[0]} != {b.shape[0]}")
    na = float(np.sqrt(np.dot(a, a)))
    nb = float(np.sqrt(np.dot(b, b)))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class IndexEntry:
    key: Timestamp
    payload: str


class EmbeddingIndex:
    """Immutable exact-search index.

    Results are the top-k entries by cosine similarity, best first; ties go
    to the earlier timestamp.
    """

    kind = "generic"

    def __init__(self, keys: Sequence[Timestamp], vectors: Sequence[Sequence[float]] | np.ndarray, payloads: Sequence[str] | None = None, embedder_id: str = ""):
        if len(keys) == 0:
            raise EmptyTranscript("cannot build an empty index")
        matrix = np.asarray(vectors, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(keys):
            raise DimensionMismatch("need exactly one vector of a common dimension per entry")
        norms = np.sqrt((matrix * matrix).sum(axis=1))
        if np.any(norms == 0.0):
            bad = int(np.flatnonzero(norms == 0.0)[0])
            raise ZeroVector(f"entry {bad} ({keys[bad]}) has a zero embedding")
        payloads = list(payloads) if payloads is not None else [""] * len(keys)
        self.entries = tuple(IndexEntry(k, p) for k, p in zip(keys, payloads))
        self._matrix = matrix
        self._matrix.setflags(write=False)
        self._norms = norms
        self._key_seconds = np.array([k.seconds for k in keys], dtype=np.int64)
        self.embedder_id = embedder_id

    @property
    def dimension(self) -> int:
        return int(self._matrix.shape[1])

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def vectors(self) -> np.ndarray:
        return self._matrix

    def similarities(self, query: Sequence[float]) -> np.ndarray:
        q = _as_vector(query)
        if q.shape[0] != self.dimension:
            raise DimensionMismatch(f"query dimension {q.shape[0]} != index dimension {self.dimension}")
        qn = float(np.sqrt(np.dot(q, q)))
        if qn == 0.0:
            raise ZeroVector("query embedding is a zero vector")
        # row-wise reduction keeps identical rows bit-identical
        dots = (self._matrix * q).sum(axis=1)
        return np.clip(dots / (self._norms * qn), -1.0, 1.0)

    def search_vector(self, query: Sequence[float], k: int = 3) -> list[Timestamp]:
        if k < 1:
            raise ValueError("k must be at least 1")
        sims = self.similarities(query)
        order = np.lexsort((np.arange(len(sims)), self._key_seconds, -sims))
        return [self.entries[i].key for i in order[:k]]

    def search(self, query: str, embedder: Any, k: int = 3) -> list[Timestamp]:
        try:
            vectors = embedder.embed([query])
        except Exception as exc:
            raise EmbedderFailure(f"query embedding failed: {exc}") from exc
        if len(vectors) != 1:
            raise EmbedderFailure("embedder returned the wrong number of vectors")
        return self.search_vector(vectors[0], k)

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        header = json.dumps(
            {
                "kind": self.kind,
                "version": FORMAT_VERSION,
                "dimension": self.dimension,
                "count": len(self),
                "embedder": self.embedder_id,
                "keys": [format_timestamp(e.key) for e in self.entries],
                "payloads": [e.payload for e in self.entries],
            },
            ensure_ascii=False,
        ).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<BI", FORMAT_VERSION, len(header)))
            fh.write(header)
            fh.write(self._matrix.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingIndex":
        blob = Path(path).read_bytes()
        if not blob.startswith(MAGIC):
            raise IndexFormatError(f"{path}: not an index sidecar")
        off = len(MAGIC)
        try:
            version, hlen = struct.unpack_from("<BI", blob, off)
        except struct.error as exc:
            raise IndexFormatError(f"{path}: truncated header") from exc
        if version != FORMAT_VERSION:
            raise IndexFormatError(f"{path}: unsupported index version {version}")
        off += struct.calcsize("<BI")
        try:
            meta = json.loads(blob[off : off + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IndexFormatError(f"{path}: corrupt header") from exc
        body = blob[off + hlen :]
        n, dim = meta["count"], meta["dimension"]
        if len(body) != n * dim * 8:
            raise IndexFormatError(f"{path}: expected {n}x{dim} vectors")
        matrix = np.frombuffer(body, dtype="<f8").reshape(n, dim).astype(np.float64)
        target = {"phrase": PhraseIndex, "frame": FrameIndex}.get(meta["kind"], EmbeddingIndex)
        obj = target.__new__(target)
        EmbeddingIndex.__init__(obj, [parse_timestamp(k) for k in meta["keys"]], matrix, meta["payloads"], meta.get("embedder", ""))
        return obj


class PhraseIndex(EmbeddingIndex):
    kind = "phrase"


class FrameIndex(EmbeddingIndex):
    kind = "frame"


def _embed(embedder: Any, method: str, items: list[Any], batch: int) -> list[Sequence[float]]:
    out: list[Sequence[float]] = []
    for i in range(0, len(items), batch):
        chunk = items[i : i + batch]
        try:
            vectors = getattr(embedder, method)(chunk)
        except Exception as exc:
            raise EmbedderFailure(f"embedding failed: {exc}") from exc
        if len(vectors) != len(chunk):
            raise EmbedderFailure(f"embedder returned {len(vectors)} vectors for {len(chunk)} inputs")
        out.extend(vectors)
    return out


def _identity(embedder: Any) -> str:
    return str(getattr(embedder, "identity", type(embedder).__name__))


def build_phrase_index(phrases: Sequence[TranscriptPhrase], embedder: Any, batch: int = 64) -> PhraseIndex:
    """One entry per phrase, keyed by the phrase's midpoint timestamp."""
    phrases = list(phrases)
    if not phrases:
        raise EmptyTranscript("transcript has no phrases to index")
    vectors = _embed(embedder, "embed", [p.text for p in phrases], batch)
    return PhraseIndex([midpoint(p.start, p.end) for p in phrases], vectors, [p.text for p in phrases], _identity(embedder))


def build_frame_index(frames: Sequence[tuple[Timestamp, Image.Image | bytes]], embedder: Any, batch: int = 16) -> FrameIndex:
    frames = list(frames)
    if not frames:
        raise EmptyTranscript("no frames to index")
    payloads = [f if isinstance(f, bytes) else encode_image(f) for _, f in frames]
    vectors = _embed(embedder, "embed_images", payloads, batch)
    return FrameIndex([ts for ts, _ in frames], vectors, [""] * len(frames), _identity(embedder))


def search_phrases(index: PhraseIndex, query: str, embedder: Any, k: int = 3) -> list[Timestamp]:
    return index.search(query, embedder, k)


def search_frames(index: FrameIndex, query: str, embedder: Any, k: int = 3) -> list[Timestamp]:
    return index.search(query, embedder, k)


def format_hits(hits: Sequence[Timestamp]) -> str:
    """Tool-facing form: comma-separated, best match first."""
    return ",".join(format_timestamp(h) for h in hits)
