"""Media ingestion: timestamps, frame decoding, clip sampling and transcripts."""

from __future__ import annotations

import hashlib
import io
import math
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Protocol, Sequence

import numpy as np
from PIL import Image

from .errors import ASRFailure, BackendError, BadTimestamp, DecodeFailure, OutOfRange

CLIP_FRAMES = 10
CLIP_BEFORE = 5  # window is [center - 5, center + 4]

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp", ".tif", ".tiff"}

_TS_RE = re.compile(r"^(\d+):([0-5]\d):([0-5]\d)$")


@dataclass(frozen=True, order=True)
class Timestamp:
    """Whole-second offset into a video; text form is zero-padded ``HH:MM:SS``."""

    seconds: int

    def __post_init__(self):
        if not isinstance(self.seconds, (int, np.integer)) or isinstance(self.seconds, bool):
            raise BadTimestamp(f"timestamp seconds must be an integer, got {self.seconds!r}")
        if self.seconds < 0:
            raise BadTimestamp(f"negative timestamp: {self.seconds}")
        object.__setattr__(self, "seconds", int(self.seconds))

    @classmethod
    def parse(cls, text: str) -> "Timestamp":
        return parse_timestamp(text)

    @classmethod
    def from_seconds(cls, seconds: float) -> "Timestamp":
        """Round a fractional offset half-up to whole seconds."""
        if seconds < 0 or math.isnan(seconds):
            raise BadTimestamp(f"invalid offset: {seconds}")
        return cls(int(math.floor(seconds + 0.5)))

    def __str__(self) -> str:
        return format_timestamp(self)


def parse_timestamp(text: str) -> Timestamp:
    m = _TS_RE.match(text.strip()) if isinstance(text, str) else None
    if not m:
        raise BadTimestamp(f"expected HH:MM:SS, got {text!r}")
    h, mnt, s = (int(g) for g in m.groups())
    return Timestamp(h * 3600 + mnt * 60 + s)


def format_timestamp(ts: Timestamp | int) -> str:
    seconds = ts.seconds if isinstance(ts, Timestamp) else int(ts)
    if seconds < 0:
        raise BadTimestamp(f"negative timestamp: {seconds}")
    h, rem = divmod(seconds, 3600)
    m, s = divmod(rem, 60)
    return f"{h:02d}:{m:02d}:{s:02d}"


def midpoint(start: Timestamp, end: Timestamp) -> Timestamp:
    """Arithmetic mean of two timestamps, rounded half-up to whole seconds."""
    return Timestamp((start.seconds + end.seconds + 1) // 2)


# ---------------------------------------------------------------------------
# Transcripts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TranscriptPhrase:
    start: Timestamp
    end: Timestamp
    text: str

    def __post_init__(self):
        if self.start > self.end:
            raise BadTimestamp(f"phrase starts after it ends: {self.start} > {self.end}")


@dataclass(frozen=True)
class Transcript:
    phrases: tuple[TranscriptPhrase, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "phrases", tuple(self.phrases))

    def __len__(self) -> int:
        return len(self.phrases)

    @property
    def empty(self) -> bool:
        return not self.phrases

    def render(self) -> str:
        return "\n".join(f"[{p.start} - {p.end}] {p.text}" for p in self.phrases)

    def to_records(self) -> list[dict[str, Any]]:
        return [{"start": str(p.start), "end": str(p.end), "text": p.text} for p in self.phrases]

    @classmethod
    def from_records(cls, records: Iterable[dict[str, Any]]) -> "Transcript":
        return cls(
            tuple(
                TranscriptPhrase(parse_timestamp(r["start"]), parse_timestamp(r["end"]), r["text"])
                for r in records
            )
        )


# ---------------------------------------------------------------------------
# Decoders and handles
# ---------------------------------------------------------------------------


class FrameSource(Protocol):
    duration: float

    def frame_at(self, seconds: float) -> Image.Image: ...


class OpenCVVideo:
    """Frame access through OpenCV; seeks are serialized behind a lock."""

    def __init__(self, path: str | Path):
        import cv2

        self._cv2 = cv2
        self.path = str(path)
        self._lock = threading.Lock()
        self._cap = cv2.VideoCapture(self.path)
        if not self._cap.isOpened():
            raise DecodeFailure(f"cannot open video {self.path}")
        self.fps = float(self._cap.get(cv2.CAP_PROP_FPS) or 0.0)
        frames = float(self._cap.get(cv2.CAP_PROP_FRAME_COUNT) or 0.0)
        if self.fps <= 0 or frames <= 0:
            raise DecodeFailure(f"no decodable frames in {self.path}")
        self.frame_count = int(frames)
        self.duration = frames / self.fps

    def frame_at(self, seconds: float) -> Image.Image:
        index = min(int(round(seconds * self.fps)), self.frame_count - 1)
        with self._lock:
            self._cap.set(self._cv2.CAP_PROP_POS_FRAMES, index)
            ok, frame = self._cap.read()
        if not ok or frame is None:
            raise DecodeFailure(f"cannot decode frame {index} of {self.path}")
        return Image.fromarray(self._cv2.cvtColor(frame, self._cv2.COLOR_BGR2RGB))

    def close(self) -> None:
        self._cap.release()


class StillImage:
    duration = 1.0

    def __init__(self, image: Image.Image):
        self.image = image.convert("RGB")

    def frame_at(self, seconds: float) -> Image.Image:
        return self.image


class SyntheticVideo:
    """In-memory video whose frame at second ``s`` is a flat gray of level ``level(s)``.

    Handy for tests and demos; :meth:`second_of` inverts the encoding.
    """

    def __init__(self, duration: float, size: tuple[int, int] = (64, 36), step: int = 4):
        self.duration = float(duration)
        self.size = size
        self.step = step
        self.calls = 0

    def level(self, second: int) -> int:
        return (second * self.step) % 256

    def second_of(self, frame: Image.Image) -> int:
        return int(round(np.asarray(frame, dtype=np.float64).mean() / self.step))

    def frame_at(self, seconds: float) -> Image.Image:
        if seconds < 0 or seconds >= self.duration:
            raise DecodeFailure(f"offset {seconds} outside synthetic video")
        self.calls += 1
        return Image.new("RGB", self.size, (self.level(int(seconds)),) * 3)


@dataclass
class MediaHandle:
    kind: str  # "image" | "video"
    source: str
    decoder: FrameSource | None = None
    duration_s: float = 1.0
    digest: str = ""
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("image", "video"):
            raise ValueError(f"unknown media kind {self.kind!r}")
        if self.kind == "video" and self.duration_s < 1 and self.decoder is not None:
            raise DecodeFailure("video shorter than one second")

    @property
    def duration(self) -> int:
        """Number of whole seconds that carry a frame (seconds ``0..duration-1``)."""
        if self.kind == "image":
            return 1
        return max(1, math.ceil(self.duration_s - 1e-9))

    @property
    def decodable(self) -> bool:
        return self.decoder is not None

    def frame_at(self, seconds: float) -> Image.Image:
        if self.decoder is None:
            raise DecodeFailure(f"no decoder attached to {self.source}")
        try:
            return self.decoder.frame_at(seconds)
        except DecodeFailure:
            raise
        except Exception as exc:  # decoder internals vary
            raise DecodeFailure(f"decode error at {seconds}s: {exc}") from exc

    def image(self) -> Image.Image:
        if self.kind != "image":
            raise DecodeFailure("not an image handle")
        return self.frame_at(0)


def file_digest(path: str | Path, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while block := fh.read(chunk):
            h.update(block)
    return h.hexdigest()


def open_media(path: str | Path) -> MediaHandle:
    """Ingest an image or video file by path."""
    path = Path(path)
    if not path.is_file():
        raise DecodeFailure(f"no such media file: {path}")
    digest = file_digest(path)
    if path.suffix.lower() in IMAGE_SUFFIXES:
        try:
            with Image.open(path) as img:
                img.load()
                still = StillImage(img)
        except Exception as exc:
            raise DecodeFailure(f"cannot read image {path}: {exc}") from exc
        return MediaHandle("image", str(path), still, 1.0, digest)
    video = OpenCVVideo(path)
    return MediaHandle("video", str(path), video, video.duration, digest)


def synthetic_media(duration: float, source: str = "synthetic://video", **kw) -> MediaHandle:
    video = SyntheticVideo(duration, **kw)
    return MediaHandle("video", source, video, duration, hashlib.sha256(source.encode()).hexdigest())


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def clip_window(center: Timestamp, duration: int) -> list[int]:
    """Whole seconds of the 10-frame window around ``center``, shifted inside the video."""
    if center.seconds >= duration:
        raise OutOfRange(f"{center} is past the end of a {duration} s video")
    if duration <= CLIP_FRAMES:
        return list(range(duration))
    start = center.seconds - CLIP_BEFORE
    start = max(0, min(start, duration - CLIP_FRAMES))
    return list(range(start, start + CLIP_FRAMES))


def sample_clip(media: MediaHandle, center: Timestamp) -> list[tuple[Timestamp, Image.Image]]:
    if media.kind != "video":
        raise OutOfRange("clips can only be sampled from videos")
    return [(Timestamp(s), media.frame_at(s)) for s in clip_window(center, media.duration)]


def sample_index_frames(media: MediaHandle, rate: float = 1.0) -> list[tuple[Timestamp, Image.Image]]:
    """Frames at ``0, 1/rate, 2/rate, ...`` strictly before the end of the video."""
    if rate <= 0:
        raise ValueError("rate must be positive")
    if media.kind == "image":
        return [(Timestamp(0), media.image())]
    out = []
    k = 0
    while True:
        t = k / rate
        if t >= media.duration_s:
            break
        out.append((Timestamp.from_seconds(t), media.frame_at(t)))
        k += 1
    return out


class ASRBackend(Protocol):
    def transcribe(self, source: str) -> Sequence[Any]: ...


def _phrase_fields(item: Any) -> tuple[float, float, str]:
    if isinstance(item, TranscriptPhrase):
        return item.start.seconds, item.end.seconds, item.text
    if isinstance(item, dict):
        return float(item["start"]), float(item["end"]), str(item.get("text", ""))
    start, end, text = item
    return float(start), float(end), str(text)


def acquire_transcript(media: MediaHandle, asr: ASRBackend) -> Transcript:
    """Transcribe the media's audio; silence or a missing track yields an empty transcript."""
    if media.kind != "video":
        raise ASRFailure("transcripts are only acquired for videos")
    try:
        raw = asr.transcribe(media.source) or []
    except BackendError as exc:
        raise ASRFailure(f"ASR backend failed: {exc}") from exc
    limit = media.duration - 1
    phrases = []
    for item in raw:
        start, end, text = _phrase_fields(item)
        text = text.strip()
        if not text:
            continue
        s = min(Timestamp.from_seconds(max(start, 0.0)).seconds, limit)
        e = min(Timestamp.from_seconds(max(end, 0.0)).seconds, limit)
        phrases.append(TranscriptPhrase(Timestamp(s), Timestamp(max(s, e)), text))
    phrases.sort(key=lambda p: (p.start, p.end))
    return Transcript(tuple(phrases))


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------


def downscale(image: Image.Image, max_dim: int | None) -> Image.Image:
    if not max_dim or max(image.size) <= max_dim:
        return image
    scale = max_dim / max(image.size)
    size = (max(1, round(image.width * scale)), max(1, round(image.height * scale)))
    return image.resize(size, Image.BILINEAR)


def encode_image(image: Image.Image, fmt: str = "PNG", max_dim: int | None = None) -> bytes:
    buf = io.BytesIO()
    downscale(image.convert("RGB"), max_dim).save(buf, format=fmt)
    return buf.getvalue()
