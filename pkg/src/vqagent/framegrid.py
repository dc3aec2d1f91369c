"""Pack clip frames from several timestamps into at most ten composite images.

Vision endpoints accept a bounded number of images per call, while every
vision-tool call in a reasoning chain looked at a 10-frame clip. Images are
split evenly across timestamps and frames evenly across each timestamp's
images; remainders always go to the trailing positions. Frames inside one
composite are stacked left to right in temporal order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from PIL import Image

from .errors import FrameCountMismatch, ImageComposeFailure, TooManyTimestamps
from .media import Timestamp, format_timestamp

MAX_IMAGES = 10
FRAMES_PER_CLIP = 10
DEFAULT_HEIGHT = 360


def even_split(total: int, parts: int) -> list[int]:
    """Split ``total`` into ``parts`` counts differing by at most one, larger ones last."""
    if parts <= 0:
        raise ValueError("parts must be positive")
    base, rem = divmod(total, parts)
    return [base] * (parts - rem) + [base + 1] * rem


@dataclass(frozen=True)
class TimestampAllocation:
    timestamp: Timestamp | None
    image_count: int
    frame_counts: tuple[int, ...]

    @property
    def frame_total(self) -> int:
        return sum(self.frame_counts)


@dataclass(frozen=True)
class GridAllocation:
    slots: tuple[TimestampAllocation, ...]

    @property
    def image_counts(self) -> list[int]:
        return [s.image_count for s in self.slots]

    @property
    def total_images(self) -> int:
        return sum(self.image_counts)


def allocate(
    timestamps: Sequence[Timestamp] | int,
    frames_per_timestamp: int | Sequence[int] = FRAMES_PER_CLIP,
    max_images: int = MAX_IMAGES,
) -> GridAllocation:
    """Decide how many composites each timestamp gets and how many frames each composite holds.

    ``timestamps`` may be the timestamps themselves or just their count; the
    result does not depend on the timestamp values. ``frames_per_timestamp``
    may list per-clip frame counts for clips shortened at a video boundary.
    A clip never gets more composites than it has frames.
    """
    if isinstance(timestamps, int):
        stamps: list[Timestamp | None] = [None] * timestamps
    else:
        stamps = list(timestamps)
    n = len(stamps)
    if n < 1:
        raise ValueError("need at least one timestamp")
    if n > max_images:
        raise TooManyTimestamps(f"{n} timestamps cannot share {max_images} images")
    if isinstance(frames_per_timestamp, int):
        frames = [frames_per_timestamp] * n
    else:
        frames = list(frames_per_timestamp)
        if len(frames) != n:
            raise FrameCountMismatch("one frame count per timestamp is required")
    slots = []
    for ts, share, f in zip(stamps, even_split(max_images, n), frames):
        if f < 1:
            raise FrameCountMismatch(f"clip at {ts} has no frames")
        images = min(share, f)
        slots.append(TimestampAllocation(ts, images, tuple(even_split(f, images))))
    return GridAllocation(tuple(slots))


@dataclass
class PhotoGrid:
    images: list[Image.Image]
    allocation: GridAllocation
    sources: list[list[Timestamp]] = field(default_factory=list)  # per composite, frame timestamps

    def manifest(self) -> dict:
        return {
            "image_counts": self.allocation.image_counts,
            "timestamps": [None if s.timestamp is None else format_timestamp(s.timestamp) for s in self.allocation.slots],
            "frame_counts": [list(s.frame_counts) for s in self.allocation.slots],
            "images": [
                {"size": list(img.size), "frames": [format_timestamp(t) for t in src]}
                for img, src in zip(self.images, self.sources)
            ],
        }

    @property
    def frame_total(self) -> int:
        return sum(len(s) for s in self.sources)

    def dump(self, directory: str | Path, prefix: str = "grid") -> list[Path]:
        """Write composites as PNG files plus a JSON manifest sidecar."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, img in enumerate(self.images, 1):
            p = directory / f"{prefix}_{i:02d}.png"
            img.save(p, format="PNG")
            paths.append(p)
        (directory / f"{prefix}_manifest.json").write_text(json.dumps(self.manifest(), indent=2), encoding="utf-8")
        return paths


def _to_height(img: Image.Image, height: int) -> Image.Image:
    img = img.convert("RGB")
    if img.height == height:
        return img
    width = max(1, round(img.width * height / img.height))
    return img.resize((width, height), Image.BILINEAR)


def hstack(frames: Sequence[Image.Image], height: int) -> Image.Image:
    resized = [_to_height(f, height) for f in frames]
    canvas = Image.new("RGB", (sum(f.width for f in resized), height))
    x = 0
    for f in resized:
        canvas.paste(f, (x, 0))
        x += f.width
    return canvas


def compose(
    allocation: GridAllocation,
    frames: Sequence[Sequence[tuple[Timestamp, Image.Image]]],
    height: int | None = DEFAULT_HEIGHT,
) -> PhotoGrid:
    """Build the composites described by ``allocation``.

    ``frames`` holds one temporally ordered ``(timestamp, frame)`` sequence per
    allocated timestamp. Frames are resized to a common ``height`` (the first
    frame's height when ``None``) before horizontal stacking.
    """
    if len(frames) != len(allocation.slots):
        raise FrameCountMismatch(f"{len(frames)} clips for {len(allocation.slots)} allocated timestamps")
    images: list[Image.Image] = []
    sources: list[list[Timestamp]] = []
    for slot, clip in zip(allocation.slots, frames):
        clip = sorted(clip, key=lambda tf: tf[0])
        if len(clip) != slot.frame_total:
            raise FrameCountMismatch(f"clip at {slot.timestamp} has {len(clip)} frames, allocation expects {slot.frame_total}")
        pos = 0
        for count in slot.frame_counts:
            members = clip[pos : pos + count]
            pos += count
            try:
                target = height or members[0][1].height
                images.append(hstack([f for _, f in members], target))
            except (OSError, ValueError) as exc:
                raise ImageComposeFailure(str(exc)) from exc
            sources.append([t for t, _ in members])
    if len(images) > MAX_IMAGES:
        raise ImageComposeFailure(f"composed {len(images)} images, limit is {MAX_IMAGES}")
    return PhotoGrid(images, allocation, sources)
