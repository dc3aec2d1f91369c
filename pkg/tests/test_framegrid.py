from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from vqagent.errors import FrameCountMismatch, TooManyTimestamps
from vqagent.framegrid import allocate, compose
from vqagent.media import Timestamp, sample_clip, synthetic_media


def is_even_split(counts, total):
    """Sums to ``total``, spread at most one, larger counts in trailing positions."""
    return sum(counts) == total and max(counts) - min(counts) <= 1 and list(counts) == sorted(counts)


def test_three_timestamps_worked_example():
    alloc = allocate([Timestamp(36), Timestamp(133), Timestamp(83)])
    assert alloc.image_counts == [3, 3, 4]
    assert list(alloc.slots[0].frame_counts) == [3, 3, 4]
    assert list(alloc.slots[2].frame_counts) == [2, 2, 3, 3]


def test_one_timestamp():
    alloc = allocate(1)
    assert alloc.image_counts == [10]
    assert list(alloc.slots[0].frame_counts) == [1] * 10


def test_four_timestamps():
    alloc = allocate(4)
    assert alloc.image_counts == [2, 2, 3, 3]
    assert list(alloc.slots[0].frame_counts) == [5, 5]
    assert list(alloc.slots[3].frame_counts) == [3, 3, 4]


def test_too_many_timestamps():
    with pytest.raises(TooManyTimestamps):
        allocate(11)


def test_allocation_ignores_timestamp_values():
    assert allocate([Timestamp(1), Timestamp(2)]).image_counts == allocate([Timestamp(500), Timestamp(7)]).image_counts


def test_short_clip_allocation():
    alloc = allocate(2, [10, 3])
    assert alloc.slots[1].image_count == 3
    assert alloc.slots[1].frame_total == 3


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10), st.data())
def test_allocation_properties(n, data):
    frames = data.draw(st.lists(st.integers(1, 10), min_size=n, max_size=n))
    alloc = allocate(n, frames)
    assert alloc.total_images <= 10
    for slot, f in zip(alloc.slots, frames):
        assert slot.frame_total == f
        assert is_even_split(slot.frame_counts, f)
    if all(f == 10 for f in frames):
        assert is_even_split(alloc.image_counts, 10)


def _clip(n, width=64, height=36, start=0):
    return [(Timestamp(start + i), Image.new("RGB", (width, height), (i * 20, 0, 0))) for i in range(n)]


def test_composite_width_is_additive():
    alloc = allocate(1, [3], max_images=1)
    grid = compose(alloc, [_clip(3, 640, 360)])
    assert grid.images[0].size == (1920, 360)


def test_common_height_resize():
    alloc = allocate(1, [2], max_images=1)
    clip = [(Timestamp(0), Image.new("RGB", (100, 50))), (Timestamp(1), Image.new("RGB", (30, 30)))]
    grid = compose(alloc, [clip], height=100)
    assert grid.images[0].size == (300, 100)


def test_frame_count_mismatch():
    with pytest.raises(FrameCountMismatch):
        compose(allocate(1), [_clip(9)])


def test_clip_count_mismatch():
    with pytest.raises(FrameCountMismatch):
        compose(allocate(2), [_clip(10)])


def test_three_clips_give_ten_composites_with_thirty_frames():
    media = synthetic_media(180)
    stamps = [Timestamp(36), Timestamp(133), Timestamp(83)]
    grid = compose(allocate(stamps), [sample_clip(media, t) for t in stamps], height=36)
    assert len(grid.images) == 10
    assert grid.frame_total == 30
    assert sum(len(img["frames"]) for img in grid.manifest()["images"]) == 30


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 119), min_size=1, max_size=10))
def test_compose_properties(centers):
    media = synthetic_media(120, size=(8, 6))
    stamps = [Timestamp(c) for c in centers]
    clips = [sample_clip(media, t) for t in stamps]
    grid = compose(allocate(stamps, [len(c) for c in clips]), clips, height=6)
    assert len(grid.images) <= 10
    flat = [t for src in grid.sources for t in src]
    expected = [t for clip in clips for t, _ in clip]
    assert flat == expected  # every frame exactly once, in order
    for src, img in zip(grid.sources, grid.images):
        assert src == sorted(src)
        assert img.width == 8 * len(src)
        # frames are pasted left to right in temporal order
        levels = [img.getpixel((8 * i + 4, 3))[0] for i in range(len(src))]
        assert [media.decoder.level(t.seconds) for t in src] == levels


def test_dump(tmp_path):
    grid = compose(allocate(1, [2], max_images=2), [_clip(2)])
    paths = grid.dump(tmp_path, prefix="g")
    assert len(paths) == 2 and all(p.exists() for p in paths)
    assert (tmp_path / "g_manifest.json").exists()
