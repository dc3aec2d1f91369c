from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from support import write_image, write_video
from vqagent.backends.scripted import ScriptedBackend
from vqagent.errors import ASRFailure, BadTimestamp, DecodeFailure, OutOfRange, Transport
from vqagent.media import (
    Timestamp,
    acquire_transcript,
    encode_image,
    format_timestamp,
    midpoint,
    open_media,
    parse_timestamp,
    sample_clip,
    sample_index_frames,
    synthetic_media,
)


def test_parse_tool_input_example():
    assert parse_timestamp("00:08:27") == Timestamp(507)


def test_format_zero():
    assert format_timestamp(Timestamp(0)) == "00:00:00"


def test_format_507():
    assert format_timestamp(507) == "00:08:27"


@pytest.mark.parametrize("text", ["00:61:00", "00:00:60", "8:27", "aa:bb:cc", "", "-1:00:00"])
def test_bad_timestamps(text):
    with pytest.raises(BadTimestamp):
        parse_timestamp(text)


def test_negative_seconds_rejected():
    with pytest.raises(BadTimestamp):
        Timestamp(-1)


@settings(max_examples=500, deadline=None)
@given(st.integers(min_value=0, max_value=359_999))
def test_timestamp_round_trip(t):
    assert parse_timestamp(format_timestamp(t)).seconds == t


def test_from_seconds_rounds_half_up():
    assert Timestamp.from_seconds(10.5) == Timestamp(11)
    assert Timestamp.from_seconds(10.49) == Timestamp(10)


def test_midpoint_rounding():
    assert midpoint(Timestamp(10), Timestamp(20)) == Timestamp(15)
    assert midpoint(Timestamp(10), Timestamp(11)) == Timestamp(11)


def _seconds(media, frames):
    return [(t.seconds, media.decoder.second_of(img)) for t, img in frames]


def test_clip_interior():
    media = synthetic_media(180)
    frames = sample_clip(media, parse_timestamp("00:00:36"))
    assert [t for t, _ in _seconds(media, frames)] == list(range(31, 41))
    assert all(t == s for t, s in _seconds(media, frames))


def test_clip_shifted_at_start():
    media = synthetic_media(60)
    assert [t.seconds for t, _ in sample_clip(media, Timestamp(2))] == list(range(0, 10))


def test_clip_shifted_at_end():
    media = synthetic_media(60)
    assert [t.seconds for t, _ in sample_clip(media, Timestamp(58))] == list(range(50, 60))


def test_clip_out_of_range():
    with pytest.raises(OutOfRange):
        sample_clip(synthetic_media(60), parse_timestamp("00:59:59"))


def test_short_video_gives_every_second():
    media = synthetic_media(6)
    assert [t.seconds for t, _ in sample_clip(media, Timestamp(3))] == list(range(6))


@settings(max_examples=100, deadline=None)
@given(st.integers(min_value=1, max_value=400), st.data())
def test_clip_properties(duration, data):
    media = synthetic_media(duration)
    center = data.draw(st.integers(min_value=0, max_value=duration - 1))
    secs = [t.seconds for t, _ in sample_clip(media, Timestamp(center))]
    assert len(secs) == min(10, duration)
    assert all(b - a == 1 for a, b in zip(secs, secs[1:]))
    assert secs[0] >= 0 and secs[-1] <= duration - 1
    assert center in secs


def test_index_frames_at_1fps():
    assert len(sample_index_frames(synthetic_media(180), 1.0)) == 180


def test_index_frames_at_half_fps():
    frames = sample_index_frames(synthetic_media(10), 0.5)
    assert [t.seconds for t, _ in frames] == [0, 2, 4, 6, 8]


def test_real_video_file(tmp_path):
    path = tmp_path / "clip.avi"
    write_video(path, 20)
    media = open_media(path)
    assert media.kind == "video"
    assert media.duration == 20
    frames = sample_clip(media, Timestamp(12))
    assert [t.seconds for t, _ in frames] == list(range(7, 17))
    levels = [np.asarray(img).mean() for _, img in frames]
    for (t, _), level in zip(frames, levels):
        assert abs(level - 4 * t.seconds) < 3


def test_image_file(tmp_path):
    path = tmp_path / "img.png"
    write_image(path)
    media = open_media(path)
    assert media.kind == "image"
    assert media.image().size == (32, 24)
    assert len(sample_index_frames(media)) == 1


def test_missing_file():
    with pytest.raises(DecodeFailure):
        open_media("/nonexistent/video.mp4")


def test_unreadable_file(tmp_path):
    path = tmp_path / "broken.mp4"
    path.write_bytes(b"not a video")
    with pytest.raises(DecodeFailure):
        open_media(path)


def test_transcript_from_scripted_asr():
    asr = ScriptedBackend([[{"start": 0, "end": 4, "text": "a"}, {"start": 4, "end": 9, "text": "b"}, {"start": 9, "end": 12, "text": "c"}]])
    tr = acquire_transcript(synthetic_media(60), asr)
    assert [p.text for p in tr.phrases] == ["a", "b", "c"]


def test_transcript_reordered():
    asr = ScriptedBackend([[{"start": 20, "end": 25, "text": "late"}, {"start": 1, "end": 3, "text": "early"}]])
    tr = acquire_transcript(synthetic_media(60), asr)
    assert [p.text for p in tr.phrases] == ["early", "late"]


def test_silent_audio_gives_empty_transcript():
    tr = acquire_transcript(synthetic_media(60), ScriptedBackend([[]]))
    assert tr.empty


class _Failing(ScriptedBackend):
    def transcribe(self, source):
        raise Transport("down")


def test_asr_transport_failure():
    with pytest.raises(ASRFailure):
        acquire_transcript(synthetic_media(60), _Failing())


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 30), st.text(min_size=1, max_size=5)), max_size=8))
def test_transcript_invariants(items):
    media = synthetic_media(60)
    raw = [{"start": s, "end": s + d, "text": t} for s, d, t in items]
    tr = acquire_transcript(media, ScriptedBackend([raw]))
    starts = [p.start.seconds for p in tr.phrases]
    assert starts == sorted(starts)
    assert all(0 <= p.start.seconds <= p.end.seconds <= 59 for p in tr.phrases)


def test_encode_downscales():
    from PIL import Image

    from io import BytesIO

    data = encode_image(Image.new("RGB", (1000, 500)), max_dim=100)
    assert Image.open(BytesIO(data)).size == (100, 50)
