"""Shared builders for scripted sessions."""

from __future__ import annotations

import json
from typing import Any, Sequence

from vqagent.backends.base import BackendSet, BackendRequest
from vqagent.backends.scripted import ScriptedBackend, ScriptedEmbedder
from vqagent.critic import CriteriaSet, default_criteria
from vqagent.media import MediaHandle, Timestamp, Transcript, TranscriptPhrase, synthetic_media
from vqagent.retrieval import build_frame_index, build_phrase_index
from vqagent.media import sample_index_frames
from vqagent.toolkit import ToolRegistry, VideoToolDeps, builtin_video_tools

PHRASES = [
    (0, 10, "welcome to the gym session"),
    (10, 20, "we start with squats for the legs"),
    (20, 40, "now the leg press machine"),
    (40, 60, "after leg press we do lunges"),
    (60, 90, "finally some stretching to cool down"),
]


def step(tool: str, observation: str = "o", thought: str = "t", **tool_input: str) -> str:
    return json.dumps({"Observation": observation, "Thought": thought, "Action": {"tool_name": tool, "tool_input": tool_input}})


def answer(text: str, observation: str = "o", thought: str = "t") -> str:
    return json.dumps({"Observation": observation, "Thought": thought, "Answer": text})


def critic_reply(verdict: str, n: int = 3, feedback: Sequence[str] | None = None) -> str:
    fb = list(feedback) if feedback is not None else [f"feedback {i}" for i in range(1, n + 1)]
    return json.dumps(
        {
            "Observation": "critic observation",
            "Thought": "critic thought",
            "Feedback": {f"Criteria {i}": text for i, text in enumerate(fb, 1)},
            "Verdict": verdict,
        }
    )


def transcript() -> Transcript:
    return Transcript([TranscriptPhrase(Timestamp(a), Timestamp(b), t) for a, b, t in PHRASES])


class CountingVision(ScriptedBackend):
    """Lenient vision backend that records the largest image count it saw."""

    def __init__(self, reply: str = "A person is doing lunges.", name: str = "vit"):
        super().__init__((), strict=False, default=reply, name=name)
        self.peak_images = 0

    def chat(self, request: BackendRequest):
        self.peak_images = max(self.peak_images, len(request.images))
        return super().chat(request)


class CountingCritic(ScriptedBackend):
    def __init__(self, script: Sequence[Any], **kw):
        super().__init__(script, **kw)
        self.peak_images = 0

    def chat(self, request: BackendRequest):
        self.peak_images = max(self.peak_images, len(request.images))
        return super().chat(request)


def video_setup(
    reasoner: Sequence[str],
    critic: Sequence[str] = (),
    duration: int = 180,
    with_transcript: bool = True,
) -> tuple[MediaHandle, ToolRegistry, BackendSet]:
    media = synthetic_media(duration, "synthetic://gym")
    embedder = ScriptedEmbedder(name="embedder")
    tr = transcript() if with_transcript else Transcript([])
    phrase_index = build_phrase_index(tr.phrases, embedder) if not tr.empty else None
    frame_index = build_frame_index(sample_index_frames(media, 0.25), embedder)
    vision = CountingVision()
    registry = ToolRegistry(builtin_video_tools(VideoToolDeps(media, tr, phrase_index, frame_index, vision, embedder, embedder)))
    backends = BackendSet(
        reasoner=ScriptedBackend(reasoner, name="reasoner"),
        critic=CountingCritic(critic, name="critic"),
        vit=vision,
        embedder=embedder,
        frame_embedder=embedder,
    )
    return media, registry, backends


def video_criteria() -> CriteriaSet:
    return default_criteria("video")


BASIC_REASONER = [
    step("get_transcript"),
    step("query_transcript", transcript_query="leg press"),
    answer("Lunges follow the leg press."),
]


# ---------------------------------------------------------------------------
# hypothesis strategies
# ---------------------------------------------------------------------------

from hypothesis import strategies as st  # noqa: E402

from vqagent.protocol import Action, Answer, CriticFeedback, Query, Step, ToolOutput  # noqa: E402

texts = st.text(max_size=40)
identifiers = st.from_regex(r"[a-z][a-z0-9_]{0,15}", fullmatch=True)
actions = st.builds(Action, identifiers, st.dictionaries(identifiers, texts, max_size=4))
agent_messages = st.one_of(
    st.builds(Query, texts),
    st.builds(Step, texts, texts, actions),
    st.builds(Answer, texts, texts, texts),
    st.builds(ToolOutput, texts),
    st.builds(CriticFeedback, texts),
)


def write_video(path, seconds: int, fps: int = 5, size=(64, 48)) -> None:
    """Write an MJPG AVI whose frames during second ``s`` are a flat gray of level 4*s."""
    import cv2
    import numpy as np

    writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"MJPG"), fps, size)
    for i in range(seconds * fps):
        level = (i // fps) * 4 % 256
        writer.write(np.full((size[1], size[0], 3), level, dtype=np.uint8))
    writer.release()


def write_image(path, size=(32, 24), color=(200, 30, 30)) -> None:
    from PIL import Image

    Image.new("RGB", size, color).save(path)


def loop_cosine(a, b) -> float:
    """Reference cosine similarity with plain Python loops."""
    dot = 0.0
    na = 0.0
    nb = 0.0
    for x, y in zip(a, b):
        dot += x * y
        na += x * x
        nb += y * y
    return dot / (na**0.5 * nb**0.5)


def brute_force_top_k(keys, vectors, query, k):
    """Full sort by (similarity desc, timestamp asc, insertion order)."""
    sims = [loop_cosine(v, query) for v in vectors]
    order = sorted(range(len(keys)), key=lambda i: (-sims[i], keys[i], i))
    return [keys[i] for i in order[:k]]


def random_index(rng, n: int, dim: int, dup_rate: float = 0.2):
    """Gaussian vectors with some exact duplicates (ties) and repeated timestamps."""
    vectors = []
    for _ in range(n):
        if vectors and rng.random() < dup_rate:
            vectors.append(list(vectors[rng.integers(len(vectors))]))
        else:
            vectors.append(rng.normal(size=dim).tolist())
    keys = [int(x) for x in rng.integers(0, max(2, n // 2), size=n)]
    return keys, vectors
