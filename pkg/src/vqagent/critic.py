"""The vision critic: evaluation criteria, evidence selection and per-criterion evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

from .backends.base import MAX_IMAGES, Backend, Message, BackendRequest, check_request, chat_request
from .errors import BackendError
from .chain import ChainEntry, ReasoningChain
from .errors import (
    BackendFailure,
    BadTimestamp,
    MalformedCriteria,
    MalformedMessage,
    NoEvidence,
    ProtocolError,
)
from .framegrid import DEFAULT_HEIGHT, PhotoGrid, allocate, compose
from .media import MediaHandle, Timestamp, encode_image, format_timestamp, parse_timestamp, sample_clip
from .prompts import CRITIC_SECTIONS, DEFAULT_STORE, TemplateStore
from .protocol import CriticMessage, Step, parse_critic_message
from .toolkit import VISION_TOOL

log = logging.getLogger(__name__)

GRADE_KEYS = ("1", "2", "3", "4", "5")
MAX_EVIDENCE = 10

FORMAT_REMINDER = (
    "Your previous response could not be parsed. Respond in the exact format described in "
    "<input-output>: a single clean JSON object with the keys \"Observation\", \"Thought\", "
    "\"Feedback\" (one entry per criterion, keyed \"Criteria 1\", \"Criteria 2\", ...) and "
    "\"Verdict\" (\"YES\" or \"NO\"), with no other text."
)
NO_VISUALS_NOTE = (
    "No frames are attached: the agent made no vision-tool calls, so claims about the visuals "
    "cannot be checked against the video."
)
NOT_VISUALLY_CHECKED = "Hallucination could not be visually checked because no frames were available."


@dataclass(frozen=True)
class Criterion:
    """One rubric entry.

    ``acceptable_values`` maps the grade keys "1".."5" to labels. It is left
    empty for free-text criteria such as the default video ones, whose
    feedback is prose with no grade.
    """

    name: str
    description: str
    acceptable_values: Mapping[str, str] = field(default_factory=dict)
    guideline: str = ""
    feedback_hint: str = ""
    visual: bool = False

    def __post_init__(self):
        if not self.name.strip():
            raise MalformedCriteria("criterion name must be non-empty")
        values = {str(k): str(v) for k, v in dict(self.acceptable_values).items()}
        if values:
            if tuple(sorted(values)) != GRADE_KEYS:
                raise MalformedCriteria(f"criterion {self.name!r}: grade keys must be exactly 1..5, got {sorted(values)}")
            if not all(v.strip() for v in values.values()):
                raise MalformedCriteria(f"criterion {self.name!r}: grade labels must be non-empty")
            values = {k: values[k] for k in GRADE_KEYS}
        object.__setattr__(self, "acceptable_values", values)

    @property
    def graded(self) -> bool:
        return bool(self.acceptable_values)

    def render_guideline(self) -> str:
        if self.guideline:
            return self.guideline
        text = f"{self.name}: {self.description}"
        if self.graded:
            grades = ", ".join(f'"{k}": "{v}"' for k, v in self.acceptable_values.items())
            text += f" Acceptable values: {{{grades}}}, where \"1\" is the lowest grade and \"5\" the best."
        return text

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {"Criteria": self.name, "Description": self.description}
        if self.graded:
            rec["Acceptable Values"] = dict(self.acceptable_values)
        if self.guideline:
            rec["Guideline"] = self.guideline
        if self.feedback_hint:
            rec["Feedback"] = self.feedback_hint
        if self.visual:
            rec["Visual"] = True
        return rec

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> "Criterion":
        if not isinstance(rec, Mapping):
            raise MalformedCriteria(f"criterion entry is not an object: {rec!r}")
        folded = {str(k).strip().lower(): v for k, v in rec.items()}
        name = folded.get("criteria", folded.get("criterion", folded.get("name")))
        if not isinstance(name, str) or not name.strip():
            raise MalformedCriteria(f"criterion entry has no name: {rec!r}")
        values = folded.get("acceptable values", folded.get("acceptable_values", {})) or {}
        if not isinstance(values, Mapping):
            raise MalformedCriteria(f"criterion {name!r}: acceptable values must be an object")
        return cls(
            name=name.strip(),
            description=str(folded.get("description", "")).strip(),
            acceptable_values=values,
            guideline=str(folded.get("guideline", "")),
            feedback_hint=str(folded.get("feedback", "")),
            visual=bool(folded.get("visual", False)),
        )


@dataclass(frozen=True)
class CriteriaSet:
    criteria: tuple[Criterion, ...]
    provenance: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        crit = tuple(self.criteria)
        if not crit:
            raise MalformedCriteria("a criteria set needs at least one criterion")
        names = [c.name for c in crit]
        if len(set(names)) != len(names):
            raise MalformedCriteria(f"criterion names must be unique: {names}")
        object.__setattr__(self, "criteria", crit)
        object.__setattr__(self, "provenance", dict(self.provenance))

    def __iter__(self) -> Iterator[Criterion]:
        return iter(self.criteria)

    def __len__(self) -> int:
        return len(self.criteria)

    def __getitem__(self, i: int) -> Criterion:
        return self.criteria[i]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.criteria]

    @property
    def graded(self) -> bool:
        return any(c.graded for c in self.criteria)

    def to_record(self) -> dict[str, Any]:
        return {"criteria": [c.to_record() for c in self.criteria], "provenance": dict(self.provenance)}

    @classmethod
    def from_record(cls, rec: Any, provenance: Mapping[str, str] | None = None) -> "CriteriaSet":
        entries = _criteria_entries(rec)
        prov = provenance if provenance is not None else (rec.get("provenance", {}) if isinstance(rec, Mapping) else {})
        return cls(tuple(Criterion.from_record(e) for e in entries), prov or {})

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_record(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "CriteriaSet":
        try:
            rec = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise MalformedCriteria(f"cannot read criteria file {path}: {exc}") from exc
        return cls.from_record(rec)


def _criteria_entries(rec: Any) -> list[Any]:
    """Accept a list of entries, ``{"criteria": [...]}`` or a single entry object."""
    if isinstance(rec, list):
        return rec
    if isinstance(rec, Mapping):
        folded = {str(k).strip().lower(): v for k, v in rec.items()}
        if isinstance(folded.get("criteria"), list):
            return folded["criteria"]
        if "criteria" in folded or "criterion" in folded:
            return [rec]
    raise MalformedCriteria("response does not contain a list of criteria")


def default_video_criteria(store: TemplateStore = DEFAULT_STORE) -> CriteriaSet:
    return CriteriaSet.from_record(store.json("video_criteria.json"), {"source": "video_criteria.json"})


def default_criteria(kind: str, store: TemplateStore = DEFAULT_STORE) -> CriteriaSet:
    """Criteria used when none were generated: the video rubric, or generic image criteria."""
    if kind == "video":
        return default_video_criteria(store)
    return CriteriaSet.from_record(store.json("image_criteria.json"), {"source": "image_criteria.json"})


# ---------------------------------------------------------------------------
# Criteria generation
# ---------------------------------------------------------------------------

GENERATION_INPUTS = ("problem_description", "instruction", "task_description", "human_intent")


def _parse_json_payload(text: str) -> Any:
    cleaned = text.strip()
    if cleaned.startswith("```"):
        cleaned = cleaned.strip("`")
        cleaned = cleaned.split("\n", 1)[1] if "\n" in cleaned else cleaned
    for candidate in (cleaned, text):
        try:
            return json.loads(candidate)
        except json.JSONDecodeError:
            pass
    # fall back to the outermost object or array
    starts = [i for i in (cleaned.find("{"), cleaned.find("[")) if i != -1]
    if not starts:
        raise MalformedCriteria("criteria response contains no JSON")
    start = min(starts)
    closer = "}" if cleaned[start] == "{" else "]"
    end = cleaned.rfind(closer)
    try:
        return json.loads(cleaned[start : end + 1], strict=False)
    except json.JSONDecodeError as exc:
        raise MalformedCriteria(f"criteria response is not valid JSON: {exc}") from exc


def generate_criteria(
    problem_desc: str,
    instruction: str,
    task_desc: str,
    human_intent: str,
    backend: Backend,
    store: TemplateStore = DEFAULT_STORE,
) -> CriteriaSet:
    inputs = dict(zip(GENERATION_INPUTS, (problem_desc, instruction, task_desc, human_intent or "")))
    for key in GENERATION_INPUTS[:3]:
        if not inputs[key].strip():
            raise ValueError(f"{key} must be non-empty")
    prompt = store.load("criteria_generation").render(**inputs)
    try:
        response = backend.chat(chat_request(None, ("user", prompt)))
    except BackendError as exc:
        raise BackendFailure(f"criteria generation failed: {exc}") from exc
    return CriteriaSet.from_record(_parse_json_payload(response.text), inputs)


# ---------------------------------------------------------------------------
# Evidence
# ---------------------------------------------------------------------------


def vision_timestamps(chain: Iterable[ChainEntry], duration: int | None = None) -> list[Timestamp]:
    """Timestamps of every vision-tool call in chain order (unparseable ones skipped)."""
    out: list[Timestamp] = []
    for entry in chain:
        msg = entry.message
        if not isinstance(msg, Step) or msg.action.tool_name != VISION_TOOL:
            continue
        try:
            ts = parse_timestamp(str(msg.action.tool_input.get("timestamp", "")))
        except BadTimestamp:
            continue
        if duration is not None and ts.seconds >= duration:
            continue
        out.append(ts)
    return out


def select_evidence(chain: Iterable[ChainEntry], media: MediaHandle | None = None) -> list[Timestamp]:
    """The last ten vision-call timestamps, in call order."""
    duration = media.duration if media is not None and media.kind == "video" else None
    stamps = vision_timestamps(chain, duration)
    if not stamps:
        raise NoEvidence("the chain has no vision-tool calls")
    return stamps[-MAX_EVIDENCE:]


def build_grid(media: MediaHandle, timestamps: Sequence[Timestamp], height: int | None = DEFAULT_HEIGHT) -> PhotoGrid:
    clips = [sample_clip(media, ts) for ts in timestamps]
    allocation = allocate(list(timestamps), [len(c) for c in clips])
    return compose(allocation, clips, height)


def describe_grid(grid: PhotoGrid) -> str:
    """Tell the critic which attached image belongs to which timestamp."""
    lines = []
    index = 1
    for slot in grid.allocation.slots:
        numbers = ", ".join(str(n) for n in range(index, index + slot.image_count))
        label = "Image(s)" if slot.image_count > 1 else "Image"
        lines.append(f"{label} {numbers} are for timestamp {format_timestamp(slot.timestamp)}.")
        index += slot.image_count
    lines.append("Within each image the frames are stacked horizontally in temporal order, 1 frame per second.")
    return "\n".join(lines)


@dataclass
class Evidence:
    """What the critic is shown besides the logs."""

    images: list[bytes]
    note: str = ""
    grid: PhotoGrid | None = None
    timestamps: list[Timestamp] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.images


def gather_evidence(
    chain: Iterable[ChainEntry],
    media: MediaHandle | None,
    height: int | None = DEFAULT_HEIGHT,
    max_image_dim: int | None = None,
) -> Evidence:
    """Image sessions pass the image itself; video sessions get a photo grid, or nothing."""
    if media is None or not media.decodable:
        return Evidence([], NO_VISUALS_NOTE)
    if media.kind == "image":
        return Evidence([encode_image(media.image(), "PNG", max_image_dim)], "The attached image is the one the agent was asked about.")
    try:
        stamps = select_evidence(chain, media)
    except NoEvidence:
        return Evidence([], NO_VISUALS_NOTE)
    grid = build_grid(media, stamps, height)
    return Evidence([encode_image(img, "PNG", max_image_dim) for img in grid.images], describe_grid(grid), grid, stamps)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class CriticReport:
    message: CriticMessage
    evidence: Evidence
    raw: str = ""
    rejected: list[str] = field(default_factory=list)  # malformed replies that were retried

    @property
    def attempts(self) -> int:
        return len(self.rejected) + 1

    @property
    def verdict(self) -> str:
        return self.message.verdict

    @property
    def accepted(self) -> bool:
        return self.message.accepted

    @property
    def grades(self) -> dict[str, str]:
        return dict(self.message.grades)

    @property
    def text_only(self) -> bool:
        return self.evidence.empty


def _feedback_format(criteria: CriteriaSet) -> tuple[str, str]:
    fmt, sample = [], []
    for i, c in enumerate(criteria, 1):
        hint = c.feedback_hint or (
            f"craft careful feedback based on your analysis and the criterion \"{c.name}\"; if its fine then just "
            "declare that otherwise point out what is wrong and if possible also give some suggestions on what the agent might do next"
        )
        placeholder = f"This is a placeholder string for Criteria {i} feedback."
        if c.graded:
            fmt.append(f'"Criteria {i}": {{"Grade": #one of "1" to "5" as defined for this criterion, "Feedback": #{hint}}}')
            sample.append(f'"Criteria {i}": {{"Grade": "5", "Feedback": "{placeholder}"}}')
        else:
            fmt.append(f'"Criteria {i}": #{hint}')
            sample.append(f'"Criteria {i}": "{placeholder}"')
    return "\n".join(fmt), ",\n".join(sample)


def render_critic_prompt(tools_text: str, criteria: CriteriaSet, store: TemplateStore = DEFAULT_STORE) -> str:
    template = store.load("critic").require_sections(CRITIC_SECTIONS)
    guidelines = "\n\n".join(c.render_guideline() for c in criteria)
    feedback_format, sample_feedback = _feedback_format(criteria)
    return template.render(
        tools=tools_text,
        critic_guidelines=guidelines,
        feedback_format=feedback_format,
        sample_feedback=sample_feedback,
    )


def render_logs(chain: Iterable[ChainEntry]) -> str:
    """The ``logs`` record. Each entry is embedded in its serialized form, verbatim."""
    return '{"logs":[' + ",".join(e.text for e in chain) + "]}"


def build_critic_request(
    chain: Iterable[ChainEntry],
    evidence: Evidence,
    criteria: CriteriaSet,
    tools_text: str,
    store: TemplateStore = DEFAULT_STORE,
) -> BackendRequest:
    turns = [("user", render_logs(chain))]
    turns.append(("user", evidence.note or "The attached images are the evidence."))
    return chat_request(render_critic_prompt(tools_text, criteria, store), *turns, images=evidence.images)


def _mark_unchecked(msg: CriticMessage, criteria: CriteriaSet) -> CriticMessage:
    feedback = dict(msg.feedback)
    for c in criteria:
        if c.visual and NOT_VISUALLY_CHECKED not in feedback[c.name]:
            feedback[c.name] = f"{feedback[c.name]} ({NOT_VISUALLY_CHECKED})".strip()
    return CriticMessage(msg.observation, msg.thought, feedback, msg.verdict, msg.grades)


def evaluate(
    chain: ReasoningChain | Sequence[ChainEntry],
    evidence: Evidence | PhotoGrid | Sequence[bytes] | None,
    criteria: CriteriaSet,
    backend: Backend,
    *,
    tools_text: str = "",
    store: TemplateStore = DEFAULT_STORE,
) -> CriticReport:
    """Ask the critic about the chain; one retry with a format reminder if the reply is malformed."""
    if not isinstance(evidence, Evidence):
        if evidence is None:
            evidence = Evidence([], NO_VISUALS_NOTE)
        elif isinstance(evidence, PhotoGrid):
            evidence = Evidence([encode_image(i) for i in evidence.images], describe_grid(evidence), evidence)
        else:
            evidence = Evidence(list(evidence))
    entries = list(chain)
    request = build_critic_request(entries, evidence, criteria, tools_text, store)
    check_request(request, MAX_IMAGES)

    rejected: list[str] = []
    for attempt in (1, 2):
        try:
            response = backend.complete(request)
        except BackendError as exc:
            raise BackendFailure(f"critic backend failed: {exc}") from exc
        raw = response.text
        try:
            msg = parse_critic_message(raw, criteria)
        except ProtocolError as exc:
            if attempt == 2:
                err = MalformedMessage(f"critic response unusable after retry: {exc}", raw=raw)
                err.attempts = rejected + [raw]
                raise err from exc
            rejected.append(raw)
            log.info("critic response malformed (%s); retrying with a format reminder", exc)
            request = BackendRequest(
                request.messages + (Message("assistant", raw), Message("user", FORMAT_REMINDER)),
                request.images,
                request.temperature,
                request.max_tokens,
                request.kind,
            )
            continue
        if evidence.empty:
            msg = _mark_unchecked(msg, criteria)
        return CriticReport(msg, evidence, raw, rejected)
    raise AssertionError("unreachable")
