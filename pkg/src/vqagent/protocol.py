"""Wire records exchanged with the reasoner and critic models.

Every record is a flat JSON object. The reasoner emits either a *step*
(``Observation``/``Thought``/``Action``) or a final *answer*
(``Observation``/``Thought``/``Answer``); the framework sends back the user
question, tool output and critic feedback. The critic emits
``Observation``/``Thought``/``Feedback``/``Verdict``.

Models rarely produce perfectly clean JSON, so parsing goes through one
bounded repair pass before giving up.
"""

from __future__ import annotations

import ast
import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Union

from .errors import (
    AmbiguousMessage,
    InvalidVerdict,
    MalformedMessage,
    MissingCriterion,
    MissingField,
)

OBSERVATION = "Observation"
THOUGHT = "Thought"
ACTION = "Action"
ANSWER = "Answer"
OUTPUT = "Output"
QUESTION = "Question"
CRITIC_FEEDBACK = "Critic Feedback"
FEEDBACK = "Feedback"
VERDICT = "Verdict"
LOGS = "logs"
TOOL_NAME = "tool_name"
TOOL_INPUT = "tool_input"

VERDICTS = ("YES", "NO")


@dataclass(frozen=True)
class Action:
    tool_name: str
    tool_input: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.tool_name:
            raise ValueError("tool_name must be non-empty")
        object.__setattr__(self, "tool_input", dict(self.tool_input))


@dataclass(frozen=True)
class Query:
    question: str


@dataclass(frozen=True)
class Step:
    observation: str
    thought: str
    action: Action


@dataclass(frozen=True)
class Answer:
    observation: str
    thought: str
    answer: str


@dataclass(frozen=True)
class ToolOutput:
    output: str


@dataclass(frozen=True)
class CriticFeedback:
    feedback: str


AgentMessage = Union[Query, Step, Answer, ToolOutput, CriticFeedback]


@dataclass(frozen=True)
class CriticMessage:
    """Parsed critic response.

    ``feedback`` maps criterion name to feedback text, in criteria order.
    ``grades`` is only populated when the critic also graded each criterion
    on the 1..5 scale.
    """

    observation: str
    thought: str
    feedback: Mapping[str, str]
    verdict: str
    grades: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise InvalidVerdict(f"verdict must be YES or NO, got {self.verdict!r}")
        object.__setattr__(self, "feedback", dict(self.feedback))
        object.__setattr__(self, "grades", dict(self.grades))

    @property
    def accepted(self) -> bool:
        return self.verdict == "YES"


# ---------------------------------------------------------------------------
# JSON loading with a single repair pass
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"```[A-Za-z0-9_-]*[ \t]*\n?(.*?)```", re.DOTALL)


def _strip_trailing_commas(text: str) -> str:
    out: list[str] = []
    in_string = False
    escaped = False
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if in_string:
            out.append(ch)
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            i += 1
            continue
        if ch == '"':
            in_string = True
            out.append(ch)
            i += 1
            continue
        if ch == ",":
            j = i + 1
            while j < n and text[j] in " \t\r\n":
                j += 1
            if j < n and text[j] in "}]":
                i += 1
                continue
        out.append(ch)
        i += 1
    return "".join(out)


def _repair(raw: str) -> str:
    text = raw.strip()
    fenced = _FENCE_RE.search(text)
    if fenced:
        text = fenced.group(1).strip()
    start = text.find("{")
    end = text.rfind("}")
    if start != -1 and end > start:
        text = text[start : end + 1]
    return _strip_trailing_commas(text)


def load_record(raw: str) -> dict[str, Any]:
    """Parse ``raw`` into a JSON object, repairing it once if needed.

    The repair pass strips surrounding prose and markdown fences, drops
    trailing commas and tolerates raw control characters inside strings.
    As a last resort a Python-literal dict (single-quoted keys) is accepted.
    """
    if raw is None or not raw.strip():
        raise MalformedMessage("empty message", raw=raw)
    try:
        obj = json.loads(raw)
    except (json.JSONDecodeError, TypeError):
        obj = None
    if isinstance(obj, dict):
        return obj

    repaired = _repair(raw)
    try:
        obj = json.loads(repaired, strict=False)
    except json.JSONDecodeError:
        try:
            obj = ast.literal_eval(repaired)
        except (ValueError, SyntaxError, MemoryError, RecursionError):
            obj = None
    if not isinstance(obj, dict):
        raise MalformedMessage("response is not a JSON object after repair", raw=raw)
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def _text(value: Any) -> str:
    if isinstance(value, str):
        return value
    if value is None:
        return ""
    if isinstance(value, (int, float, bool)):
        return json.dumps(value)
    return dumps(value)


def _require(record: Mapping[str, Any], key: str, raw: str) -> Any:
    if key not in record:
        raise MissingField(f"missing required key {key!r}", raw=raw)
    return record[key]


# ---------------------------------------------------------------------------
# Agent messages
# ---------------------------------------------------------------------------


def message_to_record(msg: AgentMessage) -> dict[str, Any]:
    if isinstance(msg, Step):
        return {
            OBSERVATION: msg.observation,
            THOUGHT: msg.thought,
            ACTION: {TOOL_NAME: msg.action.tool_name, TOOL_INPUT: dict(msg.action.tool_input)},
        }
    if isinstance(msg, Answer):
        return {OBSERVATION: msg.observation, THOUGHT: msg.thought, ANSWER: msg.answer}
    if isinstance(msg, ToolOutput):
        return {OUTPUT: msg.output}
    if isinstance(msg, Query):
        return {QUESTION: msg.question}
    if isinstance(msg, CriticFeedback):
        return {CRITIC_FEEDBACK: msg.feedback}
    raise TypeError(f"not an agent message: {msg!r}")


def serialize_agent_message(msg: AgentMessage) -> str:
    return dumps(message_to_record(msg))


def _parse_action(value: Any, raw: str) -> Action:
    if isinstance(value, str):
        # some models double-encode the action
        try:
            value = load_record(value)
        except MalformedMessage:
            raise MalformedMessage("Action is not an object", raw=raw) from None
    if not isinstance(value, Mapping):
        raise MalformedMessage("Action is not an object", raw=raw)
    name = value.get(TOOL_NAME)
    if not name or not isinstance(name, str):
        raise MissingField("Action has no tool_name", raw=raw)
    tool_input = value.get(TOOL_INPUT) or {}
    if isinstance(tool_input, str):
        try:
            tool_input = load_record(tool_input)
        except MalformedMessage:
            raise MalformedMessage("tool_input is not an object", raw=raw) from None
    if not isinstance(tool_input, Mapping):
        raise MalformedMessage("tool_input is not an object", raw=raw)
    return Action(name.strip(), {str(k): _text(v) for k, v in tool_input.items()})


def record_to_message(record: Mapping[str, Any], raw: str = "") -> AgentMessage:
    if ANSWER in record and ACTION in record:
        raise AmbiguousMessage("record carries both Answer and Action", raw=raw)
    if ANSWER in record:
        return Answer(
            _text(_require(record, OBSERVATION, raw)),
            _text(_require(record, THOUGHT, raw)),
            _text(record[ANSWER]),
        )
    if ACTION in record:
        return Step(
            _text(_require(record, OBSERVATION, raw)),
            _text(_require(record, THOUGHT, raw)),
            _parse_action(record[ACTION], raw),
        )
    if OUTPUT in record:
        return ToolOutput(_text(record[OUTPUT]))
    if QUESTION in record:
        return Query(_text(record[QUESTION]))
    if CRITIC_FEEDBACK in record:
        return CriticFeedback(_text(record[CRITIC_FEEDBACK]))
    raise MissingField("record has neither Action nor Answer", raw=raw)


def parse_agent_message(raw: str) -> AgentMessage:
    """Parse one reasoner (or framework) record into its typed variant."""
    return record_to_message(load_record(raw), raw)


# ---------------------------------------------------------------------------
# Critic messages
# ---------------------------------------------------------------------------


def _criterion_names(criteria: Iterable[Any]) -> list[str]:
    return [c if isinstance(c, str) else c.name for c in criteria]


def _ordinal(i: int) -> str:
    return f"Criteria {i + 1}"


def _lookup(feedback: Mapping[str, Any], index: int, name: str) -> Any:
    folded = {str(k).strip().lower(): v for k, v in feedback.items()}
    for key in (_ordinal(index), f"Criterion {index + 1}", name):
        if key.lower() in folded:
            return folded[key.lower()]
    return None


def _split_graded(value: Any) -> tuple[str, str | None]:
    if isinstance(value, Mapping):
        folded = {str(k).lower(): v for k, v in value.items()}
        grade = folded.get("grade", folded.get("value"))
        text = folded.get("feedback", folded.get("comment", ""))
        return _text(text), (None if grade is None else _text(grade))
    return _text(value), None


def normalize_verdict(value: Any, raw: str = "") -> str:
    verdict = _text(value).strip().strip("\"'.!").strip().upper()
    if verdict not in VERDICTS:
        raise InvalidVerdict(f"verdict {value!r} is neither YES nor NO", raw=raw)
    return verdict


def parse_critic_message(raw: str, criteria: Iterable[Any]) -> CriticMessage:
    """Parse a critic response against the ordered criteria it was asked about.

    Feedback keys are matched by position (``"Criteria 1"`` is the first
    criterion); keys spelled as the criterion name are accepted too.
    """
    record = load_record(raw)
    names = _criterion_names(criteria)
    feedback_in = record.get(FEEDBACK)
    if not isinstance(feedback_in, Mapping):
        raise MissingCriterion("critic response has no Feedback object", raw=raw)
    feedback: dict[str, str] = {}
    grades: dict[str, str] = {}
    for i, name in enumerate(names):
        value = _lookup(feedback_in, i, name)
        if value is None:
            raise MissingCriterion(f"no feedback for {_ordinal(i)} ({name})", raw=raw)
        text, grade = _split_graded(value)
        feedback[name] = text
        if grade is not None:
            grades[name] = grade
    if VERDICT not in record:
        raise InvalidVerdict("critic response has no Verdict", raw=raw)
    return CriticMessage(
        observation=_text(record.get(OBSERVATION, "")),
        thought=_text(record.get(THOUGHT, "")),
        feedback=feedback,
        verdict=normalize_verdict(record[VERDICT], raw),
        grades=grades,
    )


def critic_to_record(msg: CriticMessage) -> dict[str, Any]:
    feedback: dict[str, Any] = {}
    for i, (name, text) in enumerate(msg.feedback.items()):
        if name in msg.grades:
            feedback[_ordinal(i)] = {"Grade": msg.grades[name], "Feedback": text}
        else:
            feedback[_ordinal(i)] = text
    return {OBSERVATION: msg.observation, THOUGHT: msg.thought, FEEDBACK: feedback, VERDICT: msg.verdict}


def serialize_critic_message(msg: CriticMessage) -> str:
    return dumps(critic_to_record(msg))


def critic_feedback_text(msg: CriticMessage) -> str:
    """Flatten a critic verdict into the text sent back as ``Critic Feedback``."""
    lines = []
    if msg.thought:
        lines.append(msg.thought)
    for i, (name, text) in enumerate(msg.feedback.items()):
        grade = f" [grade {msg.grades[name]}]" if name in msg.grades else ""
        lines.append(f"{_ordinal(i)} ({name}){grade}: {text}")
    lines.append(f"Verdict: {msg.verdict}")
    return "\n".join(lines)
