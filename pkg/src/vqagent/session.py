"""The planner/reasoner loop: prompt assembly, reasoner turns, tool dispatch and critic rounds."""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

from .backends.base import BackendSet, Message, Usage, chat_request
from .errors import BackendError
from .chain import ChainEntry, ReasoningChain
from .critic import CriteriaSet, CriticReport, Evidence, evaluate, gather_evidence
from .errors import EmptyRegistry, MalformedMessage, ProtocolError, VQAgentError
from .framegrid import DEFAULT_HEIGHT
from .media import MediaHandle
from .prompts import DEFAULT_STORE, SYSTEM_SECTIONS, PromptTemplate, TemplateStore
from .protocol import (
    CRITIC_FEEDBACK,
    Action,
    Answer,
    Step,
    ToolOutput,
    Query,
    critic_feedback_text,
    dumps,
    parse_agent_message,
    serialize_agent_message,
)
from .toolkit import SEED_TOOL, SessionContext, ToolDescriptor, ToolRegistry, ToolResult, dispatch

log = logging.getLogger(__name__)

UNANSWERABLE = None  # final_answer value when no usable answer was produced
UNABLE_PHRASE = "I am unable to answer this question"
_UNABLE_RE = re.compile(r"^\W*i am unable to answer this question\W*$", re.IGNORECASE)

REASONER_REMINDER = (
    "Your previous response could not be used ({error}). Respond with a single clean JSON object "
    "with the keys \"Observation\", \"Thought\" and either \"Action\" (with \"tool_name\" and "
    "\"tool_input\") or \"Answer\", and nothing else."
)


class Termination(str, enum.Enum):
    CRITIC_ACCEPTED = "CriticAccepted"
    CRITIC_BUDGET_EXHAUSTED = "CriticBudgetExhausted"
    ITERATION_BUDGET_EXHAUSTED = "IterationBudgetExhausted"
    CRITIC_DISABLED = "CriticDisabled"
    FAILURE = "Failure"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class SessionConfig:
    max_iterations: int = 15
    max_critic_rounds: int = 1
    critic_enabled: bool = True
    malformed_retry_limit: int = 2
    grid_height: int = DEFAULT_HEIGHT
    max_image_dim: int | None = None

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.max_critic_rounds < 0:
            raise ValueError("max_critic_rounds must be non-negative")
        if self.malformed_retry_limit < 0:
            raise ValueError("malformed_retry_limit must be non-negative")

    @property
    def critic_active(self) -> bool:
        return self.critic_enabled and self.max_critic_rounds > 0

    def to_record(self) -> dict[str, Any]:
        return {
            "max_iterations": self.max_iterations,
            "max_critic_rounds": self.max_critic_rounds,
            "critic_enabled": self.critic_enabled,
            "malformed_retry_limit": self.malformed_retry_limit,
            "grid_height": self.grid_height,
            "max_image_dim": self.max_image_dim,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "SessionConfig":
        return cls(**{k: v for k, v in rec.items() if k in cls.__dataclass_fields__})


@dataclass
class SessionResult:
    final_answer: str | None
    chain: ReasoningChain
    critic_rounds_used: int
    termination: Termination
    answers: list[str] = field(default_factory=list)
    reports: list[CriticReport] = field(default_factory=list, compare=False, repr=False)
    usage: Usage = field(default_factory=Usage, compare=False)

    @property
    def unanswerable(self) -> bool:
        return self.final_answer is UNANSWERABLE

    @property
    def first_answer(self) -> str | None:
        """The answer given before any critic feedback (used for critic ablations)."""
        return _final(self.answers[0]) if self.answers else UNANSWERABLE

    def summary(self) -> dict[str, Any]:
        return {
            "final_answer": self.final_answer,
            "termination": self.termination.value,
            "critic_rounds_used": self.critic_rounds_used,
            "chain_length": len(self.chain),
            "answers": list(self.answers),
        }


def _final(answer: str | None) -> str | None:
    if answer is None or _UNABLE_RE.match(answer.strip()):
        return UNANSWERABLE
    return answer


def build_system_prompt(tools: Sequence[ToolDescriptor] | ToolRegistry, template: PromptTemplate) -> str:
    descriptors = tools.descriptors if isinstance(tools, ToolRegistry) else list(tools)
    if not descriptors:
        raise EmptyRegistry("cannot build a system prompt without tools")
    template.require_sections(SYSTEM_SECTIONS)
    rendered = "\n\n".join(d.render(i) for i, d in enumerate(descriptors, 1))
    return template.render(tools=rendered)


def system_template(kind: str, store: TemplateStore = DEFAULT_STORE) -> PromptTemplate:
    return store.load("image_system" if kind == "image" else "video_system")


def seed_step(question: str) -> Step:
    """The framework-injected first action of image sessions."""
    return Step(
        "The question is about an image that I can only see through tools.",
        "Start by getting an overall description of the image with the vision interpreter.",
        Action(SEED_TOOL, {"query": f"Describe this image in detail, including anything relevant to: {question}"}),
    )


def render_turn(entry: ChainEntry) -> Message:
    """How a chain entry appears in the reasoner's conversation."""
    if entry.role == "reasoner":
        return Message("assistant", serialize_agent_message(entry.message))
    if entry.role == "critic":
        return Message("user", dumps({CRITIC_FEEDBACK: critic_feedback_text(entry.message)}))
    return Message("user", serialize_agent_message(entry.message))


class SessionObserver:
    """Hooks for recording a session as it runs (see ``trace.TraceWriter``)."""

    def on_start(self, header: dict[str, Any]) -> None: ...

    def on_entry(self, seq: int, entry: ChainEntry) -> None: ...

    def on_rejected(self, seq: int, source: str, raw: str, error: str) -> None: ...

    def on_critic(self, seq: int, report: CriticReport) -> None: ...

    def on_finish(self, result: SessionResult) -> None: ...


Dispatcher = Callable[[Action, SessionContext], ToolResult]
EvidenceFn = Callable[[ReasoningChain], Evidence]


class _Run:
    def __init__(
        self,
        query: str,
        media: MediaHandle,
        registry: ToolRegistry,
        backends: BackendSet,
        criteria: CriteriaSet | None,
        config: SessionConfig,
        store: TemplateStore,
        observer: SessionObserver,
        dispatcher: Dispatcher | None,
        evidence_fn: EvidenceFn | None,
        grid_dir: str | Path | None,
    ):
        if len(registry) == 0:
            raise EmptyRegistry("the tool registry is empty")
        if config.critic_active and (criteria is None or backends.critic is None):
            raise ValueError("the critic is enabled but no criteria or critic backend was given")
        self.query = query
        self.media = media
        self.registry = registry
        self.backends = backends
        self.criteria = criteria
        self.config = config
        self.store = store
        self.observer = observer
        self.dispatcher = dispatcher or (lambda action, ctx: dispatch(registry, action, ctx))
        self.evidence_fn = evidence_fn
        self.grid_dir = grid_dir
        self.ctx = SessionContext(media, query)
        self.chain = ReasoningChain()
        self.system = build_system_prompt(registry, system_template(media.kind, store))
        self.critic_tools = registry.describe_all("critic")
        self.answers: list[str] = []
        self.reports: list[CriticReport] = []
        self.usage = Usage()

    def append(self, role: str, message: Any, raw: str | None = None, seeded: bool = False) -> ChainEntry:
        entry = self.chain.append(role, message, raw, seeded)
        self.observer.on_entry(len(self.chain) - 1, entry)
        return entry

    def act(self, step: Step, raw: str | None, seeded: bool = False) -> None:
        self.append("reasoner", step, raw, seeded)
        result = self.dispatcher(step.action, self.ctx)
        self.usage = self.usage + result.cost
        self.append("tool", ToolOutput(result.output))

    def reasoner_turn(self, pending: list[Message]) -> str:
        messages = [Message("system", self.system)] + [render_turn(e) for e in self.chain] + pending
        request = chat_request(None, *((m.role, m.content) for m in messages))
        return self.backends.reasoner.chat(request).text

    def critic_round(self) -> CriticReport:
        if self.evidence_fn is not None:
            evidence = self.evidence_fn(self.chain)
        else:
            evidence = gather_evidence(self.chain, self.media, self.config.grid_height, self.config.max_image_dim)
        if self.grid_dir is not None and evidence.grid is not None:
            evidence.grid.dump(self.grid_dir, prefix=f"round{len(self.reports) + 1}")
        return evaluate(self.chain, evidence, self.criteria, self.backends.critic, tools_text=self.critic_tools, store=self.store)

    def run(self) -> SessionResult:
        cfg = self.config
        self.append("user", Query(self.query))
        if self.media.kind == "image" and SEED_TOOL in self.registry:
            self.act(seed_step(self.query), None, seeded=True)

        rounds = 0
        iterations = 0
        malformed = 0
        pending: list[Message] = []
        termination: Termination | None = None
        while termination is None:
            if iterations >= cfg.max_iterations:
                termination = Termination.ITERATION_BUDGET_EXHAUSTED
                break
            iterations += 1
            raw = self.reasoner_turn(pending)
            try:
                msg = parse_agent_message(raw)
                if not isinstance(msg, (Step, Answer)):
                    raise MalformedMessage(f"expected a step or an answer, got {type(msg).__name__}", raw=raw)
            except ProtocolError as exc:
                malformed += 1
                self.observer.on_rejected(len(self.chain), "reasoner", raw, str(exc))
                if malformed > cfg.malformed_retry_limit:
                    log.warning("reasoner produced %d unusable outputs in a row", malformed)
                    termination = Termination.FAILURE
                    break
                pending = [Message("assistant", raw), Message("user", REASONER_REMINDER.format(error=exc))]
                continue
            malformed = 0
            pending = []
            if isinstance(msg, Step):
                self.act(msg, raw)
                continue

            self.append("reasoner", msg, raw)
            self.answers.append(msg.answer)
            if not cfg.critic_active:
                termination = Termination.CRITIC_DISABLED
                break
            rounds += 1
            try:
                report = self.critic_round()
            except MalformedMessage as exc:
                for attempt_raw in getattr(exc, "attempts", [exc.raw or ""]):
                    self.observer.on_rejected(len(self.chain), "critic", attempt_raw, str(exc))
                termination = Termination.FAILURE
                break
            for rejected in report.rejected:
                self.observer.on_rejected(len(self.chain), "critic", rejected, "malformed critic response")
            self.reports.append(report)
            self.append("critic", report.message, report.raw)
            self.observer.on_critic(len(self.chain) - 1, report)
            if report.accepted:
                termination = Termination.CRITIC_ACCEPTED
            elif rounds >= cfg.max_critic_rounds:
                termination = Termination.CRITIC_BUDGET_EXHAUSTED
            else:
                iterations = 0  # fresh budget for the next answer attempt

        last = self.answers[-1] if self.answers else None
        return SessionResult(
            final_answer=_final(last),
            chain=self.chain,
            critic_rounds_used=rounds,
            termination=termination,
            answers=list(self.answers),
            reports=self.reports,
            usage=self.usage,
        )


def session_header(query: str, media: MediaHandle, registry: ToolRegistry, criteria: CriteriaSet | None, config: SessionConfig) -> dict[str, Any]:
    return {
        "query": query,
        "media": {"kind": media.kind, "source": media.source, "digest": media.digest, "duration_s": media.duration_s},
        "config": config.to_record(),
        "tools": [
            {
                "name": d.name,
                "params": [{"name": p.name, "type": p.type, "description": p.description, "required": p.required} for p in d.params],
                "returns": d.returns,
                "description": d.description,
                "critic_description": d.critic_description,
            }
            for d in registry.descriptors
        ],
        "criteria": criteria.to_record() if criteria is not None else None,
    }


def run_session(
    query: str,
    media: MediaHandle,
    registry: ToolRegistry,
    backends: BackendSet,
    criteria: CriteriaSet | None,
    config: SessionConfig | None = None,
    *,
    store: TemplateStore | None = None,
    trace_path: str | Path | None = None,
    observer: SessionObserver | None = None,
    dispatcher: Dispatcher | None = None,
    evidence_fn: EvidenceFn | None = None,
    grid_dir: str | Path | None = None,
) -> SessionResult:
    """Answer ``query`` about ``media``.

    Backend and tool-handler failures propagate with the partial chain
    attached as ``exc.chain``.
    """
    config = config or SessionConfig()
    store = store or DEFAULT_STORE
    if trace_path is not None:
        from .trace import TraceWriter

        observer = TraceWriter(trace_path, inner=observer)
    observer = observer or SessionObserver()
    run = _Run(query, media, registry, backends, criteria, config, store, observer, dispatcher, evidence_fn, grid_dir)
    observer.on_start(session_header(query, media, registry, criteria, config))
    try:
        result = run.run()
    except (BackendError, VQAgentError) as exc:
        exc.chain = run.chain
        close = getattr(observer, "close", None)
        if close:
            close()
        raise
    observer.on_finish(result)
    return result
