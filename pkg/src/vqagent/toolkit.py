"""Tool registry, prompt rendering and dispatch, plus the built-in video and image tools."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

from .backends.base import Backend, Usage, chat_request
from .errors import BackendError
from .errors import BadArguments, DuplicateTool, HandlerFailure, MediaError, MissingDependency, OutOfRange
from .media import MediaHandle, Timestamp, Transcript, encode_image, parse_timestamp, sample_clip
from .prompts import DEFAULT_STORE, TemplateStore
from .protocol import Action
from .retrieval import FrameIndex, PhraseIndex, format_hits

log = logging.getLogger(__name__)

VIDEO_TOOLS = ("get_transcript", "query_transcript", "query_frames", "query_vision")
IMAGE_TOOLS = ("vit_describe", "ocr", "detect_objects", "recognize")
VISION_TOOL = "query_vision"
SEED_TOOL = "vit_describe"


@dataclass(frozen=True)
class Param:
    name: str
    type: str = "str"
    description: str = ""
    required: bool = True


@dataclass(frozen=True)
class ToolDescriptor:
    name: str
    params: tuple[Param, ...] = ()
    returns: str = "str"
    description: str = ""
    critic_description: str | None = None

    def __post_init__(self):
        if not self.name or not self.name.isidentifier():
            raise ValueError(f"tool name must be an identifier, got {self.name!r}")
        object.__setattr__(self, "params", tuple(self.params))

    @property
    def signature(self) -> str:
        args = ", ".join(f"{p.name}: {p.type}" for p in self.params)
        return f"{self.name}({args}) -> {self.returns}"

    def render(self, number: int, audience: str = "agent") -> str:
        text = self.description
        if audience == "critic" and self.critic_description is not None:
            text = self.critic_description
        lines = [f"{number})", f"Tool: {self.signature}:", f"Description: {text}"]
        documented = [p for p in self.params if p.description]
        if documented:
            lines.append("Parameters:")
            lines += [f"- {p.name} ({p.type}): {p.description}" for p in documented]
        return "\n".join(lines)


@dataclass
class ToolResult:
    output: str
    artifacts: tuple[Any, ...] = ()
    cost: Usage = field(default_factory=Usage)


@dataclass
class SessionContext:
    """What a handler may look at while serving one session."""

    media: MediaHandle | None = None
    question: str = ""
    extras: dict[str, Any] = field(default_factory=dict)


Handler = Callable[[dict[str, str], SessionContext], "ToolResult | str"]


class ToolRegistry:
    """Ordered, immutable set of tools; ``register`` returns a new registry."""

    def __init__(self, tools: Iterable[tuple[ToolDescriptor, Handler]] = ()):
        self._tools: dict[str, tuple[ToolDescriptor, Handler]] = {}
        for descriptor, handler in tools:
            if descriptor.name in self._tools:
                raise DuplicateTool(f"tool {descriptor.name!r} is already registered")
            self._tools[descriptor.name] = (descriptor, handler)

    def register(self, descriptor: ToolDescriptor, handler: Handler) -> "ToolRegistry":
        return ToolRegistry([*self._tools.values(), (descriptor, handler)])

    def extend(self, tools: Iterable[tuple[ToolDescriptor, Handler]]) -> "ToolRegistry":
        return ToolRegistry([*self._tools.values(), *tools])

    @property
    def names(self) -> list[str]:
        return list(self._tools)

    @property
    def descriptors(self) -> list[ToolDescriptor]:
        return [d for d, _ in self._tools.values()]

    def __contains__(self, name: str) -> bool:
        return name in self._tools

    def __len__(self) -> int:
        return len(self._tools)

    def descriptor(self, name: str) -> ToolDescriptor:
        return self._tools[name][0]

    def handler(self, name: str) -> Handler:
        return self._tools[name][1]

    def describe_all(self, audience: str = "agent") -> str:
        return "\n\n".join(d.render(i, audience) for i, d in enumerate(self.descriptors, 1))

    def dispatch(self, action: Action, ctx: SessionContext) -> ToolResult:
        return dispatch(self, action, ctx)


def register(registry: ToolRegistry, descriptor: ToolDescriptor, handler: Handler) -> ToolRegistry:
    return registry.register(descriptor, handler)


def _bad(tool: str, message: str) -> ToolResult:
    return ToolResult(f"Bad arguments for tool '{tool}': {message}")


def dispatch(registry: ToolRegistry, action: Action, ctx: SessionContext) -> ToolResult:
    """Run one action. Unknown tools and bad arguments come back as output text."""
    if action.tool_name not in registry:
        valid = ", ".join(registry.names)
        return ToolResult(f"Unknown tool '{action.tool_name}'. Valid tool names are: {valid}.")
    descriptor, handler = registry._tools[action.tool_name]
    expected = {p.name for p in descriptor.params}
    given = dict(action.tool_input)
    unexpected = sorted(set(given) - expected)
    if unexpected:
        names = ", ".join(p.name for p in descriptor.params) or "no parameters"
        return _bad(descriptor.name, f"unexpected parameter(s) {', '.join(unexpected)}; expected {names}.")
    missing = [p.name for p in descriptor.params if p.required and p.name not in given]
    if missing:
        return _bad(descriptor.name, f"missing required parameter(s) {', '.join(missing)}.")
    try:
        result = handler(given, ctx)
    except BadArguments as exc:
        return _bad(descriptor.name, str(exc))
    except BackendError as exc:
        raise HandlerFailure(f"tool {descriptor.name!r} failed: {exc}") from exc
    if isinstance(result, str):
        result = ToolResult(result)
    return result


# ---------------------------------------------------------------------------
# Built-in video tools
# ---------------------------------------------------------------------------


@dataclass
class VideoToolDeps:
    media: MediaHandle | None
    transcript: Transcript | None
    phrase_index: PhraseIndex | None
    frame_index: FrameIndex | None
    vision: Backend | None
    embedder: Backend | None = None
    frame_embedder: Backend | None = None
    top_k: int = 3
    max_image_dim: int | None = None

    def check(self) -> None:
        needed = {
            "media": self.media,
            "transcript": self.transcript,
            "frame index": self.frame_index,
            "vision backend": self.vision,
            "frame embedder": self.frame_embedder,
        }
        if self.transcript is not None and not self.transcript.empty:
            needed["phrase index"] = self.phrase_index
            needed["text embedder"] = self.embedder
        missing = [k for k, v in needed.items() if v is None]
        if missing:
            raise MissingDependency(f"video tools need: {', '.join(missing)}")


def _parse_ts(value: str) -> Timestamp:
    try:
        return parse_timestamp(value)
    except MediaError as exc:
        raise BadArguments(f"{exc}; timestamps look like 00:08:27") from exc


def builtin_video_tools(deps: VideoToolDeps, store: TemplateStore = DEFAULT_STORE) -> list[tuple[ToolDescriptor, Handler]]:
    deps.check()

    def describe(name: str, params: Sequence[Param]) -> ToolDescriptor:
        return ToolDescriptor(
            name,
            tuple(params),
            "str",
            store.tool_description(name),
            store.tool_description(name, "critic"),
        )

    def get_transcript(args: dict[str, str], ctx: SessionContext) -> str:
        if deps.transcript.empty:
            return "The transcript is empty."
        return deps.transcript.render()

    def query_transcript(args: dict[str, str], ctx: SessionContext) -> str:
        if deps.phrase_index is None:
            return "The transcript is empty; there are no phrases to search."
        query = args["transcript_query"].strip()
        if not query:
            raise BadArguments("transcript_query must not be empty")
        return format_hits(deps.phrase_index.search(query, deps.embedder, deps.top_k))

    def query_frames(args: dict[str, str], ctx: SessionContext) -> str:
        query = args["frames_query"].strip()
        if not query:
            raise BadArguments("frames_query must not be empty")
        return format_hits(deps.frame_index.search(query, deps.frame_embedder, deps.top_k))

    def query_vision(args: dict[str, str], ctx: SessionContext) -> ToolResult:
        center = _parse_ts(args["timestamp"])
        query = args["query"]
        try:
            frames = sample_clip(deps.media, center)
        except OutOfRange as exc:
            raise BadArguments(f"{exc}; the video is {deps.media.duration} seconds long") from exc
        images = [encode_image(f, "PNG", deps.max_image_dim) for _, f in frames]
        response = deps.vision.vision(chat_request(None, ("user", query), images=images))
        return ToolResult(response.text, tuple(t for t, _ in frames), response.usage)

    return [
        (describe("get_transcript", ()), get_transcript),
        (describe("query_transcript", (Param("transcript_query"),)), query_transcript),
        (describe("query_frames", (Param("frames_query"),)), query_frames),
        (describe("query_vision", (Param("timestamp"), Param("query"))), query_vision),
    ]


# ---------------------------------------------------------------------------
# Built-in image tools
# ---------------------------------------------------------------------------

OCR_PROMPT = "Extract all text that is visible in this image. Return only the text."
DETECT_PROMPT = "Detect the objects in this image and list their labels."


@dataclass
class ImageToolDeps:
    media: MediaHandle | None
    vit: Backend | None
    ocr: Backend | None = None
    detector: Backend | None = None
    recognizer: Backend | None = None
    fallback_to_vit: bool = False
    max_image_dim: int | None = None

    def resolved(self) -> dict[str, Backend]:
        if self.media is None or self.media.kind != "image":
            raise MissingDependency("image tools need an image handle")
        if self.vit is None:
            raise MissingDependency("image tools need a vision interpreter backend")
        backends = {"vit_describe": self.vit, "ocr": self.ocr, "detect_objects": self.detector, "recognize": self.recognizer}
        for name, backend in backends.items():
            if backend is None:
                if not self.fallback_to_vit:
                    raise MissingDependency(f"no backend configured for {name}")
                backends[name] = self.vit
        return backends


def builtin_image_tools(deps: ImageToolDeps, store: TemplateStore = DEFAULT_STORE) -> list[tuple[ToolDescriptor, Handler]]:
    backends = deps.resolved()
    payload = encode_image(deps.media.image(), "PNG", deps.max_image_dim)

    def delegate(name: str, fixed_prompt: str | None) -> Handler:
        def handler(args: dict[str, str], ctx: SessionContext) -> ToolResult:
            prompt = fixed_prompt if fixed_prompt is not None else args["query"]
            response = backends[name].vision(chat_request(None, ("user", prompt), images=[payload]))
            return ToolResult(response.text, (), response.usage)

        return handler

    query = (Param("query"),)
    specs = [
        ("vit_describe", query, None),
        ("ocr", (), OCR_PROMPT),
        ("detect_objects", (), DETECT_PROMPT),
        ("recognize", query, None),
    ]
    return [
        (ToolDescriptor(name, params, "str", store.tool_description(name)), delegate(name, prompt))
        for name, params, prompt in specs
    ]


def custom_tool(name: str, params: Sequence[Mapping[str, Any] | str], description: str, handler: Handler) -> tuple[ToolDescriptor, Handler]:
    """Descriptor + handler for a tool declared in the config file."""
    plist = []
    for p in params:
        if isinstance(p, str):
            plist.append(Param(p))
        else:
            plist.append(Param(p["name"], p.get("type", "str"), p.get("description", ""), p.get("required", True)))
    return ToolDescriptor(name, tuple(plist), "str", description), handler
