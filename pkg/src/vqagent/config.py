"""Run configuration: config file + flags + environment, and everything built from it."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import re
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping
from urllib.parse import parse_qs, urlparse

import yaml

from .backends.base import Backend, BackendSet, RetryPolicy
from .backends.http import HttpBackend, HttpToolEndpoint
from .backends.scripted import ScriptedBackend, ScriptedEmbedder, load_script
from .critic import CriteriaSet, default_criteria
from .errors import EmptyTranscript, IndexFormatError, VQAgentError
from .evalharness import DEFAULT_WEIGHTS, JudgeVerdict
from .media import MediaHandle, Transcript, acquire_transcript, open_media, sample_index_frames, synthetic_media
from .prompts import TemplateStore
from .retrieval import FrameIndex, PhraseIndex, build_frame_index, build_phrase_index
from .session import SessionConfig
from .toolkit import ImageToolDeps, ToolRegistry, VideoToolDeps, builtin_image_tools, builtin_video_tools, custom_tool

log = logging.getLogger(__name__)

ROLES = ("reasoner", "critic", "vit", "embedder", "frame_embedder", "asr", "judge")
CAPABILITIES = ("ocr", "detect_objects", "recognize")
_SECRET_RE = re.compile(r"key|token|secret|password", re.IGNORECASE)

ENV_DEFAULTS = {
    "cache_dir": "VQAGENT_CACHE_DIR",
    "output_dir": "VQAGENT_OUTPUT_DIR",
    "template_dir": "VQAGENT_TEMPLATE_DIR",
}


class ConfigError(VQAgentError):
    """The config file or flags are unusable."""


@dataclass
class RunConfig:
    backends: dict[str, dict[str, Any]] = field(default_factory=dict)
    capabilities: dict[str, dict[str, Any]] = field(default_factory=dict)
    session: SessionConfig = field(default_factory=SessionConfig)
    template_dir: str | None = None
    cache_dir: str = ".vqagent/cache"
    output_dir: str = ".vqagent/runs"
    index_rate: float = 1.0
    top_k: int = 3
    parallelism: int = 4
    weights: dict[str, float] = field(default_factory=lambda: {k.value: v for k, v in DEFAULT_WEIGHTS.items()})
    tools: list[dict[str, Any]] = field(default_factory=list)
    criteria_path: str | None = None
    scripted: str | None = None
    no_cache: bool = False
    dump_grid: str | None = None
    judge_backend: str = "judge"

    @property
    def store(self) -> TemplateStore:
        return TemplateStore(self.template_dir)

    def weight_map(self) -> dict[JudgeVerdict, float]:
        return {JudgeVerdict(k): float(v) for k, v in self.weights.items()}

    def redacted(self) -> dict[str, Any]:
        def scrub(obj: Any) -> Any:
            if isinstance(obj, Mapping):
                # auth_env only names a variable, so it is safe to show
                return {k: ("***" if _SECRET_RE.search(k) and k != "auth_env" else scrub(v)) for k, v in obj.items()}
            if isinstance(obj, list):
                return [scrub(v) for v in obj]
            return obj

        rec = {
            "backends": self.backends,
            "capabilities": self.capabilities,
            "session": self.session.to_record(),
            "template_dir": self.template_dir,
            "cache_dir": self.cache_dir,
            "output_dir": self.output_dir,
            "index_rate": self.index_rate,
            "top_k": self.top_k,
            "parallelism": self.parallelism,
            "weights": self.weights,
            "tools": self.tools,
            "criteria_path": self.criteria_path,
            "scripted": self.scripted,
            "no_cache": self.no_cache,
            "dump_grid": self.dump_grid,
            "judge_backend": self.judge_backend,
        }
        return scrub(copy.deepcopy(rec))


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None, env: Mapping[str, str] | None = None) -> RunConfig:
    """Environment defaults, then the config file, then ``overrides`` (the CLI flags)."""
    env = os.environ if env is None else env
    cfg = RunConfig()
    for attr, var in ENV_DEFAULTS.items():
        if env.get(var):
            setattr(cfg, attr, env[var])
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping")
    backends = dict(data.get("backends") or {})
    cfg.capabilities = dict(backends.pop("capabilities", None) or data.get("capabilities") or {})
    cfg.backends = backends
    session = dict(data.get("session") or {})
    for key in ("template_dir", "cache_dir", "output_dir", "criteria_path", "judge_backend"):
        if key in data and data[key] is not None:
            setattr(cfg, key, str(data[key]))
    index = data.get("index") or {}
    cfg.index_rate = float(index.get("rate", cfg.index_rate))
    cfg.top_k = int(index.get("top_k", cfg.top_k))
    ev = data.get("eval") or {}
    cfg.parallelism = int(ev.get("parallelism", cfg.parallelism))
    if ev.get("weights"):
        cfg.weights = {str(JudgeVerdict(k)): float(v) for k, v in ev["weights"].items()}
    cfg.tools = list(data.get("tools") or [])
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in SessionConfig.__dataclass_fields__:
            session[key] = value
        elif hasattr(cfg, key):
            setattr(cfg, key, value)
        else:
            raise ConfigError(f"unknown setting {key!r}")
    try:
        cfg.session = SessionConfig.from_record(session)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad session settings: {exc}") from exc
    return cfg


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


def http_backend(role: str, spec: Mapping[str, Any]) -> Backend:
    kind = spec.get("kind", "http")
    if kind != "http":
        raise ConfigError(f"backend {role}: unsupported kind {kind!r}")
    if not spec.get("endpoint"):
        raise ConfigError(f"backend {role}: endpoint is required")
    retry = spec.get("retry") or {}
    return HttpBackend(
        endpoint=spec["endpoint"],
        model=spec.get("model", ""),
        auth_env=spec.get("auth_env"),
        timeout=float(spec.get("timeout", 120.0)),
        retry=RetryPolicy(**retry) if retry else RetryPolicy(),
        concurrency=int(spec.get("concurrency", 4)),
        max_image_dim=spec.get("max_image_dim", 768),
        name=role,
    )


def is_trace(path: str | Path) -> bool:
    try:
        with open(path, encoding="utf-8") as fh:
            first = json.loads(fh.readline() or "{}")
    except (OSError, json.JSONDecodeError):
        return False
    return isinstance(first, dict) and first.get("role") == "session"


def build_backends(cfg: RunConfig) -> BackendSet:
    if cfg.scripted:
        return scripted_backends(cfg.scripted)
    made: dict[str, Backend] = {}
    for role, spec in cfg.backends.items():
        made[role] = http_backend(role, spec or {})
    if "reasoner" not in made:
        raise ConfigError("no reasoner backend configured (use --config or --scripted)")
    caps = {name: http_backend(name, spec or {}) for name, spec in cfg.capabilities.items()}
    return _backend_set(made, caps)


def _backend_set(made: dict[str, Backend], caps: dict[str, Backend]) -> BackendSet:
    extra = {k: v for k, v in made.items() if k not in ROLES}
    caps = {**{k: v for k, v in extra.items() if k in CAPABILITIES}, **caps}
    return BackendSet(
        reasoner=made.get("reasoner"),
        critic=made.get("critic"),
        vit=made.get("vit"),
        embedder=made.get("embedder"),
        frame_embedder=made.get("frame_embedder") or made.get("embedder"),
        asr=made.get("asr"),
        judge=made.get("judge"),
        capabilities=caps | {k: v for k, v in extra.items() if k not in caps},
    )


def scripted_backends(path: str | Path) -> BackendSet:
    """Backends for ``--scripted``: a script file, or a trace whose replies are replayed."""
    if is_trace(path):
        from .trace import read_trace

        trace = read_trace(path)
        made: dict[str, Backend] = {
            "reasoner": ScriptedBackend(trace.reasoner_script(), name="replay-reasoner"),
            "critic": ScriptedBackend(trace.critic_script(), name="replay-critic"),
        }
    else:
        made = load_script(path)
    made.setdefault("embedder", ScriptedEmbedder(name="scripted-embedder"))
    made.setdefault("frame_embedder", made["embedder"])
    made.setdefault("asr", ScriptedBackend((), strict=False, default=[], name="scripted-asr"))
    if "reasoner" not in made:
        raise ConfigError(f"script {path} has no reasoner entries")
    return _backend_set(made, {})


# ---------------------------------------------------------------------------
# Media, caching and tools
# ---------------------------------------------------------------------------


def load_media(ref: str) -> MediaHandle:
    """Open a media path; ``synthetic://name?duration=N`` gives a generated test video."""
    if ref.startswith("synthetic://"):
        query = parse_qs(urlparse(ref).query)
        duration = float(query.get("duration", ["60"])[0])
        return synthetic_media(duration, ref)
    return open_media(ref)


def _key(*parts: Any) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


class Cache:
    """Sidecar files keyed by (media digest, backend identity, parameters)."""

    def __init__(self, root: str | Path, enabled: bool = True):
        self.root = Path(root)
        self.enabled = enabled

    def path(self, media: MediaHandle, kind: str, *params: Any, suffix: str = ".idx") -> Path:
        return self.root / media.digest[:16] / f"{kind}-{_key(*params)}{suffix}"

    @staticmethod
    def _publish(p: Path, write) -> None:
        """Write via a private temp file so concurrent sessions never see a partial sidecar."""
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_name(f".{p.name}.{os.getpid()}.{threading.get_ident()}.tmp")
        write(tmp)
        os.replace(tmp, p)

    def transcript(self, media: MediaHandle, asr: Backend) -> Transcript:
        p = self.path(media, "transcript", asr.identity, suffix=".json")
        if self.enabled and p.is_file():
            return Transcript.from_records(json.loads(p.read_text(encoding="utf-8")))
        transcript = acquire_transcript(media, asr)
        if self.enabled:
            self._publish(p, lambda t: t.write_text(json.dumps(transcript.to_records()), encoding="utf-8"))
        return transcript

    def _index(self, p: Path, cls, build):
        if self.enabled and p.is_file():
            try:
                return cls.load(p)
            except IndexFormatError as exc:
                log.warning("ignoring unreadable index %s: %s", p, exc)
        index = build()
        if self.enabled:
            self._publish(p, index.save)
        return index

    def phrase_index(self, media: MediaHandle, transcript: Transcript, embedder: Backend) -> PhraseIndex | None:
        if transcript.empty:
            return None
        p = self.path(media, "phrases", embedder.identity, transcript.to_records())
        return self._index(p, PhraseIndex, lambda: build_phrase_index(transcript.phrases, embedder))

    def frame_index(self, media: MediaHandle, embedder: Backend, rate: float) -> FrameIndex:
        p = self.path(media, "frames", embedder.identity, rate)
        return self._index(p, FrameIndex, lambda: build_frame_index(sample_index_frames(media, rate), embedder))


def prepare_video(media: MediaHandle, backends: BackendSet, cfg: RunConfig) -> VideoToolDeps:
    cache = Cache(cfg.cache_dir, enabled=not cfg.no_cache)
    if backends.asr is None:
        raise ConfigError("video questions need an asr backend")
    transcript = cache.transcript(media, backends.asr)
    try:
        phrase_index = cache.phrase_index(media, transcript, backends.embedder)
    except EmptyTranscript:
        phrase_index = None
    frame_index = cache.frame_index(media, backends.frame_embedder, cfg.index_rate)
    return VideoToolDeps(
        media=media,
        transcript=transcript,
        phrase_index=phrase_index,
        frame_index=frame_index,
        vision=backends.vit,
        embedder=backends.embedder,
        frame_embedder=backends.frame_embedder,
        top_k=cfg.top_k,
        max_image_dim=cfg.session.max_image_dim,
    )


def _scripted_tool(name: str, backends: BackendSet):
    backend = backends.capabilities.get(f"tool:{name}")

    def handler(args: dict[str, str], ctx) -> str:
        if backend is None:
            return f"The tool {name} is not available in scripted mode."
        from .backends.base import chat_request

        return backend.chat(chat_request(None, ("user", json.dumps(args, sort_keys=True)))).text

    return handler


def custom_tools(cfg: RunConfig, backends: BackendSet) -> list:
    out = []
    for spec in cfg.tools:
        try:
            name = spec["name"]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"custom tool entry without a name: {spec!r}") from exc
        if cfg.scripted:
            handler = _scripted_tool(name, backends)
        else:
            if not spec.get("endpoint"):
                raise ConfigError(f"custom tool {name}: endpoint is required")
            handler = HttpToolEndpoint(spec["endpoint"], spec.get("auth_env"))
        out.append(custom_tool(name, spec.get("params", []), spec.get("description", ""), handler))
    return out


def build_registry(media: MediaHandle, backends: BackendSet, cfg: RunConfig, deps: VideoToolDeps | None = None) -> ToolRegistry:
    store = cfg.store
    if media.kind == "video":
        deps = deps or prepare_video(media, backends, cfg)
        tools = builtin_video_tools(deps, store)
    else:
        caps = backends.capabilities
        tools = builtin_image_tools(
            ImageToolDeps(
                media,
                backends.vit,
                caps.get("ocr"),
                caps.get("detect_objects"),
                caps.get("recognize"),
                fallback_to_vit=True,
                max_image_dim=cfg.session.max_image_dim,
            ),
            store,
        )
    return ToolRegistry(tools + custom_tools(cfg, backends))


def load_criteria(cfg: RunConfig, kind: str) -> CriteriaSet:
    if cfg.criteria_path and Path(cfg.criteria_path).is_file():
        return CriteriaSet.load(cfg.criteria_path)
    return default_criteria(kind, cfg.store)


def with_session(cfg: RunConfig, **changes: Any) -> RunConfig:
    return replace(cfg, session=replace(cfg.session, **changes))
