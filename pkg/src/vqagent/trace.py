"""Line-delimited session traces and offline replay.

A trace holds one ``session`` header record, one record per chain entry
(``{"seq", "role", "payload", "ts", ...}``), ``rejected`` records for model
replies that could not be parsed, and a closing ``result`` record. Replay
feeds the recorded raw replies back through scripted backends and returns
the recorded tool outputs in order, so no model or media access is needed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

from PIL import Image

from .backends.base import BackendSet
from .backends.scripted import ScriptedBackend
from .chain import ChainEntry
from .critic import CriteriaSet, CriticReport, Evidence, NO_VISUALS_NOTE
from .errors import DecodeFailure, ProtocolError, TraceCorrupt, TraceIncomplete
from .media import MediaHandle, encode_image, file_digest, open_media, synthetic_media
from .protocol import (
    CriticMessage,
    critic_to_record,
    dumps,
    message_to_record,
    parse_critic_message,
    record_to_message,
)
from .session import SessionConfig, SessionObserver, SessionResult, Termination, run_session
from .toolkit import Param, SessionContext, ToolDescriptor, ToolRegistry, ToolResult

log = logging.getLogger(__name__)

HEADER = "session"
FOOTER = "result"
REJECTED = "rejected"


def _payload(entry: ChainEntry) -> dict[str, Any]:
    if isinstance(entry.message, CriticMessage):
        return critic_to_record(entry.message)
    return message_to_record(entry.message)


class TraceWriter(SessionObserver):
    """Streams a session to disk as it runs; each record is flushed immediately."""

    def __init__(self, path: str | Path, inner: SessionObserver | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", encoding="utf-8")
        self.inner = inner

    def _write(self, record: dict[str, Any]) -> None:
        self._fh.write(dumps(record) + "\n")
        self._fh.flush()

    def on_start(self, header: dict[str, Any]) -> None:
        self._write({"seq": None, "role": HEADER, "payload": header, "ts": None})
        if self.inner:
            self.inner.on_start(header)

    def on_entry(self, seq: int, entry: ChainEntry) -> None:
        record = {"seq": seq, "role": entry.role, "payload": _payload(entry), "ts": entry.ts}
        if entry.raw is not None:
            record["raw"] = entry.raw
        if entry.seeded:
            record["seeded"] = True
        self._write(record)
        if self.inner:
            self.inner.on_entry(seq, entry)

    def on_rejected(self, seq: int, source: str, raw: str, error: str) -> None:
        self._write({"seq": seq, "role": REJECTED, "payload": {"source": source, "error": error}, "ts": None, "raw": raw})
        if self.inner:
            self.inner.on_rejected(seq, source, raw, error)

    def on_critic(self, seq: int, report: CriticReport) -> None:
        # whether frames were attached decides the text-only note on replay
        self._write({"seq": seq, "role": "evidence", "payload": {"images": len(report.evidence.images), "note": report.evidence.note}, "ts": None})
        if self.inner:
            self.inner.on_critic(seq, report)

    def on_finish(self, result: SessionResult) -> None:
        self._write({"seq": None, "role": FOOTER, "payload": result.summary(), "ts": None})
        self.close()
        if self.inner:
            self.inner.on_finish(result)

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()


@dataclass
class Trace:
    header: dict[str, Any]
    records: list[dict[str, Any]]
    footer: dict[str, Any]
    path: Path | None = None
    criteria: CriteriaSet | None = field(default=None, repr=False)

    def entries(self) -> Iterator[dict[str, Any]]:
        return (r for r in self.records if r["role"] in ("user", "reasoner", "tool", "critic"))

    def reasoner_script(self) -> list[str]:
        """Raw reasoner replies in call order, rejected ones included."""
        out = []
        for r in self.records:
            if r["role"] == "reasoner" and not r.get("seeded"):
                out.append(r.get("raw") or dumps(r["payload"]))
            elif r["role"] == REJECTED and r["payload"].get("source") == "reasoner":
                out.append(r["raw"])
        return out

    def critic_script(self) -> list[str]:
        out = []
        for r in self.records:
            if r["role"] == "critic":
                out.append(r.get("raw") or dumps(r["payload"]))
            elif r["role"] == REJECTED and r["payload"].get("source") == "critic":
                out.append(r["raw"])
        return out

    def tool_outputs(self) -> list[str]:
        return [r["payload"]["Output"] for r in self.records if r["role"] == "tool"]

    def evidence(self) -> list[dict[str, Any]]:
        return [r["payload"] for r in self.records if r["role"] == "evidence"]

    def chain_entries(self) -> list[ChainEntry]:
        out = []
        for r in self.entries():
            role = r["role"]
            if role == "critic":
                msg = parse_critic_message(dumps(r["payload"]), self.criteria or [])
            else:
                msg = record_to_message(r["payload"])
            out.append(ChainEntry(role, msg, r.get("ts") or 0.0, r.get("raw"), bool(r.get("seeded"))))
        return out


def read_trace(path: str | Path) -> Trace:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise TraceCorrupt(f"cannot read trace {path}: {exc}") from exc
    lines = text.split("\n")
    truncated = not text.endswith("\n")
    if lines and lines[-1] == "":
        lines.pop()
    records: list[dict[str, Any]] = []
    for n, line in enumerate(lines, 1):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            if n == len(lines) and truncated:
                raise TraceIncomplete(f"{path}: last record is cut off") from exc
            raise TraceCorrupt(f"{path}:{n}: not a JSON record: {exc}") from exc
        if not isinstance(rec, dict) or "role" not in rec or "payload" not in rec:
            raise TraceCorrupt(f"{path}:{n}: record lacks role/payload")
        records.append(rec)
    if not records or records[0]["role"] != HEADER:
        raise TraceCorrupt(f"{path}: missing session header")
    if records[-1]["role"] != FOOTER:
        raise TraceIncomplete(f"{path}: no result record; the session did not finish")
    body = records[1:-1]
    expected = 0
    for rec in body:
        role = rec["role"]
        if role in ("user", "reasoner", "tool", "critic"):
            if rec.get("seq") != expected:
                raise TraceCorrupt(f"{path}: entry seq {rec.get('seq')} where {expected} was expected")
            expected += 1
        elif role not in (REJECTED, "evidence"):
            raise TraceCorrupt(f"{path}: unknown record role {role!r}")
    header = records[0]["payload"]
    criteria = None
    if header.get("criteria"):
        try:
            criteria = CriteriaSet.from_record(header["criteria"])
        except Exception as exc:
            raise TraceCorrupt(f"{path}: bad criteria in header: {exc}") from exc
    trace = Trace(header, body, records[-1]["payload"], path, criteria)
    if trace.footer.get("chain_length") not in (None, expected):
        raise TraceCorrupt(f"{path}: result says {trace.footer.get('chain_length')} entries, found {expected}")
    return trace


def registry_from_header(header: dict[str, Any]) -> ToolRegistry:
    tools = []
    for t in header.get("tools", []):
        params = tuple(Param(p["name"], p.get("type", "str"), p.get("description", ""), p.get("required", True)) for p in t.get("params", []))
        desc = ToolDescriptor(t["name"], params, t.get("returns", "str"), t.get("description", ""), t.get("critic_description"))
        tools.append((desc, _not_replayable))
    return ToolRegistry(tools)


def _not_replayable(args: dict[str, str], ctx: SessionContext) -> str:
    raise TraceCorrupt("replay dispatched a tool beyond the recorded outputs")


def media_from_header(header: dict[str, Any]) -> MediaHandle:
    """Reopen the original media when it is still available, else a frameless placeholder."""
    m = header["media"]
    source = m.get("source", "")
    if source.startswith("synthetic://"):
        return synthetic_media(m.get("duration_s", 1.0), source)
    p = Path(source)
    if p.is_file() and file_digest(p) == m.get("digest"):
        try:
            return open_media(p)
        except DecodeFailure:
            pass
    return MediaHandle(m.get("kind", "video"), source, None, m.get("duration_s", 1.0), m.get("digest", ""))


class _Recorded:
    """Returns the recorded tool outputs in order, whatever the action."""

    def __init__(self, outputs: list[str]):
        self.outputs = list(outputs)
        self.i = 0

    def __call__(self, action, ctx: SessionContext) -> ToolResult:
        if self.i >= len(self.outputs):
            raise TraceCorrupt("replay needs more tool outputs than the trace recorded")
        out = self.outputs[self.i]
        self.i += 1
        return ToolResult(out)


_PIXEL = encode_image(Image.new("RGB", (1, 1)))


@dataclass
class ReplayRuntime:
    """Scripted stand-ins for everything a recorded session touched."""

    registry: ToolRegistry
    backends: BackendSet
    dispatcher: _Recorded
    evidence_fn: Any
    criteria: CriteriaSet | None
    config: SessionConfig


def replay_runtime(trace: Trace) -> ReplayRuntime:
    evidence = iter(trace.evidence())

    def recorded_evidence(chain) -> Evidence:
        rec = next(evidence, None)
        if rec is None or not rec.get("images"):
            return Evidence([], (rec or {}).get("note", NO_VISUALS_NOTE))
        return Evidence([_PIXEL] * int(rec["images"]), rec.get("note", ""))

    return ReplayRuntime(
        registry=registry_from_header(trace.header),
        backends=BackendSet(
            reasoner=ScriptedBackend(trace.reasoner_script(), name="replay-reasoner"),
            critic=ScriptedBackend(trace.critic_script(), name="replay-critic"),
        ),
        dispatcher=_Recorded(trace.tool_outputs()),
        evidence_fn=recorded_evidence,
        criteria=trace.criteria,
        config=SessionConfig.from_record(trace.header.get("config", {})),
    )


def replay_session(trace_path: str | Path, *, trace: Trace | None = None, out_path: str | Path | None = None) -> SessionResult:
    """Re-run a recorded session against scripted backends built from the trace."""
    trace = trace or read_trace(trace_path)
    rt = replay_runtime(trace)
    try:
        return run_session(
            trace.header["query"],
            media_from_header(trace.header),
            rt.registry,
            rt.backends,
            rt.criteria,
            rt.config,
            trace_path=out_path,
            dispatcher=rt.dispatcher,
            evidence_fn=rt.evidence_fn,
        )
    except ProtocolError as exc:
        raise TraceCorrupt(f"trace replay diverged: {exc}") from exc


def result_from_trace(trace: Trace) -> SessionResult:
    """Rebuild the recorded result without re-running anything."""
    from .chain import ReasoningChain

    f = trace.footer
    return SessionResult(
        final_answer=f.get("final_answer"),
        chain=ReasoningChain(trace.chain_entries()),
        critic_rounds_used=f.get("critic_rounds_used", 0),
        termination=Termination(f["termination"]),
        answers=list(f.get("answers", [])),
    )
