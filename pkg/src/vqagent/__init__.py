"""A multi-modal question answering agent: planner/reasoner loop, tools, vision critic and evaluation."""

from __future__ import annotations

__version__ = "0.1.0"

from .chain import ChainEntry, ReasoningChain
from .critic import CriteriaSet, Criterion, CriticReport, default_criteria, evaluate, generate_criteria, select_evidence
from .framegrid import PhotoGrid, allocate, compose
from .media import MediaHandle, Timestamp, Transcript, TranscriptPhrase, format_timestamp, open_media, parse_timestamp, sample_clip
from .protocol import (
    Action,
    Answer,
    CriticFeedback,
    CriticMessage,
    Query,
    Step,
    ToolOutput,
    parse_agent_message,
    parse_critic_message,
    serialize_agent_message,
)
from .session import SessionConfig, SessionResult, Termination, build_system_prompt, run_session
from .toolkit import ToolDescriptor, ToolRegistry, ToolResult, dispatch
from .trace import replay_session

__all__ = [
    "Action",
    "Answer",
    "ChainEntry",
    "CriteriaSet",
    "Criterion",
    "CriticFeedback",
    "CriticMessage",
    "CriticReport",
    "MediaHandle",
    "PhotoGrid",
    "Query",
    "ReasoningChain",
    "SessionConfig",
    "SessionResult",
    "Step",
    "Termination",
    "Timestamp",
    "ToolDescriptor",
    "ToolOutput",
    "ToolRegistry",
    "ToolResult",
    "Transcript",
    "TranscriptPhrase",
    "allocate",
    "build_system_prompt",
    "compose",
    "default_criteria",
    "dispatch",
    "evaluate",
    "format_timestamp",
    "generate_criteria",
    "open_media",
    "parse_agent_message",
    "parse_critic_message",
    "parse_timestamp",
    "replay_session",
    "run_session",
    "sample_clip",
    "select_evidence",
    "serialize_agent_message",
]
