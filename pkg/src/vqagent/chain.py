"""The append-only reasoning chain shared by the session loop and the critic."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterator, Union

from .protocol import (
    AgentMessage,
    CriticMessage,
    Step,
    ToolOutput,
    serialize_agent_message,
    serialize_critic_message,
)

ROLES = ("user", "reasoner", "tool", "critic")

ChainMessage = Union[AgentMessage, CriticMessage]


@dataclass(frozen=True)
class ChainEntry:
    role: str
    message: ChainMessage
    ts: float = field(default=0.0, compare=False)
    raw: str | None = None
    seeded: bool = False  # injected by the framework rather than produced by the reasoner

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown chain role {self.role!r}")

    @property
    def text(self) -> str:
        if isinstance(self.message, CriticMessage):
            return serialize_critic_message(self.message)
        return serialize_agent_message(self.message)


class ReasoningChain:
    """Ordered log of one session. Entries are only ever appended."""

    def __init__(self, entries: tuple[ChainEntry, ...] | list[ChainEntry] = (), clock=time.time):
        self._entries: list[ChainEntry] = []
        self._clock = clock
        for e in entries:
            self._check(e)
            self._entries.append(e)

    def _check(self, entry: ChainEntry) -> None:
        if entry.role == "tool":
            prev = self._entries[-1] if self._entries else None
            if prev is None or prev.role != "reasoner" or not isinstance(prev.message, Step):
                raise ValueError("a tool entry must follow the reasoner step it answers")
            if not isinstance(entry.message, ToolOutput):
                raise ValueError("tool entries carry ToolOutput messages")

    def append(self, role: str, message: ChainMessage, raw: str | None = None, seeded: bool = False) -> ChainEntry:
        entry = ChainEntry(role, message, self._clock(), raw, seeded)
        self._check(entry)
        self._entries.append(entry)
        return entry

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[ChainEntry]:
        return iter(self._entries)

    def __getitem__(self, i):
        return self._entries[i]

    def __eq__(self, other: object) -> bool:
        if isinstance(other, ReasoningChain):
            return self._entries == other._entries
        return NotImplemented

    def __repr__(self) -> str:
        return f"ReasoningChain({len(self)} entries)"

    @property
    def entries(self) -> tuple[ChainEntry, ...]:
        return tuple(self._entries)

    def messages(self, role: str | None = None) -> list[ChainMessage]:
        return [e.message for e in self._entries if role is None or e.role == role]

    def steps(self) -> list[Step]:
        return [e.message for e in self._entries if isinstance(e.message, Step)]
