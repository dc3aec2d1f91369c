"""Loading and filling the text prompt templates shipped with the package.

Templates are plain text files. Slots are written ``{{name}}`` and filled by
literal replacement, so braces in the surrounding JSON examples are safe.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import TemplateMissing

PACKAGE_TEMPLATES = Path(__file__).with_name("templates")

SYSTEM_SECTIONS = ("tools", "guidelines", "input-output")
CRITIC_SECTIONS = ("tools", "critic_guidelines", "input-output", "sample_response")

_SLOT_RE = re.compile(r"\{\{([a-z_]+)\}\}")


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    text: str

    @property
    def slots(self) -> set[str]:
        return set(_SLOT_RE.findall(self.text))

    def section(self, tag: str) -> str:
        m = re.search(rf"<{re.escape(tag)}>\n?(.*?)\n?</{re.escape(tag)}>", self.text, re.DOTALL)
        if not m:
            raise TemplateMissing(f"template {self.name!r} has no <{tag}> section")
        return m.group(1)

    def require_sections(self, tags: tuple[str, ...]) -> "PromptTemplate":
        for tag in tags:
            self.section(tag)
        return self

    def render(self, **values: str) -> str:
        missing = self.slots - values.keys()
        if missing:
            raise TemplateMissing(f"template {self.name!r} needs values for {sorted(missing)}")
        return _SLOT_RE.sub(lambda m: values[m.group(1)], self.text)


class TemplateStore:
    """A directory of templates; falls back to the packaged copies for missing files."""

    def __init__(self, directory: str | Path | None = None, fallback: bool = True):
        self.directory = Path(directory) if directory else PACKAGE_TEMPLATES
        self.fallback = fallback

    def _path(self, relative: str) -> Path | None:
        for base in (self.directory, PACKAGE_TEMPLATES if self.fallback else None):
            if base is None:
                continue
            p = base / relative
            if p.is_file():
                return p
        return None

    def text(self, relative: str) -> str:
        p = self._path(relative)
        if p is None:
            raise TemplateMissing(f"template {relative!r} not found under {self.directory}")
        return p.read_text(encoding="utf-8")

    def load(self, name: str) -> PromptTemplate:
        return PromptTemplate(name, self.text(f"{name}.txt"))

    def json(self, name: str) -> Any:
        return json.loads(self.text(name))

    def tool_description(self, tool: str, audience: str = "agent") -> str:
        if audience == "critic" and self._path(f"tools/critic_{tool}.txt"):
            return self.text(f"tools/critic_{tool}.txt")
        return self.text(f"tools/{tool}.txt")


DEFAULT_STORE = TemplateStore()
