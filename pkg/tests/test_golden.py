"""Assembled prompts against stored golden files and against the published listings."""

from __future__ import annotations

import re
from pathlib import Path

import pytest

from support import video_setup
from vqagent.critic import default_criteria, render_critic_prompt
from vqagent.errors import MalformedVerdict
from vqagent.evalharness import parse_verdict, render_judge_prompt
from vqagent.prompts import DEFAULT_STORE, PromptTemplate
from vqagent.session import build_system_prompt, system_template

ROOT = Path(__file__).resolve().parents[1]
GOLDEN = Path(__file__).parent / "golden"
LISTINGS = re.findall(r"\\begin\{lstlisting\}\n(.*?)\\end\{lstlisting\}", (ROOT / "paper.md").read_text(), re.DOTALL)

# vendor-specific names in the published prompts and their neutral replacements
RENAMES = {
    "query_GPT4_Vision": "query_vision",
    "query_frames_Azure_Computer_Vision": "query_frames",
    "GPT4 Vision can only": "the vision model can only",
}


def listing(first_line: str, nth: int = 0) -> str:
    """The nth published listing starting with ``first_line`` (agent prompts come before critic ones)."""
    hits = [b for b in LISTINGS if b.lstrip("\n").startswith(first_line)]
    assert hits, first_line
    return hits[nth]


def norm(text: str) -> str:
    for old, new in RENAMES.items():
        text = text.replace(old, new)
    return "\n".join(line.rstrip() for line in text.strip("\n").split("\n"))


@pytest.fixture(scope="module")
def prompts():
    _, registry, _ = video_setup([])
    return {
        "system": build_system_prompt(registry, system_template("video")),
        "critic": render_critic_prompt(registry.describe_all("critic"), default_criteria("video")),
        "judge": render_judge_prompt("QUESTION", "TRUTH", "ANSWER"),
        "registry": registry,
    }


@pytest.mark.parametrize("name,golden", [("system", "video_system_prompt.txt"), ("critic", "video_critic_prompt.txt"), ("judge", "judge_prompt.txt")])
def test_byte_equal_to_golden(prompts, name, golden):
    assert prompts[name].encode() == (GOLDEN / golden).read_bytes()


@pytest.mark.parametrize(
    "tag,first_line",
    [("guidelines", "- For any question"), ("input-output", "- All communications")],
)
def test_system_sections_match_listing(tag, first_line):
    golden = PromptTemplate("golden", (GOLDEN / "video_system_prompt.txt").read_text())
    assert norm(golden.section(tag)) == norm(listing(first_line))


@pytest.mark.parametrize(
    "tag,first_line",
    [
        ("critic_guidelines", "Analyse whether the user query"),
        ("input-output", "All communications"),
        ("sample_response", '{\n"Observation": "This is a placeholder'),
    ],
)
def test_critic_sections_match_listing(tag, first_line):
    golden = PromptTemplate("golden", (GOLDEN / "video_critic_prompt.txt").read_text())
    assert norm(golden.section(tag)) == norm(listing(first_line))


def test_judge_matches_listing_outside_slots():
    golden = (GOLDEN / "judge_prompt.txt").read_text()
    fixed, filled = golden.split("\n\nQuestion: QUESTION\n")
    assert norm(fixed) == norm(listing("You are an evaluator"))
    assert filled == "Ground Truth Answer: TRUTH\nSystem Answer: ANSWER\n"


def test_judge_differs_only_in_slots():
    a = render_judge_prompt("Q1", "G1", "S1")
    b = render_judge_prompt("Another question?", "00:01:02", "Around 00:01:00")
    prefix = DEFAULT_STORE.load("judge").text.split("{{question}}")[0]
    assert a.startswith(prefix) and b.startswith(prefix)
    assert a[len(prefix):] == "Q1\nGround Truth Answer: G1\nSystem Answer: S1\n"


def test_tools_listed_in_published_order(prompts):
    published = re.findall(r"^Tool: (\w+)\(", norm(listing("1)\nTool: get_transcript")), re.MULTILINE)
    ours = re.findall(r"^Tool: (\w+)\(", PromptTemplate("s", prompts["system"]).section("tools"), re.MULTILINE)
    critic_published = re.findall(r"^Tool: (\w+)\(", norm(listing("1)\nTool: get_transcript", 1)), re.MULTILINE)
    critic_ours = re.findall(r"^Tool: (\w+)\(", PromptTemplate("c", prompts["critic"]).section("tools"), re.MULTILINE)
    assert critic_ours == critic_published == published
    assert ours == published == ["get_transcript", "query_transcript", "query_frames", "query_vision"]
    assert "1)\nTool: get_transcript() -> str:\nDescription: This tool returns the full transcript" in prompts["system"]
    assert "Tool: query_vision(timestamp: str, query: str) -> str:" in prompts["system"]


def test_clean_json_sentence(prompts):
    sentence = "All communications would be using clean JSON format without any additional characters or formatting."
    assert sentence in prompts["system"] and sentence in prompts["critic"]


def test_critic_uses_critic_tool_descriptions(prompts):
    assert "allows the reasoning agent to issue a search query over the video transcript" in prompts["critic"]
    assert "allows the reasoning agent" not in prompts["system"]


@pytest.mark.parametrize("good", ["System Answer: Correct", "System Answer: Incorrect", "System Answer: Partially Correct", "System Answer: [Correct]"])
def test_judge_parser_accepts_the_line(good):
    parse_verdict(good)


@pytest.mark.parametrize("bad", ["Answer: Correct", "System Answer: Correct\nSystem Answer: Correct", "The System Answer: Correct", "System Answer: Right"])
def test_judge_parser_rejects_everything_else(bad):
    with pytest.raises(MalformedVerdict):
        parse_verdict(bad)
