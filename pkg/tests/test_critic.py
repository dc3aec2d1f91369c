from __future__ import annotations

import json
from pathlib import Path

import pytest

from support import answer, critic_reply, step
from vqagent.backends.scripted import ScriptedBackend
from vqagent.chain import ReasoningChain
from vqagent.critic import (
    FORMAT_REMINDER,
    NO_VISUALS_NOTE,
    NOT_VISUALLY_CHECKED,
    CriteriaSet,
    Criterion,
    Evidence,
    build_critic_request,
    default_criteria,
    evaluate,
    gather_evidence,
    generate_criteria,
    render_logs,
    select_evidence,
)
from vqagent.errors import BackendFailure, ImageLimitExceeded, MalformedCriteria, MalformedMessage, NoEvidence, Transport
from vqagent.media import Timestamp, synthetic_media
from vqagent.protocol import Query, ToolOutput, parse_agent_message

FIXTURES = Path(__file__).parent / "fixtures"
TASK = {
    "problem_desc": "Evaluate answers produced by an agent for visual question answering.",
    "instruction": "Propose evaluation criteria with descriptions and acceptable values.",
    "task_desc": "Visual question answering on natural images.",
}


def chain_with_vision(stamps, final="done") -> ReasoningChain:
    chain = ReasoningChain()
    chain.append("user", Query("q"))
    for ts in stamps:
        chain.append("reasoner", parse_agent_message(step("query_vision", timestamp=ts, query="what?")))
        chain.append("tool", ToolOutput("something"))
    chain.append("reasoner", parse_agent_message(answer(final)))
    return chain


def test_default_video_criteria():
    crit = default_criteria("video")
    assert crit.names == ["Answer Completeness", "Reasoning Comprehensiveness", "Hallucination Detection"]
    assert [c.visual for c in crit] == [False, False, True]
    assert not crit.graded


def test_default_image_criteria_are_graded():
    crit = default_criteria("image")
    assert crit.graded and all(len(c.acceptable_values) == 5 for c in crit)


def test_generate_from_sample_output():
    backend = ScriptedBackend([(FIXTURES / "criteria_response.json").read_text()])
    crit = generate_criteria(**TASK, human_intent="Concise answers with clear reasoning.", backend=backend)
    clarity = crit[0]
    assert clarity.name == "Clarity of Reasoning"
    assert clarity.acceptable_values["1"] == "Not clear"
    assert clarity.acceptable_values["5"] == "Extremely clear"
    assert crit.provenance["human_intent"] == "Concise answers with clear reasoning."
    prompt = backend.requests[0].text
    assert TASK["problem_desc"] in prompt and TASK["task_desc"] in prompt


def test_generate_rejects_prose():
    backend = ScriptedBackend(["Sure! Good criteria would be clarity and accuracy."])
    with pytest.raises(MalformedCriteria):
        generate_criteria(**TASK, human_intent="x", backend=backend)


def test_generate_with_empty_intent():
    one = {"Criteria": "Accuracy", "Description": "d", "Acceptable Values": {str(i): f"g{i}" for i in range(1, 6)}}
    crit = generate_criteria(**TASK, human_intent="", backend=ScriptedBackend([json.dumps([one])]))
    assert crit.names == ["Accuracy"]


def test_generate_requires_inputs():
    with pytest.raises(ValueError):
        generate_criteria("", "i", "t", "h", ScriptedBackend(["[]"]))


def test_generate_backend_failure():
    class Down(ScriptedBackend):
        def chat(self, request):
            raise Transport("down")

    with pytest.raises(BackendFailure):
        generate_criteria(**TASK, human_intent="", backend=Down())


@pytest.mark.parametrize(
    "values",
    [{"1": "a", "2": "b", "3": "c", "4": "d"}, {"0": "a", "1": "b", "2": "c", "3": "d", "4": "e"}, {"1": "", "2": "b", "3": "c", "4": "d", "5": "e"}],
)
def test_grade_keys_enforced(values):
    with pytest.raises(MalformedCriteria):
        Criterion("x", "d", values)


def test_criteria_names_unique():
    with pytest.raises(MalformedCriteria):
        CriteriaSet((Criterion("a", ""), Criterion("a", "")))
    with pytest.raises(MalformedCriteria):
        CriteriaSet(())


def test_criteria_file_round_trip(tmp_path):
    crit = default_criteria("image")
    assert CriteriaSet.load(crit.save(tmp_path / "c.json")) == crit


def test_select_evidence_three_calls():
    chain = chain_with_vision(["00:00:36", "00:02:13", "00:01:23"])
    assert select_evidence(chain, synthetic_media(180)) == [Timestamp(36), Timestamp(133), Timestamp(83)]


def test_select_evidence_keeps_last_ten():
    stamps = [f"00:00:{10 + 3 * i:02d}" for i in range(12)]
    chain = chain_with_vision(stamps)
    assert select_evidence(chain, synthetic_media(180)) == [Timestamp(10 + 3 * i) for i in range(2, 12)]


def test_select_evidence_none():
    with pytest.raises(NoEvidence):
        select_evidence(chain_with_vision([]), synthetic_media(180))


def test_gather_evidence_grid():
    ev = gather_evidence(chain_with_vision(["00:00:36", "00:02:13", "00:01:23"]), synthetic_media(180), height=36)
    assert len(ev.images) == 10
    assert "Image(s) 1, 2, 3 are for timestamp 00:00:36." in ev.note
    assert "Image(s) 7, 8, 9, 10 are for timestamp 00:01:23." in ev.note


def test_gather_evidence_text_only():
    ev = gather_evidence(chain_with_vision([]), synthetic_media(180))
    assert ev.empty and ev.note == NO_VISUALS_NOTE


def test_yes_report():
    crit = default_criteria("video")
    report = evaluate(chain_with_vision(["00:00:36"]), Evidence([b"img"]), crit, ScriptedBackend([critic_reply("YES")]))
    assert report.accepted and report.verdict == "YES"
    assert len(report.message.feedback) == 3
    assert report.attempts == 1


def test_prompt_contains_every_chain_entry():
    crit = default_criteria("video")
    chain = chain_with_vision(["00:00:36", "00:01:00"])
    backend = ScriptedBackend([critic_reply("NO")])
    evaluate(chain, Evidence([]), crit, backend)
    prompt = backend.requests[0].text
    for entry in chain:
        assert entry.text in prompt
    assert json.loads(render_logs(chain))["logs"][0] == {"Question": "q"}


def test_too_many_images_rejected_before_call():
    backend = ScriptedBackend([critic_reply("YES")])
    with pytest.raises(ImageLimitExceeded):
        evaluate(chain_with_vision(["00:00:36"]), Evidence([b"x"] * 11), default_criteria("video"), backend)
    assert backend.call_count == 0


def test_malformed_then_retry_succeeds():
    backend = ScriptedBackend(["not json at all", critic_reply("YES")])
    report = evaluate(chain_with_vision(["00:00:36"]), Evidence([b"i"]), default_criteria("video"), backend)
    assert report.accepted and report.rejected == ["not json at all"]
    retry = backend.requests[1]
    assert retry.messages[-1].content == FORMAT_REMINDER
    assert retry.messages[-2].content == "not json at all"


def test_malformed_twice_fails():
    backend = ScriptedBackend(["nope", critic_reply("YES", n=2)])
    with pytest.raises(MalformedMessage) as info:
        evaluate(chain_with_vision(["00:00:36"]), Evidence([b"i"]), default_criteria("video"), backend)
    assert backend.call_count == 2
    assert len(info.value.attempts) == 2


def test_text_only_feedback_notes_unchecked_visuals():
    report = evaluate(chain_with_vision([]), Evidence([], NO_VISUALS_NOTE), default_criteria("video"), ScriptedBackend([critic_reply("YES")]))
    assert report.text_only
    assert NOT_VISUALLY_CHECKED in report.message.feedback["Hallucination Detection"]
    assert NOT_VISUALLY_CHECKED not in report.message.feedback["Answer Completeness"]


def test_graded_critic_reply():
    crit = default_criteria("image")
    raw = json.dumps(
        {
            "Observation": "o",
            "Thought": "t",
            "Feedback": {f"Criteria {i}": {"Grade": str(i + 1), "Feedback": f"f{i}"} for i in range(1, 4)},
            "Verdict": "NO",
        }
    )
    report = evaluate(chain_with_vision([]), Evidence([b"i"]), crit, ScriptedBackend([raw]))
    assert report.grades == {crit.names[0]: "2", crit.names[1]: "3", crit.names[2]: "4"}


def test_request_layout():
    crit = default_criteria("video")
    req = build_critic_request(list(chain_with_vision(["00:00:36"])), Evidence([b"a", b"b"], "note"), crit, "TOOLS")
    assert [m.role for m in req.messages] == ["system", "user", "user"]
    assert req.messages[2].content == "note"
    assert len(req.images) == 2
    assert "TOOLS" in req.messages[0].content
