from __future__ import annotations

import json

import pytest

from support import BASIC_REASONER, answer, critic_reply, step, video_criteria, video_setup
from vqagent.errors import TraceCorrupt, TraceIncomplete
from vqagent.session import SessionConfig, Termination, run_session
from vqagent.trace import read_trace, replay_session, result_from_trace

Q = "What exercise follows the leg press?"


def record(tmp_path, reasoner=BASIC_REASONER, critic=(critic_reply("YES"),), config=None, name="t.jsonl"):
    media, registry, backends = video_setup(reasoner, critic)
    path = tmp_path / name
    result = run_session(Q, media, registry, backends, video_criteria(), config or SessionConfig(), trace_path=path)
    return result, path


def lines(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_trace_layout(tmp_path):
    result, path = record(tmp_path)
    recs = lines(path)
    assert recs[0]["role"] == "session" and recs[0]["payload"]["query"] == Q
    assert recs[-1]["role"] == "result" and recs[-1]["payload"] == result.summary()
    entries = [r for r in recs if r["role"] in ("user", "reasoner", "tool", "critic")]
    assert [r["seq"] for r in entries] == list(range(7))
    assert entries[2]["payload"] == {"Output": result.chain[2].message.output}


def test_replay_reproduces_result(tmp_path):
    result, path = record(tmp_path)
    replayed = replay_session(path)
    assert replayed == result
    assert [e.text for e in replayed.chain] == [e.text for e in result.chain]


def test_replay_with_feedback_and_rejections(tmp_path):
    reasoner = ["garbage", *BASIC_REASONER, step("query_vision", timestamp="00:00:45", query="?"), answer("Lunges.")]
    critic = ["not json", critic_reply("NO"), critic_reply("YES")]
    result, path = record(tmp_path, reasoner, critic, SessionConfig(max_critic_rounds=2))
    assert result.termination is Termination.CRITIC_ACCEPTED
    assert sum(r["role"] == "rejected" for r in lines(path)) == 2
    replayed = replay_session(path, out_path=tmp_path / "again.jsonl")
    assert replayed.summary() == result.summary()
    assert [e.text for e in replayed.chain] == [e.text for e in result.chain]
    assert [r["role"] for r in lines(tmp_path / "again.jsonl")] == [r["role"] for r in lines(path)]


def test_result_from_trace(tmp_path):
    result, path = record(tmp_path)
    rebuilt = result_from_trace(read_trace(path))
    assert rebuilt.summary() == result.summary()
    assert [e.text for e in rebuilt.chain] == [e.text for e in result.chain]


def test_truncated_trace(tmp_path):
    _, path = record(tmp_path)
    text = path.read_text()
    path.write_text(text[: len(text) - 20])
    with pytest.raises(TraceIncomplete):
        read_trace(path)


def test_trace_without_footer(tmp_path):
    _, path = record(tmp_path)
    kept = path.read_text().splitlines()[:-1]
    path.write_text("\n".join(kept) + "\n")
    with pytest.raises(TraceIncomplete):
        read_trace(path)


@pytest.mark.parametrize("mutate", ["garbage_line", "drop_entry", "no_header"])
def test_corrupt_trace(tmp_path, mutate):
    _, path = record(tmp_path)
    rows = path.read_text().splitlines()
    if mutate == "garbage_line":
        rows[3] = "{not json"
    elif mutate == "drop_entry":
        del rows[3]
    else:
        del rows[0]
    path.write_text("\n".join(rows) + "\n")
    with pytest.raises(TraceCorrupt):
        read_trace(path)


def test_edited_tool_output_diverges_from_that_entry(tmp_path):
    result, path = record(tmp_path)
    recs = lines(path)
    target = next(r for r in recs if r["role"] == "tool" and r["seq"] == 4)
    target["payload"]["Output"] = "00:01:00"
    path.write_text("".join(json.dumps(r) + "\n" for r in recs))
    replayed = replay_session(path)
    before = [e.text for e in result.chain]
    after = [e.text for e in replayed.chain]
    assert after[:4] == before[:4]
    assert after[4] != before[4]
    assert json.loads(after[4]) == {"Output": "00:01:00"}
