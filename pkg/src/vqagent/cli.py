"""``vqagent`` command line: ask, index, criteria, eval, replay.

Exit codes: 0 when the critic accepted the answer (or was disabled), 2 when
an iteration or critic budget ran out, 1 on any failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import __version__
from .config import (
    ConfigError,
    RunConfig,
    build_backends,
    build_registry,
    is_trace,
    load_config,
    load_criteria,
    load_media,
    prepare_video,
    with_session,
)
from .critic import GENERATION_INPUTS, CriteriaSet, generate_criteria
from .errors import VQAgentError
from .evalharness import QAItem, load_manifest, run_eval
from .media import MediaHandle
from .session import SessionResult, Termination, run_session
from .trace import read_trace, replay_runtime, replay_session

log = logging.getLogger("vqagent")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_BUDGET = 2

EXIT_CODES = {
    Termination.CRITIC_ACCEPTED: EXIT_OK,
    Termination.CRITIC_DISABLED: EXIT_OK,
    Termination.CRITIC_BUDGET_EXHAUSTED: EXIT_BUDGET,
    Termination.ITERATION_BUDGET_EXHAUSTED: EXIT_BUDGET,
    Termination.FAILURE: EXIT_FAILURE,
}


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--scripted", metavar="FILE", help="run offline against a script file or a recorded trace")
    p.add_argument("--critic", action=argparse.BooleanOptionalAction, default=None, help="enable or disable the critic")
    p.add_argument("--critic-rounds", type=int, metavar="N", help="maximum critic rounds per question")
    p.add_argument("--max-iterations", type=int, metavar="N", help="reasoner turns per answer attempt")
    p.add_argument("--dump-grid", metavar="DIR", help="write the critic's composite images to DIR")
    p.add_argument("--judge-backend", metavar="ROLE", help="backend role used as the judge (default: judge)")
    p.add_argument("--ablate-critic", action="store_true", help="also score the answer given before critic feedback")
    p.add_argument("--no-cache", action="store_true", default=None, help="ignore and do not write cached transcripts/indexes")
    p.add_argument("--verbose", "-v", action="store_true", help="print the effective config and log progress")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="vqagent", description="Multi-modal question answering agent with a vision critic.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    ask = sub.add_parser("ask", parents=[common], help="answer a question about an image or video")
    ask.add_argument("media")
    ask.add_argument("question")
    ask.add_argument("--trace", metavar="FILE", help="trace output path")

    index = sub.add_parser("index", parents=[common], help="transcribe and index a video ahead of time")
    index.add_argument("media")

    crit = sub.add_parser("criteria", parents=[common], help="generate critic criteria for a task")
    crit.add_argument("task", nargs="?", help="YAML/JSON file with the four generation inputs")
    crit.add_argument("--out", metavar="FILE", help="criteria file to write")

    ev = sub.add_parser("eval", parents=[common], help="evaluate a dataset manifest")
    ev.add_argument("manifest")
    ev.add_argument("--out", metavar="DIR", help="report directory")
    ev.add_argument("--parallel", type=int, metavar="N", help="items evaluated concurrently")

    rep = sub.add_parser("replay", parents=[common], help="re-run a recorded trace offline")
    rep.add_argument("trace")
    rep.add_argument("--out", metavar="FILE", help="write the replayed trace here")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, Any] = {
        "scripted": args.scripted,
        "critic_enabled": args.critic,
        "max_critic_rounds": args.critic_rounds,
        "max_iterations": args.max_iterations,
        "dump_grid": args.dump_grid,
        "judge_backend": args.judge_backend,
        "no_cache": args.no_cache,
    }
    if getattr(args, "parallel", None):
        overrides["parallelism"] = args.parallel
    cfg = load_config(args.config, overrides)
    if args.verbose:
        print(json.dumps(cfg.redacted(), indent=2, sort_keys=True), file=sys.stderr)
    return cfg


def _default_trace(cfg: RunConfig, media: MediaHandle, question: str) -> Path:
    q = hashlib.sha256(question.encode()).hexdigest()[:8]
    return Path(cfg.output_dir) / "traces" / f"{media.digest[:12]}-{q}.jsonl"


def ask_session(cfg: RunConfig, media: MediaHandle, question: str, trace_path: str | Path | None) -> SessionResult:
    if cfg.scripted and is_trace(cfg.scripted):
        # replay the recorded replies and tool outputs against this question and media
        rt = replay_runtime(read_trace(cfg.scripted))
        return run_session(
            question,
            media,
            rt.registry,
            rt.backends,
            rt.criteria,
            cfg.session,
            store=cfg.store,
            trace_path=trace_path,
            dispatcher=rt.dispatcher,
            evidence_fn=rt.evidence_fn,
            grid_dir=cfg.dump_grid,
        )
    backends = build_backends(cfg)
    registry = build_registry(media, backends, cfg)
    criteria = load_criteria(cfg, media.kind) if cfg.session.critic_active else None
    return run_session(
        question,
        media,
        registry,
        backends,
        criteria,
        cfg.session,
        store=cfg.store,
        trace_path=trace_path,
        grid_dir=cfg.dump_grid,
    )


def _print_result(result: SessionResult) -> None:
    print(result.final_answer if result.final_answer is not None else "Unanswerable")
    print(f"termination: {result.termination.value} (critic rounds: {result.critic_rounds_used})")


def cmd_ask(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    media = load_media(args.media)
    trace_path = Path(args.trace) if args.trace else _default_trace(cfg, media, args.question)
    result = ask_session(cfg, media, args.question, trace_path)
    _print_result(result)
    print(f"trace: {trace_path}")
    return EXIT_CODES[result.termination]


def cmd_index(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    media = load_media(args.media)
    if media.kind != "video":
        raise ConfigError("only videos are indexed; images need no preparation")
    deps = prepare_video(media, build_backends(cfg), cfg)
    phrases = len(deps.phrase_index) if deps.phrase_index is not None else 0
    print(f"transcript phrases: {len(deps.transcript)}")
    print(f"phrase index entries: {phrases}")
    print(f"frame index entries: {len(deps.frame_index)}")
    print(f"cache: {Path(cfg.cache_dir) / media.digest[:16]}")
    return EXIT_OK


def cmd_criteria(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    inputs = dict(cfg.store.json("criteria_task.json"))
    if args.task:
        try:
            loaded = yaml.safe_load(Path(args.task).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read task file {args.task}: {exc}") from exc
        inputs.update({k: str(v) for k, v in loaded.items() if k in GENERATION_INPUTS})
    backends = build_backends(cfg)
    backend = backends.capabilities.get("criteria") or backends.reasoner
    criteria = generate_criteria(*(inputs.get(k, "") for k in GENERATION_INPUTS), backend, store=cfg.store)
    out = Path(args.out or cfg.criteria_path or "criteria.json")
    criteria.save(out)
    print(f"criteria: {', '.join(criteria.names)}")
    print(f"written: {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    if args.ablate_critic:
        cfg = with_session(cfg, critic_enabled=True, max_critic_rounds=max(1, cfg.session.max_critic_rounds))
    items = load_manifest(args.manifest)
    out = Path(args.out or Path(cfg.output_dir) / "eval")
    backends = build_backends(cfg)
    judge_backend = backends.all().get(cfg.judge_backend)
    if judge_backend is None and any(not i.multiple_choice for i in items):
        raise ConfigError(f"no judge backend {cfg.judge_backend!r} configured")
    criteria: dict[str, CriteriaSet] = {}

    def run(item: QAItem) -> SessionResult:
        media = load_media(item.media)
        registry = build_registry(media, backends, cfg)
        crit = None
        if cfg.session.critic_active:
            if media.kind not in criteria:
                criteria[media.kind] = load_criteria(cfg, media.kind)
            crit = criteria[media.kind]
        return run_session(
            item.prompt(),
            media,
            registry,
            backends,
            crit,
            cfg.session,
            store=cfg.store,
            trace_path=out / "traces" / f"{item.id}.jsonl",
        )

    report = run_eval(
        items,
        run,
        judge_backend,
        weights=cfg.weight_map(),
        ablate=args.ablate_critic,
        parallelism=cfg.parallelism,
        store=cfg.store,
    )
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_record(), indent=2) + "\n", encoding="utf-8")
    (out / "report.txt").write_text(report.render() + "\n", encoding="utf-8")
    print(report.render())
    print(f"report: {out / 'report.json'}")
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    config_from_args(args)
    trace = read_trace(args.trace)
    result = replay_session(args.trace, trace=trace, out_path=args.out)
    _print_result(result)
    if result.summary() != trace.footer:
        print("replay differs from the recorded result", file=sys.stderr)
        return EXIT_FAILURE
    print("replay matches the recorded result")
    return EXIT_CODES[result.termination]


COMMANDS = {"ask": cmd_ask, "index": cmd_index, "criteria": cmd_criteria, "eval": cmd_eval, "replay": cmd_replay}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (VQAgentError, ValueError, OSError) as exc:
        print(f"vqagent {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
