"""Evaluation: LLM judging, multiple-choice scoring, accuracy tables and critic ablations."""

from __future__ import annotations

import enum
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .backends.base import Backend, chat_request
from .errors import BackendError
from .errors import AmbiguousSelection, ManifestError, MalformedVerdict
from .prompts import DEFAULT_STORE, TemplateStore
from .session import UNABLE_PHRASE, SessionResult

log = logging.getLogger(__name__)

CATEGORIES = (
    "Temporal Understanding",
    "Spatial Understanding",
    "Event and Action Recognition",
    "Dialogue and Transcript-Based",
    "Abstract and Conceptual",
    "Specific Detail Based",
)


def _fold(label: str) -> str:
    return re.sub(r"[^a-z]+", " ", label.lower().replace("&", " and ")).strip()


_CATEGORY_LOOKUP = {_fold(c): c for c in CATEGORIES}


def normalize_category(label: str | None) -> str | None:
    if label is None or not str(label).strip():
        return None
    return _CATEGORY_LOOKUP.get(_fold(str(label)), str(label).strip())


class JudgeVerdict(str, enum.Enum):
    CORRECT = "Correct"
    INCORRECT = "Incorrect"
    PARTIALLY_CORRECT = "Partially Correct"

    def __str__(self) -> str:
        return self.value


DEFAULT_WEIGHTS: dict[JudgeVerdict, float] = {
    JudgeVerdict.CORRECT: 1.0,
    JudgeVerdict.PARTIALLY_CORRECT: 0.5,
    JudgeVerdict.INCORRECT: 0.0,
}


@dataclass(frozen=True)
class QAItem:
    id: str
    question: str
    ground_truth: str
    options: tuple[tuple[str, str], ...] = ()  # (key, text) in display order
    category: str | None = None
    media: str = ""

    def __post_init__(self):
        object.__setattr__(self, "options", tuple((str(k), str(v)) for k, v in self.options))
        if self.options:
            if len(self.options) < 2:
                raise ManifestError(f"item {self.id}: multiple-choice items need at least 2 options")
            keys = [k for k, _ in self.options]
            if len(set(keys)) != len(keys):
                raise ManifestError(f"item {self.id}: duplicate option keys")
            if self.ground_truth not in keys:
                raise ManifestError(f"item {self.id}: ground truth {self.ground_truth!r} is not an option key")

    @property
    def multiple_choice(self) -> bool:
        return bool(self.options)

    @property
    def option_map(self) -> dict[str, str]:
        return dict(self.options)

    def prompt(self) -> str:
        """The question as posed to the agent (options listed for multiple choice)."""
        if not self.options:
            return self.question
        lines = [self.question, "Options:"] + [f"Option {k}: {v}" for k, v in self.options]
        return "\n".join(lines)


def _options(raw: Any, item_id: str) -> tuple[tuple[str, str], ...]:
    if raw is None:
        return ()
    if isinstance(raw, Mapping):
        return tuple((str(k), str(v)) for k, v in raw.items())
    if isinstance(raw, list):
        return tuple((str(i), str(v)) for i, v in enumerate(raw, 1))
    raise ManifestError(f"item {item_id}: options must be a list or an object")


def load_manifest(path: str | Path) -> list[QAItem]:
    """One JSON record per line: id, media, question, answer (or ground_truth), options, category.

    Media paths are resolved relative to the manifest's directory.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    items = []
    seen = set()
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{n}: {exc}") from exc
        try:
            item_id = str(rec.get("id", n))
            truth = rec.get("answer", rec.get("ground_truth"))
            if truth is None or "question" not in rec:
                raise ManifestError(f"item {item_id}: question and answer are required")
            media = str(rec.get("media", ""))
            if media and "://" not in media and not Path(media).is_absolute():
                media = str(path.parent / media)
            item = QAItem(item_id, rec["question"], str(truth), _options(rec.get("options"), item_id), normalize_category(rec.get("category")), media)
        except ManifestError as exc:
            raise ManifestError(f"{path}:{n}: {exc}") from exc
        if item.id in seen:
            raise ManifestError(f"{path}:{n}: duplicate item id {item.id}")
        seen.add(item.id)
        items.append(item)
    return items


# ---------------------------------------------------------------------------
# Judging and multiple-choice scoring
# ---------------------------------------------------------------------------

_VERDICT_RE = re.compile(r"^System Answer: ?\[?(Correct|Incorrect|Partially Correct)\]?$")

JUDGE_REMINDER = (
    "Respond with exactly one line of the form\nSystem Answer: [Verdict]\n"
    'where [Verdict] is one of "Correct", "Incorrect", or "Partially Correct". No other text.'
)


def parse_verdict(text: str) -> JudgeVerdict:
    m = _VERDICT_RE.match(text.strip())
    if not m:
        raise MalformedVerdict(f"judge reply is not 'System Answer: [Verdict]': {text!r}")
    return JudgeVerdict(m.group(1))


def render_judge_prompt(question: str, ground_truth: str, system_answer: str, store: TemplateStore = DEFAULT_STORE) -> str:
    return store.load("judge").render(question=question, ground_truth=ground_truth, system_answer=system_answer)


def judge(item: QAItem, system_answer: str | None, backend: Backend, store: TemplateStore = DEFAULT_STORE) -> JudgeVerdict:
    answer = UNABLE_PHRASE if system_answer is None else system_answer
    prompt = render_judge_prompt(item.question, item.ground_truth, answer, store)
    turns: list[tuple[str, str]] = [("user", prompt)]
    for attempt in (1, 2):
        try:
            reply = backend.chat(chat_request(None, *turns)).text
        except BackendError as exc:
            raise MalformedVerdict(f"judge backend failed: {exc}") from exc
        try:
            return parse_verdict(reply)
        except MalformedVerdict:
            if attempt == 2:
                raise
            turns += [("assistant", reply), ("user", JUDGE_REMINDER)]
    raise AssertionError("unreachable")


def _norm(text: str) -> str:
    return " ".join(re.sub(r"[^\w\s]", " ", text.lower()).split())


def selected_options(item: QAItem, system_answer: str) -> set[str]:
    """Option keys the answer points at: explicit key mentions first, then quoted option text."""
    keys = [k for k, _ in item.options]
    folded = {k.lower(): k for k in keys}
    answer = system_answer.strip()
    bare = answer.strip(" .()[]\"'").lower()
    if bare in folded:
        return {folded[bare]}
    mentioned = {folded[m.lower()] for m in re.findall(r"\boption\s*[:#]?\s*\(?([A-Za-z0-9]+)\)?", answer, re.IGNORECASE) if m.lower() in folded}
    if mentioned:
        return mentioned
    text = _norm(answer)
    hits = [(k, _norm(v)) for k, v in item.options if _norm(v) and _norm(v) in text]
    # an option whose text is part of a longer matched option does not count on its own
    return {k for k, v in hits if not any(v != w and v in w for _, w in hits)}


def score_mc(item: QAItem, system_answer: str | None) -> bool:
    if not item.multiple_choice:
        raise ValueError(f"item {item.id} is not multiple choice")
    if system_answer is None:
        return False
    chosen = selected_options(item, system_answer)
    if len(chosen) > 1:
        raise AmbiguousSelection(f"answer selects options {sorted(chosen)}")
    return chosen == {item.ground_truth}


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scored:
    item_id: str
    category: str | None
    verdict: JudgeVerdict


def _category_order(cat: str) -> tuple[int, str]:
    return (CATEGORIES.index(cat), "") if cat in CATEGORIES else (len(CATEGORIES), cat)


@dataclass
class CategoryScore:
    n: int
    accuracy: float


@dataclass
class ConfusionMatrix:
    """Rows: correct without the critic? Columns: correct with it. Cells in percent."""

    counts: dict[str, int]
    percent: dict[str, float]

    CELLS = ("both_correct", "only_without", "only_with", "both_wrong")

    @property
    def n(self) -> int:
        return sum(self.counts.values())

    @property
    def agreement(self) -> float:
        return round(self.percent["both_correct"] + self.percent["both_wrong"], 1)

    @property
    def total(self) -> float:
        return round(sum(self.percent.values()), 1)

    def grid(self) -> list[list[float]]:
        p = self.percent
        return [[p["both_correct"], p["only_without"]], [p["only_with"], p["both_wrong"]]]

    def to_record(self) -> dict[str, Any]:
        return {"counts": dict(self.counts), "percent": dict(self.percent), "agreement": self.agreement}

    def render(self) -> str:
        p = self.percent
        return "\n".join(
            [
                "                       with critic: correct   wrong",
                f"without critic: correct      {p['both_correct']:6.1f}%  {p['only_without']:6.1f}%",
                f"without critic: wrong        {p['only_with']:6.1f}%  {p['both_wrong']:6.1f}%",
            ]
        )


def _largest_remainder(counts: Sequence[int], total: int, scale: int = 1000) -> list[float]:
    """Percentages at one decimal that sum to exactly 100.0."""
    exact = [c * scale / total for c in counts]
    floors = [int(x) for x in exact]
    short = scale - sum(floors)
    order = sorted(range(len(counts)), key=lambda i: (-(exact[i] - floors[i]), i))
    for i in order[:short]:
        floors[i] += 1
    return [f / 10 for f in floors]


def critic_ablation(paired: Iterable[tuple[bool, bool]]) -> ConfusionMatrix:
    counts = dict.fromkeys(ConfusionMatrix.CELLS, 0)
    for without, with_ in paired:
        cell = {(True, True): "both_correct", (True, False): "only_without", (False, True): "only_with", (False, False): "both_wrong"}
        counts[cell[(bool(without), bool(with_))]] += 1
    n = sum(counts.values())
    if n == 0:
        raise ValueError("critic_ablation needs at least one paired item")
    pct = _largest_remainder([counts[c] for c in ConfusionMatrix.CELLS], n)
    return ConfusionMatrix(counts, dict(zip(ConfusionMatrix.CELLS, pct)))


@dataclass
class EvalReport:
    overall: float
    categories: dict[str, CategoryScore]
    items: list[Any]
    weights: dict[str, float]
    confusion: ConfusionMatrix | None = None
    overall_without_critic: float | None = None

    @property
    def n(self) -> int:
        return len(self.items)

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {
            "overall": self.overall,
            "n": self.n,
            "weights": dict(self.weights),
            "categories": {k: {"n": v.n, "accuracy": v.accuracy} for k, v in self.categories.items()},
            "items": [i.to_record() if hasattr(i, "to_record") else {"id": i.item_id, "category": i.category, "verdict": str(i.verdict)} for i in self.items],
        }
        if self.overall_without_critic is not None:
            rec["overall_without_critic"] = self.overall_without_critic
        if self.confusion is not None:
            rec["confusion"] = self.confusion.to_record()
        return rec

    def render(self) -> str:
        weights = ", ".join(f"{k}={v:g}" for k, v in self.weights.items())
        lines = [f"Items: {self.n}    Overall accuracy: {100 * self.overall:.1f}%    (weights: {weights})", ""]
        if self.categories:
            width = max(len(c) for c in self.categories)
            lines.append(f"{'Category':<{width}}  {'#Q':>4}  Accuracy")
            for cat, score in self.categories.items():
                lines.append(f"{cat:<{width}}  {score.n:>4}  {100 * score.accuracy:7.1f}%")
        if self.overall_without_critic is not None:
            lines += ["", f"Without critic: {100 * self.overall_without_critic:.1f}%    With critic: {100 * self.overall:.1f}%"]
        if self.confusion is not None:
            lines += ["", self.confusion.render()]
        return "\n".join(lines)


def _weight(weights: Mapping[Any, float], verdict: JudgeVerdict) -> float:
    if verdict in weights:
        return float(weights[verdict])
    return float(weights[verdict.value])


def aggregate(verdicts: Sequence[Scored | tuple[str | None, JudgeVerdict]], weights: Mapping[Any, float] | None = None) -> EvalReport:
    """Weighted accuracy overall and per category. Empty categories are left out."""
    weights = weights or DEFAULT_WEIGHTS
    scored = [v if isinstance(v, Scored) else Scored(str(i), v[0], JudgeVerdict(v[1])) for i, v in enumerate(verdicts)]
    total = sum(_weight(weights, s.verdict) for s in scored)
    overall = total / len(scored) if scored else 0.0
    by_cat: dict[str, list[float]] = {}
    for s in scored:
        if s.category is not None:
            by_cat.setdefault(s.category, []).append(_weight(weights, s.verdict))
    categories = {c: CategoryScore(len(by_cat[c]), sum(by_cat[c]) / len(by_cat[c])) for c in sorted(by_cat, key=_category_order)}
    weight_map = {str(JudgeVerdict(k) if not isinstance(k, JudgeVerdict) else k): float(v) for k, v in weights.items()}
    return EvalReport(overall, categories, scored, weight_map)


# ---------------------------------------------------------------------------
# Running a dataset
# ---------------------------------------------------------------------------


@dataclass
class ItemOutcome:
    item: QAItem
    answer: str | None
    verdict: JudgeVerdict
    termination: str = ""
    answer_without_critic: str | None = None
    verdict_without_critic: JudgeVerdict | None = None
    note: str = ""

    @property
    def item_id(self) -> str:
        return self.item.id

    @property
    def category(self) -> str | None:
        return self.item.category

    def to_record(self) -> dict[str, Any]:
        rec = {
            "id": self.item.id,
            "category": self.item.category,
            "answer": self.answer,
            "verdict": self.verdict.value,
            "termination": self.termination,
        }
        if self.verdict_without_critic is not None:
            rec["answer_without_critic"] = self.answer_without_critic
            rec["verdict_without_critic"] = self.verdict_without_critic.value
        if self.note:
            rec["note"] = self.note
        return rec


SessionFn = Callable[[QAItem], SessionResult]


def grade(item: QAItem, answer: str | None, judge_backend: Backend | None, store: TemplateStore = DEFAULT_STORE) -> tuple[JudgeVerdict, str]:
    if item.multiple_choice:
        try:
            ok = score_mc(item, answer)
        except AmbiguousSelection as exc:
            return JudgeVerdict.INCORRECT, str(exc)
        return (JudgeVerdict.CORRECT if ok else JudgeVerdict.INCORRECT), ""
    if judge_backend is None:
        raise ValueError("open-ended items need a judge backend")
    return judge(item, answer, judge_backend, store), ""


def evaluate_item(item: QAItem, run: SessionFn, judge_backend: Backend | None, ablate: bool, store: TemplateStore = DEFAULT_STORE) -> ItemOutcome:
    result = run(item)
    verdict, note = grade(item, result.final_answer, judge_backend, store)
    outcome = ItemOutcome(item, result.final_answer, verdict, result.termination.value, note=note)
    if ablate:
        first = result.first_answer
        outcome.answer_without_critic = first
        if first == result.final_answer:
            outcome.verdict_without_critic = verdict
        else:
            outcome.verdict_without_critic, _ = grade(item, first, judge_backend, store)
    return outcome


def run_eval(
    items: Sequence[QAItem],
    run: SessionFn,
    judge_backend: Backend | None,
    *,
    weights: Mapping[Any, float] | None = None,
    ablate: bool = False,
    parallelism: int = 4,
    store: TemplateStore = DEFAULT_STORE,
) -> EvalReport:
    """Run every item through ``run`` (concurrently) and score it.

    With ``ablate`` the answer given before any critic feedback in the same
    session stands in for the without-critic condition, so both conditions
    share one set of tool outputs.
    """
    def one(item: QAItem) -> ItemOutcome:
        return evaluate_item(item, run, judge_backend, ablate, store)

    if parallelism <= 1:
        outcomes = [one(i) for i in items]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(one, items))
    report = aggregate([Scored(o.item.id, o.item.category, o.verdict) for o in outcomes], weights)
    report.items = outcomes
    if ablate and outcomes:
        w = weights or DEFAULT_WEIGHTS
        correct = lambda v: v == JudgeVerdict.CORRECT  # noqa: E731
        report.confusion = critic_ablation((correct(o.verdict_without_critic), correct(o.verdict)) for o in outcomes)
        report.overall_without_critic = sum(_weight(w, o.verdict_without_critic) for o in outcomes) / len(outcomes)
    return report
