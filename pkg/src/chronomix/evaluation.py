"""Multiple-choice log-likelihood evaluation over tagged benchmark files.

Each item has four options tagged correct/past/future/irrelevant. An option
is scored by rendering "Q: {question}\\nA: {answer}" and reading the log
probability of the answer's final token (or the whole-answer sum in `sum`
mode); the argmax option wins, ties break to the lowest index. Timestamps go
to time-aware predictors as a parameter; everyone else gets the year spelled
out in the prompt text.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .corpus import ByteTokenizer
from .errors import (
    ContextOverflowError,
    EmptyBenchmarkError,
    EmptyOptionError,
    FileFormatError,
    GenValidationError,
    InvalidTagError,
    MultipleCorrectError,
    WrongOptionCountError,
)

TAGS = ("correct", "past", "future", "irrelevant")
N_OPTIONS = 4

PROMPT_TEMPLATE_VERSION = "qa-v1"
YEAR_PREFIX_VERSION = "in-year-v1"


@dataclass(frozen=True)
class MCOption:
    answer: str
    tag: str


@dataclass(frozen=True)
class MCItem:
    question: str
    options: tuple[MCOption, ...]
    year: Optional[int] = None
    source: Optional[str] = None
    id: Optional[str] = None

    @property
    def correct_index(self) -> int:
        return next(i for i, o in enumerate(self.options) if o.tag == "correct")


def validate_item(item: MCItem) -> MCItem:
    """Shared validator for evaluated and freshly generated items."""
    if len(item.options) != N_OPTIONS:
        raise WrongOptionCountError(f"expected {N_OPTIONS} options, got {len(item.options)}")
    for o in item.options:
        if o.tag not in TAGS:
            raise InvalidTagError(f"unknown tag {o.tag!r}")
        if not str(o.answer).strip():
            raise GenValidationError("option answer is empty")
    n_correct = sum(o.tag == "correct" for o in item.options)
    if n_correct > 1:
        raise MultipleCorrectError(f"{n_correct} options tagged correct")
    if n_correct == 0:
        raise GenValidationError("no option tagged correct")
    if not item.question.strip():
        raise GenValidationError("question is empty")
    return item


def item_from_dict(rec: dict) -> MCItem:
    try:
        options = tuple(MCOption(str(o["answer"]), str(o["tag"])) for o in rec["options"])
        item = MCItem(
            question=str(rec["question"]),
            options=options,
            year=int(rec["year"]) if rec.get("year") is not None else None,
            source=rec.get("source"),
            id=str(rec["id"]) if rec.get("id") is not None else None,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise FileFormatError(f"malformed item record: {e}") from e
    return validate_item(item)


def item_to_dict(item: MCItem) -> dict:
    rec = {
        "question": item.question,
        "options": [{"answer": o.answer, "tag": o.tag} for o in item.options],
    }
    if item.year is not None:
        rec["year"] = item.year
    if item.source is not None:
        rec["source"] = item.source
    if item.id is not None:
        rec["id"] = item.id
    return rec


def load_benchmark(path) -> tuple[list[MCItem], list[tuple[int, str]]]:
    """Read a newline-delimited benchmark file; malformed lines become rejects."""
    items: list[MCItem] = []
    rejects: list[tuple[int, str]] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                items.append(item_from_dict(rec))
            except (json.JSONDecodeError, FileFormatError, GenValidationError) as e:
                rejects.append((lineno, str(e)))
    return items, rejects


def save_benchmark(path, items: Sequence[MCItem]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for item in items:
            f.write(json.dumps(item_to_dict(item), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def render_prompt(question: str, year: Optional[int] = None) -> str:
    prefix = f"In {year}: " if year is not None else ""
    return f"{prefix}Q: {question}\nA: "


def score_option(
    predictor,
    question: str,
    option_text: str,
    query_year: Optional[int] = None,
    mode: str = "final_token",
    tokenizer=None,
) -> float:
    """Log-likelihood score of one candidate answer under the predictor.

    `final_token` scores only the option's last token given everything before
    it; `sum` accumulates over all option tokens. Predictors that accept a
    timestamp get the year as a parameter; for the rest it is written into
    the prompt.
    """
    if mode not in ("final_token", "sum"):
        raise ValueError(f"unknown scoring mode {mode!r}")
    if not option_text:
        raise EmptyOptionError("cannot score an empty option")
    tokenizer = tokenizer or getattr(predictor, "tokenizer", None) or ByteTokenizer()

    if predictor.accepts_timestamp:
        prompt = render_prompt(question)
    else:
        prompt = render_prompt(question, year=query_year)
    prefix_ids = tokenizer.encode(prompt)
    option_ids = tokenizer.encode(option_text)
    if not option_ids:
        raise EmptyOptionError(f"option {option_text!r} tokenizes to nothing")
    ids = prefix_ids + option_ids
    if len(ids) > predictor.context_length:
        raise ContextOverflowError(
            f"rendered prompt has {len(ids)} tokens, context is {predictor.context_length}"
        )
    year_arg = query_year if predictor.accepts_timestamp else None
    logprobs = predictor.token_logprobs(ids, year_arg)  # (T, V)
    if mode == "final_token":
        return float(logprobs[len(ids) - 2, ids[-1]])
    start = len(prefix_ids)
    return float(sum(logprobs[pos - 1, ids[pos]] for pos in range(start, len(ids))))


def _argmax_first(scores: Sequence[float]) -> int:
    best = 0
    for i in range(1, len(scores)):
        if scores[i] > scores[best]:
            best = i
    return best


@dataclass
class MCResult:
    item_id: str
    chosen_index: int
    chosen_tag: str
    scores: list[float]
    year: Optional[int]
    correct: bool

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "chosen_index": self.chosen_index,
            "chosen_tag": self.chosen_tag,
            "scores": self.scores,
            "year": self.year,
            "correct": self.correct,
        }


@dataclass
class EvalReport:
    accuracy: float
    tag_distribution: dict[str, float]
    per_year_accuracy: dict[Optional[int], float]
    n_items: int
    results: list[MCResult] = field(default_factory=list)

    def to_dict(self, include_results: bool = True) -> dict:
        doc = {
            "accuracy": self.accuracy,
            "tag_distribution": self.tag_distribution,
            "per_year_accuracy": {
                ("unknown" if y is None else str(y)): a for y, a in self.per_year_accuracy.items()
            },
            "n_items": self.n_items,
        }
        if include_results:
            doc["results"] = [r.to_dict() for r in self.results]
        return doc


def aggregate_results(results: Sequence[MCResult]) -> EvalReport:
    if not results:
        raise EmptyBenchmarkError("no results to aggregate")
    n = len(results)
    tag_counts = {t: 0 for t in TAGS}
    per_year: dict[Optional[int], tuple[int, int]] = {}
    for r in results:
        tag_counts[r.chosen_tag] += 1
        hit, total = per_year.get(r.year, (0, 0))
        per_year[r.year] = (hit + int(r.correct), total + 1)
    return EvalReport(
        accuracy=tag_counts["correct"] / n,
        tag_distribution={t: c / n for t, c in tag_counts.items()},
        per_year_accuracy={y: h / t for y, (h, t) in sorted(per_year.items(), key=lambda kv: (kv[0] is None, kv[0]))},
        n_items=n,
        results=list(results),
    )


def evaluate(
    predictor,
    items: Sequence[MCItem],
    mode: str = "final_token",
    default_year: Optional[int] = None,
    tokenizer=None,
) -> EvalReport:
    """Score every item, pick argmax options, and aggregate the report.

    Items without a year use `default_year`, falling back to the predictor's
    latest registry year when it has one.
    """
    if not items:
        raise EmptyBenchmarkError("benchmark contains no items")
    if default_year is None:
        registry = getattr(predictor, "registry", None)
        if registry is not None:
            default_year = registry.latest_year
    results = []
    for i, item in enumerate(items):
        validate_item(item)
        year = item.year if item.year is not None else default_year
        scores = [
            score_option(predictor, item.question, o.answer, year, mode, tokenizer)
            for o in item.options
        ]
        chosen = _argmax_first(scores)
        results.append(
            MCResult(
                item_id=item.id or str(i),
                chosen_index=chosen,
                chosen_tag=item.options[chosen].tag,
                scores=scores,
                year=year,
                correct=item.options[chosen].tag == "correct",
            )
        )
    return aggregate_results(results)


@dataclass
class SingleExpertSummary:
    per_expert: dict[str, EvalReport]
    mean_accuracy: float
    max_accuracy: float
    best_label: str

    def to_dict(self) -> dict:
        return {
            "per_expert": {k: v.to_dict(include_results=False) for k, v in self.per_expert.items()},
            "mean_accuracy": self.mean_accuracy,
            "max_accuracy": self.max_accuracy,
            "best_label": self.best_label,
        }


def report_single_experts(
    registry,
    items: Sequence[MCItem],
    mode: str = "final_token",
    tokenizer=None,
) -> SingleExpertSummary:
    """Evaluate every expert on its own (no masking); report mean and max."""
    from .mixture import SingleExpertPredictor

    per_expert: dict[str, EvalReport] = {}
    for i in range(len(registry)):
        model = registry.expert(i)
        predictor = SingleExpertPredictor(model)
        report = evaluate(
            predictor, items, mode=mode, default_year=registry.latest_year, tokenizer=tokenizer
        )
        per_expert[model.window.label] = report
    accs = {label: r.accuracy for label, r in per_expert.items()}
    best = max(accs, key=lambda k: accs[k])
    return SingleExpertSummary(
        per_expert=per_expert,
        mean_accuracy=sum(accs.values()) / len(accs),
        max_accuracy=accs[best],
        best_label=best,
    )


def perplexity(predictor, rows, query_year: Optional[int] = None) -> float:
    """exp(mean next-token NLL) over packed rows."""
    import math

    total = 0.0
    count = 0
    for row in rows:
        ids = [int(t) for t in row]
        lp = predictor.token_logprobs(ids, query_year if predictor.accepts_timestamp else None)
        for pos in range(1, len(ids)):
            total += float(lp[pos - 1, ids[pos]])
            count += 1
    if count == 0:
        raise EmptyBenchmarkError("no tokens to score")
    return math.exp(-total / count)
