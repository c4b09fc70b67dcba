"""Benchmark generation: timelines in, validated four-option items out.

A timeline (question + per-year answer variants) is rendered into a fixed
instruction prompt and sent to a chat-completion endpoint. Responses are
parsed tolerantly (the instructed output format is a single-quoted pseudo
dictionary), then pushed through the same validator the evaluator uses, so
nothing reaches a benchmark file that the evaluator would not accept.
"""

from __future__ import annotations

import ast
import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import httpx

from .errors import (
    ConfigError,
    EmptyTimelineError,
    EndpointUnavailableError,
    GenValidationError,
    ResponseParseError,
)
from .evaluation import MCItem, MCOption, validate_item

PROMPT_TEMPLATE = """You are given a question whose answer may vary over time.

Original question:
<question>

Year of interest: <year_of_interest>
Possible answers across years:
<year_1>: <answers_1>
<year_2>: <answers_2>
...

Task instructions:
1. Choose 1 correct answer for the given year, based on the available answers from the dataset.
2. Select 3 different wrong answers by considering the other possible answers from the dataset across different years.
3. If there is not enough context to choose 3 wrong answers based on the timeline, generate the necessary ones (different from the already chosen) and ensure that the wrong answers are still coherent with the available data.
4. If an answer is not related to the timeline for the given question, it should be tagged as 'irrelevant'. Use this tag when there is not enough data from the dataset's timeline to identify a valid answer.
5. Tag each answer with one of the following labels: 'correct', 'past', 'future', or 'irrelevant'. The 'irrelevant' tag should be used if an answer does not match the timeline for the given question or when insufficient data from the timeline exists to make the answer relevant.
6. If the correct answer also appears in the timeline as 'future' or 'past', do **not** include it as a wrong answer. Ensure that it is tagged correctly as 'correct', 'past', or 'future' based on its timeline.
7. Return the question along with 4 options (1 correct and 3 wrong) in the following dictionary format:
   {
       'question': <question>,
       'options': [
           {'answer': <answer 1>, 'tag': <tag 1>},
           {'answer': <answer 2>, 'tag': <tag 2>},
           {'answer': <answer 3>, 'tag': <tag 3>},
           {'answer': <answer 4>, 'tag': <tag 4>}
       ]
   }
Please give only the dictionary and ensure the format is followed strictly.
Do not provide any additional text, symbols, or explanations.
Follow the example closely:

Example:
question: 'What was the role of Karla Estrada in her most recent television series in 2013?'
options: [
    {'answer': 'Apple Puno', 'tag': 'correct'},
    {'answer': 'Carlita Delyon', 'tag': 'future'},
    {'answer': 'Tita Marichris Matahimik', 'tag': 'past'},
    {'answer': 'Quarter 1-4 Judge Tawag ng Tanghalan', 'tag': 'future'}
]"""

_TIMELINE_BLOCK = "<year_1>: <answers_1>\n<year_2>: <answers_2>\n..."


@dataclass(frozen=True)
class Timeline:
    question: str
    year_of_interest: int
    answers_by_year: dict[int, list[str]]
    source: Optional[str] = None

    def validate(self) -> "Timeline":
        if not self.question.strip():
            raise EmptyTimelineError("timeline has an empty question")
        if "\n" in self.question:
            raise GenValidationError("questions must be a single line")
        if not any(answers for answers in self.answers_by_year.values()):
            raise EmptyTimelineError("timeline has no answers for any year")
        return self


def timeline_from_dict(rec: dict) -> Timeline:
    try:
        answers = {int(y): [str(a) for a in v] for y, v in rec["answers_by_year"].items()}
        return Timeline(
            question=str(rec["question"]),
            year_of_interest=int(rec["year_of_interest"]),
            answers_by_year=answers,
            source=rec.get("source"),
        ).validate()
    except (KeyError, TypeError, ValueError) as e:
        raise GenValidationError(f"malformed timeline record: {e}") from e


def load_timelines(path) -> list[Timeline]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                out.append(timeline_from_dict(json.loads(line)))
            except json.JSONDecodeError as e:
                raise GenValidationError(f"{path}:{lineno}: not valid JSON: {e}") from e
    return out


def build_prompt(timeline: Timeline) -> str:
    """Substitute the timeline into the instruction template.

    Only the three placeholders change; every instruction byte, including the
    worked example, is preserved verbatim in every rendered prompt.
    """
    timeline.validate()
    lines = "\n".join(
        f"{year}: {', '.join(timeline.answers_by_year[year])}"
        for year in sorted(timeline.answers_by_year)
        if timeline.answers_by_year[year]
    )
    return (
        PROMPT_TEMPLATE
        .replace("Original question:\n<question>", f"Original question:\n{timeline.question}")
        .replace("Year of interest: <year_of_interest>", f"Year of interest: {timeline.year_of_interest}")
        .replace(_TIMELINE_BLOCK, lines)
    )


# ---------------------------------------------------------------------------
# Response parsing
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"^```[a-zA-Z0-9]*\n(.*)\n```$", re.DOTALL)
_QUESTION_RE = re.compile(r"question\s*[:=]\s*('(?:[^'\\]|\\.)*'|\"(?:[^\"\\]|\\.)*\")")
_OPTIONS_RE = re.compile(r"options\s*[:=]\s*(\[.*\])", re.DOTALL)


def _strip_fences(text: str) -> str:
    text = text.strip()
    m = _FENCE_RE.match(text)
    return m.group(1).strip() if m else text


def _literal(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError, MemoryError, RecursionError) as e:
        raise ResponseParseError(f"not a literal: {e}") from e


def parse_response(text: str) -> MCItem:
    """Parse a completion into a validated item.

    Accepts the strict dictionary shape, a dictionary embedded in extra
    prose, or the looser "question: '...' / options: [...]" example shape.
    Single quotes are fine throughout.
    """
    if not text or not text.strip():
        raise ResponseParseError("empty response")
    cleaned = _strip_fences(text)

    data = None
    try:
        candidate = _literal(cleaned)
        if isinstance(candidate, dict):
            data = candidate
    except ResponseParseError:
        pass
    if data is None and "{" in cleaned and "}" in cleaned:
        block = cleaned[cleaned.index("{"): cleaned.rindex("}") + 1]
        try:
            candidate = _literal(block)
            if isinstance(candidate, dict) and "options" in candidate:
                data = candidate
        except ResponseParseError:
            pass
    if data is None:
        qm = _QUESTION_RE.search(cleaned)
        om = _OPTIONS_RE.search(cleaned)
        if om is None:
            raise ResponseParseError("no options list found in response")
        data = {"options": _literal(om.group(1))}
        if qm is not None:
            data["question"] = _literal(qm.group(1))

    raw_options = data.get("options")
    if not isinstance(raw_options, list):
        raise ResponseParseError("options is not a list")
    options = []
    for o in raw_options:
        if not isinstance(o, dict) or "answer" not in o or "tag" not in o:
            raise ResponseParseError(f"malformed option record: {o!r}")
        options.append(MCOption(str(o["answer"]).strip(), str(o["tag"]).strip().lower()))
    item = MCItem(question=str(data.get("question", "")).strip(), options=tuple(options))
    validate_item(item)
    correct = item.options[item.correct_index].answer
    for i, o in enumerate(item.options):
        if i != item.correct_index and o.answer == correct:
            raise GenValidationError(
                f"correct answer {correct!r} also appears as a wrong option"
            )
    return item


# ---------------------------------------------------------------------------
# Endpoint client and response cache
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClientConfig:
    endpoint_url: str
    model: str
    temperature: float = 0.0
    max_tokens: int = 512
    auth_env: str = "CHRONOMIX_API_TOKEN"
    timeout: float = 30.0
    max_attempts: int = 3
    backoff_base: float = 0.5


class ChatClient:
    """Messages-in/text-out client with exponential-backoff retries."""

    def __init__(self, config: ClientConfig, transport: Optional[httpx.BaseTransport] = None,
                 require_token: bool = True):
        self.config = config
        token = os.environ.get(config.auth_env, "")
        if require_token and not token:
            raise ConfigError(f"environment variable {config.auth_env} is not set")
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self._client = httpx.Client(transport=transport, timeout=config.timeout, headers=headers)

    def complete(self, prompt: str) -> str:
        body = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        }
        last_error = "no attempt made"
        for attempt in range(self.config.max_attempts):
            if attempt > 0:
                time.sleep(self.config.backoff_base * 2 ** (attempt - 1))
            try:
                resp = self._client.post(self.config.endpoint_url, json=body)
            except httpx.TransportError as e:
                last_error = f"transport error: {e}"
                continue
            if resp.status_code >= 500:
                last_error = f"server error {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise EndpointUnavailableError(
                    f"endpoint rejected the request with status {resp.status_code}"
                )
            try:
                return str(resp.json()["choices"][0]["message"]["content"])
            except (json.JSONDecodeError, KeyError, IndexError, TypeError) as e:
                last_error = f"malformed completion envelope: {e}"
                continue
        raise EndpointUnavailableError(
            f"gave up after {self.config.max_attempts} attempts: {last_error}"
        )

    def close(self) -> None:
        self._client.close()


class ResponseCache:
    """File-per-response cache keyed by (prompt hash, model name).

    Reads are lock-free; writes are serialized and atomic, so concurrent
    generation workers can share one cache directory.
    """

    def __init__(self, root):
        self.root = str(root)
        os.makedirs(self.root, exist_ok=True)
        self._write_lock = threading.Lock()

    def _path(self, prompt: str, model: str) -> str:
        key = hashlib.sha256(f"{model}\x00{prompt}".encode("utf-8")).hexdigest()
        return os.path.join(self.root, f"{key}.txt")

    def get(self, prompt: str, model: str) -> Optional[str]:
        path = self._path(prompt, model)
        if not os.path.exists(path):
            return None
        with open(path, encoding="utf-8") as f:
            return f.read()

    def put(self, prompt: str, model: str, text: str) -> None:
        path = self._path(prompt, model)
        with self._write_lock:
            tmp = path + ".tmp"
            with open(tmp, "w", encoding="utf-8") as f:
                f.write(text)
            os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Generation driver
# ---------------------------------------------------------------------------

@dataclass
class Reject:
    index: int
    reason: str
    raw: Optional[str] = None

    def to_dict(self) -> dict:
        return {"index": self.index, "reason": self.reason, "raw": self.raw}


@dataclass
class GenResult:
    items: list[MCItem]
    rejects: list[Reject]
    retries: int = 0


def generate(
    timelines: Sequence[Timeline],
    client: ChatClient,
    cache: Optional[ResponseCache] = None,
    concurrency: int = 4,
) -> GenResult:
    """Produce one validated item per timeline, preserving input order.

    Validation failures get one fresh (cache-bypassing) retry, then land in
    the rejects list with the raw response; transport failure after the
    client's own retries aborts the run.
    """
    from concurrent.futures import ThreadPoolExecutor

    model = client.config.model

    def fetch(prompt: str, bypass_cache: bool) -> str:
        if cache is not None and not bypass_cache:
            hit = cache.get(prompt, model)
            if hit is not None:
                return hit
        text = client.complete(prompt)
        if cache is not None:
            cache.put(prompt, model, text)
        return text

    def run_one(index: int, timeline: Timeline):
        try:
            prompt = build_prompt(timeline)
        except (EmptyTimelineError, GenValidationError) as e:
            return index, None, Reject(index, f"bad timeline: {e}"), 0
        retries = 0
        raw = None
        for attempt in range(2):
            raw = fetch(prompt, bypass_cache=attempt > 0)
            try:
                item = parse_response(raw)
            except (ResponseParseError, GenValidationError) as e:
                if attempt == 0:
                    retries += 1
                    continue
                return index, None, Reject(index, str(e), raw), retries
            item = replace(
                item,
                year=timeline.year_of_interest,
                source=timeline.source,
                id=f"gen-{index:06d}",
            )
            return index, item, None, retries
        raise AssertionError("unreachable")

    results = []
    if concurrency <= 1:
        results = [run_one(i, t) for i, t in enumerate(timelines)]
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            results = list(pool.map(run_one, range(len(timelines)), timelines))
    results.sort(key=lambda r: r[0])

    items = [r[1] for r in results if r[1] is not None]
    rejects = [r[2] for r in results if r[2] is not None]
    retries = sum(r[3] for r in results)
    return GenResult(items, rejects, retries)
