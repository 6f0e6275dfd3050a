"""Evidence labeling: answer-span filter, LLM judgment, sentence labels, filtering report.

Only passages that contain an answer span are sent to the judge; the rest
are unsupportive without a call. Judges are anything with a
``judge(prompt) -> "supportive" | "unsupportive"`` method. ``HTTPJudgmentClient``
speaks a small JSON-over-HTTP protocol so a real model server can be plugged
in; tests use deterministic local judges.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import re
import threading
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

from .corpus import QAExample, split_sentences, split_words
from .evaluation import normalize

log = logging.getLogger(__name__)

VERDICTS = ("supportive", "unsupportive")

ENDPOINT_ENV = "MGFID_JUDGE_URL"
TOKEN_ENV = "MGFID_JUDGE_TOKEN"

DEFAULT_TEMPLATE = (
    "Decide whether the passage below is sufficient to answer the question "
    "with one of the answer candidates.\n"
    "Question: {question}\n"
    "Answer candidates: {answers}\n"
    "Passage: {passage}\n"
    "Reply with exactly one word: supportive or unsupportive."
)
ANSWER_SEPARATOR = " | "


class JudgmentError(RuntimeError):
    pass


class JudgmentClient(Protocol):
    def judge(self, prompt: str) -> str: ...


@dataclass
class LabelRequest:
    question: str
    answers: list[str]
    passage: str
    retriever_rank: int


# ---------------------------------------------------------------------------
# span matching


def passage_tokens(text: str) -> list[str]:
    return split_words(text)


def span_match(answers: Sequence[str], passage_text: str) -> tuple[bool, list[tuple[int, int]]]:
    """Token-boundary occurrences of any normalized answer in the passage.

    Positions are inclusive (start, end) indices into ``passage_tokens``.
    Tokens that normalize to nothing (punctuation, articles) are skipped
    when matching, so "the Eiffel Tower" is found in "the eiffel tower".
    """
    if not answers:
        raise ValueError("span_match needs at least one answer")
    norm = [(i, normalize(w)) for i, w in enumerate(passage_tokens(passage_text))]
    norm = [(i, w) for i, w in norm if w]
    words = [w for _, w in norm]
    hits = set()
    for ans in answers:
        target = normalize(ans).split()
        if not target:
            continue
        n = len(target)
        for j in range(len(words) - n + 1):
            if words[j : j + n] == target:
                hits.add((norm[j][0], norm[j + n - 1][0]))
    hits = sorted(hits)
    return bool(hits), hits


# ---------------------------------------------------------------------------
# prompts


def _check_template(template: str) -> None:
    for key in ("{question}", "{answers}", "{passage}"):
        if key not in template:
            raise ValueError(f"prompt template lacks the {key} placeholder")


def build_prompt(request: LabelRequest, template: str = DEFAULT_TEMPLATE, max_answers: int | None = 10) -> str:
    _check_template(template)
    answers = request.answers if max_answers is None else request.answers[:max_answers]
    return template.format(question=request.question, answers=ANSWER_SEPARATOR.join(answers), passage=request.passage)


def parse_prompt(prompt: str, template: str = DEFAULT_TEMPLATE) -> LabelRequest:
    """Recover the request fields from a prompt rendered with ``template``."""
    _check_template(template)
    pattern = re.escape(template)
    for key in ("question", "answers", "passage"):
        pattern = pattern.replace(re.escape("{" + key + "}"), f"(?P<{key}>.*?)", 1)
    m = re.fullmatch(pattern, prompt, flags=re.DOTALL)
    if m is None:
        raise JudgmentError("prompt does not follow the template")
    return LabelRequest(
        question=m["question"], answers=m["answers"].split(ANSWER_SEPARATOR), passage=m["passage"], retriever_rank=0
    )


def parse_verdict(text: str) -> str:
    words = re.findall(r"[a-z]+", text.lower())
    for w in words:
        if w in VERDICTS:
            return w
    raise JudgmentError(f"no verdict in reply {text[:80]!r}")


# ---------------------------------------------------------------------------
# judges


class OracleClient:
    """Rule-based judge for the synthetic grammar.

    A passage supports the question "value-of X ?" iff it states
    "X has value A ." for some answer candidate A.
    """

    def __init__(self, template: str = DEFAULT_TEMPLATE):
        self.template = template
        self.calls = 0

    def judge(self, prompt: str) -> str:
        self.calls += 1
        req = parse_prompt(prompt, self.template)
        q = split_words(req.question)
        if len(q) < 2:
            return "unsupportive"
        subject = q[1]
        answers = {normalize(a) for a in req.answers}
        words = split_words(req.passage)
        for j in range(len(words) - 3):
            if words[j] == subject and words[j + 1] == "has" and words[j + 2] == "value" and normalize(words[j + 3]) in answers:
                return "supportive"
        return "unsupportive"


class RuleClient:
    """Judge backed by an arbitrary predicate over the parsed request."""

    def __init__(self, rule: Callable[[LabelRequest], bool], template: str = DEFAULT_TEMPLATE):
        self.rule = rule
        self.template = template
        self.calls = 0

    def judge(self, prompt: str) -> str:
        self.calls += 1
        return "supportive" if self.rule(parse_prompt(prompt, self.template)) else "unsupportive"


class HTTPJudgmentClient:
    """POST {"prompt", "temperature": 0} as JSON; the reply is JSON with a
    "verdict" field or plain text containing the verdict word.

    The endpoint and bearer token default to the MGFID_JUDGE_URL and
    MGFID_JUDGE_TOKEN environment variables.
    """

    def __init__(self, url: str | None = None, token: str | None = None, timeout: float = 60.0):
        self.url = url or os.environ.get(ENDPOINT_ENV)
        if not self.url:
            raise JudgmentError(f"no judge endpoint given and {ENDPOINT_ENV} is unset")
        self.token = token if token is not None else os.environ.get(TOKEN_ENV)
        self.timeout = timeout

    def judge(self, prompt: str) -> str:
        body = json.dumps({"prompt": prompt, "temperature": 0}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                text = resp.read().decode("utf-8")
        except OSError as e:
            raise JudgmentError(f"judge request failed: {e}") from e
        try:
            payload = json.loads(text)
        except json.JSONDecodeError:
            return parse_verdict(text)
        if isinstance(payload, dict) and "verdict" in payload:
            return parse_verdict(str(payload["verdict"]))
        return parse_verdict(text)


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class LabelingReport:
    calls: int = 0
    cache_hits: int = 0
    skipped_no_span: int = 0
    failures: list[tuple[int, int, str]] = field(default_factory=list)  # (example, passage, error)


class VerdictCache:
    """Thread-safe (question, passage) -> verdict map."""

    def __init__(self):
        self._data: dict[tuple[str, str], str] = {}
        self._lock = threading.Lock()

    def get(self, key):
        with self._lock:
            return self._data.get(key)

    def put(self, key, verdict: str) -> None:
        with self._lock:
            self._data.setdefault(key, verdict)

    def __len__(self) -> int:
        with self._lock:
            return len(self._data)


def derive_sentence_labels(
    evidence_label: str, matches: Sequence[tuple[int, int]], spans: Sequence[tuple[int, int]], offset: int = 0
) -> list[int]:
    """y_n = 1 iff the passage is supportive and an answer match lies inside sentence n.

    ``matches`` are in passage-token coordinates, ``spans`` in pair
    coordinates; ``offset`` is the question length separating the two.
    """
    if evidence_label == "unknown":
        raise ValueError("sentence labels need a known evidence label")
    if evidence_label != "supportive":
        return [0] * len(spans)
    shifted = [(a + offset, b + offset) for a, b in matches]
    return [int(any(a <= ma and mb <= b for ma, mb in shifted)) for a, b in spans]


def label_passages(
    examples: Sequence[QAExample],
    client: JudgmentClient,
    template: str = DEFAULT_TEMPLATE,
    max_answers: int | None = 10,
    cache: VerdictCache | None = None,
    max_workers: int = 1,
    report: LabelingReport | None = None,
) -> list[QAExample]:
    """New examples whose passages carry evidence and sentence labels.

    Passages without an answer span are unsupportive with no judge call.
    A failing call leaves that passage ``unknown`` and is recorded in
    ``report.failures``.
    """
    cache = cache if cache is not None else VerdictCache()
    report = report if report is not None else LabelingReport()
    jobs: dict[tuple[str, str], str] = {}  # key -> prompt, in first-seen order
    matches: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for i, ex in enumerate(examples):
        for j, p in enumerate(ex.passages):
            found, pos = span_match(ex.answers, p.text)
            matches[i, j] = pos
            if not found:
                report.skipped_no_span += 1
                continue
            key = (ex.question, p.text)
            if cache.get(key) is not None or key in jobs:
                report.cache_hits += 1
                continue
            req = LabelRequest(ex.question, list(ex.answers), p.text, p.retriever_rank)
            jobs[key] = build_prompt(req, template, max_answers)

    errors: dict[tuple[str, str], str] = {}

    def run(item):
        key, prompt = item
        try:
            verdict = client.judge(prompt)
            if verdict not in VERDICTS:
                raise JudgmentError(f"invalid verdict {verdict!r}")
            cache.put(key, verdict)
        except Exception as e:  # any backend failure degrades to an unknown label
            errors[key] = f"{type(e).__name__}: {e}"

    items = list(jobs.items())
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            list(pool.map(run, items))
    else:
        for it in items:
            run(it)
    report.calls += len(items)

    q_len = {}
    out = []
    for i, ex in enumerate(examples):
        new_passages = []
        for j, p in enumerate(ex.passages):
            pos = matches[i, j]
            if not pos:
                label = "unsupportive"
            else:
                key = (ex.question, p.text)
                label = cache.get(key) or "unknown"
                if key in errors:
                    report.failures.append((i, j, errors[key]))
            offset = q_len.setdefault(ex.question, len(split_words(ex.question)))
            spans = split_sentences(p.text, offset)
            labels = None if label == "unknown" else derive_sentence_labels(label, pos, spans, offset)
            new_passages.append(replace(p, evidence_label=label, sentence_labels=labels))
        out.append(replace(ex, passages=new_passages))
    if report.failures:
        log.warning("%d judge calls failed; passages left unknown", len(report.failures))
    return out


def strip_labels(examples: Sequence[QAExample]) -> list[QAExample]:
    return [
        replace(ex, passages=[replace(p, evidence_label="unknown", sentence_labels=None) for p in ex.passages])
        for ex in examples
    ]


# ---------------------------------------------------------------------------
# filtering report


@dataclass
class RankFiltering:
    rank: int
    span_bearing: int
    rejected: int

    @property
    def fraction(self) -> float | None:
        return None if self.span_bearing == 0 else self.rejected / self.span_bearing


def filtering_rate_by_rank(examples: Sequence[QAExample], k: int | None = None) -> list[RankFiltering]:
    """Per retriever rank: span-bearing passages and how many were labeled unsupportive."""
    k = k if k is not None else max((len(ex.passages) for ex in examples), default=0)
    rows = {r: RankFiltering(r, 0, 0) for r in range(1, k + 1)}
    for ex in examples:
        for p in ex.passages:
            if p.retriever_rank not in rows or not span_match(ex.answers, p.text)[0]:
                continue
            row = rows[p.retriever_rank]
            row.span_bearing += 1
            row.rejected += p.evidence_label == "unsupportive"
    return [rows[r] for r in sorted(rows)]


def write_filtering_csv(path: str | Path, rows: Sequence[RankFiltering]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["rank", "span_bearing_count", "rejected_count", "fraction"])
        for r in rows:
            w.writerow([r.rank, r.span_bearing, r.rejected, "" if r.fraction is None else f"{r.fraction:.6f}"])
