"""Synthetic key-value QA corpora with exact evidence labels, plus FiD-style JSON I/O.

Each question asks for the value of one synthetic entity ("value-of e7 ?").
Every question lives in its own little world: the entity-value facts are drawn
fresh per question, so nothing can be answered from memory and the reader has
to find the supporting sentence among the retrieved passages.

Passage archetypes:

* ``supportive``  - states "X has value V ." among filler facts.
* ``confuser``    - the supportive sentence plus misleading "X lacks value W ."
  sentences about the same entity.
* ``distractor``  - contains the answer token, but about the wrong subject
  ("Y has value V ."), next to a misleading sentence about X. Answer-span
  heuristics label it positive; it is not.
* ``irrelevant``  - filler facts about other entities only.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(4)

QUESTION_WORD = "value-of"
TEMPLATE_WORDS = (QUESTION_WORD, "?", "has", "lacks", "value", ".", "because")
SENTENCE_END = frozenset({".", "?", "!"})

ARCHETYPES = ("supportive", "distractor", "confuser", "irrelevant")
POSITIVE_ARCHETYPES = frozenset({"supportive", "confuser"})
EVIDENCE_LABELS = ("supportive", "unsupportive", "unknown")

_TOKEN_RE = re.compile(r"[^\s.?!,;:]+|[.?!,;:]")


class DatasetError(ValueError):
    """A dataset file or record that does not follow the declared layout."""

    def __init__(self, message: str, index: int | None = None):
        self.index = index
        super().__init__(message if index is None else f"record {index}: {message}")


# ---------------------------------------------------------------------------
# vocabulary and tokenization


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


class Vocabulary:
    def __init__(self, words: Iterable[str]):
        self.index: dict[str, int] = {w: i for i, w in enumerate(RESERVED)}
        for w in words:
            self.index.setdefault(w, len(self.index))
        self.words: list[str] = list(self.index)

    @classmethod
    def synthetic(cls, n_entities: int, n_values: int) -> "Vocabulary":
        return cls(
            list(TEMPLATE_WORDS)
            + [entity_name(i) for i in range(n_entities)]
            + [value_name(i) for i in range(n_values)]
        )

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        seen: dict[str, None] = {}
        for t in texts:
            for w in split_words(t):
                seen.setdefault(w, None)
        return cls(sorted(seen))

    def __len__(self) -> int:
        return len(self.words)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.words == other.words

    def tokenize(self, text: str) -> list[int]:
        return [self.index.get(w, UNK_ID) for w in split_words(text)]

    def detokenize(self, ids: Sequence[int], skip_special: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if skip_special and i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            out.append(self.words[i] if 0 <= i < len(self.words) else UNK)
        return " ".join(out)

    def to_json(self) -> list[str]:
        return list(self.words)

    @classmethod
    def from_json(cls, words: list[str]) -> "Vocabulary":
        if list(words[: len(RESERVED)]) != list(RESERVED):
            raise DatasetError("vocabulary must start with the reserved tokens")
        return cls(words[len(RESERVED):])


def entity_name(i: int) -> str:
    return f"e{i}"


def value_name(i: int) -> str:
    return f"v{i}"


def split_sentences(passage_text: str, offset: int, max_len: int | None = None) -> list[tuple[int, int]]:
    """Sentence spans of a passage as inclusive (a, b) indices in the encoded pair.

    ``offset`` is the number of question tokens preceding the passage. Spans
    are cut after sentence-final punctuation; trailing words without a
    terminator form a last span. With ``max_len`` set, spans are clipped to
    the truncated pair and spans starting past it are dropped.
    """
    words = split_words(passage_text)
    spans = []
    start = 0
    for j, w in enumerate(words):
        if w in SENTENCE_END:
            spans.append((offset + start, offset + j))
            start = j + 1
    if start < len(words):
        spans.append((offset + start, offset + len(words) - 1))
    if max_len is not None:
        spans = [(a, min(b, max_len - 1)) for a, b in spans if a < max_len]
    return spans


# ---------------------------------------------------------------------------
# records


@dataclass
class Passage:
    text: str
    retriever_rank: int
    evidence_label: str = "unknown"
    sentence_labels: list[int] | None = None
    id: str = ""
    title: str = ""
    archetype: str | None = None

    def __post_init__(self):
        if self.evidence_label not in EVIDENCE_LABELS:
            raise DatasetError(f"bad evidence label {self.evidence_label!r}")

    @property
    def is_positive(self) -> bool:
        return self.evidence_label == "supportive"


@dataclass
class QAExample:
    question: str
    answers: list[str]
    passages: list[Passage]
    id: str = ""

    @property
    def positives(self) -> list[int]:
        return [i for i, p in enumerate(self.passages) if p.is_positive]

    @property
    def labeled(self) -> bool:
        return all(p.evidence_label != "unknown" for p in self.passages)


@dataclass(frozen=True)
class EncodedExample:
    """Token-level view of one QAExample as K question-passage pairs."""

    input_ids: np.ndarray  # [K, L]
    valid_len: np.ndarray  # [K]
    spans: tuple[tuple[tuple[int, int], ...], ...]  # per passage
    sentence_labels: tuple[tuple[int, ...] | None, ...]
    positives: tuple[int, ...]
    target_ids: tuple[int, ...]  # answer tokens followed by EOS
    question_len: int


def encode_pair(question_ids: Sequence[int], passage_ids: Sequence[int], max_len: int) -> tuple[np.ndarray, int]:
    """Question then passage, truncated to ``max_len`` and padded."""
    if len(question_ids) == 0:
        raise ValueError("empty question")
    if len(question_ids) >= max_len:
        raise ValueError(f"question of {len(question_ids)} tokens leaves no room in L={max_len}")
    ids = (list(question_ids) + list(passage_ids))[:max_len]
    out = np.full(max_len, PAD_ID, dtype=np.int64)
    out[: len(ids)] = ids
    return out, len(ids)


def encode_example(ex: QAExample, vocab: Vocabulary, max_len: int, max_target_len: int) -> EncodedExample:
    q_ids = vocab.tokenize(ex.question)
    rows, lens, spans, labels = [], [], [], []
    for p in ex.passages:
        row, n = encode_pair(q_ids, vocab.tokenize(p.text), max_len)
        rows.append(row)
        lens.append(n)
        sp = split_sentences(p.text, len(q_ids), max_len)
        spans.append(tuple(sp))
        if p.sentence_labels is None:
            labels.append(None)
        else:
            labels.append(tuple(int(y) for y in p.sentence_labels[: len(sp)]))
    target = vocab.tokenize(ex.answers[0])[: max_target_len - 1] + [EOS_ID]
    return EncodedExample(
        input_ids=np.stack(rows),
        valid_len=np.asarray(lens, dtype=np.int64),
        spans=tuple(spans),
        sentence_labels=tuple(labels),
        positives=tuple(ex.positives),
        target_ids=tuple(target),
        question_len=len(q_ids),
    )


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class CorpusSpec:
    n_questions: int = 2000
    k: int = 4
    fractions: dict[str, float] = field(
        default_factory=lambda: {"supportive": 0.25, "distractor": 0.25, "confuser": 0.25, "irrelevant": 0.25}
    )
    n_entities: int = 50
    n_values: int = 50
    sentences_per_passage: int = 5
    confusers_per_passage: int = 1
    retriever_noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.fractions) - set(ARCHETYPES)
        if unknown:
            raise ValueError(f"unknown archetypes {sorted(unknown)}")
        for a in ARCHETYPES:
            self.fractions.setdefault(a, 0.0)
        if any(f < 0 for f in self.fractions.values()) or abs(sum(self.fractions.values()) - 1.0) > 1e-9:
            raise ValueError("archetype fractions must be non-negative and sum to 1")
        if self.fractions["supportive"] + self.fractions["confuser"] <= 0:
            raise ValueError("every question needs at least one supportive passage")
        if self.k < 1 or self.n_questions < 0 or self.sentences_per_passage < 2:
            raise ValueError("k >= 1 and sentences_per_passage >= 2 required")
        if not 0 <= self.confusers_per_passage < self.sentences_per_passage:
            raise ValueError("confusers_per_passage must leave room for the supportive sentence")

    def vocabulary(self) -> Vocabulary:
        return Vocabulary.synthetic(self.n_entities, self.n_values)

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# retriever score offsets: answer-bearing and entity-overlapping passages rank higher
_RETRIEVER_BASE = {"supportive": 1.0, "confuser": 0.7, "distractor": 1.0, "irrelevant": 0.0}


def _sentence(subject: str, relation: str, value: str) -> str:
    return f"{subject} {relation} value {value} ."


def allocate_archetypes(fractions: dict[str, float], k: int, rng: np.random.Generator) -> list[str]:
    """Archetype counts for one question, unbiased in expectation.

    Floors of ``fraction * k`` are assigned deterministically, the remaining
    slots are drawn without replacement in proportion to the remainders.
    If no positive archetype ends up allocated, one slot is swapped for one.
    """
    exact = {a: fractions[a] * k for a in ARCHETYPES}
    counts = {a: int(np.floor(exact[a] + 1e-12)) for a in ARCHETYPES}
    rest = k - sum(counts.values())
    if rest > 0:
        rem = np.array([max(exact[a] - counts[a], 0.0) for a in ARCHETYPES])
        picks = rng.choice(len(ARCHETYPES), size=rest, replace=False, p=rem / rem.sum())
        for i in picks:
            counts[ARCHETYPES[i]] += 1
    slots = [a for a in ARCHETYPES for _ in range(counts[a])]
    if not any(a in POSITIVE_ARCHETYPES for a in slots):
        pos = "supportive" if fractions["supportive"] >= fractions["confuser"] else "confuser"
        negatives = [i for i, a in enumerate(slots) if a not in POSITIVE_ARCHETYPES]
        slots[negatives[rng.integers(len(negatives))]] = pos
    return slots


def _generate_question(spec: CorpusSpec, index: int) -> QAExample:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    n_sent = spec.sentences_per_passage
    n_conf = spec.confusers_per_passage
    subject = int(rng.integers(spec.n_entities))
    answer = int(rng.integers(spec.n_values))
    others = [e for e in range(spec.n_entities) if e != subject]
    wrong_values = [v for v in range(spec.n_values) if v != answer]

    def filler() -> str:
        return _sentence(entity_name(int(rng.choice(others))), "has", value_name(int(rng.choice(wrong_values))))

    def misleading() -> str:
        return _sentence(entity_name(subject), "lacks", value_name(int(rng.choice(wrong_values))))

    support = _sentence(entity_name(subject), "has", value_name(answer))
    slots = allocate_archetypes(spec.fractions, spec.k, rng)
    drafts = []
    for arch in slots:
        sents = [filler() for _ in range(n_sent)]
        labels = [0] * n_sent
        order = rng.permutation(n_sent)
        if arch in POSITIVE_ARCHETYPES:
            sents[order[0]] = support
            labels[order[0]] = 1
            if arch == "confuser":
                for j in order[1 : 1 + n_conf]:
                    sents[j] = misleading()
        elif arch == "distractor":
            sents[order[0]] = _sentence(entity_name(int(rng.choice(others))), "has", value_name(answer))
            for j in order[1 : 1 + n_conf]:
                sents[j] = misleading()
        score = _RETRIEVER_BASE[arch] + spec.retriever_noise * rng.standard_normal()
        drafts.append((score, arch, " ".join(sents), labels))
    ranked = sorted(range(len(drafts)), key=lambda i: -drafts[i][0])
    passages = []
    for rank, i in enumerate(ranked, start=1):
        _, arch, text, labels = drafts[i]
        positive = arch in POSITIVE_ARCHETYPES
        passages.append(
            Passage(
                text=text,
                retriever_rank=rank,
                evidence_label="supportive" if positive else "unsupportive",
                sentence_labels=labels,
                id=f"q{index}-p{rank}",
                archetype=arch,
            )
        )
    return QAExample(
        question=f"{QUESTION_WORD} {entity_name(subject)} ?",
        answers=[value_name(answer)],
        passages=passages,
        id=f"q{index}",
    )


def generate_corpus(spec: CorpusSpec, start: int = 0) -> list[QAExample]:
    """Questions ``start .. start + n_questions - 1`` of the stream seeded by ``spec.seed``."""
    # subject, distractor subject and a filler subject must be distinct
    if spec.n_entities < 3:
        raise ValueError(f"need at least 3 distinct entities, vocabulary has {spec.n_entities}")
    if spec.n_values < 2:
        raise ValueError(f"need at least 2 distinct values, vocabulary has {spec.n_values}")
    return [_generate_question(spec, i) for i in range(start, start + spec.n_questions)]


# ---------------------------------------------------------------------------
# dataset files


def example_to_record(ex: QAExample) -> dict:
    ctxs = []
    for p in ex.passages:
        c = {
            "id": p.id,
            "title": p.title,
            "text": p.text,
            "retriever_rank": p.retriever_rank,
            "evidence_label": p.evidence_label,
        }
        if p.sentence_labels is not None:
            c["sentence_labels"] = list(p.sentence_labels)
        if p.archetype is not None:
            c["archetype"] = p.archetype
        ctxs.append(c)
    rec = {"question": ex.question, "answers": list(ex.answers), "ctxs": ctxs}
    if ex.id:
        rec["id"] = ex.id
    return rec


def record_to_example(rec, index: int, k: int | None = None) -> QAExample:
    if not isinstance(rec, dict):
        raise DatasetError("record is not an object", index)
    for key in ("question", "answers", "ctxs"):
        if key not in rec:
            raise DatasetError(f"missing {key!r}", index)
    if not isinstance(rec["question"], str):
        raise DatasetError("'question' must be a string", index)
    answers = rec["answers"]
    if not isinstance(answers, list) or not answers or not all(isinstance(a, str) for a in answers):
        raise DatasetError("'answers' must be a non-empty list of strings", index)
    if not isinstance(rec["ctxs"], list):
        raise DatasetError("'ctxs' must be a list", index)
    passages = []
    for j, c in enumerate(rec["ctxs"]):
        if not isinstance(c, dict) or not isinstance(c.get("text"), str):
            raise DatasetError(f"ctx {j} lacks a text field", index)
        labels = c.get("sentence_labels")
        if labels is not None and (not isinstance(labels, list) or any(y not in (0, 1) for y in labels)):
            raise DatasetError(f"ctx {j}: sentence_labels must be a list of 0/1", index)
        label = c.get("evidence_label", "unknown")
        if label not in EVIDENCE_LABELS:
            raise DatasetError(f"ctx {j}: bad evidence_label {label!r}", index)
        passages.append(
            Passage(
                text=c["text"],
                retriever_rank=int(c.get("retriever_rank", j + 1)),
                evidence_label=label,
                sentence_labels=None if labels is None else [int(y) for y in labels],
                id=str(c.get("id", "")),
                title=str(c.get("title", "")),
                archetype=c.get("archetype"),
            )
        )
    passages.sort(key=lambda p: p.retriever_rank)
    if k is not None:
        passages = passages[:k]
    return QAExample(question=rec["question"], answers=list(answers), passages=passages, id=str(rec.get("id", "")))


def save_dataset(path: str | Path, examples: Sequence[QAExample]) -> None:
    data = [example_to_record(ex) for ex in examples]
    Path(path).write_text(json.dumps(data, ensure_ascii=False, indent=1), encoding="utf-8")


def load_dataset(path: str | Path, k: int | None = None) -> list[QAExample]:
    """Read a FiD-layout JSON array; ``ctxs`` beyond ``k`` are cut in rank order."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetError(f"invalid JSON at line {e.lineno}: {e.msg}") from None
    if not isinstance(data, list):
        raise DatasetError("dataset file must hold a JSON array")
    return [record_to_example(rec, i, k) for i, rec in enumerate(data)]
