import json
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from mgfid.corpus import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    UNK_ID,
    CorpusSpec,
    DatasetError,
    QAExample,
    Passage,
    Vocabulary,
    allocate_archetypes,
    encode_example,
    encode_pair,
    generate_corpus,
    load_dataset,
    save_dataset,
    split_sentences,
    split_words,
)


@pytest.fixture(scope="module")
def corpus():
    spec = CorpusSpec(n_questions=200, seed=7)
    return spec, generate_corpus(spec)


# --- vocabulary ------------------------------------------------------------


def test_reserved_ids():
    v = Vocabulary.synthetic(5, 5)
    assert [v.index[w] for w in v.words[:4]] == [PAD_ID, BOS_ID, EOS_ID, UNK_ID]


def test_tokenize_empty_and_unknown():
    v = Vocabulary.synthetic(5, 5)
    assert v.tokenize("") == []
    assert v.tokenize("zebra") == [UNK_ID]


def test_round_trip_every_generated_passage(corpus):
    spec, data = corpus
    v = spec.vocabulary()
    for ex in data[:50]:
        assert v.detokenize(v.tokenize(ex.question)) == ex.question
        for p in ex.passages:
            ids = v.tokenize(p.text)
            assert UNK_ID not in ids
            assert v.detokenize(ids) == p.text


def test_vocab_json_round_trip():
    v = Vocabulary.synthetic(6, 4)
    assert Vocabulary.from_json(json.loads(json.dumps(v.to_json()))) == v


def test_default_vocab_size_is_desk_scale():
    assert 100 <= len(CorpusSpec().vocabulary()) <= 130


# --- sentence splitting ----------------------------------------------------


def test_split_two_sentences():
    assert split_sentences("A b. C d.", offset=0) == [(0, 2), (3, 5)]


def test_split_single_sentence_covers_passage():
    words = split_words("e1 has value v2 .")
    assert split_sentences("e1 has value v2 .", offset=3) == [(3, 3 + len(words) - 1)]


def test_split_without_punctuation_is_one_span():
    assert split_sentences("a b c", offset=2) == [(2, 4)]


def test_spans_never_include_question_tokens(corpus):
    spec, data = corpus
    v = spec.vocabulary()
    for ex in data[:30]:
        enc = encode_example(ex, v, 32, 4)
        for spans in enc.spans:
            assert min(a for a, _ in spans) > enc.question_len - 1
            assert all(a <= b for a, b in spans)
            assert all(b1 < a2 for (_, b1), (a2, _) in zip(spans, spans[1:]))


# --- generation ------------------------------------------------------------


def test_one_supportive_three_irrelevant():
    spec = CorpusSpec(n_questions=20, fractions={"supportive": 0.25, "irrelevant": 0.75})
    for ex in generate_corpus(spec):
        sup = [i for i, p in enumerate(ex.passages) if p.archetype == "supportive"]
        assert ex.positives == sup and len(sup) == 1


def test_distractor_has_span_but_is_unsupportive(corpus):
    _, data = corpus
    seen = 0
    for ex in data:
        for p in ex.passages:
            if p.archetype == "distractor":
                seen += 1
                assert ex.answers[0] in split_words(p.text)
                assert p.evidence_label == "unsupportive"
                assert set(p.sentence_labels) == {0}
    assert seen > 0


def test_same_seed_bit_identical():
    spec = CorpusSpec(n_questions=30, seed=3)
    assert generate_corpus(spec) == generate_corpus(spec)
    assert generate_corpus(spec) != generate_corpus(replace(spec, seed=4))


def test_stream_is_prefix_stable():
    spec = CorpusSpec(n_questions=10, seed=1)
    tail = generate_corpus(replace(spec, n_questions=5), start=5)
    assert generate_corpus(spec)[5:] == tail


def test_every_question_answerable_and_labels_consistent(corpus):
    _, data = corpus
    for ex in data:
        ans = ex.answers[0]
        subject = ex.question.split()[1]
        assert ex.positives
        found = False
        for i, p in enumerate(ex.passages):
            sents = [s.strip() + " ." for s in p.text.split(" .") if s.strip()]
            assert len(sents) == len(p.sentence_labels)
            for s, y in zip(sents, p.sentence_labels):
                if y == 1:
                    assert i in ex.positives
                    assert ans in split_words(s)
                    assert s == f"{subject} has value {ans} ."
                    found = True
        assert found


def test_archetype_fractions_match_spec():
    fr = {"supportive": 0.3, "distractor": 0.3, "confuser": 0.15, "irrelevant": 0.25}
    spec = CorpusSpec(n_questions=1500, k=5, fractions=fr, seed=11)
    counts = Counter(p.archetype for ex in generate_corpus(spec) for p in ex.passages)
    total = sum(counts.values())
    for a, f in fr.items():
        assert abs(counts[a] / total - f) < 0.02


def test_allocate_forces_a_positive():
    rng = np.random.default_rng(0)
    fr = {"supportive": 0.1, "distractor": 0.45, "confuser": 0.0, "irrelevant": 0.45}
    for _ in range(200):
        slots = allocate_archetypes(fr, 2, rng)
        assert "supportive" in slots and len(slots) == 2


def test_ranks_are_a_permutation(corpus):
    _, data = corpus
    for ex in data[:50]:
        assert [p.retriever_rank for p in ex.passages] == list(range(1, 5))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"fractions": {"supportive": 0.5, "irrelevant": 0.6}},
        {"fractions": {"distractor": 0.5, "irrelevant": 0.5}},
        {"fractions": {"bogus": 1.0}},
        {"k": 0},
    ],
)
def test_invalid_spec_rejected(kwargs):
    with pytest.raises(ValueError):
        CorpusSpec(**kwargs)


def test_vocabulary_too_small_rejected():
    with pytest.raises(ValueError):
        generate_corpus(CorpusSpec(n_questions=1, n_entities=2))


# --- encoding --------------------------------------------------------------


def test_encode_pair_layout_and_errors():
    ids, n = encode_pair([5, 6], [7, 8, 9], 4)
    assert ids.tolist() == [5, 6, 7, 8] and n == 4
    ids, n = encode_pair([5], [7], 4)
    assert ids.tolist() == [5, 7, PAD_ID, PAD_ID] and n == 2
    with pytest.raises(ValueError):
        encode_pair([], [7], 4)


def test_encode_example_targets_end_with_eos(corpus):
    spec, data = corpus
    v = spec.vocabulary()
    enc = encode_example(data[0], v, 32, 4)
    assert enc.input_ids.shape == (4, 32)
    assert enc.target_ids[-1] == EOS_ID
    assert v.detokenize(enc.target_ids) == data[0].answers[0]
    assert enc.positives == tuple(data[0].positives)


# --- dataset files ---------------------------------------------------------


def test_save_load_round_trip(tmp_path, corpus):
    _, data = corpus
    path = tmp_path / "d.json"
    save_dataset(path, data[:20])
    assert load_dataset(path) == data[:20]


def test_missing_answers_rejected_with_index(tmp_path):
    good = {"question": "q", "answers": ["a"], "ctxs": []}
    bad = {"question": "q", "ctxs": []}
    path = tmp_path / "bad.json"
    path.write_text(json.dumps([good, bad]))
    with pytest.raises(DatasetError) as e:
        load_dataset(path)
    assert e.value.index == 1 and "answers" in str(e.value)


def test_ctxs_truncated_to_top_k_in_rank_order(tmp_path):
    ctxs = [{"text": f"t{r}", "retriever_rank": r} for r in (3, 1, 5, 2, 4)]
    path = tmp_path / "d.json"
    path.write_text(json.dumps([{"question": "q", "answers": ["a"], "ctxs": ctxs}]))
    ex = load_dataset(path, k=3)[0]
    assert [p.text for p in ex.passages] == ["t1", "t2", "t3"]


def test_invalid_json_reports_line(tmp_path):
    path = tmp_path / "x.json"
    path.write_text("[\n{\n")
    with pytest.raises(DatasetError):
        load_dataset(path)


def test_bad_evidence_label_rejected():
    with pytest.raises(DatasetError):
        Passage(text="x", retriever_rank=1, evidence_label="maybe")


def test_labeled_property():
    p = Passage(text="x", retriever_rank=1)
    ex = QAExample(question="q", answers=["a"], passages=[p])
    assert not ex.labeled and ex.positives == []
