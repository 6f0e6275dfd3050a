import csv
import hashlib
import json
import threading
from dataclasses import replace
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from mgfid import labeling as lab
from mgfid.corpus import CorpusSpec, Passage, QAExample, generate_corpus, split_words


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(CorpusSpec(n_questions=120, seed=5))


def _req(passage="e1 has value v2 .", rank=1):
    return lab.LabelRequest("value-of e1 ?", ["v2", "v3"], passage, rank)


# --- span matching ---------------------------------------------------------


def test_span_match_literal():
    found, pos = lab.span_match(["1912"], "the ship sank in 1912 after the crash")
    assert found and pos == [(4, 4)]


def test_span_match_normalized_multiword():
    found, pos = lab.span_match(["Eiffel Tower"], "the eiffel tower was built")
    assert found and pos == [(1, 2)]


def test_span_match_token_boundary_and_miss():
    assert lab.span_match(["v1"], "e3 has value v12 .") == (False, [])
    assert lab.span_match(["paris"], "no overlap here") == (False, [])


def test_span_match_needs_answers():
    with pytest.raises(ValueError):
        lab.span_match([], "x")


# --- prompts ---------------------------------------------------------------


def test_prompt_contains_fields_and_ends_with_directive():
    req = _req()
    prompt = lab.build_prompt(req)
    assert req.question in prompt and req.passage in prompt and "v2 | v3" in prompt
    assert prompt.endswith("Reply with exactly one word: supportive or unsupportive.")
    assert prompt.index("sufficient") < prompt.index(req.question) < prompt.index("v2 | v3") < prompt.index(req.passage)


def test_prompts_differ_only_in_passage():
    a = lab.build_prompt(_req("e1 has value v2 ."))
    b = lab.build_prompt(_req("e4 lacks value v2 ."))
    assert a.replace("e1 has value v2 .", "@") == b.replace("e4 lacks value v2 .", "@")


def test_prompt_round_trip_and_answer_cap():
    req = lab.LabelRequest("value-of e1 ?", [f"v{i}" for i in range(15)], "p .", 2)
    prompt = lab.build_prompt(req, max_answers=10)
    back = lab.parse_prompt(prompt)
    assert back.question == req.question and back.passage == req.passage
    assert back.answers == req.answers[:10]


def test_template_must_have_placeholders():
    with pytest.raises(ValueError):
        lab.build_prompt(_req(), template="Question: {question}")


@pytest.mark.parametrize(
    "reply,verdict",
    [("supportive", "supportive"), ("Unsupportive.", "unsupportive"), ("Answer: SUPPORTIVE", "supportive")],
)
def test_parse_verdict(reply, verdict):
    assert lab.parse_verdict(reply) == verdict


def test_parse_verdict_rejects_garbage():
    with pytest.raises(lab.JudgmentError):
        lab.parse_verdict("maybe")


# --- sentence labels -------------------------------------------------------


def test_unsupportive_passage_gets_all_zero():
    assert lab.derive_sentence_labels("unsupportive", [(4, 4)], [(0, 4), (5, 9)]) == [0, 0]


def test_supportive_span_in_second_of_three():
    assert lab.derive_sentence_labels("supportive", [(6, 6)], [(0, 4), (5, 9), (10, 14)]) == [0, 1, 0]


def test_supportive_without_match_is_all_zero():
    assert lab.derive_sentence_labels("supportive", [], [(0, 4), (5, 9)]) == [0, 0]


def test_offset_shifts_matches_into_pair_coordinates():
    assert lab.derive_sentence_labels("supportive", [(1, 1)], [(3, 5), (6, 8)], offset=3) == [1, 0]


def test_unknown_label_rejected():
    with pytest.raises(ValueError):
        lab.derive_sentence_labels("unknown", [], [(0, 1)])


# --- pipeline --------------------------------------------------------------


def test_oracle_reproduces_ground_truth_exactly(corpus):
    labeled = lab.label_passages(lab.strip_labels(corpus), lab.OracleClient())
    assert labeled == corpus


def test_no_span_means_no_call_and_unsupportive():
    p = Passage(text="e3 has value v4 .", retriever_rank=1)
    ex = QAExample("value-of e1 ?", ["v9"], [p])
    client = lab.RuleClient(lambda r: True)
    report = lab.LabelingReport()
    out = lab.label_passages([ex], client, report=report)
    assert client.calls == 0 and report.skipped_no_span == 1
    assert out[0].passages[0].evidence_label == "unsupportive"
    assert out[0].passages[0].sentence_labels == [0]


def _with_because(corpus):
    """Append "because" to every other passage so the rule has something to find."""
    out = []
    for i, ex in enumerate(corpus):
        ps = [replace(p, text=p.text + " because .") if (i + j) % 2 else p for j, p in enumerate(ex.passages)]
        out.append(replace(ex, passages=ps))
    return lab.strip_labels(out)


def test_because_rule_matches_brute_force(corpus):
    data = _with_because(corpus)
    client = lab.RuleClient(lambda r: "because" in split_words(r.passage))
    labeled = lab.label_passages(data, client)
    for ex_in, ex_out in zip(data, labeled):
        for p_in, p_out in zip(ex_in.passages, ex_out.passages):
            has_span = any(a in split_words(p_in.text) for a in ex_in.answers)
            expected = "supportive" if has_span and "because" in split_words(p_in.text) else "unsupportive"
            assert p_out.evidence_label == expected
            if expected == "unsupportive":
                assert set(p_out.sentence_labels) == {0}


def test_cache_gives_identical_labels_and_no_new_calls(corpus):
    data = lab.strip_labels(corpus)
    cache = lab.VerdictCache()
    client = lab.OracleClient()
    first = lab.label_passages(data, client, cache=cache)
    calls = client.calls
    second = lab.label_passages(data, client, cache=cache)
    assert first == second and client.calls == calls and calls > 0


def test_threaded_labeling_matches_serial(corpus):
    data = lab.strip_labels(corpus)
    serial = lab.label_passages(data, lab.OracleClient())
    threaded = lab.label_passages(data, lab.OracleClient(), max_workers=4)
    assert serial == threaded


class FlakyClient:
    def __init__(self):
        self.n = 0

    def judge(self, prompt):
        self.n += 1
        if self.n % 3 == 0:
            raise ConnectionError("boom")
        return lab.OracleClient().judge(prompt)


def test_failures_become_unknown_and_are_recorded(corpus):
    report = lab.LabelingReport()
    out = lab.label_passages(lab.strip_labels(corpus[:20]), FlakyClient(), report=report)
    unknown = [(i, j) for i, ex in enumerate(out) for j, p in enumerate(ex.passages) if p.evidence_label == "unknown"]
    assert unknown and sorted(unknown) == sorted((i, j) for i, j, _ in report.failures)
    for i, j in unknown:
        assert out[i].passages[j].sentence_labels is None


def test_never_supportive_without_span(corpus):
    out = lab.label_passages(lab.strip_labels(corpus), lab.RuleClient(lambda r: True))
    for ex in out:
        for p in ex.passages:
            if p.evidence_label == "supportive":
                assert lab.span_match(ex.answers, p.text)[0]
            if sum(p.sentence_labels) > 0:
                assert p.evidence_label == "supportive"


# --- filtering by rank -----------------------------------------------------


def test_accept_all_and_reject_all(corpus):
    data = lab.strip_labels(corpus)
    acc = lab.filtering_rate_by_rank(lab.label_passages(data, lab.RuleClient(lambda r: True)))
    rej = lab.filtering_rate_by_rank(lab.label_passages(data, lab.RuleClient(lambda r: False)))
    assert all(r.fraction == 0 for r in acc)
    assert all(r.fraction == 1 for r in rej)


def test_rank_without_span_bearing_passages_is_absent():
    p = Passage(text="e3 has value v4 .", retriever_rank=1, evidence_label="unsupportive", sentence_labels=[0])
    rows = lab.filtering_rate_by_rank([QAExample("value-of e1 ?", ["v9"], [p])])
    assert rows[0].fraction is None


class RankBiasedClient:
    """Rejects with probability rank / K, decided by a hash of the prompt."""

    def __init__(self, examples, k):
        self.rank = {lab.build_prompt(lab.LabelRequest(ex.question, ex.answers, p.text, p.retriever_rank)): p.retriever_rank
                     for ex in examples for p in ex.passages}
        self.k = k

    def judge(self, prompt):
        u = int(hashlib.sha256(prompt.encode()).hexdigest()[:8], 16) / 2**32
        return "unsupportive" if u < self.rank[prompt] / self.k else "supportive"


def test_rank_biased_client_matches_recount_and_rule(tmp_path):
    data = lab.strip_labels(generate_corpus(CorpusSpec(n_questions=1500, seed=2)))
    labeled = lab.label_passages(data, RankBiasedClient(data, 4))
    rows = lab.filtering_rate_by_rank(labeled)
    # brute-force recount from the labeled file
    path = tmp_path / "f.csv"
    lab.write_filtering_csv(path, rows)
    from mgfid.corpus import load_dataset, save_dataset

    save_dataset(tmp_path / "labeled.json", labeled)
    counts = {r: [0, 0] for r in range(1, 5)}
    for rec in json.loads((tmp_path / "labeled.json").read_text()):
        for c in rec["ctxs"]:
            if any(a in split_words(c["text"]) for a in rec["answers"]):
                counts[c["retriever_rank"]][0] += 1
                counts[c["retriever_rank"]][1] += c["evidence_label"] == "unsupportive"
    with open(path) as f:
        table = list(csv.DictReader(f))
    for row, r in zip(table, rows):
        n, rej = counts[r.rank]
        assert (int(row["span_bearing_count"]), int(row["rejected_count"])) == (n, rej) == (r.span_bearing, r.rejected)
        # binomial standard error around rank/K; 4 sigma
        p = r.rank / 4
        assert abs(r.fraction - p) <= 4 * (p * (1 - p) / n) ** 0.5 + 1e-12
    assert load_dataset(tmp_path / "labeled.json") == labeled


# --- HTTP client -----------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    seen = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _Handler.seen.append((self.headers.get("Authorization"), body))
        verdict = lab.OracleClient().judge(body["prompt"])
        out = json.dumps({"verdict": verdict}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


@pytest.fixture
def judge_server():
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    t = threading.Thread(target=server.serve_forever, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{server.server_port}/judge"
    server.shutdown()


def test_http_client_round_trip(judge_server, corpus, monkeypatch):
    monkeypatch.setenv(lab.ENDPOINT_ENV, judge_server)
    monkeypatch.setenv(lab.TOKEN_ENV, "secret")
    _Handler.seen.clear()
    out = lab.label_passages(lab.strip_labels(corpus[:10]), lab.HTTPJudgmentClient())
    assert out == corpus[:10]
    assert _Handler.seen and all(auth == "Bearer secret" and body["temperature"] == 0 for auth, body in _Handler.seen)


def test_http_client_without_endpoint(monkeypatch):
    monkeypatch.delenv(lab.ENDPOINT_ENV, raising=False)
    with pytest.raises(lab.JudgmentError):
        lab.HTTPJudgmentClient()


def test_http_failure_degrades_to_unknown(corpus):
    client = lab.HTTPJudgmentClient(url="http://127.0.0.1:9/unreachable", timeout=2)
    report = lab.LabelingReport()
    out = lab.label_passages(lab.strip_labels(corpus[:2]), client, report=report)
    assert report.failures
    assert any(p.evidence_label == "unknown" for ex in out for p in ex.passages)
