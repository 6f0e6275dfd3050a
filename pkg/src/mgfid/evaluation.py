"""Exact match, Recall@k, ROC-AUC and model-level evaluation reports."""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .corpus import QAExample, Vocabulary, encode_example
from .model import MGFiD, Pruning, collate, generate

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = str.maketrans("", "", string.punctuation)


class SingleClassError(ValueError):
    """AUC requested for labels that contain only one class."""


def normalize(text: str) -> str:
    """SQuAD answer normalization: lowercase, drop punctuation and articles, squeeze spaces."""
    text = text.lower().translate(_PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def exact_match(prediction: str, answers: Sequence[str]) -> int:
    if not answers:
        raise ValueError("exact_match needs at least one gold answer")
    pred = normalize(prediction)
    return int(any(pred == normalize(a) for a in answers))


def recall_at_k(flags: Sequence[int | bool], k: int) -> int:
    """1 iff any of the first ``k`` entries of a ranked positivity list is set."""
    if not 1 <= k <= len(flags):
        raise ValueError(f"k={k} outside 1..{len(flags)}")
    return int(any(flags[:k]))


def ranked_flags(scores: Sequence[float], positives: Sequence[int | bool]) -> list[int]:
    """Positivity flags reordered by descending score (stable on ties)."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return [int(positives[i]) for i in order]


def auc_roc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(random positive outscores random negative), ties counted as one half.

    Computed from midranks, which is the same count as the pairwise double
    loop.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUC needs at least one positive and one negative label")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# model evaluation


@dataclass
class MetricReport:
    em: float
    avg_passages: float
    recall_reranker: dict[int, float] | None = None
    recall_cross_attention: dict[int, float] | None = None
    sentence_auc: float | None = None
    n_questions: int = 0
    predictions: list[str] = field(default_factory=list, repr=False)

    def flat(self) -> dict[str, float]:
        out = {"em": self.em, "avg_passages": self.avg_passages}
        for name, rec in (("reranker", self.recall_reranker), ("cross_attention", self.recall_cross_attention)):
            for k, v in (rec or {}).items():
                out[f"r@{k}_{name}"] = v
        if self.sentence_auc is not None:
            out["sentence_auc"] = self.sentence_auc
        return out


@torch.no_grad()
def evaluate(
    model: MGFiD,
    examples: Sequence[QAExample],
    vocab: Vocabulary,
    tau: float | str | Pruning = 0.0,
    use_anchor: bool = True,
    recall_ks: Sequence[int] = (1, 2),
    batch_size: int = 100,
) -> MetricReport:
    """EM under pruning, re-ranker and cross-attention Recall@k, sentence AUC.

    Cross-attention rankings always come from an unpruned decode so every
    passage gets a score. Ranking metrics are left out when the passages are
    not labeled.
    """
    pruning = Pruning.parse(tau)
    cfg = model.cfg
    model.eval()
    em, kept_counts, preds = [], [], []
    rr = {k: [] for k in recall_ks}
    rc = {k: [] for k in recall_ks}
    sent_scores, sent_labels = [], []
    all_labeled = all(ex.labeled for ex in examples)
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        enc = [encode_example(ex, vocab, cfg.max_len, cfg.max_target_len) for ex in chunk]
        batch = collate(enc)
        gen = generate(model, batch, pruning, use_anchor)
        full = gen if pruning == Pruning(0.0) else generate(model, batch, Pruning(0.0), use_anchor)
        for i, ex in enumerate(chunk):
            pred = vocab.detokenize(gen.tokens[i])
            preds.append(pred)
            em.append(exact_match(pred, ex.answers))
            kept_counts.append(len(gen.kept[i]))
            if all_labeled:
                flags = [int(p.is_positive) for p in ex.passages]
                by_head = ranked_flags(gen.passage_probs[i].tolist(), flags)
                by_attn = ranked_flags(full.cross_attention[i].tolist(), flags)
                for k in recall_ks:
                    if k <= len(flags):
                        rr[k].append(recall_at_k(by_head, k))
                        rc[k].append(recall_at_k(by_attn, k))
        if all_labeled:
            b, k, l = batch.input_ids.shape
            h = model.encode(batch.input_ids.view(b * k, l), batch.mask.view(b * k, l))
            _, s_logits = model.sentence_head(h.reshape(b * k * l, -1), batch)
            known = batch.sent_labels >= 0
            diff = (s_logits[:, 1] - s_logits[:, 0])[known]
            sent_scores.extend(diff.tolist())
            sent_labels.extend(batch.sent_labels[known].tolist())
    report = MetricReport(
        em=float(np.mean(em)) if em else 0.0,
        avg_passages=float(np.mean(kept_counts)) if kept_counts else 0.0,
        n_questions=len(examples),
        predictions=preds,
    )
    if all_labeled and examples:
        report.recall_reranker = {k: float(np.mean(v)) for k, v in rr.items() if v}
        report.recall_cross_attention = {k: float(np.mean(v)) for k, v in rc.items() if v}
        if 0 < sum(sent_labels) < len(sent_labels):
            report.sentence_auc = auc_roc(sent_scores, sent_labels)
    return report


def aggregate(reports: Sequence[MetricReport]) -> dict[str, dict]:
    """{metric: {"mean", "std", "per_seed"}} over runs that differ only by seed."""
    flats = [r.flat() for r in reports]
    keys = [k for k in flats[0] if all(k in f for f in flats)] if flats else []
    out = {}
    for k in keys:
        vals = [f[k] for f in flats]
        out[k] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "per_seed": vals}
    return out


def write_report(path: str | Path, reports: Sequence[MetricReport]) -> dict:
    data = aggregate(reports)
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True), encoding="utf-8")
    return data
