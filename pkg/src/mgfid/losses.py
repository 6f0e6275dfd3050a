"""Training objectives: answer generation, passage ranking, sentence focal loss."""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
from torch import Tensor

from . import numerics as nx
from .corpus import PAD_ID


@dataclass
class LossWeights:
    lambda1: float = 0.5  # passage ranking
    lambda2: float = 1.0  # sentence classification
    alpha: float = 0.95  # focal weight of the positive class
    gamma: float = 2.0
    tau: float = 0.05

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 < self.alpha < 1:
            raise ValueError("focal alpha must lie in (0, 1)")
        if self.gamma < 0:
            raise ValueError("focal gamma must be non-negative")
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must lie in [0, 1]")

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def generation_loss(logits: Tensor, targets: Tensor, pad_id: int = PAD_ID) -> Tensor:
    """Teacher-forced negative log-likelihood summed over target positions.

    ``logits`` is [T, V] or [B, T, V]; with a batch dimension the per-example
    sums are averaged over examples. Positions holding ``pad_id`` are skipped.
    """
    single = logits.dim() == 2
    if single:
        logits, targets = logits[None], targets[None]
    if logits.shape[:2] != targets.shape:
        raise nx.ShapeError(f"generation_loss: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    vocab = logits.shape[-1]
    if targets.numel() and int(targets.max()) >= vocab:
        raise ValueError(f"target id {int(targets.max())} >= vocab size {vocab}")
    keep = targets != pad_id
    logp = nx.log_softmax(logits, axis=-1)
    picked = logp.gather(-1, targets.clamp_min(0)[..., None]).squeeze(-1)
    per_example = -(picked * keep).sum(dim=-1)
    return per_example[0] if single else per_example.mean()


def listwise_passage_loss(logits_or_probs: Tensor, positives: Tensor, probs: bool = False) -> Tensor:
    """-(1/|P|) sum log p_pos per question, averaged over the batch.

    ``positives`` is a boolean [B, K] mask (or [K] for one question).
    Questions with no positive passage contribute zero.
    """
    x = logits_or_probs
    if x.dim() == 1:
        x, positives = x[None], positives[None]
    if positives.shape != x.shape:
        raise nx.ShapeError(f"listwise_passage_loss: scores {tuple(x.shape)} vs positives {tuple(positives.shape)}")
    logp = torch.log(x) if probs else nx.log_softmax(x, axis=-1)
    picked = torch.where(positives, logp, torch.zeros_like(logp))  # log 0 on a negative must not leak
    n_pos = positives.to(logp.dtype).sum(-1)
    per_q = -picked.sum(-1) / n_pos.clamp_min(1)
    return per_q.mean()


def positives_mask(indices: list[list[int]] | list[int], k: int) -> Tensor:
    """Boolean mask from positive index lists; out-of-range indices are rejected."""
    nested = bool(indices) and isinstance(indices[0], (list, tuple))
    rows = indices if nested else [indices]
    mask = torch.zeros(len(rows), k, dtype=torch.bool)
    for b, idx in enumerate(rows):
        for i in idx:
            if not 0 <= i < k:
                raise IndexError(f"positive index {i} outside 0..{k - 1}")
            mask[b, i] = True
    return mask if nested else mask[0]


def pointwise_passage_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean sigmoid binary cross-entropy over all passages."""
    if logits.shape != labels.shape:
        raise nx.ShapeError(f"pointwise_passage_loss: logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    return torch.nn.functional.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))


def focal_loss(logits: Tensor, labels: Tensor, alpha: float = 0.95, gamma: float = 2.0) -> Tensor:
    """Per-sentence focal loss on 2-way logits [N, 2] with labels in {0, 1}.

    -alpha_t (1 - p_t)^gamma log p_t, alpha_t = alpha for positives and
    1 - alpha for negatives.
    """
    if logits.dim() != 2 or logits.shape[-1] != 2 or labels.shape != logits.shape[:1]:
        raise nx.ShapeError(f"focal_loss: logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    labels = labels.long()
    logp_t = nx.log_softmax(logits, axis=-1).gather(-1, labels[:, None]).squeeze(-1)
    p_t = logp_t.exp()
    alpha_t = torch.where(labels == 1, alpha, 1.0 - alpha).to(logits.dtype)
    modulator = (1.0 - p_t) ** gamma if gamma != 0 else torch.ones_like(p_t)
    return -alpha_t * modulator * logp_t


def sentence_loss(logits: Tensor, labels: Tensor, alpha: float = 0.95, gamma: float = 2.0) -> Tensor:
    """Focal loss averaged over every labeled sentence in the batch (labels of -1 are skipped)."""
    known = labels >= 0
    if not bool(known.any()):
        return logits.sum() * 0.0
    return focal_loss(logits[known], labels[known], alpha, gamma).mean()


def combined_loss(l_gen: Tensor | float, l_passage: Tensor | float, l_sentence: Tensor | float, weights: LossWeights):
    return l_gen + weights.lambda1 * l_passage + weights.lambda2 * l_sentence
