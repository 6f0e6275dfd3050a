"""Fusion-in-decoder reader with passage re-ranking, sentence classification,
anchor-vector guidance and threshold pruning.

The batched path (``MGFiD.forward``, ``generate``) is what training and
evaluation use. The single-question functions at the bottom of the file
(``encode_pair``, ``concat_encodings``, ``passage_probabilities``, ...) expose
the same computation one question at a time.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import numerics as nx
from .corpus import BOS_ID, EOS_ID, PAD_ID, EncodedExample


@dataclass
class ModelConfig:
    vocab_size: int = 111
    d: int = 64
    max_len: int = 32  # L, tokens per question-passage pair
    k: int = 4  # passages per question
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_target_len: int = 4
    tie_embeddings: bool = False  # output projection shares the token embedding table

    def __post_init__(self):
        for f in fields(self):
            if f.type != "bool" and getattr(self, f.name) <= 0:
                raise ValueError(f"ModelConfig.{f.name} must be positive")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.max_len < 2:
            raise ValueError("max_len must leave room for a question token and content")

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json(cls, data: dict) -> "ModelConfig":
        out = {}
        for f in fields(cls):
            if f.name in data:
                v = data[f.name]
                out[f.name] = (str(v).lower() in ("1", "true")) if f.type == "bool" else int(v)
        return cls(**out)


# ---------------------------------------------------------------------------
# parameters


def _uniform(shape, fan_in: int, g: torch.Generator) -> nn.Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    return nn.Parameter((torch.rand(shape, generator=g) * 2 - 1) * bound)


def _normal(shape, g: torch.Generator, std: float = 0.02) -> nn.Parameter:
    return nn.Parameter(torch.randn(shape, generator=g) * std)


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, n_heads: int, g: torch.Generator):
        super().__init__()
        self.n_heads = n_heads
        self.wq = _uniform((d, d), d, g)
        self.wk = _uniform((d, d), d, g)
        self.wv = _uniform((d, d), d, g)
        self.wo = _uniform((d, d), d, g)

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return x.view(b, t, self.n_heads, d // self.n_heads).transpose(1, 2)

    def forward(self, x: Tensor, mem: Tensor, key_mask: Tensor | None = None, causal: bool = False):
        q = self._split(x @ self.wq)
        k = self._split(mem @ self.wk)
        v = self._split(mem @ self.wv)
        mask = None if key_mask is None else key_mask[:, None, :]
        out, w = nx.attention(q, k, v, key_mask=mask, causal=causal)
        b, h, t, dh = out.shape
        return out.transpose(1, 2).reshape(b, t, h * dh) @ self.wo, w


class FeedForward(nn.Module):
    def __init__(self, d: int, d_ff: int, g: torch.Generator):
        super().__init__()
        self.w1 = _uniform((d, d_ff), d, g)
        self.b1 = nn.Parameter(torch.zeros(d_ff))
        self.w2 = _uniform((d_ff, d), d_ff, g)
        self.b2 = nn.Parameter(torch.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, g: torch.Generator):
        super().__init__()
        self.norm1 = LayerNorm(cfg.d)
        self.attn = MultiHeadAttention(cfg.d, cfg.n_heads, g)
        self.norm2 = LayerNorm(cfg.d)
        self.ff = FeedForward(cfg.d, cfg.d_ff, g)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, key_mask=mask)[0]
        return x + self.ff(self.norm2(x))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, g: torch.Generator):
        super().__init__()
        self.norm1 = LayerNorm(cfg.d)
        self.self_attn = MultiHeadAttention(cfg.d, cfg.n_heads, g)
        self.norm2 = LayerNorm(cfg.d)
        self.cross_attn = MultiHeadAttention(cfg.d, cfg.n_heads, g)
        self.norm3 = LayerNorm(cfg.d)
        self.ff = FeedForward(cfg.d, cfg.d_ff, g)

    def forward(self, x: Tensor, kv: Tensor, kv_mask: Tensor) -> tuple[Tensor, Tensor]:
        h = self.norm1(x)
        x = x + self.self_attn(h, h, causal=True)[0]
        c, w = self.cross_attn(self.norm2(x), kv, key_mask=kv_mask)
        x = x + c
        return x + self.ff(self.norm3(x)), w


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    input_ids: Tensor  # [B, K, L]
    mask: Tensor  # [B, K, L] bool, True on real tokens
    targets: Tensor  # [B, T] padded with PAD_ID
    sent_tokens: Tensor  # [n_tok] flat token row index into B*K*L
    sent_of_token: Tensor  # [n_tok] sentence index of each pooled token
    sent_question: Tensor  # [S] question index of each sentence
    sent_pair: Tensor  # [S] flat pair index b*K + k
    sent_labels: Tensor  # [S] 0/1, -1 when unknown
    positives: Tensor  # [B, K] bool
    labeled: Tensor  # [B] bool, passage labels known

    @property
    def size(self) -> int:
        return self.input_ids.shape[0]

    @property
    def n_sentences(self) -> int:
        return self.sent_question.shape[0]


def collate(examples: Sequence[EncodedExample], max_target_len: int | None = None) -> Batch:
    b = len(examples)
    if b == 0:
        raise ValueError("empty batch")
    k, l = examples[0].input_ids.shape
    ids = np.stack([e.input_ids for e in examples])
    if ids.shape != (b, k, l):
        raise nx.ShapeError(f"examples disagree on [K, L]: {examples[0].input_ids.shape} vs {ids.shape[1:]}")
    mask = np.arange(l)[None, None, :] < np.stack([e.valid_len for e in examples])[:, :, None]
    t = max(len(e.target_ids) for e in examples)
    if max_target_len is not None:
        t = min(t, max_target_len)
    targets = np.full((b, t), PAD_ID, dtype=np.int64)
    for i, e in enumerate(examples):
        tgt = e.target_ids[:t]
        targets[i, : len(tgt)] = tgt
    tok, sent_of_tok, s_q, s_pair, s_lab = [], [], [], [], []
    positives = np.zeros((b, k), dtype=bool)
    labeled = np.zeros(b, dtype=bool)
    s = 0
    for i, e in enumerate(examples):
        positives[i, list(e.positives)] = True
        labeled[i] = all(lab is not None for lab in e.sentence_labels)
        for j in range(k):
            labs = e.sentence_labels[j]
            for n, (a, z) in enumerate(e.spans[j]):
                pair = i * k + j
                tok.extend(range(pair * l + a, pair * l + z + 1))
                sent_of_tok.extend([s] * (z - a + 1))
                s_q.append(i)
                s_pair.append(pair)
                s_lab.append(-1 if labs is None or n >= len(labs) else labs[n])
                s += 1
    as_long = lambda x: torch.as_tensor(np.asarray(x, dtype=np.int64))
    return Batch(
        input_ids=torch.as_tensor(ids),
        mask=torch.as_tensor(mask),
        targets=torch.as_tensor(targets),
        sent_tokens=as_long(tok),
        sent_of_token=as_long(sent_of_tok),
        sent_question=as_long(s_q),
        sent_pair=as_long(s_pair),
        sent_labels=as_long(s_lab),
        positives=torch.as_tensor(positives),
        labeled=torch.as_tensor(labeled),
    )


@dataclass
class ForwardOutput:
    gen_logits: Tensor  # [B, T, V]
    passage_logits: Tensor  # [B, K]
    passage_probs: Tensor  # [B, K]
    sentence_embeddings: Tensor  # [S, d]
    sentence_logits: Tensor  # [S, 2]
    anchor: Tensor | None  # [B, d]
    anchor_empty: Tensor | None  # [B] bool


# ---------------------------------------------------------------------------
# model


class MGFiD(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        g = nx.seeded_generator(seed)
        d = cfg.d
        self.tok_emb = _normal((cfg.vocab_size, d), g)
        self.enc_pos = _normal((cfg.max_len, d), g)
        self.dec_pos = _normal((cfg.max_target_len + 1, d), g)
        self.encoder = nn.ModuleList(EncoderLayer(cfg, g) for _ in range(cfg.n_encoder_layers))
        self.enc_norm = LayerNorm(d)
        self.decoder = nn.ModuleList(DecoderLayer(cfg, g) for _ in range(cfg.n_decoder_layers))
        self.dec_norm = LayerNorm(d)
        self.lm_head = None if cfg.tie_embeddings else _uniform((d, cfg.vocab_size), d, g)
        # evidence heads; w_p is shared by passage and sentence embeddings
        self.w_p = _uniform((d, d), d, g)
        self.w_r = _uniform((1, d), d, g)
        self.w_s = _uniform((d, 2), d, g)

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_emb.dtype

    # -- encoder ----------------------------------------------------------

    def encode(self, ids: Tensor, mask: Tensor) -> Tensor:
        """[N, L] token ids -> [N, L, d] token embeddings."""
        if ids.shape[-1] != self.cfg.max_len:
            raise nx.ShapeError(f"encode: pairs of length {ids.shape[-1]}, model expects L={self.cfg.max_len}")
        x = nx.embedding(self.tok_emb, ids) + self.enc_pos
        for layer in self.encoder:
            x = layer(x, mask)
        return self.enc_norm(x)

    # -- evidence heads ---------------------------------------------------

    def passage_head(self, h: Tensor) -> tuple[Tensor, Tensor]:
        """[B, K, L, d] -> evidence embeddings [B, K, d] and logits [B, K]."""
        e = h[:, :, 0, :] @ self.w_p
        return e, (e @ self.w_r.T).squeeze(-1)

    def sentence_head(self, h_flat: Tensor, batch: Batch) -> tuple[Tensor, Tensor]:
        """Mean of W_p-projected token rows per sentence, then W_s logits."""
        n_sent = batch.n_sentences
        d = h_flat.shape[-1]
        proj = h_flat[batch.sent_tokens] @ self.w_p
        total = torch.zeros(n_sent, d, dtype=proj.dtype).index_add(0, batch.sent_of_token, proj)
        count = torch.zeros(n_sent, dtype=proj.dtype).index_add(
            0, batch.sent_of_token, torch.ones(len(batch.sent_of_token), dtype=proj.dtype)
        )
        s = total / count.clamp_min(1)[:, None]
        return s, s @ self.w_s

    def anchor(self, s: Tensor, logits: Tensor, sent_question: Tensor, n_questions: int) -> tuple[Tensor, Tensor]:
        """Max-pool of positively classified sentence embeddings, per question.

        A sentence is positive iff logit[1] > logit[0]; exact ties count as
        negative. Questions without positives get the zero vector.
        """
        positive = logits[:, 1] > logits[:, 0]
        idx = positive.nonzero(as_tuple=True)[0]
        out = torch.zeros(n_questions, s.shape[-1], dtype=s.dtype)
        if len(idx):
            q = sent_question[idx][:, None].expand(-1, s.shape[-1])
            out = out.scatter_reduce(0, q, s[idx], reduce="amax", include_self=False)
        hit = torch.zeros(n_questions, dtype=torch.bool)
        hit[sent_question[idx]] = True
        return out, ~hit

    # -- decoder ----------------------------------------------------------

    def decode(
        self, kv: Tensor, kv_mask: Tensor, prefix: Tensor, anchor: Tensor | None = None
    ) -> tuple[Tensor, list[Tensor]]:
        """Teacher-forced decoder pass.

        kv: [B, M, d], kv_mask: [B, M], prefix: [B, T] starting with BOS.
        Returns logits [B, T, V] and per-layer cross-attention weights
        [B, H, T, M].
        """
        if prefix.dim() != 2 or prefix.shape[1] == 0:
            raise ValueError("decode: empty target prefix")
        if prefix.shape[1] > self.dec_pos.shape[0]:
            raise ValueError(f"decode: prefix of {prefix.shape[1]} exceeds max_target_len + 1")
        if kv.shape[0] != prefix.shape[0] or kv.shape[-1] != self.cfg.d:
            raise nx.ShapeError(f"decode: kv {tuple(kv.shape)} does not match prefix {tuple(prefix.shape)}")
        x = nx.embedding(self.tok_emb, prefix)
        if anchor is not None:
            x = torch.cat([(x[:, :1] + anchor[:, None, :]), x[:, 1:]], dim=1)
        x = x + self.dec_pos[: prefix.shape[1]]
        weights = []
        for layer in self.decoder:
            x, w = layer(x, kv, kv_mask)
            weights.append(w)
        out = self.dec_norm(x)
        head = self.tok_emb.T if self.lm_head is None else self.lm_head
        return out @ head, weights

    # -- full training pass -----------------------------------------------

    def forward(self, batch: Batch, use_anchor: bool = True) -> ForwardOutput:
        b, k, l = batch.input_ids.shape
        h = self.encode(batch.input_ids.view(b * k, l), batch.mask.view(b * k, l))
        h4 = h.view(b, k, l, -1)
        _, p_logits = self.passage_head(h4)
        s, s_logits = self.sentence_head(h.reshape(b * k * l, -1), batch)
        anchor = empty = None
        if use_anchor:
            anchor, empty = self.anchor(s, s_logits, batch.sent_question, b)
        kv = h.view(b, k * l, -1)
        kv_mask = batch.mask.view(b, k * l)
        prefix = torch.cat([torch.full((b, 1), BOS_ID, dtype=torch.long), batch.targets[:, :-1]], dim=1)
        logits, _ = self.decode(kv, kv_mask, prefix, anchor)
        return ForwardOutput(
            gen_logits=logits,
            passage_logits=p_logits,
            passage_probs=nx.softmax(p_logits, axis=-1),
            sentence_embeddings=s,
            sentence_logits=s_logits,
            anchor=anchor,
            anchor_empty=empty,
        )


# ---------------------------------------------------------------------------
# pruning and generation


@dataclass(frozen=True)
class Pruning:
    """Which passages reach the decoder: ``p_i > threshold`` or the ``top_n`` highest."""

    threshold: float = 0.0
    top_n: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.threshold}")
        if self.top_n is not None and self.top_n < 1:
            raise ValueError("top_n must be >= 1")

    @classmethod
    def parse(cls, spec: "str | float | Pruning") -> "Pruning":
        if isinstance(spec, Pruning):
            return spec
        if isinstance(spec, str) and spec.startswith("top-"):
            return cls(top_n=int(spec[4:]))
        return cls(threshold=float(spec))

    def label(self) -> str:
        return f"top-{self.top_n}" if self.top_n is not None else f"{self.threshold:g}"

    def keep(self, probs: Sequence[float]) -> list[int]:
        """Kept passage indices in original order; never empty."""
        probs = np.asarray(probs, dtype=np.float64)
        if self.top_n is not None:
            order = np.argsort(-probs, kind="stable")[: self.top_n]
            return sorted(int(i) for i in order)
        kept = [i for i, p in enumerate(probs) if p > self.threshold]
        return kept or [int(np.argmax(probs))]


@dataclass
class Generation:
    tokens: list[list[int]]  # answer ids per question, EOS stripped
    kept: list[list[int]]  # passages that reached the decoder
    passage_probs: Tensor  # [B, K]
    cross_attention: Tensor  # [B, K] summed over layers, heads and steps; 0 for pruned passages
    step_weights: list[Tensor]  # per step: [B, n_layers, H, M] weights of the newest query


@torch.no_grad()
def generate(model: MGFiD, batch: Batch, pruning: Pruning | float | str = 0.0, use_anchor: bool = True) -> Generation:
    """Greedy decoding with pruned key-value memory."""
    pruning = Pruning.parse(pruning)
    cfg = model.cfg
    b, k, l = batch.input_ids.shape
    h = model.encode(batch.input_ids.view(b * k, l), batch.mask.view(b * k, l)).view(b, k, l, -1)
    _, p_logits = model.passage_head(h)
    probs = nx.softmax(p_logits, axis=-1)
    anchor = None
    if use_anchor:
        s, s_logits = model.sentence_head(h.reshape(b * k * l, -1), batch)
        anchor, _ = model.anchor(s, s_logits, batch.sent_question, b)

    kept = [pruning.keep(probs[i].tolist()) for i in range(b)]
    width = max(len(x) for x in kept)
    kv = torch.zeros(b, width * l, cfg.d, dtype=h.dtype)
    kv_mask = torch.zeros(b, width * l, dtype=torch.bool)
    for i, idx in enumerate(kept):
        n = len(idx)
        kv[i, : n * l] = h[i, idx].reshape(n * l, -1)
        kv_mask[i, : n * l] = batch.mask[i, idx].reshape(n * l)

    prefix = torch.full((b, 1), BOS_ID, dtype=torch.long)
    done = torch.zeros(b, dtype=torch.bool)
    attn = torch.zeros(b, width, dtype=h.dtype)
    step_weights = []
    for _ in range(cfg.max_target_len):
        logits, weights = model.decode(kv, kv_mask, prefix, anchor)
        w = torch.stack([wl[:, :, -1, :] for wl in weights], dim=1)  # [B, layers, H, M]
        step_weights.append(w)
        live = (~done).to(h.dtype)
        attn += w.sum(dim=(1, 2)).view(b, width, l).sum(-1) * live[:, None]
        nxt = logits[:, -1].argmax(-1)
        nxt = torch.where(done, torch.full_like(nxt, PAD_ID), nxt)
        prefix = torch.cat([prefix, nxt[:, None]], dim=1)
        done |= nxt == EOS_ID
        if bool(done.all()):
            break

    cross = torch.zeros(b, k, dtype=h.dtype)
    tokens = []
    for i in range(b):
        cross[i, kept[i]] = attn[i, : len(kept[i])]
        seq = []
        for t in prefix[i, 1:].tolist():
            if t in (EOS_ID, PAD_ID):
                break
            seq.append(t)
        tokens.append(seq)
    return Generation(tokens=tokens, kept=kept, passage_probs=probs, cross_attention=cross, step_weights=step_weights)


# ---------------------------------------------------------------------------
# single-question view


@dataclass
class EncoderOutput:
    h: Tensor  # [L, d]
    valid_len: int

    @property
    def mask(self) -> Tensor:
        return torch.arange(self.h.shape[0]) < self.valid_len


@dataclass
class ConcatMatrix:
    v: Tensor  # [(K_hat * L), d]
    mask: Tensor  # [(K_hat * L)] bool
    block_len: int
    kept: list[int]

    def block(self, i: int) -> Tensor:
        """Rows of the ``i``-th stored block (position in ``kept``)."""
        return self.v[i * self.block_len : (i + 1) * self.block_len]


@dataclass
class PassageScores:
    embeddings: Tensor  # [K, d]
    logits: Tensor  # [K]
    probs: Tensor  # [K]


@dataclass
class AnchorVector:
    vector: Tensor  # [d]
    source: Tensor  # [n, d] pooled sentence embeddings
    empty: bool


def encode_pair(model: MGFiD, question_ids: Sequence[int], passage_ids: Sequence[int]) -> EncoderOutput:
    from .corpus import encode_pair as layout

    ids, n = layout(question_ids, passage_ids, model.cfg.max_len)
    ids_t = torch.as_tensor(ids)[None]
    mask = torch.arange(model.cfg.max_len)[None] < n
    return EncoderOutput(h=model.encode(ids_t, mask)[0], valid_len=n)


def concat_encodings(outputs: Sequence[EncoderOutput]) -> ConcatMatrix:
    if not outputs:
        raise ValueError("concat_encodings: no encoder outputs")
    v = nx.concat([o.h for o in outputs], axis=0)
    mask = torch.cat([o.mask for o in outputs])
    return ConcatMatrix(v=v, mask=mask, block_len=outputs[0].h.shape[0], kept=list(range(len(outputs))))


def passage_probabilities(model: MGFiD, outputs: Sequence[EncoderOutput]) -> PassageScores:
    if not outputs:
        raise ValueError("passage_probabilities: K = 0")
    h0 = torch.stack([o.h[0] for o in outputs])
    e = h0 @ model.w_p
    logits = (e @ model.w_r.T).squeeze(-1)
    return PassageScores(embeddings=e, logits=logits, probs=nx.softmax(logits, axis=-1))


def sentence_logits(
    model: MGFiD, output: EncoderOutput, spans: Sequence[tuple[int, int]]
) -> tuple[Tensor, Tensor]:
    """Sentence embeddings [N, d] and their 2-way logits [N, 2]."""
    rows = []
    proj = output.h @ model.w_p
    for a, b in spans:
        if not 0 <= a <= b < output.valid_len:
            raise IndexError(f"span ({a}, {b}) outside valid length {output.valid_len}")
        rows.append(nx.mean_rows(proj, a, b + 1))
    s = torch.stack(rows) if rows else proj.new_zeros(0, proj.shape[-1])
    return s, s @ model.w_s


def build_anchor(embeddings: Tensor, logits: Tensor) -> AnchorVector:
    positive = logits[:, 1] > logits[:, 0]
    source = embeddings[positive]
    if source.shape[0] == 0:
        return AnchorVector(vector=embeddings.new_zeros(embeddings.shape[-1]), source=source, empty=True)
    return AnchorVector(vector=nx.max_pool(source), source=source, empty=False)


def prune(v: ConcatMatrix, scores: PassageScores, tau: float | str | Pruning) -> ConcatMatrix:
    pruning = Pruning.parse(tau)
    if len(v.kept) != scores.probs.shape[0]:
        raise nx.ShapeError(f"prune: {len(v.kept)} blocks but {scores.probs.shape[0]} scores")
    keep = pruning.keep(scores.probs.tolist())
    l = v.block_len
    rows = torch.cat([torch.arange(i * l, (i + 1) * l) for i in keep])
    return ConcatMatrix(v=v.v[rows], mask=v.mask[rows], block_len=l, kept=[v.kept[i] for i in keep])


def decode(model: MGFiD, kv: ConcatMatrix, anchor: AnchorVector | Tensor | None, prefix: Sequence[int]) -> Tensor:
    """Logit rows [T, V] for one question."""
    if len(prefix) == 0:
        raise ValueError("decode: empty target prefix")
    if prefix[0] != BOS_ID:
        raise ValueError("decode: prefix must start with BOS")
    a = anchor.vector if isinstance(anchor, AnchorVector) else anchor
    logits, _ = model.decode(
        kv.v[None], kv.mask[None], torch.as_tensor(list(prefix))[None], None if a is None else a[None]
    )
    return logits[0]


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"MGFIDCKP"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, model: MGFiD, extra: dict[str, str] | None = None) -> None:
    """Header (format version, config, parameter table) then little-endian float32 arrays."""
    params = list(model.named_parameters())
    lines = [f"format_version={FORMAT_VERSION}"]
    lines += [f"config.{k}={v}" for k, v in model.cfg.to_json().items()]
    for k, v in (extra or {}).items():
        lines.append(f"meta.{k}={v}")
    lines += [f"param.{i}={n}:{','.join(map(str, p.shape))}" for i, (n, p) in enumerate(params)]
    header = "\n".join(lines).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        f.write(header)
        for _, p in params:
            f.write(p.detach().cpu().numpy().astype("<f4").tobytes())


def read_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray], dict[str, str]]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<II", data, off)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    off += 8
    header = data[off : off + hlen].decode("utf-8").splitlines()
    off += hlen
    cfg, meta, table = {}, {}, []
    for line in header:
        key, _, val = line.partition("=")
        if key.startswith("config."):
            cfg[key[7:]] = val
        elif key.startswith("meta."):
            meta[key[5:]] = val
        elif key.startswith("param."):
            name, _, shape = val.partition(":")
            table.append((int(key[6:]), name, tuple(int(s) for s in shape.split(",") if s)))
    arrays = {}
    for _, name, shape in sorted(table):
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).copy()
        off += 4 * n
    if off != len(data):
        raise ValueError(f"{path}: trailing or missing parameter bytes")
    return ModelConfig.from_json(cfg), arrays, meta


def load_checkpoint(path: str | Path) -> MGFiD:
    cfg, arrays, _ = read_checkpoint(path)
    model = MGFiD(cfg)
    own = dict(model.named_parameters())
    if set(own) != set(arrays):
        raise ValueError(f"{path}: parameter set does not match the model layout")
    with torch.no_grad():
        for name, p in own.items():
            p.copy_(torch.from_numpy(arrays[name]))
    return model
