"""Multi-task training loop: batching, gradient accumulation, Adam, dev selection."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import losses as L
from . import numerics as nx
from .corpus import QAExample, Vocabulary, encode_example
from .evaluation import MetricReport, evaluate
from .model import MGFiD, ModelConfig, Pruning, collate, save_checkpoint

log = logging.getLogger(__name__)

PASSAGE_LOSSES = ("off", "listwise", "pointwise")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good: Path | None):
        self.step = step
        self.last_good = last_good
        super().__init__(f"loss became non-finite at step {step}; last good checkpoint: {last_good}")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    batch_size: int = 2
    accumulation_steps: int = 16
    total_steps: int = 2000  # optimizer updates
    eval_interval: int = 200
    lr: float = 1e-4
    seed: int = 0
    passage_loss: str = "listwise"
    sentence_loss: bool = True
    anchor: bool = True
    anchor_warmup_steps: int = 0  # updates before the anchor is injected
    eval_anchor: bool | None = None  # defaults to ``anchor``
    eval_tau: float = 0.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.passage_loss not in PASSAGE_LOSSES:
            raise ValueError(f"passage_loss must be one of {PASSAGE_LOSSES}")
        for name in ("batch_size", "accumulation_steps", "total_steps", "eval_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    @property
    def use_eval_anchor(self) -> bool:
        return self.anchor if self.eval_anchor is None else self.eval_anchor

    def to_json(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_json() if hasattr(v, "to_json") else v
        return out

    @classmethod
    def from_json(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        model = ModelConfig.from_json(data.pop("model", {}))
        weights = L.LossWeights(**data.pop("weights", {}))
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(model=model, weights=weights, **data)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Snapshot:
    step: int
    loss: float
    metrics: dict[str, float]


@dataclass
class RunRecord:
    snapshots: list[Snapshot] = field(default_factory=list)
    best_step: int | None = None
    best_em: float = -1.0
    best_checkpoint: Path | None = None
    model: MGFiD | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        return {
            "snapshots": [s.__dict__ for s in self.snapshots],
            "best_step": self.best_step,
            "best_em": self.best_em,
            "best_checkpoint": None if self.best_checkpoint is None else str(self.best_checkpoint),
        }


@dataclass
class StepLosses:
    total: torch.Tensor
    gen: torch.Tensor
    passage: torch.Tensor
    sentence: torch.Tensor


def compute_losses(model: MGFiD, batch, cfg: TrainConfig, use_anchor: bool) -> StepLosses:
    out = model(batch, use_anchor=use_anchor)
    zero = out.gen_logits.sum() * 0.0
    l_gen = L.generation_loss(out.gen_logits, batch.targets)
    l_pass = zero
    if cfg.passage_loss == "listwise":
        l_pass = L.listwise_passage_loss(out.passage_logits, batch.positives)
    elif cfg.passage_loss == "pointwise":
        l_pass = L.pointwise_passage_loss(out.passage_logits, batch.positives)
    l_sent = L.sentence_loss(out.sentence_logits, batch.sent_labels, cfg.weights.alpha, cfg.weights.gamma) if cfg.sentence_loss else zero
    w = cfg.weights
    lam1 = w.lambda1 if cfg.passage_loss != "off" else 0.0
    lam2 = w.lambda2 if cfg.sentence_loss else 0.0
    total = l_gen + lam1 * l_pass + lam2 * l_sent if (lam1 or lam2) else l_gen
    return StepLosses(total=total, gen=l_gen, passage=l_pass, sentence=l_sent)


def _meta(cfg: TrainConfig, step: int) -> dict[str, str]:
    return {"step": str(step), "anchor": str(int(cfg.use_eval_anchor)), "config_digest": cfg.digest()}


def build_model(cfg: TrainConfig) -> MGFiD:
    model = MGFiD(cfg.model, seed=cfg.seed)
    if cfg.dtype == "float64":
        model = model.double()
    return model


class Trainer:
    """Owns the model, optimizer state and data order for one run."""

    def __init__(self, cfg: TrainConfig, vocab: Vocabulary, model: MGFiD | None = None):
        self.cfg = cfg
        self.vocab = vocab
        self.model = model if model is not None else build_model(cfg)
        self.params = dict(self.model.named_parameters())
        self.adam = nx.AdamState(lr=cfg.lr)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0

    def encode(self, examples: Sequence[QAExample]):
        m = self.cfg.model
        return [encode_example(ex, self.vocab, m.max_len, m.max_target_len) for ex in examples]

    def update(self, micro_batches) -> tuple[float, StepLosses]:
        """One optimizer update from already collated micro-batches."""
        grads = nx.zeros_like_all(self.params)
        use_anchor = self.cfg.anchor and self.step >= self.cfg.anchor_warmup_steps
        total = 0.0
        last = None
        for batch in micro_batches:
            last = compute_losses(self.model, batch, self.cfg, use_anchor)
            if not torch.isfinite(last.total):
                raise FloatingPointError("non-finite loss")
            nx.accumulate(grads, nx.gradient(last.total, self.params), 1.0 / len(micro_batches))
            total += float(last.total.detach()) / len(micro_batches)
        if not nx.all_finite(grads.values()):
            raise FloatingPointError("non-finite gradient")
        nx.adam_step(self.adam, self.params, grads)
        self.step += 1
        return total, last

    def batches(self, encoded):
        """Endless stream of micro-batch groups, reshuffled every epoch."""
        per_update = self.cfg.batch_size * self.cfg.accumulation_steps
        while True:
            order = self.rng.permutation(len(encoded))
            for start in range(0, len(order) - per_update + 1, per_update):
                idx = order[start : start + per_update]
                yield [
                    collate([encoded[i] for i in idx[j : j + self.cfg.batch_size]])
                    for j in range(0, per_update, self.cfg.batch_size)
                ]


def train(
    cfg: TrainConfig,
    train_set: Sequence[QAExample],
    dev_set: Sequence[QAExample],
    vocab: Vocabulary,
    run_dir: str | Path | None = None,
) -> RunRecord:
    """Train, evaluate on dev every ``eval_interval`` updates, keep the best-EM model.

    With ``run_dir`` set, writes config.json, metrics.jsonl, last.ckpt and
    best.ckpt there.
    """
    if len(train_set) < cfg.batch_size * cfg.accumulation_steps:
        raise ValueError("training set smaller than one update")
    if (cfg.passage_loss != "off" or cfg.sentence_loss) and not all(ex.labeled for ex in train_set):
        raise ValueError("passage/sentence losses need a labeled training set")
    torch.manual_seed(cfg.seed)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True))
        (run_dir / "metrics.jsonl").write_text("")
    trainer = Trainer(cfg, vocab)
    encoded = trainer.encode(train_set)
    stream = trainer.batches(encoded)
    record = RunRecord()
    best_state = None
    last_good = None
    running = []
    for _ in range(cfg.total_steps):
        try:
            loss, _ = trainer.update(next(stream))
        except FloatingPointError:
            raise TrainingDiverged(trainer.step + 1, last_good) from None
        running.append(loss)
        if trainer.step % cfg.eval_interval == 0 or trainer.step == cfg.total_steps:
            report = evaluate(trainer.model, dev_set, vocab, tau=cfg.eval_tau, use_anchor=cfg.use_eval_anchor)
            snap = Snapshot(step=trainer.step, loss=float(np.mean(running)), metrics=report.flat())
            running = []
            record.snapshots.append(snap)
            log.info("step %d loss %.4f %s", snap.step, snap.loss, snap.metrics)
            if run_dir is not None:
                with open(run_dir / "metrics.jsonl", "a") as f:
                    f.write(json.dumps(snap.__dict__, sort_keys=True) + "\n")
                last_good = run_dir / "last.ckpt"
                save_checkpoint(last_good, trainer.model, _meta(cfg, trainer.step))
            if report.em > record.best_em:
                record.best_em = report.em
                record.best_step = trainer.step
                best_state = copy.deepcopy(trainer.model.state_dict())
                if run_dir is not None:
                    record.best_checkpoint = run_dir / "best.ckpt"
                    save_checkpoint(record.best_checkpoint, trainer.model, _meta(cfg, trainer.step))
    trainer.model.load_state_dict(best_state)
    record.model = trainer.model
    if run_dir is not None:
        (run_dir / "run_record.json").write_text(json.dumps(record.to_json(), indent=2))
    return record


# ---------------------------------------------------------------------------
# ablations


@dataclass(frozen=True)
class Variant:
    name: str
    passage_loss: str = "listwise"
    sentence_loss: bool = True
    anchor: bool = True
    tau: float | str = 0.0


ABLATION_VARIANTS = (
    Variant("mgfid-pruned", "listwise", True, True, 0.05),
    Variant("mgfid-top2", "listwise", True, True, "top-2"),
    Variant("mgfid", "listwise", True, True, 0.0),
    Variant("listwise+sentence", "listwise", True, False, 0.0),
    Variant("sentence", "off", True, False, 0.0),
    Variant("listwise", "listwise", False, False, 0.0),
    Variant("pointwise", "pointwise", False, False, 0.0),
    Variant("fid", "off", False, False, 0.0),
)


def variant_config(base: TrainConfig, v: Variant, seed: int | None = None) -> TrainConfig:
    return replace(
        base,
        passage_loss=v.passage_loss,
        sentence_loss=v.sentence_loss,
        anchor=v.anchor,
        eval_anchor=None,
        seed=base.seed if seed is None else seed,
    )


def ablation_matrix(
    base: TrainConfig,
    variants: Sequence[Variant],
    train_set: Sequence[QAExample],
    dev_set: Sequence[QAExample],
    vocab: Vocabulary,
    seeds: Sequence[int] = (0,),
    run_dir: str | Path | None = None,
    jobs: int = 1,
) -> dict[str, list[MetricReport]]:
    """One row of dev reports (one per seed) for every variant.

    Variants that differ only in the pruning setting share a trained model.
    With ``jobs > 1`` distinct training runs go to a thread pool; results do
    not depend on scheduling because every run owns its model and RNG.
    """
    cells: dict[str, tuple[TrainConfig, Path | None]] = {}
    for v in variants:
        for seed in seeds:
            cfg = variant_config(base, v, seed)
            sub = None if run_dir is None else Path(run_dir) / f"{v.passage_loss}-s{int(v.sentence_loss)}-a{int(v.anchor)}-seed{seed}"
            cells.setdefault(cfg.digest(), (cfg, sub))

    def run(item):
        cfg, sub = item
        return train(cfg, train_set, dev_set, vocab, sub).model

    keys = list(cells)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        models = dict(zip(keys, pool.map(run, [cells[k] for k in keys])))
    rows: dict[str, list[MetricReport]] = {}
    for v in variants:
        rows[v.name] = [
            evaluate(models[variant_config(base, v, seed).digest()], dev_set, vocab, tau=v.tau, use_anchor=v.anchor)
            for seed in seeds
        ]
    return rows
