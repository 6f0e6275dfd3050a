"""Command-line entry point: gen-data, label, train, eval, sweep-tau, sweep-k, ablate.

Every command takes an optional JSON ``--config`` holding TrainConfig fields
(with nested ``model`` and ``weights``) plus an optional ``corpus`` section.
Flags mirror those fields one-to-one and override the file. Each command
writes ``manifest.json`` next to its outputs.

Exit codes: 0 success, 2 usage error, 3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import torch

from . import __version__
from . import labeling as lab
from .corpus import CorpusSpec, DatasetError, Vocabulary, generate_corpus, load_dataset, save_dataset
from .evaluation import aggregate, evaluate
from .losses import LossWeights
from .model import ModelConfig, Pruning, load_checkpoint, read_checkpoint
from .trainer import ABLATION_VARIANTS, TrainConfig, TrainingDiverged, ablation_matrix, train

log = logging.getLogger("mgfid")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

DEFAULT_TAU_GRID = tuple(round(0.01 * i, 2) for i in range(11))


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config <-> flags

_TRAIN_SKIP = {"model", "weights"}
_MODEL_SKIP = {"vocab_size"}  # always taken from the vocabulary
_CORPUS_SKIP = {"n_questions", "fractions"}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _field_type(f: dataclasses.Field):
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    t = t.replace(" ", "")
    if t == "bool":
        return "bool"
    if t in ("int", "float", "str"):
        return {"int": int, "float": float, "str": str}[t]
    if t == "bool|None":
        return "bool"
    if "float" in t and "str" in t:
        return str
    return str


def _add_dataclass_flags(p: argparse.ArgumentParser, cls, prefix: str, skip: set[str], dest_prefix: str) -> None:
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        kind = _field_type(f)
        dest = f"{dest_prefix}{f.name}"
        if kind == "bool":
            p.add_argument(_flag(prefix + f.name), dest=dest, action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(_flag(prefix + f.name), dest=dest, type=kind, default=None, metavar=kind.__name__.upper())


def add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    _add_dataclass_flags(g, TrainConfig, "", _TRAIN_SKIP, "t.")
    _add_dataclass_flags(g, LossWeights, "", set(), "w.")
    _add_dataclass_flags(g, ModelConfig, "model_", _MODEL_SKIP, "m.")


def add_corpus_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("corpus")
    _add_dataclass_flags(g, CorpusSpec, "corpus_", _CORPUS_SKIP, "c.")
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-dev", type=int, default=500)


def read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise DatasetError(f"cannot read config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config {path}: top level must be an object")
    return data


def _overrides(args: argparse.Namespace, prefix: str) -> dict:
    return {k[len(prefix) :]: v for k, v in vars(args).items() if k.startswith(prefix) and v is not None}


def resolve_train_config(args: argparse.Namespace, file_cfg: dict) -> TrainConfig:
    data = {k: v for k, v in file_cfg.items() if k != "corpus"}
    data["model"] = {**data.get("model", {}), **_overrides(args, "m.")}
    data["weights"] = {**data.get("weights", {}), **_overrides(args, "w.")}
    data.update(_overrides(args, "t."))
    try:
        return TrainConfig.from_json(data)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad training config: {e}") from None


def resolve_corpus_spec(args: argparse.Namespace, file_cfg: dict, n_questions: int) -> CorpusSpec:
    data = {**file_cfg.get("corpus", {}), **_overrides(args, "c.")}
    data.pop("n_questions", None)
    try:
        return CorpusSpec(n_questions=n_questions, **data)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad corpus config: {e}") from None


def fit_to_data(cfg: TrainConfig, vocab: Vocabulary, k: int) -> TrainConfig:
    """Vocabulary size and passage count come from the data, not the config."""
    model = ModelConfig.from_json({**cfg.model.to_json(), "vocab_size": len(vocab), "k": k})
    return dataclasses.replace(cfg, model=model)


# ---------------------------------------------------------------------------
# io helpers


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_manifest(out_dir: Path, command: str, argv: Sequence[str], config: dict, seed: int | None, outputs: Sequence[str]):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "version": __version__,
        "torch": torch.__version__,
        "outputs": sorted(outputs),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def vocab_for(data_path: str, vocab_path: str | None) -> Vocabulary:
    path = Path(vocab_path) if vocab_path else Path(data_path).parent / "vocab.json"
    try:
        return Vocabulary.from_json(json.loads(path.read_text(encoding="utf-8")))
    except OSError:
        raise DatasetError(f"cannot read vocabulary {path}; pass --vocab") from None
    except (json.JSONDecodeError, TypeError, ValueError) as e:
        raise DatasetError(f"bad vocabulary file {path}: {e}") from None


def load(path: str, k: int | None = None):
    if not Path(path).is_file():
        raise DatasetError(f"no such file: {path}")
    return load_dataset(path, k)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _k_of(examples) -> int:
    ks = {len(ex.passages) for ex in examples}
    if len(ks) != 1:
        raise DatasetError(f"examples have differing passage counts {sorted(ks)}")
    return ks.pop()


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, file_cfg) -> dict:
    spec = resolve_corpus_spec(args, file_cfg, args.n_train + args.n_dev)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_corpus(spec)
    train_set, dev_set = data[: args.n_train], data[args.n_train :]
    if args.unlabeled:
        train_set, dev_set = lab.strip_labels(train_set), lab.strip_labels(dev_set)
    save_dataset(out / "train.json", train_set)
    save_dataset(out / "dev.json", dev_set)
    (out / "vocab.json").write_text(json.dumps(spec.vocabulary().to_json()))
    (out / "corpus.json").write_text(json.dumps(spec.to_json(), indent=2, sort_keys=True))
    cfg = {"corpus": spec.to_json(), "n_train": args.n_train, "n_dev": args.n_dev, "unlabeled": args.unlabeled}
    write_manifest(out, "gen-data", args.argv, cfg, spec.seed, ["train.json", "dev.json", "vocab.json", "corpus.json"])
    return {"train": len(train_set), "dev": len(dev_set), "out": str(out)}


def make_client(name: str, template: str):
    if name == "oracle":
        return lab.OracleClient(template)
    if name == "http":
        return lab.HTTPJudgmentClient()
    if name == "accept-all":
        return lab.RuleClient(lambda req: True, template)
    if name == "reject-all":
        return lab.RuleClient(lambda req: False, template)
    raise UsageError(f"unknown client {name!r}")


def cmd_label(args, file_cfg) -> dict:
    examples = load(args.data)
    template = lab.DEFAULT_TEMPLATE
    if args.template:
        try:
            template = Path(args.template).read_text(encoding="utf-8")
        except OSError as e:
            raise DatasetError(f"cannot read template {args.template}: {e.strerror}") from None
    client = make_client(args.client, template)
    report = lab.LabelingReport()
    labeled = lab.label_passages(examples, client, template, args.max_answers, max_workers=args.workers, report=report)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, labeled)
    rows = lab.filtering_rate_by_rank(labeled)
    csv_path = out.with_name(out.stem + ".filtering.csv")
    lab.write_filtering_csv(csv_path, rows)
    cfg = {"client": args.client, "template_hash": config_hash(template), "max_answers": args.max_answers}
    write_manifest(out.parent, "label", args.argv, cfg, None, [out.name, csv_path.name])
    return {
        "calls": report.calls,
        "cache_hits": report.cache_hits,
        "skipped_no_span": report.skipped_no_span,
        "failures": len(report.failures),
    }


def cmd_train(args, file_cfg) -> dict:
    train_set, dev_set = load(args.train), load(args.dev)
    vocab = vocab_for(args.train, args.vocab)
    cfg = fit_to_data(resolve_train_config(args, file_cfg), vocab, _k_of(train_set))
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "vocab.json").write_text(json.dumps(vocab.to_json()))
    record = train(cfg, train_set, dev_set, vocab, run_dir)
    write_manifest(
        run_dir,
        "train",
        args.argv,
        cfg.to_json(),
        cfg.seed,
        ["config.json", "metrics.jsonl", "last.ckpt", "best.ckpt", "run_record.json", "vocab.json"],
    )
    return {"best_step": record.best_step, "best_em": record.best_em, "checkpoint": str(record.best_checkpoint)}


def _checkpoint_vocab(args) -> Vocabulary:
    if args.vocab:
        return vocab_for(args.data, args.vocab)
    beside = Path(args.checkpoint).parent / "vocab.json"
    return vocab_for(args.data, str(beside) if beside.is_file() else None)


def _load_model(args):
    """Model plus the anchor setting: the flag if given, else what the run trained with."""
    path = args.checkpoint
    if not Path(path).is_file():
        raise DatasetError(f"no such checkpoint: {path}")
    try:
        model = load_checkpoint(path)
        meta = read_checkpoint(path)[2]
    except ValueError as e:
        raise DatasetError(str(e)) from None
    anchor = args.anchor if args.anchor is not None else meta.get("anchor", "1") == "1"
    return model, anchor


def cmd_eval(args, file_cfg) -> dict:
    model, anchor = _load_model(args)
    examples = load(args.data, model.cfg.k)
    vocab = _checkpoint_vocab(args)
    report = evaluate(model, examples, vocab, tau=args.tau, use_anchor=anchor)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result = report.flat()
    out.write_text(json.dumps(result, indent=2, sort_keys=True))
    if args.predictions:
        Path(args.predictions).write_text("\n".join(report.predictions) + "\n")
    cfg = {"checkpoint": args.checkpoint, "data": args.data, "tau": args.tau, "anchor": anchor}
    write_manifest(out.parent, "eval", args.argv, cfg, None, [out.name])
    return result


def parse_grid(text: str | None) -> list:
    if text is None:
        return list(DEFAULT_TAU_GRID)
    items = []
    for tok in text.split(","):
        tok = tok.strip()
        try:
            setting = Pruning.parse(tok)
        except ValueError:
            raise UsageError(f"bad pruning setting {tok!r}: use a threshold in [0, 1] or top-N") from None
        items.append(setting.label() if setting.top_n is not None else setting.threshold)
    return items


def cmd_sweep_tau(args, file_cfg) -> dict:
    model, anchor = _load_model(args)
    examples = load(args.data, model.cfg.k)
    vocab = _checkpoint_vocab(args)
    grid = parse_grid(args.grid)
    rows = []
    for tau in grid:
        r = evaluate(model, examples, vocab, tau=tau, use_anchor=anchor)
        rows.append((tau, r.avg_passages, r.em))
        log.info("tau %s: %.3f passages, EM %.4f", tau, r.avg_passages, r.em)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, ("tau", "avg_passages", "em"), rows)
    cfg = {"checkpoint": args.checkpoint, "data": args.data, "grid": grid, "anchor": anchor}
    write_manifest(out.parent, "sweep-tau", args.argv, cfg, None, [out.name])
    return {"rows": [dict(zip(("tau", "avg_passages", "em"), r)) for r in rows]}


def _parse_ints(text: str, what: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--{what} must be a comma-separated list of integers") from None


def cmd_sweep_k(args, file_cfg) -> dict:
    ks = _parse_ints(args.ks, "ks")
    base = resolve_train_config(args, file_cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def cell(k: int):
        spec = dataclasses.replace(resolve_corpus_spec(args, file_cfg, args.n_train + args.n_dev), k=k)
        data = generate_corpus(spec)
        train_set, dev_set = data[: args.n_train], data[args.n_train :]
        vocab = spec.vocabulary()
        cfg = fit_to_data(base, vocab, k)
        record = train(cfg, train_set, dev_set, vocab, out / f"k{k}")
        r = evaluate(record.model, dev_set, vocab, tau=0.0, use_anchor=cfg.use_eval_anchor)
        return (k, r.em, (r.recall_reranker or {}).get(1))

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        rows = list(pool.map(cell, ks))
    write_csv(out / "sweep_k.csv", ("k", "em", "r@1"), rows)
    write_manifest(out, "sweep-k", args.argv, {"train": base.to_json(), "ks": ks}, base.seed, ["sweep_k.csv"])
    return {"rows": [dict(zip(("k", "em", "r@1"), r)) for r in rows]}


def cmd_ablate(args, file_cfg) -> dict:
    train_set, dev_set = load(args.train), load(args.dev)
    vocab = vocab_for(args.train, args.vocab)
    base = fit_to_data(resolve_train_config(args, file_cfg), vocab, _k_of(train_set))
    seeds = _parse_ints(args.seeds, "seeds")
    names = [v.name for v in ABLATION_VARIANTS]
    wanted = args.variants.split(",") if args.variants else names
    unknown = set(wanted) - set(names)
    if unknown:
        raise UsageError(f"unknown variants {sorted(unknown)}; choose from {names}")
    variants = [v for v in ABLATION_VARIANTS if v.name in wanted]
    out = Path(args.out_dir)
    rows = ablation_matrix(base, variants, train_set, dev_set, vocab, seeds, out / "runs", jobs=args.jobs)
    table = {name: aggregate(reports) for name, reports in rows.items()}
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True))
    metrics = ("em", "avg_passages", "r@1_reranker", "r@1_cross_attention", "sentence_auc")
    csv_rows = []
    for name, agg in table.items():
        row = [name]
        for m in metrics:
            row += [agg[m]["mean"], agg[m]["std"]] if m in agg else ["", ""]
        csv_rows.append(row)
    header = ["variant"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")]
    write_csv(out / "ablation.csv", header, csv_rows)
    write_manifest(out, "ablate", args.argv, {"train": base.to_json(), "seeds": seeds, "variants": wanted}, base.seed, ["ablation.json", "ablation.csv"])
    return {name: {m: agg[m]["mean"] for m in metrics if m in agg} for name, agg in table.items()}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mgfid", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config; flags override its values")
        return sp

    sp = command("gen-data", "generate a synthetic train/dev corpus")
    add_corpus_flags(sp)
    sp.add_argument("--unlabeled", action="store_true", help="drop evidence labels (to run `label` afterwards)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_gen_data)

    sp = command("label", "attach evidence labels using a judgment client")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="labeled dataset path")
    sp.add_argument("--client", default="oracle", choices=("oracle", "http", "accept-all", "reject-all"))
    sp.add_argument("--template", help="prompt template file")
    sp.add_argument("--max-answers", type=int, default=10)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_label)

    sp = command("train", "train one model and keep the best dev checkpoint")
    sp.add_argument("--train", required=True)
    sp.add_argument("--dev", required=True)
    sp.add_argument("--vocab", help="vocabulary file (default: vocab.json beside --train)")
    sp.add_argument("--run-dir", required=True)
    add_train_flags(sp)
    sp.set_defaults(func=cmd_train)

    for name, help_, func in (
        ("eval", "evaluate a checkpoint on a dataset", cmd_eval),
        ("sweep-tau", "EM and kept passages across pruning thresholds", cmd_sweep_tau),
    ):
        sp = command(name, help_)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--vocab")
        sp.add_argument("--anchor", action=argparse.BooleanOptionalAction, default=None, help="default: as trained")
        sp.add_argument("--out", required=True)
        if name == "eval":
            sp.add_argument("--tau", default=0.0, help="threshold in [0, 1] or top-N")
            sp.add_argument("--predictions", help="write one prediction per line")
        else:
            sp.add_argument("--grid", help="comma-separated thresholds (default 0.00..0.10 by 0.01)")
        sp.set_defaults(func=func)

    sp = command("sweep-k", "train and evaluate one model per passage count")
    sp.add_argument("--ks", default="2,4,8")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--jobs", type=int, default=1)
    add_corpus_flags(sp)
    add_train_flags(sp)
    sp.set_defaults(func=cmd_sweep_k)

    sp = command("ablate", "train every ablation variant over several seeds")
    sp.add_argument("--train", required=True)
    sp.add_argument("--dev", required=True)
    sp.add_argument("--vocab")
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--variants", help="comma-separated subset of variant names")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--jobs", type=int, default=1)
    add_train_flags(sp)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "eval":
            args.tau = parse_grid(str(args.tau))[0]
        file_cfg = read_config(args.config)
        result = args.func(args, file_cfg)
    except UsageError as e:
        print(f"mgfid: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        print(f"mgfid: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DatasetError, lab.JudgmentError, OSError) as e:
        print(f"mgfid: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps(result, indent=2, sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
