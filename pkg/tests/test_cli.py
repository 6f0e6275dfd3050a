import csv
import json
import subprocess
import sys

import pytest

from mgfid import cli
from mgfid.corpus import load_dataset

SMALL = ["--model-d", "16", "--model-n-heads", "2", "--model-d-ff", "32", "--model-n-encoder-layers", "1", "--model-n-decoder-layers", "1"]
FAST = ["--batch-size", "8", "--accumulation-steps", "1", "--total-steps", "4", "--eval-interval", "2", "--lr", "1e-3"] + SMALL


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("gen-data", "--out", out, "--n-train", 40, "--n-dev", 16, "--corpus-seed", 3) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("run")
    assert run("train", "--train", data_dir / "train.json", "--dev", data_dir / "dev.json", "--run-dir", out, *FAST) == 0
    return out


def test_gen_data_outputs_and_manifest(data_dir):
    assert len(load_dataset(data_dir / "train.json")) == 40
    assert len(load_dataset(data_dir / "dev.json")) == 16
    m = json.loads((data_dir / "manifest.json").read_text())
    assert m["command"] == "gen-data" and m["seed"] == 3
    assert set(m["outputs"]) == {"train.json", "dev.json", "vocab.json", "corpus.json"}
    assert m["config_hash"] == cli.config_hash(m["config"])


def test_gen_data_is_reproducible(tmp_path, data_dir):
    assert run("gen-data", "--out", tmp_path, "--n-train", 40, "--n-dev", 16, "--corpus-seed", 3) == 0
    for name in ("train.json", "dev.json", "vocab.json"):
        assert (tmp_path / name).read_bytes() == (data_dir / name).read_bytes()


def test_label_with_oracle_recovers_labels(tmp_path, data_dir):
    raw = tmp_path / "raw"
    assert run("gen-data", "--out", raw, "--n-train", 40, "--n-dev", 16, "--corpus-seed", 3, "--unlabeled") == 0
    assert not load_dataset(raw / "train.json")[0].labeled
    assert run("label", "--data", raw / "train.json", "--out", tmp_path / "lab" / "train.json") == 0
    assert load_dataset(tmp_path / "lab" / "train.json") == load_dataset(data_dir / "train.json")
    with open(tmp_path / "lab" / "train.filtering.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["rank"] for r in rows] == ["1", "2", "3", "4"]
    assert json.loads((tmp_path / "lab" / "manifest.json").read_text())["command"] == "label"


def test_train_writes_run_dir(run_dir):
    for name in ("config.json", "metrics.jsonl", "last.ckpt", "best.ckpt", "run_record.json", "vocab.json", "manifest.json"):
        assert (run_dir / name).is_file(), name
    cfg = json.loads((run_dir / "config.json").read_text())
    assert cfg["total_steps"] == 4 and cfg["model"]["d"] == 16


def test_eval_and_pruned_eval(tmp_path, run_dir, data_dir, capsys):
    assert run("eval", "--checkpoint", run_dir / "best.ckpt", "--data", data_dir / "dev.json", "--out", tmp_path / "full.json") == 0
    full = json.loads((tmp_path / "full.json").read_text())
    assert full["avg_passages"] == 4.0 and 0.0 <= full["em"] <= 1.0
    assert run("eval", "--checkpoint", run_dir / "best.ckpt", "--data", data_dir / "dev.json", "--out", tmp_path / "p.json", "--tau", "top-1", "--predictions", tmp_path / "pred.txt") == 0
    assert json.loads((tmp_path / "p.json").read_text())["avg_passages"] == 1.0
    assert len((tmp_path / "pred.txt").read_text().splitlines()) == 16


def test_sweep_tau_csv(tmp_path, run_dir, data_dir):
    out = tmp_path / "sweep.csv"
    assert run("sweep-tau", "--checkpoint", run_dir / "best.ckpt", "--data", data_dir / "dev.json", "--out", out, "--grid", "0,0.1,0.3,0.6") == 0
    with open(out) as f:
        rows = list(csv.DictReader(f))
    kept = [float(r["avg_passages"]) for r in rows]
    assert [float(r["tau"]) for r in rows] == [0, 0.1, 0.3, 0.6]
    assert kept[0] == 4.0 and kept == sorted(kept, reverse=True) and kept[-1] >= 1.0


def test_zero_lambda_flags_reproduce_fid_checkpoint(tmp_path, data_dir):
    common = ["--train", data_dir / "train.json", "--dev", data_dir / "dev.json", *FAST]
    assert run("train", *common, "--run-dir", tmp_path / "fid", "--passage-loss", "off", "--no-sentence-loss", "--no-anchor") == 0
    assert run("train", *common, "--run-dir", tmp_path / "zero", "--lambda1", 0, "--lambda2", 0, "--no-anchor") == 0
    from mgfid.model import read_checkpoint

    _, a, _ = read_checkpoint(tmp_path / "fid" / "best.ckpt")
    _, b, _ = read_checkpoint(tmp_path / "zero" / "best.ckpt")
    assert a.keys() == b.keys() and all((a[k] == b[k]).all() for k in a)


def test_config_file_and_flag_override(tmp_path, data_dir):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"total_steps": 2, "eval_interval": 1, "weights": {"lambda2": 5.0}}))
    assert run("train", "--config", conf, "--train", data_dir / "train.json", "--dev", data_dir / "dev.json", "--run-dir", tmp_path / "r", *SMALL, "--batch-size", 8, "--accumulation-steps", 1, "--total-steps", 3) == 0
    cfg = json.loads((tmp_path / "r" / "config.json").read_text())
    assert cfg["total_steps"] == 3 and cfg["eval_interval"] == 1 and cfg["weights"]["lambda2"] == 5.0


def test_sweep_k_rows(tmp_path):
    out = tmp_path / "k"
    argv = ["sweep-k", "--ks", "2,3", "--out-dir", out, "--n-train", 16, "--n-dev", 8, *FAST]
    argv[argv.index("--batch-size") + 1] = "8"
    assert run(*argv) == 0
    with open(out / "sweep_k.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["k"] for r in rows] == ["2", "3"]
    assert (out / "k2" / "best.ckpt").is_file() and (out / "manifest.json").is_file()


def test_ablate_table(tmp_path, data_dir):
    out = tmp_path / "abl"
    assert run("ablate", "--train", data_dir / "train.json", "--dev", data_dir / "dev.json", "--out-dir", out, "--seeds", "0,1", "--variants", "fid,mgfid-top2", *FAST) == 0
    table = json.loads((out / "ablation.json").read_text())
    assert set(table) == {"fid", "mgfid-top2"}
    assert len(table["fid"]["em"]["per_seed"]) == 2
    assert table["mgfid-top2"]["avg_passages"]["mean"] == 2.0
    with open(out / "ablation.csv") as f:
        assert len(list(csv.DictReader(f))) == 2


# --- exit codes ------------------------------------------------------------


def test_usage_errors_exit_2(tmp_path, run_dir, data_dir):
    assert run("train") == 2
    assert run("nonsense") == 2
    assert run("train", "--train", data_dir / "train.json", "--dev", data_dir / "dev.json", "--run-dir", tmp_path, "--passage-loss", "hinge") == 2
    assert run("eval", "--checkpoint", run_dir / "best.ckpt", "--data", data_dir / "dev.json", "--out", tmp_path / "x.json", "--tau", "1.5") == 2
    assert run("ablate", "--train", data_dir / "train.json", "--dev", data_dir / "dev.json", "--out-dir", tmp_path, "--variants", "bogus") == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("gen-data", "--config", bad, "--out", tmp_path / "g") == 2


def test_data_errors_exit_3(tmp_path, data_dir):
    assert run("train", "--train", tmp_path / "missing.json", "--dev", data_dir / "dev.json", "--run-dir", tmp_path / "r") == 3
    broken = tmp_path / "broken.json"
    broken.write_text(json.dumps([{"question": "q", "ctxs": []}]))
    assert run("train", "--train", broken, "--dev", data_dir / "dev.json", "--vocab", data_dir / "vocab.json", "--run-dir", tmp_path / "r") == 3
    garbage = tmp_path / "g.ckpt"
    garbage.write_bytes(b"not a checkpoint")
    assert run("eval", "--checkpoint", garbage, "--data", data_dir / "dev.json", "--out", tmp_path / "o.json") == 3


def test_divergence_exits_4(tmp_path, data_dir, capsys):
    code = run("train", "--train", data_dir / "train.json", "--dev", data_dir / "dev.json", "--run-dir", tmp_path, *FAST, "--lr", "1e30", "--total-steps", 20)
    assert code == 4
    assert "diverged" in capsys.readouterr().err


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "mgfid", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("mgfid ")
