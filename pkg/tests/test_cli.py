import json
import os
import subprocess
import sys

import numpy as np
import pytest

from mmfusion import cli
from mmfusion.data import N_CLASSES, load_manifest
from mmfusion.model import ModelConfig
from mmfusion.tensor import Tensor

TINY = {"model": {"d_model": 8, "n_heads": 2, "n_levels": 1, "head_hidden": 8},
        "train": {"epochs": 1}}


def tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    assert cli.main(["gen-data", "--out", str(out), "--n", "100", "--seed", "3"]) == 0
    return out


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


# -- gen-data -------------------------------------------------------------------

def test_gen_data_same_seed_identical_trees(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["gen-data", "--out", str(tmp_path / name), "--seed", "7", "--n", "30"]) == 0
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a == b
    assert {"train.jsonl", "validation.jsonl", "test.jsonl", "corpus.txt", "vocab.txt"} <= set(a)
    assert any(k.startswith("images/") and k.endswith(".pgm") for k in a)


def test_gen_data_zero_examples(tmp_path):
    assert cli.main(["gen-data", "--out", str(tmp_path / "z"), "--n", "0"]) == 0
    for split in ("train", "validation", "test"):
        assert len(load_manifest(tmp_path / "z" / f"{split}.jsonl")) == 0


def test_gen_data_default_sizes(tmp_path):
    assert cli.main(["gen-data", "--out", str(tmp_path / "d")]) == 0
    sizes = [len(load_manifest(tmp_path / "d" / f"{s}.jsonl")) for s in ("train", "validation", "test")]
    assert sizes == [400, 12, 48]


def test_gen_data_bad_noise_rate(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path / "x"), "--noise-rate", "2"]) == 1
    assert not (tmp_path / "x").exists()


# -- train ----------------------------------------------------------------------

def test_train_parallel_r2_layout(tmp_path, dataset, tiny_config):
    out = tmp_path / "runs"
    code = cli.main(["train", "--config", str(tiny_config), "--data", str(dataset), "--out", str(out),
                     "--arch", "parallel", "--lora-r", "2"])
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == ["parallel_r2"]
    run = out / "parallel_r2"
    assert sorted(p.name for p in run.iterdir()) == ["best.mmfx", "config.resolved", "metrics.csv"]
    resolved = json.loads((run / "config.resolved").read_text())
    assert resolved["lora"]["r"] == 2 and resolved["model"]["fusion"] == "parallel"


def test_train_twice_identical_metrics(tmp_path, dataset, tiny_config):
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(tiny_config), "--data", str(dataset),
                         "--out", str(tmp_path / name), "--arch", "serial", "--seed", "4"]) == 0
    a = (tmp_path / "a" / "serial_r2" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "serial_r2" / "metrics.csv").read_bytes()


def test_train_mixed_r4_and_full(tmp_path, dataset, tiny_config):
    assert cli.main(["train", "--config", str(tiny_config), "--data", str(dataset), "--out", str(tmp_path),
                     "--arch", "mixed", "--lora-r", "4"]) == 0
    assert cli.main(["train", "--config", str(tiny_config), "--data", str(dataset), "--out", str(tmp_path),
                     "--arch", "mixed", "--no-lora"]) == 0
    assert {"mixed_r4", "mixed_full"} <= {p.name for p in tmp_path.iterdir()}


def test_train_missing_manifest_leaves_nothing(tmp_path, tiny_config):
    (tmp_path / "empty").mkdir()
    out = tmp_path / "runs"
    assert cli.main(["train", "--config", str(tiny_config), "--data", str(tmp_path / "empty"),
                     "--out", str(out)]) == 1
    assert not out.exists()


@pytest.mark.parametrize("argv", [
    ["--arch", "diagonal"],
    ["--lora-r", "0"],
    ["--lora-r", "2", "--no-lora"],
    ["--epochs", "-1"],
])
def test_train_validation_errors_exit_1(tmp_path, dataset, tiny_config, argv):
    out = tmp_path / "runs"
    code = cli.main(["train", "--config", str(tiny_config), "--data", str(dataset), "--out", str(out), *argv])
    assert code == 1
    assert not out.exists() or not any(out.iterdir())


def test_bad_model_config_reports_before_compute(tmp_path, dataset, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"model": {"d_model": 8, "n_heads": 3}, "train": {"batch_size": 0}}))
    assert cli.main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "n_heads=3" in err and "batch_size" in err


def test_runtime_failure_exit_2_without_partial_output(tmp_path, dataset, tiny_config, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr("mmfusion.runs.train_loop", boom)
    out = tmp_path / "runs"
    assert cli.main(["train", "--config", str(tiny_config), "--data", str(dataset), "--out", str(out)]) == 2
    assert list(out.iterdir()) == []


# -- eval -----------------------------------------------------------------------

def test_eval_twice_identical(tmp_path, dataset, tiny_config, capsys):
    cli.main(["train", "--config", str(tiny_config), "--data", str(dataset), "--out", str(tmp_path)])
    ckpt = tmp_path / "parallel_r2" / "best.mmfx"
    capsys.readouterr()
    outs = []
    for name in ("a.csv", "b.csv"):
        assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(dataset), "--out",
                         str(tmp_path / name)]) == 0
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1]
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = (tmp_path / "a.csv").read_text().splitlines()
    assert rows[0] == "class,auc" and len(rows) == 1 + N_CLASSES + 1 and rows[-1].startswith("mean,")
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(dataset / "test.jsonl")]) == 0
    assert (tmp_path / "parallel_r2" / "auc_test.csv").is_file()


class StubModel:
    def __init__(self, fn):
        self.fn = fn
        self.cfg = ModelConfig(text_seq_len=12, n_classes=N_CLASSES)

    def forward(self, token_ids, images, training=False, rng=None):
        return Tensor(np.stack([self.fn(img) for img in images]))


def _eval_with_stub(monkeypatch, tmp_path, dataset, model):
    from mmfusion.features import Tokenizer
    tok = Tokenizer.load(dataset / "vocab.txt")
    monkeypatch.setattr(cli, "load_checkpoint", lambda path: (model, tok, {}))
    ckpt = tmp_path / "stub.mmfx"
    ckpt.write_bytes(b"")
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(dataset)]) == 0
    return dict(line.split(",") for line in (tmp_path / "auc_test.csv").read_text().splitlines()[1:])


def test_eval_constant_stub(monkeypatch, tmp_path, dataset):
    table = _eval_with_stub(monkeypatch, tmp_path, dataset, StubModel(lambda img: np.full(N_CLASSES, 0.5)))
    assert all(v in ("", "0.500") for v in table.values())
    assert table["mean"] == "0.500"


def test_eval_oracle_stub(monkeypatch, tmp_path, dataset):
    test = load_manifest(dataset / "test.jsonl")
    labels = {ex.image.tobytes(): np.array(ex.labels, dtype=float) for ex in test}
    table = _eval_with_stub(monkeypatch, tmp_path, dataset, StubModel(lambda img: labels[img.tobytes()]))
    assert table["mean"] == "1.000"


def test_eval_missing_checkpoint(tmp_path, dataset):
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.mmfx"), "--data", str(dataset)]) == 1


def test_eval_corrupt_checkpoint(tmp_path, dataset):
    bad = tmp_path / "bad.mmfx"
    bad.write_bytes(b"NOPE")
    assert cli.main(["eval", "--checkpoint", str(bad), "--data", str(dataset)]) == 1


# -- verify ---------------------------------------------------------------------

def test_verify_report(tmp_path, capsys):
    assert cli.main(["verify", "--suite", "reduction_factor", "--suite", "auc_oracle",
                     "--out", str(tmp_path / "r.json")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["passed"]
    assert [s["name"] for s in report["suites"]] == ["reduction_factor", "auc_oracle"]
    assert all("max_error" in s for s in report["suites"])
    assert json.loads((tmp_path / "r.json").read_text()) == report


def test_verify_unknown_suite():
    assert cli.main(["verify", "--suite", "nope"]) == 1


def test_verify_fault_env_through_entry_point(tmp_path):
    env = dict(os.environ, MMFX_VERIFY_FAULT="param_parity")
    proc = subprocess.run([sys.executable, "-m", "mmfusion.cli", "verify", "--suite", "param_parity"],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 3
    assert json.loads(proc.stdout)["suites"][0]["passed"] is False
    env.pop("MMFX_VERIFY_FAULT")
    proc = subprocess.run([sys.executable, "-m", "mmfusion.cli", "verify", "--suite", "param_parity"],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0


def test_usage_errors_exit_1():
    assert cli.main([]) == 1
    assert cli.main(["gen-data"]) == 1
