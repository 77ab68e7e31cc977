import json
import subprocess
import sys

import pytest
import yaml

from lowrank_nmt import harness
from lowrank_nmt.cli import main
from lowrank_nmt.training import read_metrics

TINY = ["--steps", "6", "--batch-size", "8"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["synth-data", "--vocab-size", "12", "--max-len", "5", "--count", "60", "--valid-count", "10",
                 "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "base"
    files = ["--train-src", str(corpus / "train.src"), "--train-tgt", str(corpus / "train.tgt"),
             "--valid-src", str(corpus / "valid.src"), "--valid-tgt", str(corpus / "valid.tgt")]
    assert main(["train", *TINY, *files, "--out", str(out)]) == 0
    return out


def test_synth_data_files(corpus):
    src = (corpus / "train.src").read_text().splitlines()
    tgt = (corpus / "train.tgt").read_text().splitlines()
    assert len(src) == len(tgt) == 60
    assert all(t.split() == s.split()[::-1] for s, t in zip(src, tgt))
    assert len((corpus / "valid.src").read_text().splitlines()) == 10


def test_train_writes_run_directory(trained):
    for name in ("config.yaml", "metrics.csv", "model.ckpt", "src.vocab", "tgt.vocab", "summary.json"):
        assert (trained / name).exists()
    cfg = yaml.safe_load((trained / "config.yaml").read_text())
    assert cfg["steps"] == 6 and cfg["batch_size"] == 8 and cfg["warmup"] == 400
    summary = json.loads((trained / "summary.json").read_text())
    assert summary["label"] == "None (baseline)" and summary["size_reduction"] == 0
    assert [r["step"] for r in read_metrics(trained / "metrics.csv")][-1] == 6


def test_config_file_and_flag_override(tmp_path):
    cfg = harness.ExperimentConfig(steps=4, batch_size=4, eval_every=2)
    cfg = harness.dataclasses.replace(cfg, task=harness.TaskConfig(vocab_size=10, max_len=4, train_count=30,
                                                                    valid_count=5))
    path = tmp_path / "exp.yaml"
    path.write_text(cfg.dump())
    out = tmp_path / "run"
    assert main(["train", "--config", str(path), "--steps", "3", "--out", str(out)]) == 0
    saved = yaml.safe_load((out / "config.yaml").read_text())
    assert saved["steps"] == 3 and saved["batch_size"] == 4 and saved["task"]["vocab_size"] == 10


@pytest.mark.parametrize("argv", [
    ["train", "--scheme", "attention"],
    ["train", "--preset", "nonexistent"],
    ["train", "--steps", "0"],
])
def test_configuration_errors_exit_2(argv, tmp_path, capsys):
    assert main([*argv, "--out", str(tmp_path / "x")]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_unknown_config_key(tmp_path):
    (tmp_path / "bad.yaml").write_text("stepz: 3\n")
    assert main(["train", "--config", str(tmp_path / "bad.yaml")]) == 2


@pytest.mark.parametrize("method,flags,reduced", [
    ("prune", ["--prune-fraction", "0.3"], True),
    ("svd", ["--rank", "8"], True),
    ("svd_then_prune", ["--rank", "8", "--prune-fraction", "0.2"], True),
])
def test_compress(trained, tmp_path, method, flags, reduced):
    out = tmp_path / method
    assert main(["compress", str(trained / "model.ckpt"), "--method", method, *flags, "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert (report["size_reduction"] > 0) == reduced
    assert "bleu_after" in report and "valid_ppl_before" in report
    assert (out / "model.ckpt").exists() and (out / "report.txt").exists()


@pytest.mark.parametrize("flags", [["--method", "svd"], ["--method", "prune", "--rank", "4",
                                                         "--prune-fraction", "0.1"]])
def test_compress_flag_errors(trained, tmp_path, flags):
    assert main(["compress", str(trained / "model.ckpt"), *flags, "--out", str(tmp_path / "c")]) == 2


def test_evaluate(trained, corpus, tmp_path, capsys):
    out = tmp_path / "hyp.txt"
    assert main(["evaluate", str(trained / "model.ckpt"), "--src", str(corpus / "valid.src"),
                 "--ref", str(corpus / "valid.tgt"), "--beam", "3", "--max-len", "8", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 10
    assert capsys.readouterr().out.startswith("BLEU ")


def test_spectrum(trained, tmp_path):
    out = tmp_path / "spec.csv"
    assert main(["spectrum", str(trained / "model.ckpt"), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("matrix,group") and len(lines) > 10


def test_report(trained, tmp_path, capsys):
    comp = tmp_path / "pruned"
    main(["compress", str(trained / "model.ckpt"), "--method", "prune", "--prune-fraction", "0.5",
          "--out", str(comp)])
    out = tmp_path / "report"
    with pytest.warns(UserWarning, match="no metrics.csv"):
        assert main(["report", str(trained), str(comp), "--out", str(out)]) == 0
    rows = harness.parse_report_csv((out / "report.csv").read_text())
    assert [r["compression_method"] for r in rows] == ["None (baseline)", "prune, pruned 50%"]
    assert rows[0]["size_reduction"] == 0 and rows[1]["size_reduction"] > 0
    assert (out / "curves.svg").read_text().lstrip().startswith("<?xml")
    assert "Size reduction" in capsys.readouterr().out


def test_report_csv_round_trip():
    rows = [{"compression_method": "a, b", "size_reduction": 12.5, "bleu": 30.25}]
    assert harness.parse_report_csv(harness.emit_report_csv(rows)) == rows


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "lowrank_nmt", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "synth-data" in res.stdout
