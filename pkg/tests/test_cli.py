import json

import numpy as np
import pytest

from longmalconv.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_USAGE, main
from longmalconv.training import load_checkpoint, save_checkpoint

TINY_SPEC = {"task": "B", "n_samples": 24, "n_test": 8, "len_min": 5000, "len_max": 6000,
             "receptive_field": 256, "sep_min": 1024, "header_bytes": 512}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps(TINY_SPEC))
    assert main(["gen-data", "--spec", str(root / "spec.json"), "--out", str(root / "data")]) == 0
    assert main(["train", "--data", str(root / "data/train.csv"), "--test", str(root / "data/test.csv"),
                 "--epochs", "1", "--batch", "8", "--out", str(root / "run"), "--seed", "3"]) == 0
    return root


def test_train_outputs_and_manifest(workspace):
    run = workspace / "run"
    assert (run / "epoch_001.ckpt").is_file() and (run / "train_log.jsonl").is_file()
    man = json.loads((run / "manifest.json").read_text())
    assert man["command"] == "train" and man["seed"] == 3
    for key in ("build", "started", "finished", "outputs", "resolved_config"):
        assert key in man
    assert man["resolved_config"]["epochs"] == 1 and man["resolved_config"]["lr"] == 1e-3


def test_manifest_reproduces_run(workspace):
    out = workspace / "rerun"
    assert main(["train", "--config", str(workspace / "run/manifest.json"), "--out", str(out)]) == 0
    assert (out / "epoch_001.ckpt").read_bytes() == (workspace / "run/epoch_001.ckpt").read_bytes()


def test_flag_beats_config_file(workspace, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": str(workspace / "data/train.csv"), "epochs": 1, "lr": 0.5, "batch": 16}))
    assert main(["train", "--config", str(cfg), "--lr", "0.002", "--out", str(tmp_path / "o")]) == 0
    resolved = json.loads((tmp_path / "o/manifest.json").read_text())["resolved_config"]
    assert resolved["lr"] == 0.002 and resolved["batch"] == 16 and resolved["weight_decay"] == 1e-2


def test_eval_and_predict(workspace, capsys, tmp_path):
    ck = str(workspace / "run/epoch_001.ckpt")
    assert main(["eval", "--data", str(workspace / "data/test.csv"), "--ckpt", ck, "--out", str(tmp_path)]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(summary) == {"accuracy", "auc", "n"} and summary["n"] == 8
    assert (tmp_path / "scores.tsv").read_text().startswith("path\tlabel\tscore")

    zero = tmp_path / "zero.bin"
    zero.write_bytes(bytes(1024))
    scores = []
    for _ in range(2):
        assert main(["predict", "--ckpt", ck, str(zero)]) == 0
        scores.append(capsys.readouterr().out.strip().splitlines()[-1])
    assert scores[0] == scores[1] and scores[0].startswith(str(zero))


def test_explain_lists_every_channel(workspace, tmp_path):
    ck = str(workspace / "run/epoch_001.ckpt")
    sample = next((workspace / "data/samples").iterdir())
    assert main(["explain", "--ckpt", ck, str(sample), "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "explain.tsv").read_text().splitlines()
    assert len(rows) == 1 + load_checkpoint(ck).config.channels
    assert "post_gate" in rows[0]
    assert (tmp_path / "explain.png").stat().st_size > 1000
    counts = [int(l.split("\t")[2]) for l in (tmp_path / "regions.tsv").read_text().splitlines()[1:]]
    assert sum(counts) == len(rows) - 1


def test_usage_errors(tmp_path, workspace):
    with pytest.raises(SystemExit) as e:
        main(["train", "--model", "resnet"])
    assert e.value.code == EXIT_USAGE
    assert main(["train"]) == EXIT_USAGE
    assert main(["train", "--data", str(workspace / "data/train.csv"), "--channels", "8"]) == EXIT_USAGE
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == EXIT_USAGE


def test_data_errors(tmp_path, workspace):
    assert main(["eval", "--data", str(workspace / "data/test.csv"), "--ckpt", str(tmp_path / "x")]) == EXIT_DATA
    assert main(["train", "--data", str(tmp_path / "none.csv")]) == EXIT_DATA
    assert main(["predict", "--ckpt", str(workspace / "run/epoch_001.ckpt"), str(tmp_path / "no.bin")]) == EXIT_DATA


def test_nan_weights_exit_numeric(tmp_path, workspace):
    ck = load_checkpoint(workspace / "run/epoch_001.ckpt")
    ck.params["fc2.w"][0, 0] = np.nan
    save_checkpoint(ck, tmp_path / "nan.ckpt")
    f = tmp_path / "f.bin"
    f.write_bytes(bytes(2000))
    assert main(["predict", "--ckpt", str(tmp_path / "nan.ckpt"), str(f)]) == EXIT_NUMERIC


def test_dense_guard_on_huge_input(tmp_path, workspace):
    big = tmp_path / "big.bin"
    with open(big, "wb") as fh:  # sparse file, nothing is written
        fh.truncate(2 ** 24 + 1)
    ck = str(workspace / "run/epoch_001.ckpt")
    assert main(["predict", "--ckpt", ck, "--mode", "dense", str(big)]) == EXIT_USAGE
    assert main(["bench", "--lengths", "2^25", "--mode", "dense"]) == EXIT_USAGE


def test_bench_writes_table_and_figure(tmp_path, capsys):
    assert main(["bench", "--scale", "desk", "--lengths", "2^12,2^13,2^14", "--mode", "both",
                 "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split("\t")[:2] == ["length", "mode"] and len(out) == 7
    summary = json.loads((tmp_path / "bench_summary.json").read_text())
    assert summary["dense_lowmem_abs_diff"] <= 1e-5
    assert "scan_r2" in summary and "memory_ratio" in summary
    assert (tmp_path / "bench.png").stat().st_size > 1000
    assert (tmp_path / "table1.md").read_text().startswith("| length")
