import json

import pytest

from cvattn.cli import main

TINY = ["--set", "task.n_samples=40", "--set", "task.frame_len=16", "--set", "task.n_classes=4",
        "--set", "model.d_model=8", "--set", "model.d_ff=16", "--set", "model.n_layers=1",
        "--set", "train.epochs=2", "--set", "train.batch_size=8"]
TINY_SEQ = TINY + ["--task", "sequence", "--set", "task.seq_len=6", "--set", "task.seq_in=4",
                   "--set", "task.seq_out=2"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "a"
    assert main(["train", "--variant", "catt", "--kernel", "dot", "--out", str(out), *TINY_SEQ]) == 0
    return out


def test_train_writes_run_directory(run_dir):
    for name in ("manifest.json", "metrics.csv", "test_metrics.json", "best/weights.bin", "last/manifest.txt"):
        assert (run_dir / name).exists()
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["config"]["model"]["d_model"] == 8
    assert manifest["config"]["task"]["task"] == "sequence"
    assert "ar_micro_ap" in json.loads((run_dir / "test_metrics.json").read_text())["test"]


def test_rerun_from_manifest_is_byte_identical(run_dir, tmp_path):
    out = tmp_path / "b"
    assert main(["train", "--config", str(run_dir / "manifest.json"), "--out", str(out)]) == 0
    for name in ("metrics.csv", "test_metrics.json", "best/weights.bin", "last/weights.bin"):
        assert (out / name).read_bytes() == (run_dir / name).read_bytes()


def test_eval_reproduces_final_validation_metric(run_dir, capsys):
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(run_dir / "last"), "--split", "val"]) == 0
    record = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    last_val = (run_dir / "metrics.csv").read_text().strip().splitlines()[-1].split(",")
    assert last_val[1] == "val"
    assert record["loss"] == float(last_val[2]) and record["micro_ap"] == float(last_val[3])


def test_eval_autoregressive(run_dir, capsys):
    assert main(["eval", "--checkpoint", str(run_dir / "best"), "--mode", "autoregressive"]) == 0
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["mode"] == "autoregressive"


def test_eval_missing_checkpoint(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope")]) == 2


def test_eval_autoregressive_on_classifier_is_usage_error(tmp_path):
    out = tmp_path / "cls"
    assert main(["train", "--out", str(out), *TINY, "--set", "train.epochs=0"]) == 0
    assert main(["eval", "--checkpoint", str(out / "best"), "--mode", "autoregressive"]) == 2


def test_eval_with_exported_data(run_dir, tmp_path, capsys):
    data = tmp_path / "d.bin"
    assert main(["gen-data", "--config", str(run_dir / "manifest.json"), "--out", str(data)]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(run_dir / "last"), "--data", str(data), "--split", "val"]) == 0
    from_file = json.loads(capsys.readouterr().out.strip())
    assert main(["eval", "--checkpoint", str(run_dir / "last"), "--split", "val"]) == 0
    assert json.loads(capsys.readouterr().out.strip())["micro_ap"] == from_file["micro_ap"]


@pytest.mark.parametrize("argv", [
    ["train", "--variant", "yang", "--kernel", "dot"],
    ["train", "--set", "model.bogus=1"],
    ["train", "--set", "nosection=1"],
    ["train", "--set", "model.d_model=seven"],
    ["params", "--variant", "nope"],
    ["frobnicate"],
])
def test_usage_errors(argv, capsys):
    assert main(argv) == 2
    assert capsys.readouterr().err


def test_config_error_names_key(capsys):
    assert main(["train", "--set", "train.lr=-1"]) == 2
    assert "train.lr" in capsys.readouterr().err


def test_unknown_ini_key(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[model]\nd_modle = 8\n")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "model.d_modle" in capsys.readouterr().err


def test_ini_config_selects_task(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[task]\ntask = sequence\n")
    assert main(["params", "--config", str(cfg), "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert "decoder" in report["complex"]


def test_params_ordering_paper_full(capsys):
    assert main(["params", "--preset", "paper-full", "--json"]) == 0
    t = {k: v["total"] for k, v in json.loads(capsys.readouterr().out).items()}
    assert t["real"] > t["complex"] >= t["yang"]


def test_params_conv_flag_decreases(capsys):
    main(["params", "--json"])
    with_conv = json.loads(capsys.readouterr().out)["complex"]["total"]
    main(["params", "--json", "--set", "model.conv_embedding=false"])
    assert json.loads(capsys.readouterr().out)["complex"]["total"] < with_conv


def test_verify_invariants(capsys):
    assert main(["verify", "--suite", "invariants"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_verify_detects_corrupted_csgn(capsys):
    assert main(["verify", "--suite", "invariants", "--mutate", "csgn"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_threads_env(monkeypatch, capsys):
    monkeypatch.setenv("CVATTN_THREADS", "zero")
    assert main(["params"]) == 2
    monkeypatch.setenv("CVATTN_THREADS", "1")
    assert main(["params"]) == 0


def test_gen_data_deterministic(tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    assert main(["gen-data", "--out", str(a), *TINY]) == 0
    assert main(["gen-data", "--out", str(b), *TINY]) == 0
    assert a.read_bytes() == b.read_bytes()
