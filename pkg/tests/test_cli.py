import json
import os

import pytest

from dcnet.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from dcnet.train import read_csv
from cifar_fixture import write_tree

FAST = ["--set", "widths=4,8,8", "--set", "epochs=1", "--set", "batch=4", "--set", "epoch_multiplier=1", "--set", "rtol=0.01", "--set", "atol=0.01"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = write_tree(str(root / "cifar"))
    out = str(root / "run")
    assert main(["train", "--data", data, "--out", out, "--seed", "1", "--deterministic"] + FAST) == EXIT_OK
    return data, out


def test_train_outputs(trained):
    _, out = trained
    assert os.path.exists(os.path.join(out, "checkpoint.dcn"))
    summary = json.load(open(os.path.join(out, "train.json")))
    assert summary["epochs_run"] == 1
    assert len(read_csv(os.path.join(out, "metrics.csv"))) == 2


@pytest.mark.parametrize(
    "cmd,csv_name",
    [
        (["eval"], "eval.csv"),
        (["mask-sweep", "--masks", "0,6"], "mask_sweep.csv"),
        (["contrast-sweep", "--mode", "scaled_T", "--c", "1,0.5"], "contrast_sweep.csv"),
        (["completion", "--images", "2", "--samples", "3"], "completion.csv"),
        (["sigmas"], "sigmas.csv"),
    ],
)
def test_analysis_commands(trained, tmp_path, cmd, csv_name):
    data, run = trained
    args = cmd + ["--checkpoint", os.path.join(run, "checkpoint.dcn"), "--data", data, "--out", str(tmp_path)]
    assert main(args) == EXIT_OK
    assert read_csv(str(tmp_path / csv_name))
    assert (tmp_path / f"{cmd[0].replace('-', '_')}.json").exists()


def test_completion_without_checkpoint(trained, tmp_path):
    data, _ = trained
    args = ["completion", "--variant", "dcn_ode", "--images", "2", "--samples", "2", "--data", data, "--out", str(tmp_path)]
    assert main(args) == EXIT_OK
    assert json.load(open(tmp_path / "completion.json"))["untrained"] is True


def test_reconstruct_from_encoder(trained, tmp_path):
    data, run = trained
    args = ["reconstruct", "--encoder", os.path.join(run, "checkpoint.dcn"), "--data", data, "--out", str(tmp_path)] + FAST
    assert main(args) == EXIT_OK
    assert read_csv(str(tmp_path / "metrics.csv"))[0]["mse"] != ""


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["bogus"],
        ["train", "--set", "nokey"],
        ["train", "--set", "lr=fast"],
        ["eval"],
        ["contrast-sweep", "--checkpoint", "x", "--c", "0,1"],
        ["contrast-sweep", "--checkpoint", "x", "--mode", "sideways"],
        ["mask-sweep", "--checkpoint", "x", "--masks", "a,b"],
    ],
)
def test_usage_errors(argv, tmp_path, capsys):
    assert main(argv + ["--out", str(tmp_path)]) == EXIT_USAGE
    assert capsys.readouterr().err


def test_runtime_errors(tmp_path, capsys):
    bad = tmp_path / "bad.dcn"
    bad.write_bytes(b"nope")
    assert main(["eval", "--checkpoint", str(bad), "--out", str(tmp_path)]) == EXIT_RUNTIME
    assert "magic" in capsys.readouterr().err
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path)]) == EXIT_RUNTIME


def test_help_exits_cleanly(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "completion" in capsys.readouterr().out


def test_selftest(capsys):
    assert main(["selftest"]) == EXIT_OK
    assert capsys.readouterr().out.count("PASS") == 3
