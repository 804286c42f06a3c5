import json

import numpy as np
import pytest

from stmf.cli import main, parse_steps
from stmf.io import read_tensor


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def cli_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen", "--pde", "darcy", "--n", 10, "--res", 16, "--seed", 4, "--out", root / "d") == 0
    assert run("train", "--data", root / "d", "--out", root / "m", "--epochs", 1, "--width", 4, "--depth", 1, "--quiet") == 0
    return root


def test_gen_split_and_manifest(cli_dirs):
    man = json.loads((cli_dirs / "d" / "manifest.json").read_text())
    assert [len(man["splits"][k]) for k in ("train", "val", "test")] == [7, 2, 1]
    assert man["pde"] == "darcy" and man["seed"] == 4
    run_doc = json.loads((cli_dirs / "d" / "run.json").read_text())
    assert run_doc["command"] == "gen" and run_doc["build"]


def test_gen_twice_is_bit_identical(cli_dirs, tmp_path):
    assert run("gen", "--pde", "darcy", "--n", 10, "--res", 16, "--seed", 4, "--out", tmp_path / "d2") == 0
    for f in ("inputs.stmf", "targets.stmf", "manifest.json"):
        assert (cli_dirs / "d" / f).read_bytes() == (tmp_path / "d2" / f).read_bytes()


def test_burgers_gen_defaults(tmp_path):
    assert run("gen", "--pde", "burgers", "--n", 2, "--out", tmp_path / "b") == 0
    man = json.loads((tmp_path / "b" / "manifest.json").read_text())
    p = man["params"]
    assert (p["res"], p["nu"], p["T"], p["grf"]["alpha"], p["grf"]["tau"], p["grf"]["sigma"]) == (128, 0.01, 1.0, 2.5, 7.0, 49.0)


def test_train_outputs(cli_dirs):
    for f in ("metrics.csv", "train_config.json", "best/checkpoint.json", "last/checkpoint.json", "run.json"):
        assert (cli_dirs / "m" / f).exists()


def test_infer_and_invert(cli_dirs, tmp_path):
    assert run("infer", "--ckpt", cli_dirs / "m", "--data", cli_dirs / "d", "--out", tmp_path / "i") == 0
    assert read_tensor(tmp_path / "i" / "predictions.stmf").shape == (1, 16, 16)
    assert run("invert", "--ckpt", cli_dirs / "m", "--data", cli_dirs / "d", "--out", tmp_path / "v", "--steps", 3, "--init", "zero") == 0
    trace = (tmp_path / "v" / "trace.csv").read_text().splitlines()
    assert trace[0] == "step,loss" and len(trace) == 4


def test_missing_inputs_exit_2(cli_dirs, tmp_path, capsys):
    assert run("train", "--data", tmp_path / "none", "--out", tmp_path / "x") == 2
    assert "dataset not found" in capsys.readouterr().err
    assert run("invert", "--ckpt", tmp_path / "none", "--data", cli_dirs / "d", "--out", tmp_path / "y") == 2
    assert not (tmp_path / "x").exists() and not (tmp_path / "y").exists()
    assert not list(tmp_path.glob(".*partial*"))


def test_bad_arguments_exit_nonzero(capsys):
    with pytest.raises(SystemExit) as e:
        run("gen", "--pde", "heat", "--n", 1, "--out", "x")
    assert e.value.code != 0
    assert "usage" in capsys.readouterr().err


def test_verify_identity_and_hessian(tmp_path):
    assert run("verify", "--suite", "identity", "--out", tmp_path / "a", "--samples", 20) == 0
    rep = json.loads((tmp_path / "a" / "bound_report.json").read_text())
    assert max(rep["max_residual"].values()) < 1e-6
    assert run("verify", "--suite", "hessian", "--out", tmp_path / "h") == 0
    rep = json.loads((tmp_path / "h" / "bound_report.json").read_text())
    assert rep["synthetic"]["coupled"] > 10 * rep["synthetic"]["decoupled"]


def test_verify_bounds_requires_checkpoints(cli_dirs, tmp_path):
    assert run("verify", "--suite", "bounds", "--ckpt-glob", str(tmp_path / "no*"), "--data", cli_dirs / "d", "--out", tmp_path / "b") == 2
    assert run("verify", "--suite", "bounds", "--ckpt-glob", str(cli_dirs / "m"), "--data", cli_dirs / "d", "--out", tmp_path / "b") == 0
    rep = json.loads((tmp_path / "b" / "bound_report.json").read_text())
    assert rep["decoupling"]["violations"] == 0


def test_parse_steps():
    assert parse_steps("1..4") == [1, 2, 3, 4]
    assert parse_steps("2,8") == [2, 8]
    with pytest.raises(Exception):
        parse_steps("0..3")
