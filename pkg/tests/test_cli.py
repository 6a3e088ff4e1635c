import filecmp
import os

import pytest

from nnleak.cli import main, write_outputs
from nnleak.network import example_fixed_neuron, load_model, save_model


def run(*args):
    return main([str(a) for a in args])


def test_attack_model_fixed_walkthrough_neuron(tmp_path, capsys):
    truth = tmp_path / "truth.model"
    save_model(example_fixed_neuron(), truth)
    assert run("attack-model", "--precision", "fixed", "--model", truth, "--out", tmp_path / "out") == 0
    assert (tmp_path / "out" / "recovered.model").read_text() == truth.read_text()
    assert "exact: 1" in capsys.readouterr().out


def test_verify_ct_hardened_relu(capsys):
    assert run("verify-ct", "--kernel", "relu", "--hardened") == 0
    assert "constant-time" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["gen", "--precision", "binary", "--dims", "8,4"],
    ["capture", "--precision", "fixed", "--normalization", "div255", "--sigma", "2", "--repeats", "4"],
    ["attack-model", "--precision", "binary", "--dims", "8,4,3"],
    ["harden", "--dims", "8,4,3"],
])
def test_same_config_same_bytes(tmp_path, argv):
    assert run(*argv, "--seed", 5, "--out", tmp_path / "a") == 0
    assert run(*argv, "--seed", 5, "--out", tmp_path / "b") == 0
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert cmp.left_list and not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for name in cmp.common_files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_capture_then_attack_input(tmp_path):
    assert run("gen", "--seed", 3, "--dims", "16,16,4", "--out", tmp_path / "m") == 0
    model = tmp_path / "m" / "model.txt"
    x = ",".join(str(v) for v in range(100, 116))
    assert run("capture", "--model", model, "--input", x, "--out", tmp_path / "c") == 0
    assert run("attack-input", "--trace", tmp_path / "c" / "trace.csv", "--model", model,
               "--pgm-width", 4, "--out", tmp_path / "r") == 0
    lines = (tmp_path / "r" / "input.csv").read_text().splitlines()[1:]
    assert [int(l.split(",")[1]) for l in lines] == list(range(100, 116))
    assert (tmp_path / "r" / "input.pgm").read_text().startswith("P2\n4 4\n")


def test_report_command(tmp_path):
    assert run("report", "--out", tmp_path) == 0
    names = set(os.listdir(tmp_path))
    assert {"mul_lut.csv", "float_neuron.txt", "fixed_neuron.csv", "overheads.csv", "leakage.csv"} <= names


def test_exit_codes(tmp_path, capsys):
    assert run("no-such-command") == 2
    assert run("gen", "--dims", "oops") == 2
    assert run("gen", "--model", tmp_path / "missing.model") == 1
    assert run("verify-ct", "--profile", "no-such-profile") == 1
    assert run("capture", "--input", "1,2", "--input-file", tmp_path / "x") == 2
    bad = tmp_path / "bad.model"
    bad.write_text("net fixed 1\nlayer 1 2 relu\n1 99\nbias 0\n")
    assert run("attack-model", "--model", bad, "--out", tmp_path / "never") == 1
    assert not (tmp_path / "never").exists()
    assert "nnleak attack-model:" in capsys.readouterr().err


def test_profile_dir_env(tmp_path, monkeypatch, capsys):
    (tmp_path / "flat.profile").write_text("base = atmega-like\ni2f_constant_time = true\n")
    monkeypatch.setenv("NNLEAK_PROFILE_DIR", str(tmp_path))
    assert run("verify-ct", "--kernel", "int2float", "--profile", "flat") == 0
    out = capsys.readouterr().out
    assert "flat" in out or "constant-time" in out


def test_write_outputs_removes_partial_files(tmp_path):
    files = {"a.txt": "ok", "b.txt": None}   # writing None fails after a.txt exists
    with pytest.raises(TypeError):
        write_outputs(tmp_path / "out", files)
    assert not (tmp_path / "out").exists()


def test_recovered_model_loads(tmp_path):
    assert run("attack-model", "--example", "binary-neuron", "--out", tmp_path) == 0
    model = load_model(tmp_path / "recovered.model")
    assert model.layers[0].weights.tolist() == [[1, -1]]
    assert model.layers[0].bias.tolist() == [-33]
