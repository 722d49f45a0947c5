import csv
import subprocess
import sys

import numpy as np
import pytest

from pointveil import binfmt, crypto, data, model, training
from pointveil.cli import RunConfig, build_config, main, parse_config_text
from pointveil.errors import ConfigError
from pointveil.metrics import chamfer

SMALL = ["--set", "points=48", "--set", "clouds_per_class=4"]
FAST_TRAIN = ["--set", "hidden=8", "--set", "lr=3e-3", "--epochs", "2"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "cls"), *SMALL]) == 0
    assert main(["synth", "--out", str(root / "seg"), *SMALL, "--set", "classes=rocket"]) == 0
    assert main(["train", "--data", str(root / "cls"), "--task", "cls", "--out",
                 str(root / "cls.pfm"), "--trace", str(root / "trace.csv"), *FAST_TRAIN]) == 0
    assert main(["train", "--data", str(root / "seg"), "--task", "seg", "--out",
                 str(root / "seg.pfm"), *FAST_TRAIN]) == 0
    assert main(["keygen", "--seed", "7", "--out", str(root / "k.pfk")]) == 0
    return root


def test_keygen_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "keygen", "--seed", 7, "--out", tmp_path / name)[0] == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert (tmp_path / "a").read_bytes() == crypto.key_to_bytes(crypto.keygen(7))


def test_encrypt_decrypt_round_trip(workspace, tmp_path, capsys):
    src = next((workspace / "cls" / "cube").glob("*.xyz"))
    code, _, _ = run(capsys, "encrypt", "--model", workspace / "cls.pfm", "--key",
                     workspace / "k.pfk", "--in", src, "--out", tmp_path / "c.pfe")
    assert code == 0
    code, _, _ = run(capsys, "decrypt", "--model", workspace / "cls.pfm", "--key",
                     workspace / "k.pfk", "--in", tmp_path / "c.pfe", "--out", tmp_path / "r.xyz")
    assert code == 0
    original = data.load_xyz(src).points
    assert np.abs(data.load_xyz(tmp_path / "r.xyz").points - original).max() < 1e-6


def test_wrong_task_ciphertext_is_rejected(desk_bundle, desk_seg_bundle, desk_rocket,
                                          workspace, tmp_path, capsys):
    model.save_model(tmp_path / "cls.pfm", desk_bundle)
    model.save_model(tmp_path / "seg.pfm", desk_seg_bundle)
    data.save_xyz(tmp_path / "rocket.xyz", desk_rocket.subset("test").clouds[0])
    args = ["--key", workspace / "k.pfk"]
    run(capsys, "encrypt", "--model", tmp_path / "seg.pfm", *args, "--in", tmp_path / "rocket.xyz",
        "--out", tmp_path / "s.pfe")
    code, _, _ = run(capsys, "decrypt", "--model", tmp_path / "seg.pfm", *args,
                     "--in", tmp_path / "s.pfe", "--out", tmp_path / "ok.xyz")
    assert code == 0
    code, _, err = run(capsys, "decrypt", "--model", tmp_path / "cls.pfm", *args,
                       "--in", tmp_path / "s.pfe", "--out", tmp_path / "x.xyz")
    assert code == 10 and err.startswith("error: mismatch:")
    assert not (tmp_path / "x.xyz").exists()
    code, _, _ = run(capsys, "eval", "--model", workspace / "cls.pfm", *args,
                     "--data", workspace / "seg", "--task", "seg", "--out", tmp_path / "r.csv")
    assert code == 10


def test_dp_ordering(workspace, tmp_path, capsys):
    src = next((workspace / "cls" / "torus").glob("*.xyz"))
    cds = []
    for eps in (0.5, 10):
        out = tmp_path / f"dp{eps}.xyz"
        assert run(capsys, "dp", "--in", src, "--epsilon", eps, "--out", out)[0] == 0
        cds.append(chamfer(data.load_xyz(out).points, data.load_xyz(src).points))
    assert cds[0] > cds[1]


def test_eval_writes_two_blocks(workspace, tmp_path, capsys):
    out = tmp_path / "report.csv"
    code, stdout, _ = run(capsys, "eval", "--model", workspace / "cls.pfm", "--key",
                          workspace / "k.pfk", "--data", workspace / "cls", "--task", "cls",
                          "--out", out, "--set", "downstream_epochs=2", "--set", "epsilons=1,10")
    assert code == 0
    blocks = out.read_text().split("\n\n")
    assert len(blocks) == 2
    privacy = list(csv.DictReader(blocks[0].splitlines()))
    usability = list(csv.DictReader(blocks[1].splitlines()))
    assert [r["label"] for r in privacy] == ["original", "protected", "dp_eps=1", "dp_eps=10"]
    assert [r["label"] for r in usability] == ["protected", "original"]
    assert "# epsilons = 1.0,10.0" in stdout


def test_attack_and_metrics(workspace, capsys):
    code, out, _ = run(capsys, "attack", "--model", workspace / "cls.pfm", "--key",
                       workspace / "k.pfk", "--data", workspace / "cls",
                       "--set", "downstream_epochs=2")
    assert code == 0 and out.splitlines()[-1].endswith(",attack")
    a = next((workspace / "cls" / "cube").glob("*.xyz"))
    code, out, _ = run(capsys, "metrics", "--a", a, "--b", a, "--emd", "entropic")
    assert code == 0 and out.splitlines()[-1].startswith("0,")


def test_cli_training_matches_library(workspace):
    cfg = build_config(None, {"hidden": "8", "lr": "3e-3", "epochs": 2})
    dataset = data.load_dataset(workspace / "cls").subset("train")
    bundle = training.train(dataset, cfg.train_config()).bundle
    assert model.model_to_bytes(bundle) == (workspace / "cls.pfm").read_bytes()
    rows = (workspace / "trace.csv").read_text().splitlines()
    assert rows[0] == training.TRACE_HEADER and len(rows) == 3


@pytest.mark.parametrize("argv, code", [
    (["decrypt", "--model", "nope.pfm", "--key", "k", "--in", "x", "--out", "y"], 13),
    (["keygen", "--seed", "1", "--out", "{tmp}/k", "--set", "colour=red"], 2),
    (["dp", "--in", "{tmp}/bad.xyz", "--epsilon", "1", "--out", "{tmp}/o.xyz"], 4),
    (["encrypt", "--model", "{tmp}/bad.pfm", "--key", "k", "--in", "x", "--out", "y"], 5),
])
def test_exit_codes(tmp_path, capsys, argv, code):
    (tmp_path / "bad.xyz").write_text("1 2 3\n1 2\n")
    (tmp_path / "bad.pfm").write_bytes(b"JUNKJUNKJUNKJUNK")
    got, _, err = run(capsys, *[a.format(tmp=tmp_path) for a in argv])
    assert got == code
    assert len(err.strip().splitlines()) == 1 and err.startswith("error: ")


def test_version_and_checksum_codes(workspace, tmp_path, capsys):
    blob = (workspace / "cls.pfm").read_bytes()
    (tmp_path / "v.pfm").write_bytes(binfmt.seal(model.MODEL_MAGIC, 99, blob[6:-4]))
    blob = bytearray((workspace / "cls.pfm").read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    (tmp_path / "c.pfm").write_bytes(bytes(blob))
    for name, code in (("v.pfm", 6), ("c.pfm", 8)):
        got, _, _ = run(capsys, "decrypt", "--model", tmp_path / name, "--key",
                        workspace / "k.pfk", "--in", "x", "--out", "y")
        assert got == code


def test_config_parsing_and_precedence(tmp_path, capsys):
    assert parse_config_text("# comment\nepochs = 5  # trailing\nepsilons = 1, 2\n") == {
        "epochs": 5, "epsilons": (1.0, 2.0)}
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("epochs = 5\nwidth = 3\n")
    with pytest.raises(ConfigError):
        parse_config_text("epochs = five\n")
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("seed = 3\nhidden = 32\n")
    assert build_config(cfg_file, {"seed": 9}).seed == 9
    assert build_config(cfg_file).hidden == 32
    assert build_config().hidden == RunConfig().hidden
    code, out, _ = run(capsys, "keygen", "--config", cfg_file, "--seed", 4, "--out", tmp_path / "k")
    assert "# seed = 4" in out and "# hidden = 32" in out
    assert crypto.load_key(tmp_path / "k").R_p.tolist() == crypto.keygen(4).R_p.tolist()


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "pointveil.cli", "--help"],
                         capture_output=True, text=True)
    assert out.returncode == 0
    for name in ("synth", "keygen", "train", "encrypt", "decrypt", "eval", "attack", "metrics", "dp"):
        assert name in out.stdout
