import json
import subprocess
import sys

import numpy as np
import pytest

from pointmlp.cli import load_checkpoint, main
from pointmlp.data import read_dataset


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    train, test = d / "train.pcds", d / "test.pcds"
    assert main(["gendata", "--classes", "sphere,cube", "--per-class", "6", "--points", "32",
                 "--seed", "1", "--out", str(train)]) == 0
    assert main(["gendata", "--classes", "sphere,cube", "--per-class", "3", "--points", "32",
                 "--seed", "2", "--out", str(test)]) == 0
    return d, train, test


MICRO = ["--dims-divisor", "8", "--k", "8"]


def test_gendata_summary_and_determinism(tmp_path, capsys):
    out = tmp_path / "a.pcds"
    args = ["gendata", "--classes", "sphere,cube", "--per-class", "50", "--points", "64", "--seed", "7"]
    assert main(args + ["--out", str(out)]) == 0
    assert "100 samples" in capsys.readouterr().out
    assert len(read_dataset(out)) == 100
    main(args + ["--out", str(tmp_path / "b.pcds")])
    assert out.read_bytes() == (tmp_path / "b.pcds").read_bytes()


def test_usage_errors_exit_2(tmp_path):
    assert main(["gendata", "--classes", "sphere"]) == 2  # missing --out
    assert main(["gendata", "--classes", "blob", "--out", str(tmp_path / "x")]) == 2
    assert main(["inspect", "--depth", "30"]) == 2
    assert main([]) == 2


def test_runtime_errors_exit_1(tmp_path, data, capsys):
    bad = tmp_path / "bad.pcds"
    bad.write_bytes(b"nope")
    assert main(["eval", "--ckpt", str(tmp_path / "missing"), "--data", str(bad)]) == 1
    assert main(["train", "--train", str(bad), "--out", str(tmp_path / "m")]) == 1
    assert "BadMagicError" in capsys.readouterr().err


def test_train_zero_epochs_then_eval(tmp_path, data, capsys):
    _, train, test = data
    ckpt = tmp_path / "m.pmlp"
    assert main(["train", "--train", str(train), "--out", str(ckpt), "--epochs", "0"] + MICRO) == 0
    assert ckpt.exists() and (tmp_path / "m.pmlp.json").exists()
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(test)]) == 0
    out = capsys.readouterr().out
    assert "OA" in out and "mAcc" in out and "sphere:" in out


def test_eval_reproduces_final_logged_oa(tmp_path, data, capsys):
    _, train, test = data
    ckpt, log = tmp_path / "m.pmlp", tmp_path / "log.jsonl"
    assert main(["train", "--train", str(train), "--test", str(test), "--out", str(ckpt),
                 "--epochs", "2", "--batch-size", "4", "--log", str(log)] + MICRO) == 0
    recs = [json.loads(line) for line in log.read_text().splitlines()]
    assert len(recs) == 2
    capsys.readouterr()
    main(["eval", "--ckpt", str(ckpt), "--data", str(test)])
    oa = float(capsys.readouterr().out.split()[1])
    assert oa == pytest.approx(recs[-1]["test_OA"], abs=1e-4)


def test_vote_flag(tmp_path, data, capsys):
    _, train, test = data
    ckpt = tmp_path / "m.pmlp"
    main(["train", "--train", str(train), "--out", str(ckpt), "--epochs", "1", "--batch-size", "4"] + MICRO)
    p1, pn = tmp_path / "p1.npy", tmp_path / "pn.npy"
    main(["eval", "--ckpt", str(ckpt), "--data", str(test), "--probs", str(p1)])
    main(["eval", "--ckpt", str(ckpt), "--data", str(test), "--vote", "1", "--probs", str(pn)])
    np.testing.assert_array_equal(np.load(p1), np.load(pn))
    main(["eval", "--ckpt", str(ckpt), "--data", str(test), "--vote", "3", "--probs", str(pn)])
    assert np.load(pn).shape == np.load(p1).shape


def test_class_mismatch_fails(tmp_path, data):
    _, train, _ = data
    other = tmp_path / "o.pcds"
    main(["gendata", "--classes", "torus,cone,plane", "--per-class", "2", "--points", "32", "--out", str(other)])
    assert main(["train", "--train", str(train), "--test", str(other), "--out", str(tmp_path / "m")]) == 1


def test_multiple_runs(tmp_path, data, capsys):
    _, train, test = data
    out = tmp_path / "m.pmlp"
    assert main(["train", "--train", str(train), "--test", str(test), "--out", str(out), "--epochs", "1",
                 "--runs", "2"] + MICRO) == 0
    assert (tmp_path / "m.run0.pmlp").exists() and (tmp_path / "m.run1.pmlp").exists()
    assert "over 2 runs" in capsys.readouterr().out
    assert load_checkpoint(tmp_path / "m.run1.pmlp").config.num_classes == 2


@pytest.mark.parametrize("args,layers", [([], 40), (["--depth", "24"], 24), (["--depth", "56"], 56)])
def test_inspect_layers(args, layers, capsys):
    assert main(["inspect"] + args) == 0
    out = capsys.readouterr().out
    assert f"layers (formula) {layers}" in out and f"layers (walked)  {layers}" in out


def test_inspect_elite_params(capsys):
    main(["inspect", "--variant", "elite"])
    out = capsys.readouterr().out
    params = int(out.split("params ")[1].split()[0])
    assert abs(params / 0.68e6 - 1) < 0.10


def test_inspect_checkpoint(tmp_path, data, capsys):
    _, train, _ = data
    ckpt = tmp_path / "m.pmlp"
    main(["train", "--train", str(train), "--out", str(ckpt), "--epochs", "0", "--no-affine",
          "--pre-repeats", "1,0,1,0"] + MICRO)
    capsys.readouterr()
    assert main(["inspect", "--ckpt", str(ckpt)]) == 0
    out = capsys.readouterr().out
    assert "affine=off" in out and "pre=0" in out


def test_bench_small(tmp_path, capsys):
    js = tmp_path / "b.json"
    assert main(["bench", "--points", "64", "--k", "8", "--dims-divisor", "8", "--batch-size", "2",
                 "--warmup", "1", "--iters", "10", "--kernels", "--threads", "1", "--json", str(js)]) == 0
    res = json.loads(js.read_text())
    assert res["full"]["samples_per_second"] > 0 and res["elite"]["samples_per_second"] > 0
    assert "numpy" in res["kernels"]


def test_console_script_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pointmlp.cli", "inspect", "--variant", "elite"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "layers (formula) 20" in proc.stdout
