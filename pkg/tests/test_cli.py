import json
import shutil
import subprocess

import numpy as np
import pytest
from PIL import Image

EXE = shutil.which("efficientiml")
pytestmark = pytest.mark.skipif(EXE is None, reason="console script not installed")


def run(*args, cwd=None):
    return subprocess.run([EXE, *map(str, args)], capture_output=True, text=True, cwd=cwd, timeout=900)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    r = run("gen-synth", "--out", root / "data", "--n", 4, "--size", 64, "--seed", 7, "--test-ratio", 3, 1)
    assert r.returncode == 0, r.stderr
    r = run("train", "--preset", "desk", "--data-root", root / "data", "--out", root / "run", "--split", "all",
            "--size", 64, "--set", "train.steps=4", "--set", "train.warmup_steps=1",
            "--set", "train.eval_every=2", "--set", "train.batch_size=2")
    assert r.returncode == 0, r.stderr
    return root


def test_gen_synth_layout(trained):
    man = (trained / "data" / "manifest.tsv").read_text().split()
    assert man.count("train") == 3 and man.count("test") == 1
    img = np.asarray(Image.open(trained / "data" / "images" / "synth_00000.png"))
    assert img.shape == (64, 64, 3)


def test_train_outputs(trained):
    log = (trained / "run" / "train.log").read_text()
    assert "config train.steps = 4" in log
    assert sum(line.startswith("step=") for line in log.splitlines()) == 4
    assert (trained / "run" / "last.ckpt").is_file() and (trained / "run" / "best.ckpt").is_file()


def test_eval_writes_reports(trained):
    r = run("eval", "--checkpoint", trained / "run" / "last.ckpt", "--data-root", trained / "data",
            "--split", "train", "--out", trained / "eval")
    assert r.returncode == 0, r.stderr
    summary = json.loads((trained / "eval" / "summary.json").read_text())
    assert {"f1", "iou", "acc", "auc"} <= set(summary)
    rows = (trained / "eval" / "metrics.jsonl").read_text().splitlines()
    assert len(rows) == 3 and "f1=" in r.stdout


def test_predict_from_checkpoint(trained):
    out = trained / "pred"
    r = run("predict", "--checkpoint", trained / "run" / "last.ckpt", "--input", trained / "data" / "images",
            "--out", out, "--save-prob")
    assert r.returncode == 0, r.stderr
    for kind in ("mask", "prob", "overlay"):
        assert len(list(out.glob(f"*_{kind}.png"))) == 4
    mask = np.asarray(Image.open(out / "synth_00000_mask.png"))
    assert mask.shape == (64, 64) and set(np.unique(mask)) <= {0, 255}
    assert Image.open(out / "synth_00000_overlay.png").size == (3 * 64, 64)


def test_predict_from_probability_map(trained, tmp_path):
    gt = trained / "data" / "masks" / "synth_00001.png"
    r = run("predict", "--prob-input", gt, "--input", trained / "data" / "images" / "synth_00001.png",
            "--out", tmp_path)
    assert r.returncode == 0, r.stderr
    a = np.asarray(Image.open(tmp_path / "synth_00001_mask.png")) > 127
    b = np.asarray(Image.open(gt)) > 127
    assert np.array_equal(a, b)


def test_count_flops_budget(tmp_path):
    r = run("count-flops", "--size", 2048, "--out", tmp_path / "f.json")
    assert r.returncode == 0, r.stderr
    assert "< 100: PASS" in r.stdout and "ratio 2048/1024 = 4.0000" in r.stdout
    rec = json.loads((tmp_path / "f.json").read_text())
    assert rec["flops"] < 100e9


def test_bench_wkv_cli(tmp_path):
    r = run("bench-wkv", "--T", "16,32", "--cv", 2, "--repeats", 1, "--impls", "naive,scan",
            "--out", tmp_path / "b.json")
    assert r.returncode == 0, r.stderr
    assert "ratio T=32/T=16" in r.stdout
    assert (tmp_path / "b.json").is_file()


def test_help_lists_config_keys():
    r = run("train", "--help")
    assert r.returncode == 0
    for key in ("train.lr_init", "model.channels", "loss.lambda_1"):
        assert key in r.stdout


def test_usage_errors_exit_1(tmp_path):
    assert run("no-such-command").returncode == 1
    r = run("train", "--set", "train.bogus=1", "--data-root", tmp_path)
    assert r.returncode == 1 and "train.bogus" in r.stderr
    assert run("train", "--set", "nokeyvalue").returncode == 1


def test_data_errors_exit_2(tmp_path):
    r = run("eval", "--checkpoint", tmp_path / "missing.ckpt", "--data-root", tmp_path)
    assert r.returncode == 2 and r.stderr.startswith("data error")
    (tmp_path / "junk.ckpt").write_bytes(b"garbage")
    assert run("predict", "--checkpoint", tmp_path / "junk.ckpt", "--input", tmp_path,
               "--out", tmp_path / "o").returncode == 2


def test_numeric_failure_exit_3(trained, tmp_path):
    r = run("train", "--preset", "desk", "--data-root", trained / "data", "--out", tmp_path, "--size", 64,
            "--set", "train.lr_init=1e30", "--set", "train.grad_clip=0", "--set", "train.warmup_steps=0",
            "--set", "train.steps=3", "--set", "train.batch_size=2")
    assert r.returncode == 3 and "numeric failure" in r.stderr
