from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from smmix.analysis import read_pnm
from smmix.cli import main
from smmix.config import load_config, read_config_file, write_config_file
from smmix.train import TrainConfig

TINY_FLAGS = ["--image-size", "16", "--patch-size", "4", "--embed-dim", "16", "--num-heads", "2",
              "--depth", "1", "--batch-size", "8", "--dtype", "float64"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate-data", "--out", str(root / "data"), "--n", "40", "--size", "16", "--seed", "2"]) == 0
    return root


def test_train_eval_and_resume(workspace, capsys):
    data, out = workspace / "data", workspace / "run"
    args = ["train", "--data-dir", str(data), "--out-dir", str(out), "--epochs", "2", *TINY_FLAGS]
    assert main(args + ["--steps", "3"]) == 0
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert [r["step"] for r in rows] == ["0", "1", "2"]
    assert main(args + ["--resume", str(out / "checkpoint.smmx")]) == 0
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert [int(r["step"]) for r in rows] == list(range(8))
    assert rows[-1]["val_top1"] != ""
    cfg = load_config(out / "config.txt")
    assert cfg.model.embed_dim == 16 and cfg.epochs == 2
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "checkpoint.smmx"), "--data", str(data)]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert metrics["n"] == 8 and 0 <= metrics["top1"] <= 1


def test_config_file_with_flag_override(workspace, tmp_path):
    cfg = TrainConfig(lr=3e-4, mix_mode="cutmix", data_dir=str(workspace / "data"), out_dir=str(tmp_path / "o"))
    write_config_file(cfg, tmp_path / "c.txt")
    assert read_config_file(tmp_path / "c.txt")["mix_mode"] == "cutmix"
    assert load_config(tmp_path / "c.txt") == cfg
    merged = load_config(tmp_path / "c.txt", {"lr": 1e-2, "warmup_steps": None})
    assert merged.lr == 1e-2 and merged.mix_mode == "cutmix"


@pytest.mark.parametrize("mode", ["smmix", "cutmix", "mixup"])
def test_mix_preview(workspace, mode):
    out = workspace / f"preview_{mode}"
    args = ["mix-preview", "--data", str(workspace / "data"), "--out", str(out), "--mode", mode, "--n", "4"]
    if mode == "smmix":
        args += ["--checkpoint", str(workspace / "run" / "checkpoint.smmx")]
    assert main(args) == 0
    imgs = sorted(out.glob("mixed_*.ppm"))
    assert len(imgs) == 4 and read_pnm(imgs[0]).shape == (16, 16, 3)
    plans = out / "plans.jsonl"
    if mode == "mixup":
        assert not plans.exists()
    else:
        recs = [json.loads(line) for line in plans.read_text().splitlines()]
        assert [r["source_index"] for r in recs] == [3, 2, 1, 0]


def test_attn_stats(workspace, capsys):
    out = workspace / "stats.csv"
    assert main(["attn-stats", "--checkpoint", str(workspace / "run" / "checkpoint.smmx"),
                 "--data", str(workspace / "data"), "--out", str(out), "--topk"]) == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["image", "ss", "st", "ts", "tt"] and rows[-1][0] == "mean" and len(rows) == 10
    topk = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert set(topk) == {"top1", "top2", "n"}


def test_train_requires_paths(capsys):
    with pytest.raises(SystemExit):
        main(["train", "--epochs", "1"])


def test_smmix_preview_requires_checkpoint(workspace):
    with pytest.raises(SystemExit):
        main(["mix-preview", "--data", str(workspace / "data"), "--out", str(workspace / "p")])
