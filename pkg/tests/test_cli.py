import csv
import json

import numpy as np
import pytest

from dpcn.checkpoint import save_checkpoint
from dpcn.cli import main
from dpcn.config import default_text, parse_config
from dpcn.data import load_cifar_binary
from dpcn.engine import DPCN, Trainer
from dpcn.experiments import load_datasets

TINY = {
    "data": {"classes": 3, "train_per_class": 16, "test_per_class": 12, "image_size": 16},
    "model": {"channels": (4, 8, 8), "disc_channels": (4, 8)},
    "dpcn": {"phase_epochs": (1, 1, 1)},
    "optim": {"batch_size": 16, "lr": 0.05},
    "run": {"seed": 2, "seeds": (2,), "probe_samples": 40, "gradcam_samples": 4},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(default_text(TINY))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def test_train_is_reproducible(config, tmp_path, capsys):
    for name in ("a", "b"):
        assert run("train", "--config", config, "--out", tmp_path / name) == 0
    lines = [(tmp_path / n / "metrics.jsonl").read_text().splitlines() for n in ("a", "b")]
    assert lines[0] == lines[1] and len(lines[0]) == 3
    first = json.loads(lines[0][0])
    assert first["seed"] == 2 and len(first["config_digest"]) == 64
    assert all((tmp_path / "a" / f"phase{k}.ckpt").exists() for k in (1, 2, 3))


def test_train_resume_matches_uninterrupted(config, tmp_path):
    assert run("train", "--config", config, "--out", tmp_path / "full") == 0
    assert run("train", "--config", config, "--out", tmp_path / "part", "--phase", "1") == 0
    assert run("train", "--config", config, "--out", tmp_path / "part",
               "--checkpoint", tmp_path / "part" / "phase1.ckpt") == 0
    assert ((tmp_path / "full" / "metrics.jsonl").read_text()
            == (tmp_path / "part" / "metrics.jsonl").read_text())


def test_eval_of_untrained_model_is_near_chance(config, tmp_path):
    exp = parse_config(open(config).read())
    train, test = load_datasets(exp)
    trainer = Trainer(DPCN.build(exp.dpcn, train.class_count, train.image_shape), train)
    ckpt = tmp_path / "untrained.ckpt"
    save_checkpoint(ckpt, trainer.state_arrays(),
                    {**trainer.state_meta(), "num_classes": 3, "image_shape": [3, 16, 16]},
                    exp.digest)
    assert run("eval", "--config", config, "--checkpoint", ckpt, "--out", tmp_path) == 0
    report = json.loads((tmp_path / "eval.json").read_text())
    assert report["eval_digest"] == test.digest() and report["phases_done"] == 0
    assert abs(report["acc"]["extra"] - 1 / 3) <= 0.25
    assert set(report["acc"]) >= {"subnet0", "subnet1", "base", "ensemble", "extra"}


def test_gradcam_writes_pngs(config, tmp_path):
    assert run("train", "--config", config, "--out", tmp_path) == 0
    assert run("gradcam", "--config", config, "--checkpoint", tmp_path / "phase3.ckpt",
               "--out", tmp_path / "cam", "--indices", "0,5") == 0
    report = json.loads((tmp_path / "cam" / "gradcam.json").read_text())
    assert len(report["images"]) == 2
    assert len(list((tmp_path / "cam").glob("*.png"))) == 4
    assert run("gradcam", "--config", config, "--checkpoint", tmp_path / "phase3.ckpt",
               "--out", tmp_path / "cam", "--layer", "nowhere") == 2


def test_missing_checkpoint_fails(config, tmp_path, capsys):
    assert run("eval", "--config", config, "--checkpoint", tmp_path / "none.ckpt") == 2
    assert "checkpoint not found" in capsys.readouterr().err


def test_malformed_config_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[dpcn]\nlambda = 1\nfusion = average\n")
    assert run("train", "--config", path, "--out", tmp_path) == 2
    err = capsys.readouterr().err
    assert "bad.ini:3" in err and "fusion" in err


def test_usage_errors():
    assert run("frobnicate") == 2
    assert run("train") == 2


def test_compare_lists_every_method(config, tmp_path, capsys):
    assert run("compare", "--config", config, "--out", tmp_path) == 0
    with open(tmp_path / "summary.tsv") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    assert [r["method"] for r in rows] == ["single", "ensemble", "wide", "dpcn"]
    assert len({r["eval_digest"] for r in rows}) == 1
    printed = capsys.readouterr().out.splitlines()
    assert len(printed) == 5 and printed[0].startswith("# config")


def test_gen_data_round_trips(tmp_path):
    cfg = tmp_path / "gen.ini"
    cfg.write_text(default_text({"data": {"classes": 3, "train_per_class": 5, "test_per_class": 2}}))
    assert run("gen-data", "--config", cfg, "--out", tmp_path) == 0
    meta = json.loads((tmp_path / "meta.json").read_text())
    train = load_cifar_binary([str(tmp_path / "train.bin")], "cifar10", "train")
    assert len(train) == 15 == meta["files"]["train"]["n"]
    assert sorted(np.unique(train.labels)) == [0, 1, 2]
