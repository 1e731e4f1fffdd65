import csv
import hashlib
import json

import numpy as np
import pytest

from wavestyle.cli import build_parser, main, resolve_config
from wavestyle.config import ExperimentConfig, coerce, load_config
from wavestyle.engine import read_labels
from wavestyle.serialization import load_tensor

TINY = {"widths": [4, 6, 8], "image_size": 16, "insertion_blocks": [1, 2], "j_list": [1, 1],
        "pretrain_epochs": 1, "pretrain_batch": 32, "meta_steps": 3, "val_every": 2, "val_episodes": 3,
        "eval_episodes": 5, "source_per_class": 20, "target_per_class": 6, "q_train": 2, "q_eval": 3}


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "bench")], env={}) == 0
    assert main(["pretrain", "--config", str(cfg), "--data", str(root / "bench"), "--out", str(root / "pre")],
                env={}) == 0
    assert main(["meta-train", "--config", str(cfg), "--data", str(root / "bench"), "--out", str(root / "meta"),
                 "--pretrained", str(root / "pre" / "checkpoint")], env={}) == 0
    return root


def run(ws, *argv, env=None):
    argv = [argv[0], "--config", str(ws / "tiny.json"), *argv[1:]]
    if argv[0] != "gen-data":
        argv += ["--data", str(ws / "bench")]
    return main(argv, env={} if env is None else env)


# -- configuration ----------------------------------------------------------------

def test_coerce_types():
    assert coerce("widths", "8,16") == [8, 16]
    assert coerce("widths", "[1, 2]") == [1, 2]
    assert coerce("use_ssl", "false") is False
    assert coerce("lr", "0.5") == 0.5
    with pytest.raises(KeyError):
        coerce("nope", 1)


def test_precedence_file_env_flag(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 1, "k1": 0.5}))
    assert load_config(str(path), env={}).seed == 1
    assert load_config(str(path), env={"WAVESTYLE_SEED": "7"}).seed == 7
    assert load_config(str(path), {"seed": 3}, env={"WAVESTYLE_SEED": "7"}).seed == 3
    args = build_parser().parse_args(["gen-data", "--config", str(path), "--out", "x", "--k1", "0.1"])
    cfg = resolve_config(args, env={"WAVESTYLE_SEED": "9"})
    assert (cfg.seed, cfg.k1) == (9, 0.1)


def test_every_field_has_a_flag():
    parser = build_parser()
    for name in ExperimentConfig().to_dict():
        args = parser.parse_args(["gen-data", "--out", "x", "--" + name.replace("_", "-"), "1"])
        assert hasattr(args, f"cfg__{name}")


def test_config_errors_listed_at_once(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"widths": "1,x", "bogus": 3}))
    rc = main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o"), "--k2", "-1",
               "--strategy", "odd"], env={})
    err = capsys.readouterr().err
    assert rc == 2
    for needle in ("widths", "bogus", "k1 and k2", "strategy"):
        assert needle in err


def test_meta_train_requires_pretrain(workspace, capsys):
    assert run(workspace, "meta-train", "--out", str(workspace / "m2")) == 2
    assert "--pretrained" in capsys.readouterr().err


# -- commands ---------------------------------------------------------------------------

def test_gen_data_layout_and_determinism(workspace, tmp_path):
    names = sorted(p.name for p in (workspace / "bench").iterdir() if p.is_dir())
    assert names == ["source", "target_contrast", "target_hue", "target_texture"]
    assert run(workspace, "gen-data", "--out", str(tmp_path / "again"), "--seed", "0") == 0
    assert tree_digest(tmp_path / "again") == tree_digest(workspace / "bench")
    manifest = json.loads((workspace / "bench" / "run-manifest.json").read_text())
    assert manifest["config"]["widths"] == TINY["widths"]


def test_gen_data_missing_parent(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "no" / "such")], env={}) == 1
    assert "does not exist" in capsys.readouterr().err


def test_meta_train_artifacts(workspace):
    lines = (workspace / "meta" / "metrics.jsonl").read_text().splitlines()
    assert sum("total" in json.loads(l) for l in lines) == TINY["meta_steps"]
    manifest = json.loads((workspace / "meta" / "run-manifest.json").read_text())
    assert manifest["config"]["augment_mode"] == "wave_san" and len(manifest["checkpoint_sha256"]) == 64


def test_augment_modes_distinct_hashes(workspace):
    out = workspace / "meta_none"
    assert run(workspace, "meta-train", "--out", str(out), "--pretrained", str(workspace / "pre" / "checkpoint"),
               "--augment-mode", "none") == 0
    a = json.loads((workspace / "meta" / "run-manifest.json").read_text())["checkpoint_sha256"]
    b = json.loads((out / "run-manifest.json").read_text())["checkpoint_sha256"]
    assert a != b


def test_seed_env_reproduces_run(workspace, tmp_path):
    for name in ("r1", "r2"):
        assert run(workspace, "meta-train", "--out", str(tmp_path / name), "--from-scratch",
                   env={"WAVESTYLE_SEED": "5"}) == 0
    assert json.loads((tmp_path / "r1" / "run-manifest.json").read_text())["config"]["seed"] == 5
    assert (tmp_path / "r1" / "metrics.jsonl").read_bytes() == (tmp_path / "r2" / "metrics.jsonl").read_bytes()
    assert tree_digest(tmp_path / "r1" / "checkpoint") == tree_digest(tmp_path / "r2" / "checkpoint")


def test_evaluate_prints_report_summary(workspace, capsys):
    out = workspace / "ev"
    capsys.readouterr()
    assert run(workspace, "evaluate", "--out", str(out), "--checkpoint", str(workspace / "meta" / "checkpoint"),
               "--episodes", "9") == 0
    printed = dict(line.split(": ", 1) for line in capsys.readouterr().out.strip().splitlines())
    report = json.loads((out / "report.json").read_text())["reports"]
    assert set(printed) == set(report)
    for name, r in report.items():
        assert printed[name] == r["summary"] == f"{r['mean_accuracy']:.2f} ± {r['half_width']:.2f} %"
        assert r["episode_count"] == 9


def test_ablate_counts_and_key_errors(workspace, capsys):
    grid = workspace / "grid.json"
    grid.write_text(json.dumps({"cells": {"none": {"augment_mode": "none"}, "full": {}}, "seeds": [0, 1]}))
    out = workspace / "ab"
    assert run(workspace, "ablate", "--out", str(out), "--grid", str(grid), "--parallel", "2") == 0
    runs = sorted(p.relative_to(out / "runs").as_posix() for p in (out / "runs").glob("*/seed*"))
    assert runs == ["full/seed0", "full/seed1", "none/seed0", "none/seed1"]
    with open(out / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["cell"] for r in rows] == ["none", "full"]
    assert "target_hue_mean" in rows[0] and "target_hue_ci" in rows[0]
    grid.write_text(json.dumps({"cells": {"x": {"not_a_key": 1}}}))
    assert run(workspace, "ablate", "--out", str(out), "--grid", str(grid)) == 2
    assert "not_a_key" in capsys.readouterr().err


def test_dump_commands(workspace):
    ck = str(workspace / "meta" / "checkpoint")
    assert run(workspace, "dump-features", "--out", str(workspace / "same"), "--checkpoint", ck,
               "--index-a", "3", "--index-b", "3", "--block", "2", "--channel", "1") == 0
    assert not np.any(load_tensor(workspace / "same" / "F_A_aug_minus_F_A.wstn"))
    assert run(workspace, "dump-features", "--out", str(workspace / "bad"), "--checkpoint", ck,
               "--block", "3") == 1
    assert run(workspace, "dump-embeddings", "--out", str(workspace / "emb"), "--checkpoint", ck,
               "--domain", "target_hue", "--per-class", "4") == 0
    emb = load_tensor(workspace / "emb" / "embeddings.wstn")
    assert emb.shape == (20, 8) and len(read_labels(workspace / "emb" / "labels.txt")) == 20
