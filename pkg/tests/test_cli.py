import csv
import json
import os

import numpy as np
import pytest

from ssmiqa import checkpoint as ckpt
from ssmiqa.cli import evaluate_samples, main, parse_config_file
from ssmiqa.data import load_dataset

DESK_CONFIG = """
# desk-scale test model
preset = desk
scan_mode = local
epochs = 2
batch_size = 8
lr = 1e-3
patch_size = 32
patch_count = 2
depths = 1,1
embed_dims = 8,16
windows = 4,2
n_state = 4
head_hidden = 8
chunk = 16
"""


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthset")
    rv = main(["synth-data", "--count", "24", "--seed", "3", "--out", str(out), "--size", "48"])
    assert rv == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset_dir):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "run.cfg"
    cfg.write_text(DESK_CONFIG)
    ckpt_path = out / "model.ckpt"
    rv = main(["train", "--config", str(cfg), "--data", str(dataset_dir / "manifest.csv"),
               "--out", str(ckpt_path), "--seed", "5"])
    assert rv == 0
    return out, ckpt_path, cfg


def test_synth_data_deterministic(tmp_path, dataset_dir):
    again = tmp_path / "again"
    assert main(["synth-data", "--count", "24", "--seed", "3", "--out", str(again), "--size", "48"]) == 0
    m1 = (dataset_dir / "manifest.csv").read_bytes()
    m2 = (again / "manifest.csv").read_bytes()
    assert m1 == m2
    for name in sorted(os.listdir(again / "images")):
        assert (again / "images" / name).read_bytes() == (dataset_dir / "images" / name).read_bytes()


def test_synth_data_zero_count_is_argument_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["synth-data", "--count", "0", "--out", str(tmp_path / "x")])
    assert e.value.code == 2


def test_config_file_parsing(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(DESK_CONFIG)
    rc = parse_config_file(str(cfg))
    assert rc.epochs == 2 and rc.batch_size == 8 and rc.lr == pytest.approx(1e-3)
    assert rc.model["depths"] == [1, 1] and rc.model["embed_dims"] == [8, 16]

    bad = tmp_path / "bad.cfg"
    bad.write_text("unknown_key = 5\n")
    assert main(["train", "--config", str(bad), "--data", "x", "--out", "y"]) == 2

    malformed = tmp_path / "mal.cfg"
    malformed.write_text("epochs four\n")
    assert main(["train", "--config", str(malformed), "--data", "x", "--out", "y"]) == 2


def test_train_writes_checkpoint_and_log(trained):
    out, ckpt_path, _ = trained
    assert ckpt_path.exists()
    log = out / "model.log.csv"
    assert log.exists()
    with open(log) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert {"epoch", "lr", "train_loss"} <= set(rows[0])
    meta, tensors = ckpt.load(str(ckpt_path))
    assert meta["kind"] == "full" and meta["run"]["epochs"] == 2
    assert tensors


def test_train_same_seed_identical_checkpoint(tmp_path, dataset_dir, trained):
    _, ckpt_path, cfg = trained
    again = tmp_path / "again.ckpt"
    rv = main(["train", "--config", str(cfg), "--data", str(dataset_dir / "manifest.csv"),
               "--out", str(again), "--seed", "5"])
    assert rv == 0
    assert again.read_bytes() == ckpt_path.read_bytes()


def test_train_zero_epochs_writes_loadable_checkpoint(tmp_path, dataset_dir, trained):
    _, _, cfg = trained
    out = tmp_path / "untrained.ckpt"
    rv = main(["train", "--config", str(cfg), "--data", str(dataset_dir / "manifest.csv"),
               "--out", str(out), "--epochs", "0", "--seed", "1"])
    assert rv == 0
    meta, tensors = ckpt.load(str(out))
    assert meta["run"]["epochs"] == 0 and tensors


def test_eval_json_and_determinism(trained, dataset_dir, capsys):
    _, ckpt_path, _ = trained
    args = ["eval", "--checkpoint", str(ckpt_path), "--data", str(dataset_dir / "manifest.csv"),
            "--split", "all", "--json"]
    assert main(args) == 0
    first = capsys.readouterr().out
    payload = json.loads(first)
    assert {"report", "run", "split", "build_version"} <= set(payload)
    assert -1.0 <= payload["report"]["srcc"] <= 1.0
    assert main(args) == 0
    assert capsys.readouterr().out == first


def test_eval_table_output(trained, dataset_dir, capsys):
    _, ckpt_path, _ = trained
    assert main(["eval", "--checkpoint", str(ckpt_path), "--data",
                 str(dataset_dir / "manifest.csv"), "--split", "all"]) == 0
    out = capsys.readouterr().out
    assert "plcc" in out and "srcc" in out and "all" in out


def test_eval_missing_data_exit_code(trained, capsys):
    _, ckpt_path, _ = trained
    assert main(["eval", "--checkpoint", str(ckpt_path), "--data", "/nonexistent/m.csv"]) == 3


def test_eval_bad_checkpoint_exit_code(tmp_path, dataset_dir, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert main(["eval", "--checkpoint", str(bad), "--data", str(dataset_dir / "manifest.csv")]) == 2


def test_perfect_predictions_score_one(dataset_dir):
    samples = load_dataset(str(dataset_dir / "manifest.csv"))
    report = evaluate_samples(lambda ss: np.array([s.mos for s in ss]), samples)
    assert report.plcc == pytest.approx(1.0, abs=1e-12)
    assert report.srcc == pytest.approx(1.0, abs=1e-12)


def test_transfer_none_keeps_parameters(trained, dataset_dir, capsys):
    _, ckpt_path, _ = trained
    rv = main(["transfer", "--checkpoint", str(ckpt_path), "--data",
               str(dataset_dir / "manifest.csv"), "--mode", "none"])
    assert rv == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["mode"] == "none"
    assert payload["tunable_fraction"] == 0.0


def test_transfer_styleprompt_writes_adapter_checkpoint(trained, dataset_dir, tmp_path, capsys):
    _, ckpt_path, _ = trained
    out = tmp_path / "adapters.ckpt"
    rv = main(["transfer", "--checkpoint", str(ckpt_path), "--data",
               str(dataset_dir / "manifest.csv"), "--mode", "styleprompt",
               "--epochs", "1", "--out", str(out)])
    assert rv == 0
    payload = json.loads(capsys.readouterr().out)
    assert 0.0 < payload["tunable_fraction"] < 0.35
    meta, tensors = ckpt.load(str(out))
    assert meta["kind"] == "adapters"
    assert "backbone_hash" in meta
    assert all(".adapter." in n or n.startswith("head.") for n in tensors)


def test_transfer_linear_probe(trained, dataset_dir, capsys):
    _, ckpt_path, _ = trained
    rv = main(["transfer", "--checkpoint", str(ckpt_path), "--data",
               str(dataset_dir / "manifest.csv"), "--mode", "linear-probe",
               "--epochs", "1"])
    assert rv == 0
    payload = json.loads(capsys.readouterr().out)
    head_frac = payload["tunable_fraction"]
    assert 0.0 < head_frac < 0.1


def test_scan_info_csv(capsys):
    assert main(["scan-info", "--height", "16", "--width", "16", "--window", "4"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    header = out[0].split(",")
    assert header == ["mode", "height", "width", "window", "max_adjacent_gap",
                      "mean_adjacent_gap", "median_adjacent_gap"]
    rows = [line.split(",") for line in out[1:]]
    assert {r[0] for r in rows} == {"cross", "local"}
    by_mode = {r[0]: r for r in rows}
    assert float(by_mode["local"][6]) < float(by_mode["cross"][6])  # median separates


def test_scan_info_degenerate_grid(capsys):
    assert main(["scan-info", "--height", "1", "--width", "1"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    for line in out[1:]:
        parts = line.split(",")
        assert parts[4] == "0" and float(parts[5]) == 0.0
