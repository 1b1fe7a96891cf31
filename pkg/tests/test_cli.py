import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mckws import cli
from mckws.cli import main, parse_threshold_range


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_parse_threshold_range():
    values = parse_threshold_range("0.0:1.0:0.25")
    np.testing.assert_allclose(values, [0.0, 0.25, 0.5, 0.75, 1.0])
    with pytest.raises(Exception, match="start:stop:step"):
        parse_threshold_range("0.5")
    with pytest.raises(Exception, match="step"):
        parse_threshold_range("0:1:-0.1")


def test_set_override_parsing():
    overrides = cli._parse_set_overrides(
        ["epochs=3", "model.hidden=16", "mode=mapping", "loss_weights=[1,0,0,0]"])
    assert overrides == {"epochs": 3, "model": {"hidden": 16}, "mode": "mapping",
                         "loss_weights": [1, 0, 0, 0]}
    with pytest.raises(Exception, match="key=value"):
        cli._parse_set_overrides(["oops"])


def test_synth_data_deterministic_and_force(tmp_path, capsys):
    args = ["synth-data", "--keywords", "4", "--fillers", "4", "--seed", "7",
            "--noisy-frac", "0.5", "--filler-min", "1.0", "--filler-max", "1.3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    # non-empty out dir without --force is a data error
    assert main(args + ["--out", str(tmp_path / "a")]) == 3
    assert main(args + ["--out", str(tmp_path / "a"), "--force"]) == 0


def test_synth_data_filler_only(tmp_path):
    assert main(["synth-data", "--out", str(tmp_path / "neg"), "--keywords", "0",
                 "--fillers", "6", "--seed", "1", "--filler-min", "1.0",
                 "--filler-max", "1.2"]) == 0
    manifest = tmp_path / "neg" / "train.jsonl"
    entries = [json.loads(line) for line in manifest.read_text().splitlines()]
    assert entries and all(e["label"] == "filler" for e in entries)


def test_train_eval_roc_pipeline(mini_corpus, tmp_path, capsys):
    root = mini_corpus["train"].parent
    config = {
        "mode": "attention", "epochs": 1, "batch_size": 4, "seed": 2,
        "model": {"att_proj": 8, "hidden": 8},
        "train_manifest": str(root / "train.jsonl"),
        "valid_manifest": str(root / "valid.jsonl"),
    }
    config_path = tmp_path / "train.json"
    config_path.write_text(json.dumps(config))
    ckpt = tmp_path / "model.ckpt"
    metrics = tmp_path / "metrics.csv"

    assert main(["train", "--config", str(config_path), "--out", str(ckpt),
                 "--metrics", str(metrics), "--set", "epochs=2"]) == 0
    assert ckpt.exists()
    rows = metrics.read_text().splitlines()
    assert rows[0].startswith("epoch,split")
    assert len(rows) == 1 + 2 * 2  # two epochs from the --set override

    assert main(["eval", "--ckpt", str(ckpt), "--manifest",
                 str(root / "eval.jsonl"), "--threshold", "0.5"]) == 0
    printed = capsys.readouterr().out.splitlines()[-1]
    assert printed.startswith("fa_per_hour=") and "wakeup_rate=" in printed

    roc_csv = tmp_path / "roc.csv"
    assert main(["roc", "--ckpt", str(ckpt), "--pos", str(root / "eval.jsonl"),
                 "--neg", str(root / "eval.jsonl"),
                 "--thresholds", "0.0:1.0:0.2", "--out", str(roc_csv)]) == 0
    assert roc_csv.read_text().splitlines()[0] == "threshold,fa_per_hour,wakeup_rate"


def test_train_config_errors_exit_2(tmp_path):
    assert main(["train", "--out", str(tmp_path / "x.ckpt")]) == 2  # no manifests

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"mode": "bogus", "train_manifest": "t",
                               "valid_manifest": "v"}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x.ckpt")]) == 2

    bad_weights = tmp_path / "weights.json"
    bad_weights.write_text(json.dumps({
        "mode": "attention", "train_manifest": "t", "valid_manifest": "v",
        "loss_weights": [0.5, 0.2, 0.2, 0.2]}))
    assert main(["train", "--config", str(bad_weights),
                 "--out", str(tmp_path / "x.ckpt")]) == 2

    assert main(["train", "--config", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path / "x.ckpt")]) == 2


def test_missing_manifest_is_data_error(mini_checkpoint, tmp_path):
    assert main(["eval", "--ckpt", str(mini_checkpoint), "--manifest",
                 str(tmp_path / "nope.jsonl")]) == 3


def test_divergence_maps_to_exit_4(tmp_path, monkeypatch):
    from mckws.errors import DivergenceError

    def explode(*a, **k):
        raise DivergenceError(7)

    monkeypatch.setattr(cli, "train", explode)
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"mode": "attention", "train_manifest": "t",
                                  "valid_manifest": "v"}))
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "x")]) == 4


def test_module_entrypoint_smoke(tmp_path):
    result = subprocess.run(
        [sys.executable, "-m", "mckws.cli", "synth-data", "--out",
         str(tmp_path / "c"), "--keywords", "1", "--fillers", "1",
         "--seed", "3", "--filler-min", "1.0", "--filler-max", "1.1"],
        capture_output=True, text=True)
    assert result.returncode == 0, result.stderr
    assert (tmp_path / "c" / "eval.jsonl").exists()