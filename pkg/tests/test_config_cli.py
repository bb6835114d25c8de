import json
from pathlib import Path

import numpy as np
import pytest

from vesselseg.cli import format_table, main
from vesselseg.config import ARTIFACT, PUBLISHED, USER, load_config, resolve, with_overrides
from vesselseg.volume_core import load_mask

ROOT = Path(__file__).resolve().parents[1]

TINY = """
patch_size = 16
epochs = 1
steps_per_epoch = 2
[network]
base_channels = 4
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    (d / "tiny.toml").write_text(TINY)
    assert run("phantom", "--n", 10, "--size", 32, "--seed", 3, "--out", d / "ph") == 0
    assert run("preprocess", "--manifest", d / "ph/manifest.json", "--patch", 16, "--out", d / "prep") == 0
    assert run("train", "--manifest", d / "prep/manifest.json", "--config", d / "tiny.toml", "--out", d / "run") == 0
    assert run("predict", "--checkpoint", d / "run/last.ckpt", "--manifest", d / "prep/manifest.json",
               "--split", "test", "--out-dir", d / "pred") == 0
    assert run("evaluate", "--pred-dir", d / "pred", "--manifest", d / "prep/manifest.json", "--split", "test",
               "--out", d / "report.json", "--method", "semi") == 0
    return d


def test_pipeline_outputs(pipeline):
    d = pipeline
    for rel in ("ph/run.json", "prep/run.json", "run/run.json", "run/last.ckpt", "run/train_log.jsonl",
                "pred/run.json", "report.run.json"):
        assert (d / rel).exists(), rel
    record = json.loads((d / "run/run.json").read_text())
    assert record["command"] == "train" and record["seed"] == 0 and record["version"]
    assert record["config"]["trainer"]["patch_size"] == 16
    report = json.loads((d / "report.json").read_text())
    assert len(report["cases"]) == 2 and set(report["aggregate"]) >= {"dsc", "surface_error"}
    pred = load_mask(next((d / "pred").glob("*.nii.gz")))
    assert pred.shape == (32, 32, 32)


def test_report_markdown_layout(pipeline, capsys):
    d = pipeline
    assert run("report", "--in", d / "report.json", "--format", "md") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "| Metric | semi |"
    labels = [line.split("|")[1].strip() for line in lines[2:]]
    assert labels == ["Sensitivity", "Precision", "Specificity", "Jac", "VS", "DSC", "Surface Error", "p-value"]
    assert all(" ± " in line for line in lines[2:9])


def test_report_csv_and_paired_test(pipeline, tmp_path):
    d = pipeline
    assert run("evaluate", "--pred-dir", d / "pred", "--manifest", d / "prep/manifest.json", "--split", "test",
               "--roi", "full", "--gt", "full_mask", "--out", tmp_path / "full.json") == 0
    assert run("report", "--in", d / "report.json", tmp_path / "full.json", "--format", "csv",
               "--out", tmp_path / "t.csv") == 0
    rows = (tmp_path / "t.csv").read_text().splitlines()
    assert rows[0] == "Metric,semi,pred" and len(rows) == 9
    # a paired test needs at least five shared cases, so two test cases are a validation error
    assert run("evaluate", "--pred-dir", d / "pred", "--manifest", d / "prep/manifest.json", "--split", "test",
               "--baseline", d / "report.json", "--out", tmp_path / "p.json") == 1


def test_provenance_listing(pipeline, capsys):
    d = pipeline
    assert run("report", "--in", d / "report.json", "--provenance", d / "run/run.json") == 0
    text = capsys.readouterr().out
    rows = {line.split("|")[1].strip(): line.split("|")[3].strip() for line in text.splitlines()
            if line.startswith("| ") and line.count("|") == 5}
    assert rows["learning_rate"] == PUBLISHED and rows["lr_factor"] == PUBLISHED
    assert rows["epochs"] == USER and rows["network.base_channels"] == USER
    assert rows["network.variant"] == ARTIFACT


def test_rerun_reproduces_training(pipeline, tmp_path):
    d = pipeline
    assert run("rerun", d / "run/run.json", "--out", tmp_path / "again") == 0

    def strip(p):
        return [{k: v for k, v in json.loads(line).items() if k != "wall_time"} for line in p.read_text().splitlines()]

    assert strip(tmp_path / "again/train_log.jsonl") == strip(d / "run/train_log.jsonl")
    assert (tmp_path / "again/last.ckpt").read_bytes() == (d / "run/last.ckpt").read_bytes()


def test_rerun_replays_other_commands(pipeline, tmp_path):
    d = pipeline
    assert run("rerun", d / "pred/run.json", "--out", tmp_path / "pred2") == 0
    for p in (d / "pred").glob("*.nii.gz"):
        assert np.array_equal(load_mask(p).data, load_mask(tmp_path / "pred2" / p.name).data)


def test_usage_errors(tmp_path, capsys):
    assert run("train", "--bogus") == 2
    assert "usage" in capsys.readouterr().err
    assert run("nosuchcommand") == 2
    assert run("predict", "--checkpoint", tmp_path / "x.ckpt") == 1  # missing file
    capsys.readouterr()


def test_validation_failure_is_structured(tmp_path, capsys):
    (tmp_path / "bad.toml").write_text("epochs = 1\nmystery = 3\n")
    assert run("train", "--manifest", tmp_path / "m.json", "--config", tmp_path / "bad.toml", "--out", tmp_path) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ValueError" and "mystery" in err["message"]


def test_resolve_defaults_and_unknown_keys():
    cfg = resolve()
    assert cfg.provenance["epochs"] == PUBLISHED and cfg.provenance["patch_size"] == ARTIFACT
    assert "network.patch_size" not in cfg.provenance
    for bad in ({"nope": 1}, {"loss": {"gamma": 2}}, {"network": {"patch_size": 16}}, {"paths": {"data": "x"}}):
        with pytest.raises(ValueError):
            resolve(bad)


def test_overrides_tag_user():
    cfg = with_overrides(resolve(), epochs=3, seed=None)
    assert cfg.trainer.epochs == 3 and cfg.provenance["epochs"] == USER and cfg.provenance["seed"] == ARTIFACT
    with pytest.raises(ValueError):
        with_overrides(resolve(), loss=1)


def test_template_config_loads():
    cfg = load_config(ROOT / "configs/train.toml")
    assert cfg.trainer == resolve().trainer


def test_format_table_missing_std_cells():
    rep = {"method": "m", "aggregate": {k: [0.5, 0.1] for k in
                                        ("sensitivity", "precision", "specificity", "jaccard", "vs", "dsc",
                                         "surface_error")},
           "paired_test": {"p_value": 0.0123}}
    out = format_table([rep], "md")
    assert "| DSC | 0.5000 ± 0.1000 |" in out and "| p-value | 0.0123 |" in out
