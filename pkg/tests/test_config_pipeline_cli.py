import json

import numpy as np
import pytest
import yaml

from cognigraph.cli import main
from cognigraph.config import DEFAULTS, ConfigError, check_config, config_hash, validate_config
from cognigraph.pipeline import StageFailed, read_labels, run_pipeline

TINY = {
    "dataset": {"n_subjects": 2, "frames": 250},
    "network": {"widths": [2, 2, 2], "n_nodes": 1, "n_reg": 2},
    "search": {"epochs": 2, "batch_size": 8},
    "train": {"epochs": 3},
    "cv": {"folds": 2},
}


def _write(tmp_path, doc, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(doc))
    return p


# -- config ---------------------------------------------------------------------


def test_minimal_config_accepted(tmp_path):
    cfg = validate_config(_write(tmp_path, {"seed": 3}))
    assert cfg["seed"] == 3 and cfg["edge"] == DEFAULTS["edge"]
    assert validate_config(_write(tmp_path, {}, "empty.yaml")) == DEFAULTS


def test_enum_violation_names_key_and_values(tmp_path):
    with pytest.raises(ConfigError) as err:
        validate_config(_write(tmp_path, {"edge": {"mode": "bogus"}}))
    msg = str(err.value)
    assert "edge.mode" in msg and "'bogus'" in msg
    for v in ("binary", "single_ern", "multi_ern"):
        assert v in msg


def test_all_violations_reported():
    with pytest.raises(ConfigError) as err:
        check_config({"edge": {"mode": "bogus"}, "train": {"epochs": -1}, "colour": "blue"})
    assert len(err.value.errors) == 3


def test_semantic_checks():
    with pytest.raises(ConfigError, match="divide"):
        check_config({"network": {"widths": [4, 6, 12]}})
    with pytest.raises(ConfigError, match="dataset.root"):
        check_config({"dataset": {"kind": "files"}})


def test_unreadable_and_malformed(tmp_path):
    with pytest.raises(ConfigError):
        validate_config(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("a: [1,")
    with pytest.raises(ConfigError):
        validate_config(tmp_path / "bad.yaml")


def test_config_hash_stable_and_sectioned():
    cfg = check_config({})
    other = check_config({"train": {"epochs": 7}})
    assert config_hash(cfg) == config_hash(check_config({}))
    assert config_hash(cfg, ("search",)) == config_hash(other, ("search",))
    assert config_hash(cfg, ("train",)) != config_hash(other, ("train",))


# -- pipeline ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = check_config(TINY)
    first = run_pipeline(cfg, out)
    return cfg, out, first


def _names(manifest, skipped=None):
    return [s["name"] for s in manifest["stages"] if skipped is None or s["skipped"] == skipped]


def test_pipeline_counts(finished_run):
    cfg, out, man = finished_run
    assert _names(man) == [
        "synth-data", "preprocess:s001", "preprocess:s002", "search:s001", "search:s002",
        "encode:s001", "encode:s002", "train", "evaluate",
    ]
    outputs = [p for s in man["stages"] for p in s["outputs"]]
    assert len(outputs) == len(set(outputs))  # each artifact exactly once
    assert sum(p.endswith(".ckpt.npz") for p in outputs) == 2
    assert sum(p.endswith(".graph.json") for p in outputs) == 2
    assert sum(p.endswith("model.pt") for p in outputs) == 1
    assert set(read_labels(out / "data" / "labels.csv")) == {"s001", "s002"}
    report = json.loads((out / "evaluation.json").read_text())
    assert set(report["predictions"]) == {"s001", "s002"}
    assert json.loads((out / "manifest.json").read_text())["config_hash"] == config_hash(cfg)


def test_rerun_is_fully_cached(finished_run):
    cfg, out, first = finished_run
    second = run_pipeline(cfg, out)
    assert _names(second, skipped=False) == []
    strip = lambda m: [{k: v for k, v in s.items() if k not in ("started", "finished", "skipped")} for s in m["stages"]]
    assert strip(second) == strip(first)


def test_corrupt_checkpoint_reruns_downstream_only(finished_run):
    cfg, out, _ = finished_run
    ckpt = out / "checkpoints" / "s001.ckpt.npz"
    ckpt.write_bytes(ckpt.read_bytes()[:-16] + b"\0" * 16)
    man = run_pipeline(cfg, out)
    assert _names(man, skipped=False) == ["search:s001", "encode:s001", "train", "evaluate"]
    assert _names(run_pipeline(cfg, out), skipped=False) == []


def test_same_seed_same_artifacts(finished_run, tmp_path):
    cfg, out, _ = finished_run
    again = run_pipeline(cfg, tmp_path / "again")
    ref = json.loads((out / "manifest.json").read_text())
    # the model file embeds no timestamps, so every artifact hash must agree
    hashes = lambda m: {k: v for s in m["stages"] for k, v in s["outputs"].items()}
    assert hashes(again) == hashes(ref)


def test_failed_stage_records_partial_state(tmp_path):
    cfg = check_config({**TINY, "dataset": {"n_subjects": 2, "frames": 90}})  # too short for one window
    with pytest.raises(StageFailed):
        run_pipeline(cfg, tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    statuses = {s["name"]: s["status"] for s in man["stages"]}
    assert statuses["synth-data"] == "done"
    assert "failed" in statuses.values()


# -- CLI --------------------------------------------------------------------------


def test_cli_stepwise(tmp_path, capsys):
    cfg = _write(tmp_path, TINY)
    common = ["--config", str(cfg), "--seed", "1"]
    assert main(["synth-data", *common, "--out", str(tmp_path / "data"), "--subjects", "2"]) == 0
    assert main(["preprocess", *common, "--out", str(tmp_path / "win"), "--data", str(tmp_path / "data")]) == 0
    assert main(["search", *common, "--out", str(tmp_path / "ck"), "--windows", str(tmp_path / "win")]) == 0
    assert main(["encode-graph", *common, "--out", str(tmp_path / "g"), "--checkpoints", str(tmp_path / "ck")]) == 0
    labels = str(tmp_path / "data" / "labels.csv")
    assert main(["train-personality", *common, "--out", str(tmp_path / "m"), "--graphs", str(tmp_path / "g"), "--labels", labels]) == 0
    assert main(["evaluate", *common, "--out", str(tmp_path / "e"), "--model", str(tmp_path / "m" / "model.pt"),
                 "--graphs", str(tmp_path / "g"), "--labels", labels]) == 0
    assert (tmp_path / "e" / "evaluation.json").exists()
    assert len(list((tmp_path / "g").glob("*.graph.json"))) == 2


def test_cli_exit_codes(tmp_path, capsys):
    bad = _write(tmp_path, {"edge": {"mode": "bogus"}})
    assert main(["pipeline", "--config", str(bad)]) == 2
    assert "edge.mode" in capsys.readouterr().err
    assert main(["preprocess", "--out", str(tmp_path / "o"), "--data", str(tmp_path / "nothing")]) == 1
    with pytest.raises(SystemExit):
        main(["search", "--out", str(tmp_path)])  # --windows is required


def test_cli_pipeline(tmp_path, capsys):
    cfg = _write(tmp_path, {**TINY, "out": str(tmp_path / "p")})
    assert main(["pipeline", "--config", str(cfg)]) == 0
    assert "9 stages, 9 executed" in capsys.readouterr().out
    assert main(["pipeline", "--config", str(cfg)]) == 0
    assert "0 executed, 9 cached" in capsys.readouterr().out
