import csv
import hashlib
import json
import os
import shutil
import subprocess
import sys

import jsonschema
import pytest

from asymloss.cli import EXIT_CODES, main
from asymloss.experiment import PRESETS
from asymloss.io import load_schema

from pipeline import full_pipeline, text_artifacts, write_config

TABLE_NAMES = [
    "Vanilla - CE", "Vanilla - DSC", "Vanilla - CE - 80% tumor", "Large margin loss",
    "Asymmetric large margin loss", "Focal loss", "Asymmetric focal loss", "Adversarial training",
    "Asymmetric adversarial training", "Mixup", "Asymmetric mixup", "Asymmetric combination",
]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    config = write_config(root / "config.json")
    data, model, report = full_pipeline(root, config)
    return root, config, data, model, report


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def error_line(capsys):
    err = capsys.readouterr().err.strip()
    assert "\n" not in err
    return err


# -- generate ---------------------------------------------------------------------------

def test_manifest_counts_and_hashes(pipeline):
    _, _, data, _, _ = pipeline
    manifest = json.loads((data / "manifest.json").read_text())
    jsonschema.validate(manifest, load_schema("manifest"))
    assert manifest["n_cases"] == {"train": 8, "test": 4}
    assert len(manifest["case_ids"]["train"]) == 8
    # recompute both kinds of hash from scratch
    canon = json.dumps(manifest["config"], sort_keys=True, separators=(",", ":"))
    assert hashlib.sha256(canon.encode()).hexdigest() == manifest["config_hash"]
    for name, digest in manifest["files"].items():
        assert hashlib.sha256((data / name).read_bytes()).hexdigest() == digest


def test_generate_is_idempotent(pipeline, tmp_path):
    _, config, data, _, _ = pipeline
    assert main(["generate", "--config", config, "--out", str(tmp_path)]) == 0
    for name in ("train_images.bin", "test_images.bin", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (data / name).read_bytes()


def test_resolved_config_is_echoed(pipeline):
    _, _, data, model, _ = pipeline
    for d in (data, model):
        cfg = json.loads((d / "config.json").read_text())
        assert cfg["data"]["n_train_cases"] == 8 and cfg["seed"] == 1
    assert json.loads((model / "config.json").read_text())["train"]["seed"] == 1


# -- train / evaluate ---------------------------------------------------------------------

def test_train_outputs(pipeline):
    _, _, _, model, _ = pipeline
    rows = read_rows(model / "loss_trace.csv")
    assert rows[0] == ["epoch", "mean_loss"] and len(rows) == 4


def test_evaluate_reports(pipeline):
    _, _, _, _, report = pipeline
    for split, n in (("test", 4), ("train", 8)):
        summary = read_rows(report / f"metrics_{split}.csv")
        assert summary[0] == ["split", "n_cases", "DSC", "SENS", "PRC"]
        assert summary[1][:2] == [split, str(n)]
        cases = read_rows(report / f"metrics_{split}_cases.csv")
        assert cases[0] == ["split", "case_id", "DSC", "SENS", "PRC"]
        assert len(cases) - 1 == n


def test_evaluate_rejects_split_misuse(pipeline, tmp_path, capsys):
    _, _, data, model, _ = pipeline
    code = main(["evaluate", "--model", str(model / "model.bin"), "--dataset", str(data), "--split", "test",
                 "--images", str(data / "train_images.bin"), "--out", str(tmp_path)])
    assert code == 1 and error_line(capsys).startswith("E_CONTRACT:")


def test_train_dsc_not_below_test_dsc_on_overfit_run(tmp_path):
    config = write_config(tmp_path / "c.json", {"data": {"n_train_cases": 50, "n_test_cases": 20,
                                                         "patches_per_case": 200},
                                                "train": {"epochs": 30, "steps_per_epoch": 50}, "seed": 0})
    data, model, report = full_pipeline(tmp_path, config, ["--fraction", "0.05"])
    train_dsc = float(read_rows(report / "metrics_train.csv")[1][2])
    test_dsc = float(read_rows(report / "metrics_test.csv")[1][2])
    assert train_dsc >= test_dsc


def test_ce_flag_equals_zero_margin(pipeline, tmp_path):
    _, config, data, _, _ = pipeline
    got = {}
    for name, flags in (("ce", ["--loss", "ce"]), ("m0", ["--loss", "margin", "--margin", "0"])):
        out = tmp_path / name
        assert main(["train", "--config", config, "--dataset", str(data), "--out", str(out), *flags]) == 0
        assert main(["evaluate", "--model", str(out / "model.bin"), "--dataset", str(data), "--out", str(out)]) == 0
        got[name] = read_rows(out / "metrics_test.csv")[1][2:]
    for a, b in zip(got["ce"], got["m0"]):
        assert abs(float(a) - float(b)) <= 1e-9


@pytest.mark.parametrize("name", TABLE_NAMES)
def test_every_table_name_is_a_preset(name, pipeline, tmp_path):
    _, config, data, _, _ = pipeline
    assert main(["train", "--config", config, "--dataset", str(data), "--out", str(tmp_path),
                 "--preset", name, "--epochs", "1"]) == 0
    assert json.loads((tmp_path / "config.json").read_text())["preset"] in PRESETS


# -- analyze ------------------------------------------------------------------------------

def test_analyze_outputs_validate(pipeline):
    _, _, _, _, report = pipeline
    shift = json.loads((report / "shift.json").read_text())
    hist = json.loads((report / "histograms.json").read_text())
    jsonschema.validate(shift, load_schema("shift"))
    jsonschema.validate(hist, load_schema("histograms"))
    assert len(shift["reports"]) == 1 and len(hist["reports"]) == 1
    rows = read_rows(report / "sweep.csv")
    assert len(rows) == 2


def test_sweep_over_five_fractions(tmp_path):
    config = write_config(tmp_path / "c.json", {"train": {"epochs": 1, "steps_per_epoch": 3}})
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", config, "--out", str(out), "--seeds", "0,1", "--jobs", "2"]) == 0
    rows = read_rows(out / "sweep.csv")
    assert len(rows) == 6
    assert [float(r[1]) for r in rows[1:]] == [0.05, 0.1, 0.2, 0.5, 1.0]
    jsonschema.validate(json.loads((out / "shift.json").read_text()), load_schema("shift"))
    assert (out / "runs" / "vanilla-ce" / "f0.05" / "s1" / "metrics_test_cases.csv").exists()


def test_pipeline_is_byte_identical(pipeline):
    root, config, *_ = pipeline
    first = text_artifacts(root)
    for sub in ("data", "model", "report"):
        shutil.rmtree(root / sub)
    full_pipeline(root, config)
    assert text_artifacts(root) == first
    assert len(first) >= 10


# -- errors ---------------------------------------------------------------------------------

def test_invalid_config_file(tmp_path, capsys):
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["generate", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == EXIT_CODES["E_CONFIG"]
    assert error_line(capsys).startswith("E_CONFIG:")
    (tmp_path / "typo.json").write_text(json.dumps({"trian": {}}))
    assert main(["generate", "--config", str(tmp_path / "typo.json"), "--out", str(tmp_path)]) == 2
    assert error_line(capsys).startswith("E_CONFIG:")


def test_unknown_preset(pipeline, tmp_path, capsys):
    _, config, data, _, _ = pipeline
    assert main(["train", "--config", config, "--dataset", str(data), "--preset", "dropout",
                 "--out", str(tmp_path)]) == 2
    assert error_line(capsys).startswith("E_CONFIG:")


def test_fingerprint_mismatch_prints_both(pipeline, tmp_path, capsys):
    _, _, data, _, _ = pipeline
    other = write_config(tmp_path / "other.json", {"data": {"seed": 99}})
    assert main(["train", "--config", other, "--dataset", str(data), "--out", str(tmp_path)]) == 4
    err = error_line(capsys)
    manifest = json.loads((data / "manifest.json").read_text())
    assert err.startswith("E_FINGERPRINT:") and manifest["config_hash"] in err
    assert err.count(" ") >= 4 and len([w for w in err.split() if len(w) == 64]) == 2


def test_divergence_exit_code(pipeline, tmp_path, capsys):
    _, config, data, _, _ = pipeline
    assert main(["train", "--config", config, "--dataset", str(data), "--out", str(tmp_path),
                 "--lr", "1000"]) == EXIT_CODES["E_DIVERGED"]
    assert error_line(capsys).startswith("E_DIVERGED:")
    assert not (tmp_path / "model.bin").exists()


def test_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["generate", "--out", str(blocker / "sub")]) == EXIT_CODES["E_IO"]
    assert error_line(capsys).startswith("E_IO:")


def test_missing_dataset(tmp_path, capsys):
    assert main(["train", "--dataset", str(tmp_path / "nowhere"), "--out", str(tmp_path)]) == 1
    assert error_line(capsys).startswith("E_CONTRACT:")


def test_subprocess_entry_point_and_env_default(tmp_path):
    config = write_config(tmp_path / "c.json")
    env = dict(os.environ, ASYMLOSS_OUT=str(tmp_path / "envroot"))
    done = subprocess.run([sys.executable, "-m", "asymloss", "generate", "--config", config],
                          env=env, capture_output=True, text=True)
    assert done.returncode == 0, done.stderr
    assert (tmp_path / "envroot" / "manifest.json").exists()
    bad = subprocess.run([sys.executable, "-m", "asymloss", "train", "--dataset", str(tmp_path / "envroot"),
                          "--config", config, "--lr", "-1"], env=env, capture_output=True, text=True)
    assert bad.returncode == 2
    lines = bad.stderr.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("E_CONFIG:")
