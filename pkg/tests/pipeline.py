"""Drive the command line tool in-process, the way a user would chain it."""

import json
from pathlib import Path

from asymloss.cli import main

SMALL = {
    "data": {"n_train_cases": 8, "n_test_cases": 4, "patches_per_case": 60},
    "train": {"epochs": 3, "steps_per_epoch": 10},
    "seed": 1,
}


def write_config(path, overrides=None):
    cfg = json.loads(json.dumps(SMALL))
    for section, values in (overrides or {}).items():
        if isinstance(values, dict):
            cfg.setdefault(section, {}).update(values)
        else:
            cfg[section] = values
    Path(path).write_text(json.dumps(cfg))
    return str(path)


def full_pipeline(root, config, train_flags=()):
    """generate -> train -> evaluate (both splits) -> analyze; returns the output dirs."""
    root = Path(root)
    data, model, report = root / "data", root / "model", root / "report"
    assert main(["generate", "--config", config, "--out", str(data)]) == 0
    assert main(["train", "--config", config, "--dataset", str(data), "--out", str(model), *train_flags]) == 0
    for split in ("test", "train"):
        assert main(["evaluate", "--model", str(model / "model.bin"), "--dataset", str(data),
                     "--split", split, "--out", str(report)]) == 0
    assert main(["analyze", "--model", str(model / "model.bin"), "--dataset", str(data),
                 "--out", str(report)]) == 0
    return data, model, report


def text_artifacts(root):
    """Relative path -> bytes for every CSV and JSON file under ``root``."""
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.suffix in (".csv", ".json")}
