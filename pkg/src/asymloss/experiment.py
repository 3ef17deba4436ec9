"""Experiment configuration, method presets and the run pipeline.

A run subsamples the training cases, draws training patches, trains, and
then evaluates densely (every pixel) on its own training cases and on the
test cases. The same function backs the command line tool and the
acceptance suite.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import analysis as A
from .data import DataConfig, ImageSet, extract_patches, make_splits, subsample
from .errors import ConfigError
from .losses import LossConfig
from .training import ModelConfig, TrainConfig, TrainedModel, train

ALL_FOUR = ("margin", "focal", "adversarial", "mixup")

# keys are the method names of the results table, lowercased and hyphenated
PRESETS: dict[str, dict] = {
    "vanilla-ce": {"loss": {}},
    "vanilla-dsc": {"loss": {"variant": "dice"}},
    "vanilla-ce-80-tumor": {"loss": {}, "class_sampling_ratio": 0.8},
    "large-margin-loss": {"loss": {"variant": "margin"}},
    "asymmetric-large-margin-loss": {"loss": {"variant": "margin", "asymmetric": True}},
    "focal-loss": {"loss": {"variant": "focal"}},
    "asymmetric-focal-loss": {"loss": {"variant": "focal", "asymmetric": True}},
    "adversarial-training": {"loss": {"variant": "adversarial"}},
    "asymmetric-adversarial-training": {"loss": {"variant": "adversarial", "asymmetric": True}},
    "mixup": {"loss": {"variant": "mixup"}},
    "asymmetric-mixup": {"loss": {"variant": "mixup", "asymmetric": True}},
    "asymmetric-combination": {"loss": {"combine": list(ALL_FOUR), "asymmetric": True}},
}

# symmetric preset -> asymmetric counterpart
PAIRS = {
    "large-margin-loss": "asymmetric-large-margin-loss",
    "focal-loss": "asymmetric-focal-loss",
    "adversarial-training": "asymmetric-adversarial-training",
    "mixup": "asymmetric-mixup",
}


def preset_key(name: str) -> str:
    key = name.strip().lower().replace("%", "").replace(" ", "-")
    while "--" in key:
        key = key.replace("--", "-")
    if key not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}")
    return key


def apply_preset(cfg: TrainConfig, name: str) -> TrainConfig:
    """Select the preset's loss variant; hyper-parameters already in ``cfg.loss`` are kept."""
    spec = PRESETS[preset_key(name)]
    keep = {k: v for k, v in cfg.loss.to_dict().items()
            if k not in ("variant", "asymmetric", "combine")}
    loss = LossConfig(**{**keep, "variant": "ce", "asymmetric": False, "combine": (), **spec["loss"]})
    extra = {k: v for k, v in spec.items() if k != "loss"}
    return replace(cfg, loss=loss, **extra)


@dataclass(frozen=True)
class AnalysisConfig:
    hist_low: float = -20.0
    hist_high: float = 20.0
    hist_width: float = 0.5

    @property
    def spec(self) -> A.HistogramSpec:
        return A.HistogramSpec(self.hist_low, self.hist_high, self.hist_width)


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    preset: str = "vanilla-ce"
    out: str = ""
    seed: int = 0

    def resolved(self) -> "ExperimentConfig":
        """Apply the preset and propagate the global seed and the patch size."""
        tr = apply_preset(self.train, self.preset)
        return replace(self,
                       preset=preset_key(self.preset),
                       model=replace(self.model, input_size=self.data.patch_size ** 2, seed=self.seed),
                       train=replace(tr, seed=self.seed))

    def to_dict(self) -> dict:
        return {"data": self.data.to_dict(), "model": self.model.to_dict(), "train": self.train.to_dict(),
                "analysis": asdict(self.analysis), "preset": self.preset, "out": self.out, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kw = {}
        if "data" in d:
            kw["data"] = DataConfig.from_dict(d["data"])
        if "model" in d:
            kw["model"] = ModelConfig.from_dict(d["model"])
        if "train" in d:
            kw["train"] = TrainConfig.from_dict(d["train"])
        if "analysis" in d:
            extra = set(d["analysis"]) - set(AnalysisConfig.__dataclass_fields__)
            if extra:
                raise ConfigError(f"unknown analysis keys: {sorted(extra)}")
            kw["analysis"] = AnalysisConfig(**d["analysis"])
        for k in ("preset", "out", "seed"):
            if k in d:
                kw[k] = d[k]
        cfg = cls(**kw)
        preset_key(cfg.preset)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        except TypeError as exc:
            raise ConfigError(f"{path}: {exc}") from None


@dataclass
class RunResult:
    trained: TrainedModel
    train_metrics: A.DatasetMetrics
    test_metrics: A.DatasetMetrics
    shift: A.ShiftReport
    summary: A.RunSummary


def training_cases(train_images: ImageSet, cfg: ExperimentConfig) -> ImageSet:
    return subsample(train_images, cfg.train.fraction, cfg.seed)


def analyse(trained: TrainedModel, train_images: ImageSet, test_images: ImageSet, patch_size: int,
            spec: A.HistogramSpec | None = None, label: str = ""):
    """Dense metrics on the model's own training cases and on the test cases, plus the logit shift."""
    own = train_images.select(trained.train_case_ids)
    dense_train = extract_patches(own, patch_size)
    dense_test = extract_patches(test_images, patch_size)
    table = A.collect_logits(trained, dense_train, dense_test)
    pred = (table.z1 > table.z0).astype(np.int64)
    is_train = table.split == "train"
    m_train = A.dataset_metrics(pred[is_train], table.true_class[is_train], table.case_id[is_train])
    m_test = A.dataset_metrics(pred[~is_train], table.true_class[~is_train], table.case_id[~is_train])
    return m_train, m_test, A.shift_statistic(table, spec, label)


def run(cfg: ExperimentConfig, train_images: ImageSet | None = None, test_images: ImageSet | None = None,
        *, resolved: bool = False) -> RunResult:
    cfg = cfg if resolved else cfg.resolved()
    if train_images is None or test_images is None:
        train_images, test_images = make_splits(cfg.data)
    own = training_cases(train_images, cfg)
    ds = extract_patches(own, cfg.data.patch_size, cfg.train.class_sampling_ratio,
                         cfg.data.patches_per_case, seed=cfg.seed)
    trained = train(ds, cfg.model, cfg.train)
    trained.preset = cfg.preset
    label = f"{cfg.preset}/f{cfg.train.fraction:g}/s{cfg.seed}"
    m_train, m_test, shift = analyse(trained, train_images, test_images, cfg.data.patch_size,
                                     cfg.analysis.spec, label)
    summary = A.RunSummary(cfg.preset, cfg.train.fraction, cfg.seed, cfg.to_dict(), m_train, m_test, shift)
    return RunResult(trained, m_train, m_test, shift, summary)


def sweep_configs(base: ExperimentConfig, presets, fractions, seeds):
    for p in presets:
        for f in fractions:
            for s in seeds:
                yield replace(base, preset=preset_key(p), seed=int(s),
                              train=replace(base.train, fraction=float(f)))
