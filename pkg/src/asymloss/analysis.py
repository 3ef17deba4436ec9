"""Segmentation metrics, logit collection and the train/test logit shift.

The shift of a class is ``|mean test logit| - |mean train logit|`` where
the logit is the one of the sample's true class. A negative value means
unseen samples of that class land closer to the decision boundary than
the training samples did.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from statistics import median
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .data import Dataset
from .errors import ContractError
from .training import predict

SCHEMA_VERSION = 1
SPLITS = ("train", "test")
CLASS_NAMES = {0: "background", 1: "foreground"}


# -- metrics ------------------------------------------------------------------

def _ratio(num: int, den: int) -> float | None:
    return num / den if den > 0 else None


def harmonic_dsc(sensitivity: float, precision: float) -> float:
    """DSC as the harmonic mean of sensitivity and precision."""
    if sensitivity + precision == 0:
        return 0.0
    return 2.0 * sensitivity * precision / (sensitivity + precision)


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def sensitivity(self) -> float | None:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def precision(self) -> float | None:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def dsc(self) -> float | None:
        """``2tp / (2tp + fp + fn)``; None when there is no foreground anywhere."""
        return _ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
                "sensitivity": self.sensitivity, "precision": self.precision, "dsc": self.dsc}


def segmentation_metrics(pred, truth) -> MetricsReport:
    pred = np.asarray(pred).astype(bool).ravel()
    truth = np.asarray(truth).astype(bool).ravel()
    if pred.shape != truth.shape:
        raise ContractError(f"prediction and truth lengths differ: {pred.size} vs {truth.size}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return MetricsReport(tp, fp, fn, int(pred.size) - tp - fp - fn)


def _nanmean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


@dataclass
class DatasetMetrics:
    """Per-case reports plus their average (undefined case values are skipped)."""

    per_case: dict[int, MetricsReport]
    pooled: MetricsReport

    @property
    def dsc(self) -> float | None:
        return _nanmean(r.dsc for r in self.per_case.values())

    @property
    def sensitivity(self) -> float | None:
        return _nanmean(r.sensitivity for r in self.per_case.values())

    @property
    def precision(self) -> float | None:
        return _nanmean(r.precision for r in self.per_case.values())

    def to_dict(self) -> dict:
        return {"dsc": self.dsc, "sensitivity": self.sensitivity, "precision": self.precision,
                "n_cases": len(self.per_case), "pooled": self.pooled.to_dict()}


def dataset_metrics(pred, truth, case_ids) -> DatasetMetrics:
    pred, truth, case_ids = np.asarray(pred), np.asarray(truth), np.asarray(case_ids)
    per_case = {int(c): segmentation_metrics(pred[case_ids == c], truth[case_ids == c])
                for c in np.unique(case_ids)}
    return DatasetMetrics(per_case, segmentation_metrics(pred, truth))


def evaluate(model, dataset: Dataset) -> tuple[DatasetMetrics, np.ndarray]:
    """Metrics of ``model`` on a (dense) patch dataset; also returns the logits."""
    logits, labels = predict(model, dataset.x)
    return dataset_metrics(labels, dataset.labels, dataset.case_ids), logits


# -- logits ------------------------------------------------------------------------

class LogitRecord(NamedTuple):
    z0: float
    z1: float
    true_class: int
    split: str
    case_id: int


@dataclass
class LogitTable:
    """Column-wise store of :class:`LogitRecord` rows."""

    z0: np.ndarray
    z1: np.ndarray
    true_class: np.ndarray
    split: np.ndarray
    case_id: np.ndarray

    def __len__(self) -> int:
        return len(self.z0)

    def __iter__(self):
        for i in range(len(self)):
            yield LogitRecord(float(self.z0[i]), float(self.z1[i]), int(self.true_class[i]),
                              str(self.split[i]), int(self.case_id[i]))

    @classmethod
    def from_records(cls, records: Sequence[LogitRecord]) -> "LogitTable":
        if isinstance(records, LogitTable):
            return records
        records = list(records)
        return cls(np.array([r.z0 for r in records], dtype=np.float64),
                   np.array([r.z1 for r in records], dtype=np.float64),
                   np.array([r.true_class for r in records], dtype=np.int64),
                   np.array([r.split for r in records], dtype=object),
                   np.array([r.case_id for r in records], dtype=np.int64))

    def true_logit(self) -> np.ndarray:
        return np.where(self.true_class == 1, self.z1, self.z0)

    def group(self, cls_: int, split: str) -> np.ndarray:
        return (self.true_class == cls_) & (self.split == split)


def collect_logits(model, train_set: Dataset, test_set: Dataset) -> LogitTable:
    parts = []
    for split, ds in (("train", train_set), ("test", test_set)):
        if len(ds) == 0:
            raise ContractError(f"the {split} split is empty")
        z, _ = predict(model, ds.x)
        parts.append((z, ds.labels, np.full(len(ds), split, dtype=object), ds.case_ids))
    z = np.concatenate([p[0] for p in parts])
    table = LogitTable(z[:, 0].copy(), z[:, 1].copy(), np.concatenate([p[1] for p in parts]).astype(np.int64),
                       np.concatenate([p[2] for p in parts]), np.concatenate([p[3] for p in parts]))
    if not np.all(np.isfinite(z)):
        raise ContractError("model produced non-finite logits")
    return table


# -- shift ------------------------------------------------------------------------------

@dataclass(frozen=True)
class HistogramSpec:
    low: float = -20.0
    high: float = 20.0
    width: float = 0.5

    @property
    def edges(self) -> np.ndarray:
        n = int(round((self.high - self.low) / self.width))
        return self.low + self.width * np.arange(n + 1)

    def index(self, values: np.ndarray) -> np.ndarray:
        """Bin index per value: 0 is the underflow bin, ``len(edges)`` the overflow bin."""
        edges = self.edges
        idx = np.searchsorted(edges, values, side="right")
        return np.where(values == edges[-1], len(edges) - 1, idx)

    def counts(self, values: np.ndarray) -> list[int]:
        return np.bincount(self.index(values), minlength=len(self.edges) + 1).astype(int).tolist()

    def to_dict(self) -> dict:
        return {"low": self.low, "high": self.high, "width": self.width,
                "n_bins": len(self.edges) - 1, "overflow_bins": True}


@dataclass
class ShiftReport:
    means: dict[tuple[int, str], float | None]
    counts: dict[tuple[int, str], int]
    histograms: dict = field(default_factory=dict)
    label: str = ""

    def delta(self, cls_: int) -> float | None:
        tr, te = self.means[(cls_, "train")], self.means[(cls_, "test")]
        if tr is None or te is None:
            return None
        return abs(te) - abs(tr)

    @property
    def delta_fg(self) -> float | None:
        return self.delta(1)

    @property
    def delta_bg(self) -> float | None:
        return self.delta(0)

    def to_dict(self) -> dict:
        classes = {}
        for c, name in CLASS_NAMES.items():
            classes[name] = {
                "mean_true_logit": {s: self.means[(c, s)] for s in SPLITS},
                "count": {s: self.counts[(c, s)] for s in SPLITS},
                "delta": self.delta(c),
            }
        return {"schema_version": SCHEMA_VERSION, "label": self.label, "statistic": "true_class_logit",
                "classes": classes}

    def histograms_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "label": self.label, **self.histograms}


def shift_statistic(records, spec: HistogramSpec | None = None, label: str = "") -> ShiftReport:
    """Per (class, split) mean true-class logit, the per-class shift, and histograms.

    Groups without samples get a None mean; the shift of that class is then
    None as well.
    """
    table = LogitTable.from_records(records)
    spec = spec or HistogramSpec()
    zt = table.true_logit()
    means, counts, groups = {}, {}, {}
    for c, name in CLASS_NAMES.items():
        for s in SPLITS:
            sel = table.group(c, s)
            n = int(np.count_nonzero(sel))
            counts[(c, s)] = n
            # math.fsum keeps the mean independent of record order
            means[(c, s)] = math.fsum(zt[sel]) / n if n else None
            z0, z1 = table.z0[sel], table.z1[sel]
            joint = np.stack([spec.index(z0), spec.index(z1)], axis=1)
            cells, cell_counts = np.unique(joint, axis=0, return_counts=True)
            groups[f"{name}/{s}"] = {
                "count": n,
                "z0": spec.counts(z0),
                "z1": spec.counts(z1),
                "joint": [[int(a), int(b), int(k)] for (a, b), k in zip(cells, cell_counts)],
            }
    hist = {"bins": spec.to_dict(), "groups": groups}
    return ShiftReport(means, counts, hist, label)


# -- fraction sweep ---------------------------------------------------------------------

SWEEP_COLUMNS = ("preset", "fraction", "n_runs", "train_DSC", "test_DSC", "test_SENS", "test_PRC",
                 "dz_foreground", "dz_background")


@dataclass
class RunSummary:
    """What one training run contributes to a sweep table."""

    preset: str
    fraction: float
    seed: int
    config: dict
    train: DatasetMetrics
    test: DatasetMetrics
    shift: ShiftReport


def _median(values) -> float | None:
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return float(median(vals)) if vals else None


_RUN_VARYING = {("seed",), ("out",), ("train", "seed"), ("train", "fraction"), ("model", "seed")}


def _strip(cfg: dict, path: tuple = ()) -> dict:
    out = {}
    for k, v in cfg.items():
        if path + (k,) in _RUN_VARYING:
            continue
        out[k] = _strip(v, path + (k,)) if isinstance(v, dict) else v
    return out


def _diff_fields(a: dict, b: dict, prefix: str = "") -> list[str]:
    diffs = []
    for k in sorted(set(a) | set(b)):
        va, vb = a.get(k), b.get(k)
        if isinstance(va, dict) and isinstance(vb, dict):
            diffs += _diff_fields(va, vb, f"{prefix}{k}.")
        elif va != vb:
            diffs.append(prefix + k)
    return diffs


def fraction_sweep_report(runs: Sequence[RunSummary]) -> list[dict]:
    """One row per (preset, fraction): medians over seeds.

    Runs of the same preset must agree in every config field except the
    data fraction and the seeds.
    """
    if not runs:
        raise ContractError("no runs given")
    by_preset: dict[str, list[RunSummary]] = {}
    for r in runs:
        by_preset.setdefault(r.preset, []).append(r)
    rows = []
    for preset, group in by_preset.items():
        ref = _strip(group[0].config)
        for r in group[1:]:
            diffs = _diff_fields(ref, _strip(r.config))
            if diffs:
                raise ContractError(f"runs of {preset!r} differ in: {', '.join(diffs)}")
        for frac in sorted({r.fraction for r in group}):
            sel = [r for r in group if r.fraction == frac]
            rows.append({
                "preset": preset,
                "fraction": frac,
                "n_runs": len(sel),
                "train_DSC": _median(r.train.dsc for r in sel),
                "test_DSC": _median(r.test.dsc for r in sel),
                "test_SENS": _median(r.test.sensitivity for r in sel),
                "test_PRC": _median(r.test.precision for r in sel),
                "dz_foreground": _median(r.shift.delta_fg for r in sel),
                "dz_background": _median(r.shift.delta_bg for r in sel),
            })
    return rows


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row[c]) for c in columns])
