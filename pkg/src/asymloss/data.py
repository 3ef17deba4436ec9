"""Synthetic imbalanced "segmentation" data.

Each case is a 2-D image: a smooth, heterogeneous background (filtered
noise, a random intensity ramp, small bright distractor spots) with one or
two elliptical foreground blobs. Blob appearance (a small intensity offset
and a strong oriented stripe texture) is drawn per case, so a model that
sees only a few cases can memorise their particular look.

The classifier works on patches: a sample is the ``P x P`` window around a
pixel and its label is that pixel's mask value. Training patches are drawn
with a requested foreground share, test patches cover every pixel.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import ConfigError, ContractError
from .io import config_hash, read_container, write_container

FRACTIONS = (0.05, 0.10, 0.20, 0.50, 1.00)
_PLACEMENT_TRIES = 20


@dataclass(frozen=True)
class BlobParams:
    min_blobs: int = 1
    max_blobs: int = 2
    min_radius: float = 5.0
    max_radius: float = 9.0
    offset_low: float = 0.2
    offset_high: float = 0.8
    texture_low: float = 1.5
    texture_high: float = 2.5
    freq_low: float = 1.0
    freq_high: float = 2.5
    fg_noise: float = 0.3
    bg_smoothing: float = 2.5
    bg_ramp: float = 1.5
    bg_noise: float = 0.2
    distractors: float = 1.0
    distractor_intensity: tuple[float, float] = (0.5, 1.5)

    def __post_init__(self):
        object.__setattr__(self, "distractor_intensity", tuple(self.distractor_intensity))
        if not 1 <= self.min_blobs <= self.max_blobs:
            raise ConfigError("need 1 <= min_blobs <= max_blobs")
        if not 0 < self.min_radius <= self.max_radius:
            raise ConfigError("need 0 < min_radius <= max_radius")


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    n_train_cases: int = 50
    n_test_cases: int = 20
    image_size: int = 64
    patch_size: int = 9
    patches_per_case: int = 200
    blobs: BlobParams = field(default_factory=BlobParams)

    def __post_init__(self):
        if isinstance(self.blobs, dict):
            object.__setattr__(self, "blobs", BlobParams(**self.blobs))
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch_size must be a positive odd number, got {self.patch_size}")
        if self.n_train_cases < 2 or self.n_test_cases < 1:
            raise ConfigError("need at least 2 training cases and 1 test case")
        if self.image_size < 4 * self.patch_size:
            raise ConfigError(f"image_size {self.image_size} < 4 * patch_size {self.patch_size}")
        if self.patches_per_case < 1:
            raise ConfigError("patches_per_case must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blobs"]["distractor_intensity"] = list(self.blobs.distractor_intensity)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown data keys: {sorted(unknown)}")
        if "blobs" in d:
            extra = set(d["blobs"]) - set(BlobParams.__dataclass_fields__)
            if extra:
                raise ConfigError(f"unknown blob keys: {sorted(extra)}")
            d["blobs"] = BlobParams(**d["blobs"])
        return cls(**d)

    @property
    def fingerprint(self) -> str:
        return config_hash(self.to_dict())


@dataclass
class ImageSet:
    """Whole images of several cases with their ground-truth masks."""

    images: np.ndarray        # (n, H, W) float64
    masks: np.ndarray         # (n, H, W) uint8
    case_ids: np.ndarray      # (n,) int64
    split: str
    blob_maps: np.ndarray | None = None   # (n, H, W) int8, 0 = background, k = k-th blob
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.case_ids)

    @property
    def fg_ratio(self) -> float:
        return float(self.masks.mean())

    def select(self, case_ids) -> "ImageSet":
        keep = np.isin(self.case_ids, np.asarray(case_ids))
        return ImageSet(self.images[keep], self.masks[keep], self.case_ids[keep], self.split,
                        None if self.blob_maps is None else self.blob_maps[keep], dict(self.meta))


class Sample(NamedTuple):
    patch: np.ndarray
    label: int
    case_id: int


@dataclass
class Dataset:
    """Patch samples, stored column-wise."""

    patches: np.ndarray       # (n, P, P) float64
    labels: np.ndarray        # (n,) int64
    case_ids: np.ndarray      # (n,) int64
    split: str
    fraction: float = 1.0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> Sample:
        return Sample(self.patches[i], int(self.labels[i]), int(self.case_ids[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def x(self) -> np.ndarray:
        """Patches flattened to ``(n, P*P)`` rows."""
        return self.patches.reshape(len(self.patches), -1)

    @property
    def fg_ratio(self) -> float:
        return float(self.labels.mean()) if len(self.labels) else 0.0

    @property
    def cases(self) -> np.ndarray:
        return np.unique(self.case_ids)

    def select(self, case_ids) -> "Dataset":
        keep = np.isin(self.case_ids, np.asarray(case_ids))
        return Dataset(self.patches[keep], self.labels[keep], self.case_ids[keep], self.split,
                       self.fraction, dict(self.meta))


# -- generation --------------------------------------------------------------

def _case_rng(seed: int, case_id: int, stream: int = 0) -> np.random.Generator:
    # depends only on (seed, case_id, stream): cases can be built in any order
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(case_id), int(stream)]))


def _ellipse(H: int, cy: float, cx: float, a: float, b: float, phi: float) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:H].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(phi) + dy * math.sin(phi)
    v = -dx * math.sin(phi) + dy * math.cos(phi)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def generate_case(seed: int, case_id: int, image_size: int, p: BlobParams):
    rng = _case_rng(seed, case_id)
    H = image_size
    yy, xx = np.mgrid[0:H, 0:H].astype(np.float64) / H

    bg = ndimage.gaussian_filter(rng.standard_normal((H, H)), p.bg_smoothing, mode="reflect")
    bg /= bg.std()
    theta = rng.uniform(0, 2 * np.pi)
    bg += rng.uniform(0, p.bg_ramp) * ((xx - 0.5) * math.cos(theta) + (yy - 0.5) * math.sin(theta))
    for _ in range(rng.poisson(p.distractors)):
        cy, cx = rng.uniform(0, H, size=2)
        width = rng.uniform(0.8, 1.5)
        bg += rng.uniform(*p.distractor_intensity) * np.exp(
            -((yy * H - cy) ** 2 + (xx * H - cx) ** 2) / (2 * width**2))
    bg += p.bg_noise * rng.standard_normal((H, H))

    offset = rng.uniform(p.offset_low, p.offset_high)
    freq = rng.uniform(p.freq_low, p.freq_high)
    psi = rng.uniform(0, np.pi)
    amp = rng.uniform(p.texture_low, p.texture_high)
    texture = amp * np.sin(freq * H * (xx * math.cos(psi) + yy * math.sin(psi)) + rng.uniform(0, 2 * np.pi))

    blob_map = np.zeros((H, H), dtype=np.int8)
    margin = p.max_radius + 1
    taken = np.zeros((H, H), dtype=bool)     # blobs plus a one-pixel rim
    k = 0
    for _ in range(int(rng.integers(p.min_blobs, p.max_blobs + 1))):
        # a blob that would touch an earlier one is redrawn, so every blob is a whole ellipse
        for _ in range(_PLACEMENT_TRIES):
            a, b = rng.uniform(p.min_radius, p.max_radius, size=2)
            cy, cx = rng.uniform(margin, H - margin, size=2)
            inside = _ellipse(H, cy, cx, a, b, rng.uniform(0, np.pi))
            if not np.any(inside & taken):
                k += 1
                blob_map[inside] = k
                taken |= ndimage.binary_dilation(inside, structure=np.ones((3, 3), dtype=bool))
                break
    mask = blob_map > 0
    image = bg + mask * (offset + texture + p.fg_noise * rng.standard_normal((H, H)))
    return image, mask.astype(np.uint8), blob_map


def generate(seed: int, n_cases: int, image_size: int = 64, blob_params: BlobParams | None = None,
             *, first_case_id: int = 0, split: str = "train") -> ImageSet:
    """Raw (unnormalised) images for ``n_cases`` consecutive case ids."""
    p = blob_params or BlobParams()
    if n_cases < 1:
        raise ConfigError("n_cases must be positive")
    if 2 * (p.max_radius + 1) >= image_size:
        raise ConfigError(f"blobs of radius {p.max_radius} do not fit a {image_size}px image")
    ids = np.arange(first_case_id, first_case_id + n_cases, dtype=np.int64)
    images, masks, maps = zip(*(generate_case(seed, int(c), image_size, p) for c in ids))
    return ImageSet(np.stack(images), np.stack(masks), ids, split, np.stack(maps), {"seed": int(seed)})


def normalize(image_set: ImageSet, mean: float, std: float) -> ImageSet:
    out = ImageSet((image_set.images - mean) / std, image_set.masks, image_set.case_ids, image_set.split,
                   image_set.blob_maps, dict(image_set.meta))
    out.meta.update(norm_mean=float(mean), norm_std=float(std))
    return out


def make_splits(cfg: DataConfig) -> tuple[ImageSet, ImageSet]:
    """Disjoint train/test image sets, both normalised with training-pixel statistics."""
    train = generate(cfg.seed, cfg.n_train_cases, cfg.image_size, cfg.blobs, split="train")
    test = generate(cfg.seed, cfg.n_test_cases, cfg.image_size, cfg.blobs,
                    first_case_id=cfg.n_train_cases, split="test")
    mean, std = float(train.images.mean()), float(train.images.std())
    train, test = normalize(train, mean, std), normalize(test, mean, std)
    for s in (train, test):
        s.meta.update(config_hash=cfg.fingerprint, seed=cfg.seed)
    return train, test


# -- patches -----------------------------------------------------------------

def _windows(image: np.ndarray, P: int) -> np.ndarray:
    padded = np.pad(image, P // 2, mode="reflect")
    return sliding_window_view(padded, (P, P))        # (H, W, P, P) view


def extract_patches(image_set: ImageSet, patch_size: int, class_sampling_ratio: float | None = None,
                    patches_per_case: int | None = None, seed: int = 0) -> Dataset:
    """Cut labelled patches out of an image set.

    * ``class_sampling_ratio`` given: ``patches_per_case`` patches per case,
      of which ``round(ratio * patches_per_case)`` are centred on foreground.
    * only ``patches_per_case`` given: centres uniform over pixels.
    * neither: every pixel, in row-major order (dense evaluation).
    """
    if class_sampling_ratio is not None:
        if not 0 < class_sampling_ratio < 1:
            raise ConfigError(f"class_sampling_ratio must lie in (0, 1), got {class_sampling_ratio}")
        if patches_per_case is None:
            raise ConfigError("class-ratio sampling needs patches_per_case")
    P = patch_size
    patches, labels, cases = [], [], []
    for image, mask, cid in zip(image_set.images, image_set.masks, image_set.case_ids):
        win = _windows(image, P)
        flat_mask = mask.ravel()
        if patches_per_case is None:
            idx = np.arange(flat_mask.size)
        else:
            rng = _case_rng(seed, int(cid), stream=1)
            if class_sampling_ratio is None:
                idx = rng.integers(0, flat_mask.size, size=patches_per_case)
            else:
                fg = np.flatnonzero(flat_mask)
                bg = np.flatnonzero(flat_mask == 0)
                n_fg = int(round(class_sampling_ratio * patches_per_case))
                if n_fg > 0 and fg.size == 0:
                    warnings.warn(f"case {cid} has no foreground pixels; skipped", stacklevel=2)
                    continue
                idx = np.concatenate([
                    rng.choice(fg, n_fg, replace=n_fg > fg.size),
                    rng.choice(bg, patches_per_case - n_fg, replace=patches_per_case - n_fg > bg.size),
                ])
        rows, cols = np.unravel_index(idx, mask.shape)
        patches.append(win[rows, cols])
        labels.append(flat_mask[idx].astype(np.int64))
        cases.append(np.full(idx.size, cid, dtype=np.int64))
    if not patches:
        raise ContractError("no patches could be extracted")
    meta = dict(image_set.meta)
    meta.update(patch_size=P, class_sampling_ratio=class_sampling_ratio, sampling_seed=int(seed))
    return Dataset(np.concatenate(patches), np.concatenate(labels), np.concatenate(cases),
                   image_set.split, image_set.meta.get("fraction", 1.0), meta)


def dense_patches(image_set: ImageSet, patch_size: int) -> Dataset:
    return extract_patches(image_set, patch_size)


# -- subsampling --------------------------------------------------------------

def n_cases_for(fraction: float, n_cases: int) -> int:
    # round() guards against products like 0.1 * 190 = 19.000000000000004
    return math.ceil(round(fraction * n_cases, 9))


def subsample_cases(case_ids, fraction: float, seed: int) -> np.ndarray:
    """Sorted ids of the whole cases kept at ``fraction``.

    Cases are taken from the front of one seeded permutation, so smaller
    fractions always pick a subset of larger ones.
    """
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    ids = np.unique(np.asarray(case_ids))
    k = n_cases_for(fraction, ids.size)
    if k == 0:
        raise ConfigError(f"fraction {fraction} keeps no cases out of {ids.size}")
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5AB5])).permutation(ids)
    return np.sort(order[:k])


def subsample(dataset, fraction: float, seed: int):
    """Keep the whole cases chosen by :func:`subsample_cases`; works on Dataset and ImageSet."""
    keep = subsample_cases(dataset.case_ids, fraction, seed)
    out = dataset.select(keep)
    out.meta["fraction"] = float(fraction)
    out.meta["subsample_seed"] = int(seed)
    if isinstance(out, Dataset):
        out.fraction = float(fraction)
    return out


# -- serialisation -------------------------------------------------------------

def _header(kind: str, obj, extra: dict) -> dict:
    h = {"kind": kind, "split": obj.split, "meta": obj.meta}
    h.update(extra)
    return h


def save_dataset(path, ds: Dataset) -> None:
    P = ds.patches.shape[1]
    rec = np.zeros(len(ds), dtype=[("case_id", "<i8"), ("label", "u1"), ("patch", "<f8", (P, P))])
    rec["case_id"], rec["label"], rec["patch"] = ds.case_ids, ds.labels, ds.patches
    write_container(path, _header("patch-dataset", ds, {"fraction": ds.fraction, "patch_size": P,
                                                        "n_samples": len(ds)}), {"records": rec})


def load_dataset(path) -> Dataset:
    h, arrays = read_container(path)
    if h.get("kind") != "patch-dataset":
        raise ContractError(f"{path} holds a {h.get('kind')!r}, not a patch dataset")
    rec = arrays["records"]
    return Dataset(rec["patch"].copy(), rec["label"].astype(np.int64), rec["case_id"].copy(),
                   h["split"], h["fraction"], h["meta"])


def save_image_set(path, s: ImageSet) -> None:
    H, W = s.images.shape[1:]
    rec = np.zeros(len(s), dtype=[("case_id", "<i8"), ("image", "<f8", (H, W)), ("mask", "u1", (H, W)),
                                  ("blob_map", "i1", (H, W))])
    rec["case_id"], rec["image"], rec["mask"] = s.case_ids, s.images, s.masks
    if s.blob_maps is not None:
        rec["blob_map"] = s.blob_maps
    write_container(path, _header("image-set", s, {"n_cases": len(s), "image_shape": [H, W]}), {"records": rec})


def load_image_set(path) -> ImageSet:
    h, arrays = read_container(path)
    if h.get("kind") != "image-set":
        raise ContractError(f"{path} holds a {h.get('kind')!r}, not an image set")
    rec = arrays["records"]
    return ImageSet(rec["image"].copy(), rec["mask"].copy(), rec["case_id"].copy(), h["split"],
                    rec["blob_map"].copy(), h["meta"])


def manifest(cfg: DataConfig, train: ImageSet, test: ImageSet, files: dict[str, str]) -> dict:
    return {
        "schema_version": 1,
        "config": cfg.to_dict(),
        "config_hash": cfg.fingerprint,
        "n_cases": {"train": len(train), "test": len(test)},
        "case_ids": {"train": train.case_ids.tolist(), "test": test.case_ids.tolist()},
        "fg_ratio": {"train": train.fg_ratio, "test": test.fg_ratio},
        "normalization": {"mean": train.meta["norm_mean"], "std": train.meta["norm_std"]},
        "files": files,
    }
