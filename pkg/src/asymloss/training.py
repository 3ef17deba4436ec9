"""Dense patch classifier, its training loop, and model files."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses as L
from .data import Dataset
from .errors import ConfigError, ContractError, ShapeError, TrainingDiverged
from .io import config_hash, read_container, write_container
from .tensor import Tensor, as_tensor, grad, matmul, relu, tanh

_ACTIVATIONS = {"relu": relu, "tanh": tanh}
_INIT_GAIN = {"he": 2.0, "lecun": 1.0}
# a two-class loss this large means the weights have blown up long before overflow
LOSS_LIMIT = 1e8


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 81
    hidden: tuple[int, ...] = (32,)
    activation: str = "relu"
    init: str = "he"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden:
            raise ConfigError("the model needs at least one hidden layer")
        if self.input_size < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError(f"layer widths must be positive, got {self.input_size}, {self.hidden}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.init not in _INIT_GAIN:
            raise ConfigError(f"unknown init scheme {self.init!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_size, *self.hidden, 2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


class MLP:
    """Fully connected network ending in two logits (background, foreground)."""

    def __init__(self, params: list[Tensor], activation: str = "relu"):
        if len(params) % 2 or len(params) < 4:
            raise ConfigError("expected alternating weight/bias tensors for >= 2 layers")
        if params[-2].shape[1] != 2:
            raise ConfigError("the output layer must produce exactly 2 logits")
        self.params = params
        self.activation = activation
        self._act = _ACTIVATIONS[activation]

    @property
    def input_size(self) -> int:
        return self.params[0].shape[0]

    def __call__(self, x) -> Tensor:
        h = as_tensor(x)
        if h.ndim != 2 or h.shape[1] != self.input_size:
            raise ShapeError(f"model expects (N, {self.input_size}) inputs, got {h.shape}")
        n_layers = len(self.params) // 2
        for k in range(n_layers):
            h = matmul(h, self.params[2 * k]) + self.params[2 * k + 1]
            if k < n_layers - 1:
                h = self._act(h)
        return h

    def arrays(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params]


def init_model(cfg: ModelConfig, seed: int | None = None) -> MLP:
    """Gaussian weights with variance ``gain / fan_in`` (gain 2 for "he", 1 for "lecun"); zero biases.

    The output layer is antisymmetric (background column = -foreground
    column). Every loss here depends on the logits only through softmax, so
    its gradient sums to zero across the two logits and ``z0 = -z1`` holds
    for the whole run: each logit is then the signed distance of the sample
    to the decision boundary, halved.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed if seed is None else int(seed), 0x1417]))
    gain = _INIT_GAIN[cfg.init]
    widths = cfg.widths
    params = []
    for fan_in, fan_out in zip(widths[:-2], widths[1:-1]):
        params.append(Tensor(rng.normal(0.0, math.sqrt(gain / fan_in), (fan_in, fan_out)), requires_grad=True))
        params.append(Tensor(np.zeros(fan_out), requires_grad=True))
    w = rng.normal(0.0, math.sqrt(gain / widths[-2]), (widths[-2], 1))
    params.append(Tensor(np.hstack([-w, w]), requires_grad=True))
    params.append(Tensor(np.zeros(2), requires_grad=True))
    return MLP(params, cfg.activation)


@dataclass(frozen=True)
class TrainConfig:
    loss: L.LossConfig = field(default_factory=L.LossConfig)
    epochs: int = 30
    batch_size: int = 64
    steps_per_epoch: int = 50
    lr: float = 0.05
    lr_schedule: str = "constant"
    momentum: float = 0.0
    class_sampling_ratio: float = 0.5
    fraction: float = 1.0
    mixup_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", L.LossConfig.from_dict(self.loss))
        for name in ("epochs", "batch_size", "steps_per_epoch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 0 < self.class_sampling_ratio < 1:
            raise ConfigError("class_sampling_ratio must lie in (0, 1)")
        if not 0 < self.fraction <= 1:
            raise ConfigError("fraction must lie in (0, 1]")
        if not 0 <= self.mixup_fraction <= 1:
            raise ConfigError("mixup_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        d = dict(d)
        if "loss" in d:
            d["loss"] = L.LossConfig.from_dict(d["loss"])
        return cls(**d)

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "cosine":
            return 0.5 * self.lr * (1 + math.cos(math.pi * epoch / self.epochs))
        return self.lr


# -- objective -----------------------------------------------------------------

def mix_batch(x: np.ndarray, labels: np.ndarray, cfg: L.LossConfig, rng: np.random.Generator,
              fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Replace ``fraction`` of the batch rows by mixes with random in-batch partners.

    Returns the new inputs and label rows: soft labels for symmetric mixup,
    one-hot labels from the asymmetric rule otherwise.
    """
    B = len(x)
    y = L.one_hot(labels)
    k = int(round(fraction * B))
    if k == 0:
        return x, y
    rows = rng.choice(B, size=k, replace=False)
    partners = rng.integers(0, B, size=k)
    lam = L.sample_lambdas(rng, k, cfg.mixup_alpha)
    x = x.copy()
    x[rows], y_soft = L.mixup_pair(x[rows], y[rows], x[partners], y[partners], lam)
    if cfg.asymmetric:
        y[rows] = L.one_hot(L.asym_mixup_labels(labels[rows], labels[partners], lam,
                                                cfg.mixup_margin, cfg.rare_class))
    else:
        y[rows] = y_soft
    return x, y


def batch_objective(model: Callable[[Tensor], Tensor], x: np.ndarray, labels: np.ndarray,
                    cfg: L.LossConfig, rng: np.random.Generator, mixup_fraction: float = 0.5) -> Tensor:
    """Training loss of one batch under ``cfg``.

    Mixup (if active) rewrites part of the batch first; the margin/focal
    rule (or plain cross-entropy, or soft Dice) is the base loss; the
    adversarial term adds the base loss at the perturbed inputs.
    """
    fams = cfg.families
    if "mixup" in fams:
        x, y = mix_batch(x, labels, cfg, rng, mixup_fraction)
    else:
        y = L.one_hot(labels)

    if "dice" in fams:
        def base(z, t):
            return L.soft_dice_loss(z, t, cfg.rare_class, cfg.dice_smooth)
    else:
        def base(z, t):
            return L.margin_focal_loss(z, t, cfg)

    if "adversarial" in fams:
        xt = Tensor(x, requires_grad=True)
        return L.adversarial_loss(model, xt, y, cfg.magnitude, cfg.epsilon,
                                  asymmetric=cfg.asymmetric, r=cfg.rare_class, base=base)
    return base(model(Tensor(x)), y)


# -- training ------------------------------------------------------------------------

@dataclass
class TrainedModel:
    params: list[np.ndarray]
    model_config: ModelConfig
    train_config: TrainConfig
    loss_trace: list[float]
    data_fingerprint: str = ""
    train_case_ids: list[int] = field(default_factory=list)
    preset: str = ""

    @property
    def fingerprint(self) -> str:
        return config_hash({
            "model": self.model_config.to_dict(),
            "train": self.train_config.to_dict(),
            "data": self.data_fingerprint,
            "cases": [int(c) for c in self.train_case_ids],
        })

    def model(self) -> MLP:
        return MLP([Tensor(p) for p in self.params], self.model_config.activation)

    def save(self, path) -> None:
        header = {
            "kind": "trained-model",
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "loss_trace": [float(v) for v in self.loss_trace],
            "data_fingerprint": self.data_fingerprint,
            "train_case_ids": [int(c) for c in self.train_case_ids],
            "fingerprint": self.fingerprint,
            "preset": self.preset,
        }
        write_container(path, header, {f"param{i}": p for i, p in enumerate(self.params)})

    @classmethod
    def load(cls, path) -> "TrainedModel":
        h, arrays = read_container(path)
        if h.get("kind") != "trained-model":
            raise ContractError(f"{path} holds a {h.get('kind')!r}, not a trained model")
        out = cls([arrays[f"param{i}"] for i in range(len(arrays))],
                  ModelConfig.from_dict(h["model_config"]), TrainConfig.from_dict(h["train_config"]),
                  h["loss_trace"], h["data_fingerprint"], h["train_case_ids"], h.get("preset", ""))
        if out.fingerprint != h["fingerprint"]:
            raise ContractError(f"{path}: stored fingerprint does not match its contents")
        return out

    def write_loss_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "mean_loss"])
            for i, v in enumerate(self.loss_trace):
                w.writerow([i + 1, repr(float(v))])


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    """Endless stream of batch indices, reshuffling after every pass over the data."""
    buf = np.empty(0, dtype=np.int64)
    while True:
        while len(buf) < batch_size:
            buf = np.concatenate([buf, rng.permutation(n)])
        yield buf[:batch_size]
        buf = buf[batch_size:]


def train(dataset: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, *,
          progress: Callable[[int, float], None] | None = None) -> TrainedModel:
    """Minibatch SGD on ``dataset`` for a fixed budget of ``epochs * steps_per_epoch`` steps.

    The step budget does not depend on the dataset size, so runs on small
    data fractions see as many updates as runs on the full set. Raises
    :class:`TrainingDiverged` on a non-finite loss or parameter.
    """
    if dataset.split != "train":
        raise ContractError(f"train() needs a train split, got {dataset.split!r}")
    if dataset.x.shape[1] != model_cfg.input_size:
        raise ShapeError(f"patches have {dataset.x.shape[1]} pixels, model expects {model_cfg.input_size}")
    model = init_model(model_cfg)
    params = model.params
    velocity = [np.zeros_like(p.data) for p in params]
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0x7EA1]))
    X, Y = dataset.x, dataset.labels
    stream = _batches(rng, len(Y), train_cfg.batch_size)
    trace = []
    for epoch in range(train_cfg.epochs):
        lr = train_cfg.lr_at(epoch)
        total = 0.0
        for step in range(train_cfg.steps_per_epoch):
            idx = next(stream)
            # overflow is reported below as divergence, not as a numpy warning
            with np.errstate(over="ignore", invalid="ignore"):
                loss = batch_objective(model, X[idx], Y[idx], train_cfg.loss, rng, train_cfg.mixup_fraction)
                value = loss.item()
                if not math.isfinite(value) or value > LOSS_LIMIT:
                    raise TrainingDiverged(epoch + 1, step + 1, value)
                for p, v, g in zip(params, velocity, grad(loss, params)):
                    v *= train_cfg.momentum
                    v -= lr * g
                    p.data += v
            if not all(np.isfinite(p.data).all() for p in params):
                raise TrainingDiverged(epoch + 1, step + 1, float("nan"))
            total += value
        trace.append(total / train_cfg.steps_per_epoch)
        if progress is not None:
            progress(epoch + 1, trace[-1])
    return TrainedModel(model.arrays(), model_cfg, train_cfg, trace,
                        dataset.meta.get("config_hash", ""), [int(c) for c in dataset.cases])


def predict(model, x, batch_size: int = 65536) -> tuple[np.ndarray, np.ndarray]:
    """Raw logits ``(N, 2)`` and hard labels; a tie goes to background (0)."""
    net = model.model() if isinstance(model, TrainedModel) else model
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_size:
        raise ShapeError(f"model expects (N, {net.input_size}) inputs, got {x.shape}")
    frozen = MLP([Tensor(p.data) for p in net.params], net.activation)
    logits = np.concatenate([frozen(x[i : i + batch_size]).data for i in range(0, max(len(x), 1), batch_size)])
    return logits, (logits[:, 1] > logits[:, 0]).astype(np.int64)


def with_loss(cfg: TrainConfig, **changes) -> TrainConfig:
    return replace(cfg, loss=replace(cfg.loss, **changes))
