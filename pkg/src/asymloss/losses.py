"""Losses over logits for binary (foreground/background) classification.

Symmetric losses treat both classes alike. Their asymmetric counterparts
apply the mechanism only to the rare class ``r`` (the foreground): the
margin is subtracted only from the rare-class logit, focal attenuation is
dropped for rare-class samples, adversarial perturbations are only searched
for rare-class samples, and mixup produces hard labels that lean towards
the rare class.

Labels are one-hot ``(N, C)`` arrays. Every loss returns a scalar
:class:`~asymloss.tensor.Tensor` averaged over the batch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, as_tensor, exp, grad, log1m_softmax, log_softmax, scale, softmax

Model = Callable[[Tensor], Tensor]

VARIANTS = ("ce", "dice", "margin", "focal", "adversarial", "mixup")


@dataclass(frozen=True)
class LossConfig:
    """Which loss to train with, plus every hyper-parameter it might need.

    ``combine`` activates several mechanisms at once (e.g. the asymmetric
    combination of margin, focal, adversarial and mixup); when empty only
    ``variant`` is used. ``margin`` is the logit margin, ``mixup_margin``
    the mixing-coefficient margin of the asymmetric mixup label rule.
    """

    variant: str = "ce"
    asymmetric: bool = False
    rare_class: int = 1
    margin: float = 1.0
    gamma: float = 2.0
    epsilon: float = 0.1
    magnitude: float = 1.0
    mixup_alpha: float = 0.2
    mixup_margin: float = 0.3
    combine: tuple[str, ...] = field(default_factory=tuple)
    focal_detach: bool = False
    dice_smooth: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "combine", tuple(self.combine))
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown loss variant {self.variant!r}; expected one of {VARIANTS}")
        for name in self.combine:
            if name not in VARIANTS:
                raise ConfigError(f"unknown variant {name!r} in combine")
        if len(set(self.combine)) != len(self.combine):
            raise ConfigError(f"combine lists a variant twice: {self.combine}")
        if "dice" in self.families and ({"margin", "focal"} & set(self.families)):
            raise ConfigError("dice cannot be combined with margin or focal")
        if self.rare_class not in (0, 1):
            raise ConfigError(f"rare_class must be 0 or 1, got {self.rare_class}")
        for name in ("margin", "gamma", "epsilon", "magnitude", "dice_smooth"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.mixup_alpha <= 0:
            raise ConfigError(f"mixup_alpha must be positive, got {self.mixup_alpha}")
        if not 0 < self.mixup_margin < 1:
            raise ConfigError(f"mixup_margin must lie in (0, 1), got {self.mixup_margin}")

    @property
    def families(self) -> tuple[str, ...]:
        return self.combine if self.combine else (self.variant,)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["combine"] = list(self.combine)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown loss keys: {sorted(unknown)}")
        return cls(**d)


# -- label helpers ------------------------------------------------------------

def one_hot(labels, num_classes: int = 2) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or np.any((labels < 0) | (labels >= num_classes)):
        raise ContractError("labels must be a 1-D array of class indices")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _labels(y, z: Tensor | None = None, *, hard: bool = True) -> np.ndarray:
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if y.ndim != 2:
        raise ShapeError(f"labels must be (N, C), got shape {y.shape}")
    if z is not None and z.shape != y.shape:
        raise ShapeError(f"logits {z.shape} and labels {y.shape} differ in shape")
    if hard:
        if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
            raise ContractError("every label row must be one-hot")
    elif np.any(y < 0) or not np.allclose(y.sum(axis=1), 1.0, rtol=0, atol=1e-9):
        raise ContractError("soft label rows must be non-negative and sum to 1")
    return y


def _rare_column(C: int, r: int) -> np.ndarray:
    col = np.zeros(C)
    col[r] = 1.0
    return col


# -- per-sample core ------------------------------------------------------------

def sample_losses(z, y, *, shift=None, gamma: float = 0.0, attenuate=None, detach: bool = False) -> Tensor:
    """Per-sample ``-Σ_c w_c y_c log softmax(z - shift)_c``.

    ``w_c = (1 - p_c)^gamma`` on the columns flagged by ``attenuate`` (all
    columns when None) and 1 elsewhere. With ``gamma == 0`` the weights are
    skipped entirely so the result is bit-identical to cross-entropy.
    """
    z = as_tensor(z)
    zs = z - shift if shift is not None else z
    logp = log_softmax(zs)
    terms = logp * y
    if gamma > 0:
        factor = exp(scale(log1m_softmax(zs), gamma))
        if detach:
            factor = factor.detach()
        if attenuate is not None:
            keep = np.asarray(attenuate, dtype=np.float64)
            factor = factor * keep + (1.0 - keep)
        terms = terms * factor
    return -terms.sum(axis=1)


def cross_entropy(z, y) -> Tensor:
    z = as_tensor(z)
    y = _labels(y, z)
    return sample_losses(z, y).mean()


def soft_cross_entropy(z, y) -> Tensor:
    """Cross-entropy against soft targets, ``-Σ_c y_c log p_c`` averaged."""
    z = as_tensor(z)
    y = _labels(y, z, hard=False)
    return sample_losses(z, y).mean()


def soft_dice_loss(z, y, r: int = 1, smooth: float = 1.0, squared_denominator: bool = False) -> Tensor:
    """Batch-level soft Dice loss on the rare-class probability.

    ``1 - (2 Σ p g + s) / (Σ p + Σ g + s)``; with ``squared_denominator``
    the denominator sums ``p²`` and ``g²`` instead.
    """
    z = as_tensor(z)
    y = _labels(y, z)
    if z.shape[1] != 2:
        raise ShapeError(f"soft dice is defined for two classes, got {z.shape[1]}")
    p = (softmax(z) * _rare_column(2, r)).sum(axis=1)
    g = y[:, r]
    inter = (p * g).sum()
    if squared_denominator:
        denom = (p * p).sum() + float(np.sum(g * g)) + smooth
    else:
        denom = p.sum() + float(np.sum(g)) + smooth
    return 1.0 - (scale(inter, 2.0) + smooth) / denom


def _check_nonneg(name: str, value: float) -> None:
    if value < 0:
        raise ConfigError(f"{name} must be non-negative, got {value}")


def large_margin_loss(z, y, m: float) -> Tensor:
    """Cross-entropy with ``m`` subtracted from every sample's true-class logit."""
    _check_nonneg("margin", m)
    z = as_tensor(z)
    y = _labels(y, z)
    return sample_losses(z, y, shift=m * y).mean()


def asym_large_margin_loss(z, y, m: float, r: int = 1) -> Tensor:
    """Margin only for samples of the rare class; plain cross-entropy otherwise."""
    _check_nonneg("margin", m)
    z = as_tensor(z)
    y = _labels(y, z)
    return sample_losses(z, y, shift=m * y * _rare_column(y.shape[1], r)).mean()


def focal_loss(z, y, gamma: float, detach: bool = False) -> Tensor:
    """Cross-entropy weighted by ``(1 - p_c)^gamma``.

    By default the weight is differentiated through; ``detach=True`` treats
    it as a constant in the backward pass.
    """
    _check_nonneg("gamma", gamma)
    z = as_tensor(z)
    y = _labels(y, z)
    return sample_losses(z, y, gamma=gamma, detach=detach).mean()


def asym_focal_loss(z, y, gamma: float, r: int = 1, detach: bool = False) -> Tensor:
    """Focal attenuation on every class except the rare one."""
    _check_nonneg("gamma", gamma)
    z = as_tensor(z)
    y = _labels(y, z)
    keep = 1.0 - _rare_column(y.shape[1], r)
    return sample_losses(z, y, gamma=gamma, attenuate=keep, detach=detach).mean()


def margin_focal_loss(z, y, cfg: LossConfig) -> Tensor:
    """Joint margin and/or focal loss as selected by ``cfg.families``.

    Used by the training loop so that the margin and the focal weighting
    can be active in the same objective. Soft labels are accepted.
    """
    z = as_tensor(z)
    y = _labels(y, z, hard=False)
    fams = cfg.families
    C = y.shape[1]
    rare = _rare_column(C, cfg.rare_class)
    shift = None
    if "margin" in fams and cfg.margin > 0:
        shift = cfg.margin * y * (rare if cfg.asymmetric else 1.0)
    gamma, keep = 0.0, None
    if "focal" in fams:
        gamma = cfg.gamma
        keep = 1.0 - rare if cfg.asymmetric else None
    return sample_losses(z, y, shift=shift, gamma=gamma, attenuate=keep, detach=cfg.focal_detach).mean()


# -- adversarial training ---------------------------------------------------------

def _tracked_input(x) -> Tensor:
    if not isinstance(x, Tensor) or not x.requires_grad:
        raise ContractError("adversarial search needs an input tensor created with requires_grad=True")
    return x


def adversarial_direction(model: Model, x: Tensor, y, epsilon: float) -> Tensor:
    """One fast-gradient-sign step: ``epsilon * sign(d CE / d x)``.

    This approximates the loss-maximising perturbation inside the
    L-infinity ball of radius ``epsilon``. The model's parameter gradients
    are left untouched.
    """
    x = _tracked_input(x)
    _check_nonneg("epsilon", epsilon)
    if epsilon == 0:
        return Tensor(np.zeros_like(x.data))
    (gx,) = grad(cross_entropy(model(x), y), [x])
    return Tensor(epsilon * np.sign(gx))


def asym_adversarial_direction(model: Model, x: Tensor, y, epsilon: float, r: int = 1) -> Tensor:
    """Like :func:`adversarial_direction` but zero for non-rare samples."""
    y_arr = _labels(y)
    d = adversarial_direction(model, x, y_arr, epsilon)
    rows = y_arr[:, r].reshape((-1,) + (1,) * (d.ndim - 1))
    return Tensor(d.data * rows)


def perturb(x, d, magnitude: float) -> np.ndarray:
    """``x + magnitude * d / ||d||_2`` per sample; rows with ``d == 0`` are unchanged."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    d = np.asarray(d.data if isinstance(d, Tensor) else d)
    flat = d.reshape(len(d), -1)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    unit = np.divide(flat, norms, out=np.zeros_like(flat), where=norms > 0)
    return x + magnitude * unit.reshape(d.shape)


def adversarial_loss(model: Model, x: Tensor, y, magnitude: float, epsilon: float, *,
                     asymmetric: bool = False, r: int = 1,
                     base: Callable[[Tensor, np.ndarray], Tensor] = cross_entropy) -> Tensor:
    """Clean loss plus the loss on the adversarially shifted input.

    The direction is a constant of the step (no gradient flows through it).
    ``base`` lets the training loop swap in the combined margin/focal loss.
    """
    _check_nonneg("magnitude", magnitude)
    y_arr = _labels(y)
    if asymmetric:
        d = asym_adversarial_direction(model, x, y_arr, epsilon, r)
    else:
        d = adversarial_direction(model, x, y_arr, epsilon)
    x_adv = Tensor(perturb(x, d, magnitude))
    return base(model(x), y_arr) + base(model(x_adv), y_arr)


# -- mixup ---------------------------------------------------------------------------

def _lam(lam, n: int | None = None) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    if np.any((lam < 0) | (lam > 1)) or np.any(np.isnan(lam)):
        raise ContractError(f"mixing coefficient must lie in [0, 1], got {lam}")
    return lam


def _rows(lam: np.ndarray, ndim: int) -> np.ndarray:
    return lam.reshape(lam.shape + (1,) * (ndim - lam.ndim)) if lam.ndim else lam


def mixup_pair(x_i, y_i, x_j, y_j, lam):
    """Convex combination of two samples (or two aligned batches) and their labels.

    ``lam`` may be a scalar or one coefficient per row.
    """
    x_i, x_j = np.asarray(x_i, dtype=np.float64), np.asarray(x_j, dtype=np.float64)
    y_i, y_j = np.asarray(y_i, dtype=np.float64), np.asarray(y_j, dtype=np.float64)
    if x_i.shape != x_j.shape or y_i.shape != y_j.shape:
        raise ShapeError(f"mixup operands differ in shape: {x_i.shape}/{x_j.shape}, {y_i.shape}/{y_j.shape}")
    lam = _lam(lam)
    x = _rows(lam, x_i.ndim) * x_i + (1.0 - _rows(lam, x_i.ndim)) * x_j
    y = _rows(lam, y_i.ndim) * y_i + (1.0 - _rows(lam, y_i.ndim)) * y_j
    return x, y


def mixup_loss(model: Model, x_i, y_i, x_j, y_j, lam) -> Tensor:
    """Clean cross-entropy of ``(x_i, y_i)`` plus soft-target cross-entropy of the mix."""
    x_mix, y_mix = mixup_pair(x_i, y_i, x_j, y_j, lam)
    return cross_entropy(model(as_tensor(x_i)), y_i) + soft_cross_entropy(model(Tensor(x_mix)), y_mix)


def asym_mixup_label(y_i: int, y_j: int, lam: float, m: float, r: int = 1) -> int:
    """Hard label of a mixed sample; branches are tried in order.

    1. ``y_i`` if ``lam > m`` and ``y_i`` is rare, or both labels agree;
    2. ``y_j`` if ``1 - lam > m`` and ``y_j`` is rare, or both labels agree;
    3. background otherwise.
    """
    if (lam > m and y_i == r) or y_i == y_j:
        return int(y_i)
    if (1 - lam > m and y_j == r) or y_i == y_j:
        return int(y_j)
    return 1 - r


def asym_mixup_labels(y_i, y_j, lam, m: float, r: int = 1) -> np.ndarray:
    """Vectorised :func:`asym_mixup_label` over integer label arrays."""
    y_i, y_j = np.asarray(y_i, dtype=np.int64), np.asarray(y_j, dtype=np.int64)
    lam = _lam(lam)
    first = ((lam > m) & (y_i == r)) | (y_i == y_j)
    second = ((1 - lam > m) & (y_j == r)) | (y_i == y_j)
    return np.select([first, second], [y_i, y_j], default=1 - r)


def sample_lambdas(rng: np.random.Generator, n: int, alpha: float) -> np.ndarray:
    """Mixing coefficients drawn from Beta(alpha, alpha)."""
    return rng.beta(alpha, alpha, size=n)
