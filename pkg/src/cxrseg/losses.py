"""Overlap losses and adversarial objectives.

Segmentation losses take ``pred`` and ``mask`` tensors shaped
``(batch, classes, *spatial)``. Per-class values are averaged over the batch
and the report total sums the included classes. ``Prediction`` and
``LabelMask`` values ([H, W, C]) are accepted and treated as a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from cxrseg.core import LabelMask, Prediction


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.7
    beta: float = 0.3
    gamma: float = 4.0 / 3.0
    epsilon: float = 1e-6
    epsilon_log: float = 1e-7
    lambda_adv: float = 0.1
    include_background: bool = False
    background_index: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 1.0 <= self.gamma <= 3.0:
            raise ValueError(f"gamma must lie in [1, 3], got {self.gamma}")
        if self.epsilon <= 0 or not 0 < self.epsilon_log < 0.5:
            raise ValueError("epsilon and epsilon_log must be positive (epsilon_log < 0.5)")
        if self.lambda_adv < 0:
            raise ValueError("lambda_adv must be non-negative")


@dataclass
class ClassLossReport:
    per_class: dict[int, torch.Tensor] = field(default_factory=dict)
    total: torch.Tensor | None = None

    def as_floats(self) -> dict:
        return {"per_class": {c: float(v) for c, v in self.per_class.items()}, "total": float(self.total)}


def as_batch(x) -> torch.Tensor:
    """Convert [H, W, C] values to a (1, C, H, W) tensor; tensors pass through."""
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, (Prediction, LabelMask)):
        x = x.data
    array = np.asarray(x, dtype=np.float64)
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(array, -1, 0)))[None]


def _pair(pred, mask) -> tuple[torch.Tensor, torch.Tensor]:
    pred, mask = as_batch(pred), as_batch(mask)
    if pred.shape != mask.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs mask {tuple(mask.shape)}")
    if pred.dim() < 3:
        raise ValueError("expected (batch, classes, *spatial) tensors")
    return pred, mask.to(pred.dtype)


def _sum_spatial(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(1).sum(dim=1)


def soft_dice(pred, mask, c: int, epsilon: float = 1e-6) -> torch.Tensor:
    """Per-sample soft Dice of class ``c``: (2 sum(p g) + eps) / (sum(p + g) + eps)."""
    pred, mask = _pair(pred, mask)
    p, g = pred[:, c], mask[:, c]
    return (2 * _sum_spatial(p * g) + epsilon) / (_sum_spatial(p + g) + epsilon)


def tversky_index(pred, mask, c: int, alpha: float = 0.7, beta: float = 0.3, epsilon: float = 1e-6) -> torch.Tensor:
    """Per-sample Tversky index of class ``c``.

    ``alpha`` weighs false negatives (sum of (1 - p) g) and ``beta`` false
    positives (sum of p (1 - g)). The smoothing term is ``epsilon / 2`` so
    that alpha = beta = 0.5 reproduces ``soft_dice`` exactly, smoothing
    included.
    """
    pred, mask = _pair(pred, mask)
    p, g = pred[:, c], mask[:, c]
    tp = _sum_spatial(p * g)
    fn = _sum_spatial((1 - p) * g)
    fp = _sum_spatial(p * (1 - g))
    eps = 0.5 * epsilon
    return (tp + eps) / (tp + alpha * fn + beta * fp + eps)


def _classes(num_classes: int, cfg: LossConfig) -> list[int]:
    return [c for c in range(num_classes) if cfg.include_background or c != cfg.background_index]


def _report(values: dict[int, torch.Tensor]) -> ClassLossReport:
    per_class = {c: v.mean() for c, v in values.items()}
    total = torch.stack(list(per_class.values())).sum()
    return ClassLossReport(per_class, total)


def dice_loss(pred, mask, cfg: LossConfig = LossConfig()) -> ClassLossReport:
    pred, mask = _pair(pred, mask)
    return _report({c: 1 - soft_dice(pred, mask, c, cfg.epsilon) for c in _classes(pred.shape[1], cfg)})


def tversky_loss(pred, mask, cfg: LossConfig = LossConfig()) -> ClassLossReport:
    pred, mask = _pair(pred, mask)
    return _report({
        c: 1 - tversky_index(pred, mask, c, cfg.alpha, cfg.beta, cfg.epsilon)
        for c in _classes(pred.shape[1], cfg)
    })


def focal_tversky_loss(pred, mask, cfg: LossConfig = LossConfig()) -> ClassLossReport:
    """Per-class (1 - TI) ** (1 / gamma), summed over the included classes."""
    pred, mask = _pair(pred, mask)
    values = {}
    for c in _classes(pred.shape[1], cfg):
        ti = tversky_index(pred, mask, c, cfg.alpha, cfg.beta, cfg.epsilon)
        gap = (1 - ti).clamp_min(0.0)
        values[c] = gap if cfg.gamma == 1.0 else gap ** (1.0 / cfg.gamma)
    return _report(values)


def multiclass_cross_entropy(pred, mask, epsilon_log: float = 1e-7) -> torch.Tensor:
    """Pixel-averaged -sum_c y ln(y_hat), with y_hat clamped to [epsilon_log, 1]."""
    pred, mask = _pair(pred, mask)
    log_p = torch.log(pred.clamp(epsilon_log, 1.0))
    per_pixel = -(mask * log_p).sum(dim=1)
    return per_pixel.flatten(1).mean(dim=1).mean()


def binary_logistic_loss(t_hat, t, epsilon_log: float = 1e-7) -> torch.Tensor:
    """Negative log-likelihood -(t ln t_hat + (1 - t) ln(1 - t_hat)), batch-averaged."""
    t_hat = torch.as_tensor(t_hat, dtype=torch.float64) if not isinstance(t_hat, torch.Tensor) else t_hat
    t = torch.as_tensor(t, dtype=t_hat.dtype, device=t_hat.device)
    t_hat = t_hat.clamp(epsilon_log, 1.0 - epsilon_log)
    return (-(t * torch.log(t_hat) + (1 - t) * torch.log(1 - t_hat))).mean()


def critic_objective(d_real, d_fake, epsilon_log: float = 1e-7) -> torch.Tensor:
    """Loss minimized by the critic: real masks labelled 1, generated masks 0."""
    return binary_logistic_loss(d_real, 1.0, epsilon_log) + binary_logistic_loss(d_fake, 0.0, epsilon_log)


def generator_objective(ftl_total, d_fake, lambda_adv: float = 0.1, epsilon_log: float = 1e-7) -> torch.Tensor:
    """Focal Tversky term plus the non-saturating adversarial term J_d(D(x, S(x)), 1)."""
    if not isinstance(ftl_total, torch.Tensor):
        ftl_total = torch.as_tensor(ftl_total, dtype=torch.float64)
    return ftl_total + lambda_adv * binary_logistic_loss(d_fake, 1.0, epsilon_log)
