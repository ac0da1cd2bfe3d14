"""Generator pretraining and adversarial structure-correcting training."""

from __future__ import annotations

import copy
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np
import torch
import torch.nn as nn

from cxrseg.data import SegmentationSet
from cxrseg.losses import LossConfig, critic_objective, focal_tversky_loss, generator_objective, soft_dice

log = logging.getLogger(__name__)

CRITIC_COLLAPSE_LOSS = 1e-4


class NonFiniteLossError(RuntimeError):
    """Training aborted on a NaN/inf loss; ``snapshot`` describes where."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    pretrain_epochs: int = 50
    adv_epochs: int = 50
    plain_epochs: int = 40
    gen_steps_per_critic: int = 5
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    critic_learning_rate: float | None = None
    seed: int = 42
    checkpoint_every: int = 1
    grad_clip: float | None = None

    def __post_init__(self):
        for name in ("gen_steps_per_critic", "batch_size", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        for name in ("pretrain_epochs", "adv_epochs", "plain_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.learning_rate <= 0 or (self.critic_learning_rate is not None and self.critic_learning_rate <= 0):
            raise ValueError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    train_loss: float
    val_loss: float | None = None
    val_soft_dice: dict[str, float] = field(default_factory=dict)
    train_soft_dice: dict[str, float] = field(default_factory=dict)
    critic_loss: float | None = None
    generator_steps: int = 0
    critic_steps: int = 0
    wall_time: float = 0.0


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError(f"epoch {record.epoch} does not follow {self.records[-1].epoch}")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def to_dicts(self) -> list[dict]:
        return [asdict(r) for r in self.records]

    @classmethod
    def from_dicts(cls, rows) -> "TrainHistory":
        return cls([EpochRecord(**row) for row in rows])


def make_sgd(model: nn.Module, lr: float, momentum: float) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Shuffled mini-batch indices; the order depends only on (seed, epoch)."""
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def mean_foreground(dice: dict[str, float]) -> float:
    values = [v for k, v in dice.items() if int(k) != 0]
    return float(np.mean(values)) if values else float("nan")


def _check_finite(loss: torch.Tensor, phase: str, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        snapshot = {"phase": phase, "epoch": epoch, "step": step, "loss": loss.item()}
        raise NonFiniteLossError(f"non-finite loss in {phase} epoch {epoch} step {step}", snapshot)


@torch.no_grad()
def evaluate_soft(model: nn.Module, dataset: SegmentationSet, loss_cfg: LossConfig,
                  batch_size: int = 8) -> tuple[float, dict[str, float]]:
    """Mean focal Tversky loss and per-class soft Dice over ``dataset`` in eval mode."""
    was_training = model.training
    model.eval()
    losses, dice = [], {str(c): [] for c in range(dataset.num_classes)}
    for start in range(0, len(dataset), batch_size):
        x, y = dataset.batch(range(start, min(start + batch_size, len(dataset))))
        pred = model(x)
        losses.append(float(focal_tversky_loss(pred, y, loss_cfg).total) * x.shape[0])
        for c in range(dataset.num_classes):
            dice[str(c)].extend(soft_dice(pred, y, c, loss_cfg.epsilon).tolist())
    model.train(was_training)
    return sum(losses) / len(dataset), {c: float(np.mean(v)) for c, v in dice.items()}


def _clip(model: nn.Module, cfg: TrainConfig) -> None:
    if cfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)


def _validate(model, val_set, loss_cfg, cfg, record: EpochRecord) -> float:
    if val_set is None or len(val_set) == 0:
        return mean_foreground(record.train_soft_dice)
    record.val_loss, record.val_soft_dice = evaluate_soft(model, val_set, loss_cfg, cfg.batch_size)
    return mean_foreground(record.val_soft_dice)


def _batch_dice(pred: torch.Tensor, y: torch.Tensor, eps: float, sums: dict[str, float]) -> None:
    with torch.no_grad():
        for c in range(y.shape[1]):
            sums[str(c)] = sums.get(str(c), 0.0) + float(soft_dice(pred, y, c, eps).sum())


def pretrain_generator(
    model: nn.Module,
    train_set: SegmentationSet,
    val_set: SegmentationSet | None,
    cfg: TrainConfig,
    loss_cfg: LossConfig = LossConfig(),
    *,
    epochs: int | None = None,
    start_epoch: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
    history: TrainHistory | None = None,
    best: tuple[float, dict] | None = None,
    on_step: Callable[[str, int], None] | None = None,
    on_epoch_end: Callable[..., None] | None = None,
) -> tuple[dict, TrainHistory]:
    """Minimize the focal Tversky loss with mini-batch SGD.

    Returns the state dict with the best mean foreground validation soft
    Dice (loaded back into ``model``) and the epoch history. Epochs are
    numbered globally from ``start_epoch + 1``.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    history = TrainHistory() if history is None else history
    optimizer = optimizer or make_sgd(model, cfg.learning_rate, cfg.momentum)
    best_score, best_state = best if best is not None else (-math.inf, None)
    if epochs == 0:
        return copy.deepcopy(model.state_dict()), history

    step = 0
    for epoch in range(start_epoch + 1, start_epoch + epochs + 1):
        t0 = time.perf_counter()
        model.train()
        total, dice_sums, g_steps = 0.0, {}, 0
        for idx in epoch_batches(len(train_set), cfg.batch_size, cfg.seed, epoch):
            x, y = train_set.batch(idx)
            optimizer.zero_grad(set_to_none=True)
            pred = model(x)
            loss = focal_tversky_loss(pred, y, loss_cfg).total
            _check_finite(loss, "pretrain", epoch, step)
            loss.backward()
            _clip(model, cfg)
            optimizer.step()
            step += 1
            g_steps += 1
            total += loss.item() * len(idx)
            _batch_dice(pred, y, loss_cfg.epsilon, dice_sums)
            if on_step is not None:
                on_step("G", step)
        record = EpochRecord(
            epoch=epoch, phase="pretrain", train_loss=total / len(train_set),
            train_soft_dice={c: v / len(train_set) for c, v in dice_sums.items()},
            generator_steps=g_steps,
        )
        score = _validate(model, val_set, loss_cfg, cfg, record)
        record.wall_time = time.perf_counter() - t0
        history.append(record)
        is_best = best_state is None or score > best_score
        if is_best:
            best_score, best_state = score, copy.deepcopy(model.state_dict())
        if on_epoch_end is not None:
            on_epoch_end(epoch=epoch, phase="pretrain", history=history, optimizer=optimizer,
                         best_score=best_score, best_state=best_state, is_best=is_best)
    model.pretrained = True
    model.load_state_dict(best_state)
    return best_state, history


def _set_requires_grad(model: nn.Module, flag: bool) -> None:
    for p in model.parameters():
        p.requires_grad_(flag)


def adversarial_train(
    generator: nn.Module,
    critic: nn.Module,
    train_set: SegmentationSet,
    val_set: SegmentationSet | None,
    cfg: TrainConfig,
    loss_cfg: LossConfig = LossConfig(),
    *,
    epochs: int | None = None,
    start_epoch: int = 0,
    gen_optimizer: torch.optim.Optimizer | None = None,
    critic_optimizer: torch.optim.Optimizer | None = None,
    history: TrainHistory | None = None,
    best: tuple[float, dict] | None = None,
    global_step: int = 0,
    on_step: Callable[[str, int], None] | None = None,
    on_epoch_end: Callable[..., None] | None = None,
) -> tuple[dict, dict, TrainHistory]:
    """Alternate generator and critic updates.

    Every batch drives one generator step on the focal Tversky loss plus
    ``lambda_adv`` times the non-saturating adversarial term, with the
    critic frozen. After every ``gen_steps_per_critic`` generator steps the
    critic takes one step on real masks against the detached predictions of
    the latest batch. ``global_step`` counts generator steps so the schedule
    continues across epochs and resumed runs.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if not getattr(generator, "pretrained", False):
        warnings.warn("adversarial training on a generator that was not pretrained", RuntimeWarning, stacklevel=2)
    epochs = cfg.adv_epochs if epochs is None else epochs
    history = TrainHistory() if history is None else history
    gen_optimizer = gen_optimizer or make_sgd(generator, cfg.learning_rate, cfg.momentum)
    critic_optimizer = critic_optimizer or make_sgd(critic, cfg.critic_learning_rate or cfg.learning_rate, cfg.momentum)
    best_score, best_state = best if best is not None else (-math.inf, None)
    conditioned = critic.config.image_conditioned
    lam = loss_cfg.lambda_adv

    for epoch in range(start_epoch + 1, start_epoch + epochs + 1):
        t0 = time.perf_counter()
        generator.train()
        critic.train()
        total, dice_sums, critic_losses, g_steps = 0.0, {}, [], 0
        for idx in epoch_batches(len(train_set), cfg.batch_size, cfg.seed, epoch):
            x, y = train_set.batch(idx)
            image = x if conditioned else None

            _set_requires_grad(critic, False)
            gen_optimizer.zero_grad(set_to_none=True)
            pred = generator(x)
            ftl = focal_tversky_loss(pred, y, loss_cfg).total
            loss = generator_objective(ftl, critic(pred, image), lam, loss_cfg.epsilon_log)
            _check_finite(loss, "adversarial", epoch, global_step)
            loss.backward()
            _clip(generator, cfg)
            gen_optimizer.step()
            _set_requires_grad(critic, True)
            global_step += 1
            g_steps += 1
            total += loss.item() * len(idx)
            _batch_dice(pred, y, loss_cfg.epsilon, dice_sums)
            if on_step is not None:
                on_step("G", global_step)

            if global_step % cfg.gen_steps_per_critic == 0:
                critic_optimizer.zero_grad(set_to_none=True)
                d_loss = critic_objective(critic(y, image), critic(pred.detach(), image), loss_cfg.epsilon_log)
                _check_finite(d_loss, "critic", epoch, global_step)
                d_loss.backward()
                _clip(critic, cfg)
                critic_optimizer.step()
                critic_losses.append(d_loss.item())
                if on_step is not None:
                    on_step("D", global_step)

        record = EpochRecord(
            epoch=epoch, phase="adversarial", train_loss=total / len(train_set),
            train_soft_dice={c: v / len(train_set) for c, v in dice_sums.items()},
            critic_loss=float(np.mean(critic_losses)) if critic_losses else None,
            generator_steps=g_steps, critic_steps=len(critic_losses),
        )
        if critic_losses and max(critic_losses) < CRITIC_COLLAPSE_LOSS:
            log.warning("critic collapse: critic loss below %g for all of epoch %d", CRITIC_COLLAPSE_LOSS, epoch)
        score = _validate(generator, val_set, loss_cfg, cfg, record)
        record.wall_time = time.perf_counter() - t0
        history.append(record)
        is_best = best_state is None or score > best_score
        if is_best:
            best_score, best_state = score, copy.deepcopy(generator.state_dict())
        if on_epoch_end is not None:
            on_epoch_end(epoch=epoch, phase="adversarial", history=history, optimizer=gen_optimizer,
                         critic_optimizer=critic_optimizer, best_score=best_score, best_state=best_state,
                         is_best=is_best, global_step=global_step)

    if best_state is not None:
        generator.load_state_dict(best_state)
    return copy.deepcopy(generator.state_dict()), copy.deepcopy(critic.state_dict()), history
