"""Hard-mask Dice evaluation, result tables and training curves."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from cxrseg.core import LEFT_LUNG, LUNG, RIGHT_LUNG, ClassScheme
from cxrseg.data import SegmentationSet
from cxrseg.training import TrainHistory, mean_foreground

PROTOCOL_LABELS = {"JSRT-only": "JSRT", "ALL": "All", "ALL-eval-JSRT": "All / JSRT"}
VARIANT_LABELS = {"attn-unet": "ATTN U-Net", "adv-attn-unet": "Adv. ATTN"}


def hard_dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """2 TP / (2 TP + FN + FP) on binary masks; two empty masks score 1."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch: {pred_mask.shape} vs {gt_mask.shape}")
    tp = np.count_nonzero(pred_mask & gt_mask)
    denom = np.count_nonzero(pred_mask) + np.count_nonzero(gt_mask)
    return 1.0 if denom == 0 else 2.0 * tp / denom


@dataclass
class EvalResult:
    per_sample: dict[str, dict[str, float]]
    per_class_mean: dict[str, float]
    per_class_std: dict[str, float]
    protocol: str = ""
    n: int = 0

    def to_json(self) -> dict:
        return {
            "protocol": self.protocol,
            "n": self.n,
            "per_class_mean": self.per_class_mean,
            "per_class_std": self.per_class_std,
            "per_sample": self.per_sample,
        }

    @classmethod
    def from_json(cls, data: dict) -> "EvalResult":
        return cls(data.get("per_sample", {}), data["per_class_mean"], data["per_class_std"],
                   data.get("protocol", ""), data["n"])


def sample_scores(labels: np.ndarray, truth: np.ndarray, scheme: ClassScheme) -> dict[str, float]:
    """Per-foreground-class Dice for one hard label map, plus the lung union if split."""
    scores = {scheme.classes[c]: hard_dice(labels == c, truth == c) for c in scheme.foreground}
    if LEFT_LUNG in scheme.classes and RIGHT_LUNG in scheme.classes:
        lungs = [scheme.index(LEFT_LUNG), scheme.index(RIGHT_LUNG)]
        scores[LUNG] = hard_dice(np.isin(labels, lungs), np.isin(truth, lungs))
    return scores


def aggregate(per_sample: dict[str, dict[str, float]], protocol: str = "") -> EvalResult:
    """Mean and population std per class, accumulated in sample-id order."""
    if not per_sample:
        raise ValueError("nothing to aggregate")
    ids = sorted(per_sample)
    names = list(per_sample[ids[0]])
    means, stds = {}, {}
    for name in names:
        values = np.array([per_sample[i][name] for i in ids], dtype=np.float64)
        means[name] = float(values.mean())
        stds[name] = float(values.std())
    return EvalResult(per_sample, means, stds, protocol, len(ids))


@torch.no_grad()
def evaluate_model(model: Callable[[torch.Tensor], torch.Tensor], eval_set: SegmentationSet,
                   scheme: ClassScheme, protocol: str = "", batch_size: int = 8) -> EvalResult:
    """Hard Dice of argmax predictions for every sample in ``eval_set``."""
    if len(eval_set) == 0:
        raise ValueError("empty evaluation set")
    if eval_set.num_classes != scheme.num_classes:
        raise ValueError("evaluation set and scheme disagree on the number of classes")
    if isinstance(model, torch.nn.Module):
        model.eval()
    per_sample = {}
    for start in range(0, len(eval_set), batch_size):
        index = list(range(start, min(start + batch_size, len(eval_set))))
        x, _ = eval_set.batch(index)
        # argmax over channels keeps the first maximum, i.e. the lowest index on ties
        labels = model(x).argmax(dim=1).cpu().numpy()
        truth = eval_set.labels[index].numpy()
        for k, i in enumerate(index):
            per_sample[eval_set.ids[i]] = sample_scores(labels[k], truth[k], scheme)
    return aggregate(per_sample, protocol)


def format_cell(mean: float, std: float) -> str:
    return f"{100 * mean:.1f} ± {100 * std:.1f}%"


@dataclass
class Table:
    header: list[str]
    rows: list[list[str]] = field(default_factory=list)

    @property
    def text(self) -> str:
        widths = [max(len(r[i]) for r in [self.header, *self.rows]) for i in range(len(self.header))]
        lines = []
        for k, row in enumerate([self.header, *self.rows]):
            cells = [row[0].ljust(widths[0])] + [c.center(w) for c, w in zip(row[1:], widths[1:])]
            lines.append("  ".join(cells).rstrip())
            if k == 0:
                lines.append("-" * len(lines[0]))
        return "\n".join(lines) + "\n"

    @property
    def csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header)
        writer.writerows(self.rows)
        return buf.getvalue()


def render_table(results: Sequence[tuple[str, str, EvalResult]], metric: str = LUNG) -> Table:
    """Protocols as rows, model variants as columns, cells as ``mean ± std%``.

    ``results`` holds ``(variant, protocol, result)`` triples. Combinations
    without a result show ``-``. ``metric`` picks the class score; when the
    result lacks it (e.g. a single-class scheme) the mean over its classes
    is used.
    """
    if not results:
        raise ValueError("no results to tabulate")
    variants = []
    for variant, _, _ in results:
        if variant not in variants:
            variants.append(variant)
    variants.sort(key=lambda v: (list(VARIANT_LABELS).index(v) if v in VARIANT_LABELS else len(VARIANT_LABELS), v))
    cells = {}
    for variant, protocol, result in results:
        if metric in result.per_class_mean:
            mean, std = result.per_class_mean[metric], result.per_class_std[metric]
        else:
            mean = float(np.mean(list(result.per_class_mean.values())))
            std = float(np.mean(list(result.per_class_std.values())))
        cells[(variant, protocol)] = format_cell(mean, std)
    table = Table(["Dataset"] + [VARIANT_LABELS.get(v, v) for v in variants])
    for protocol, label in PROTOCOL_LABELS.items():
        table.rows.append([label] + [cells.get((v, protocol), "-") for v in variants])
    return table


def plot_dice_curve(history: TrainHistory, out_path: str | Path) -> dict[str, list[float]]:
    """Plot per-epoch train and validation soft Dice; returns the plotted series."""
    if len(history) == 0:
        raise ValueError("empty training history")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [r.epoch for r in history.records]
    train = [mean_foreground(r.train_soft_dice) for r in history.records]
    val = [mean_foreground(r.val_soft_dice) if r.val_soft_dice else float("nan") for r in history.records]

    fig, ax = plt.subplots(figsize=(6, 4))
    (train_line,) = ax.plot(epochs, train, label="train", marker=".")
    (val_line,) = ax.plot(epochs, val, label="validation", marker=".")
    adv = [r.epoch for r in history.records if r.phase == "adversarial"]
    if adv and adv[0] > epochs[0]:
        ax.axvline(adv[0] - 0.5, color="gray", linestyle="--", linewidth=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("soft Dice (foreground mean)")
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    data = {
        "epoch": [float(e) for e in train_line.get_xdata()],
        "train_dice": [float(v) for v in train_line.get_ydata()],
        "val_dice": [float(v) for v in val_line.get_ydata()],
    }
    plt.close(fig)
    return data
