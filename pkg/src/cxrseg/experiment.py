"""End-to-end runs: preprocess, train one model variant, evaluate, persist.

Run directory layout::

    config.json             configuration snapshot
    history.jsonl           one TrainHistory record per completed epoch
    checkpoints/epoch_<n>.pt        generator (+ optimizer, resume state)
    checkpoints/epoch_<n>.critic.pt critic, adversarial phase only
    checkpoints/best.pt     best-validation generator of the latest phase
    final_metrics.json      hard Dice on the evaluation split
    dice_curve.png          epoch-wise soft Dice
"""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from cxrseg.config import ExperimentConfig
from cxrseg.core import ClassScheme, GrayImage
from cxrseg.data import SegmentationSet, load_records
from cxrseg.evaluation import evaluate_model, plot_dice_curve
from cxrseg.ingest import Manifest, split_manifest
from cxrseg.nets import build_critic, build_generator, load_weights, read_checkpoint, save_weights
from cxrseg.preprocess import PreprocessConfig, preprocess_image, resize_labels
from cxrseg.training import (
    NonFiniteLossError,
    TrainHistory,
    adversarial_train,
    make_sgd,
    mean_foreground,
    pretrain_generator,
)

log = logging.getLogger(__name__)

VARIANTS = ("attn-unet", "adv-attn-unet")
_EPOCH_FILE = re.compile(r"epoch_(\d+)\.pt$")


def _write_json(path: Path, data) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def write_history(path: Path, history: TrainHistory) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in history.to_dicts()), encoding="utf-8")
    tmp.replace(path)


def read_history(path: str | Path) -> TrainHistory:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return TrainHistory.from_dicts(json.loads(ln) for ln in lines if ln.strip())


def phase_plan(variant: str, cfg: ExperimentConfig) -> list[tuple[str, int]]:
    if variant == "attn-unet":
        return [("pretrain", cfg.train.plain_epochs)]
    if variant == "adv-attn-unet":
        return [("pretrain", cfg.train.pretrain_epochs), ("adversarial", cfg.train.adv_epochs)]
    raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")


def _latest_checkpoint(run_dir: Path) -> Path | None:
    found = [(int(m.group(1)), p) for p in (run_dir / "checkpoints").glob("epoch_*.pt")
             if (m := _EPOCH_FILE.search(p.name))]
    return max(found)[1] if found else None


def _load_split(manifest: Manifest, split: str, cfg: ExperimentConfig, cache_dir, workers) -> SegmentationSet | None:
    records = manifest.subset(split)
    if not records:
        return None
    return load_records(records, manifest.class_scheme, cfg.preprocess, cache_dir, workers)


def run_experiment(
    manifest: Manifest,
    protocol: str,
    variant: str,
    config: ExperimentConfig = ExperimentConfig(),
    run_dir: str | Path | None = None,
    runs_root: str | Path = "runs",
    cache_dir: str | Path | None = None,
    workers: int = 1,
    resume: bool = False,
    echo: Callable[[str], None] = print,
) -> Path:
    """Train ``variant`` under ``protocol`` and write everything to a run directory.

    With ``resume`` the latest epoch checkpoint in ``run_dir`` is restored and
    training continues from the following epoch; batch order depends only on
    the seed and epoch number, so a resumed run matches an uninterrupted one.
    """
    plan = phase_plan(variant, config)
    if run_dir is None:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = Path(runs_root) / f"{stamp}_{variant}_{protocol}"
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    scheme = manifest.class_scheme
    config = replace(
        config,
        unet=replace(config.unet, num_classes=scheme.num_classes, input_size=config.preprocess.target_size),
        critic=replace(config.critic, num_classes=scheme.num_classes),
    )
    if manifest.protocol != protocol:
        manifest = split_manifest(manifest, protocol, config.split.fractions, config.split.seed)
    _write_json(run_dir / "config.json", {
        "experiment": config.to_dict(),
        "variant": variant,
        "protocol": protocol,
        "class_scheme": scheme.name,
        "splits": {s: len(manifest.subset(s)) for s in ("train", "val", "test")},
    })

    train_set = _load_split(manifest, "train", config, cache_dir, workers)
    if train_set is None:
        raise ValueError(f"protocol {protocol} leaves no training records")
    val_set = _load_split(manifest, "val", config, cache_dir, workers)
    test_set = _load_split(manifest, "test", config, cache_dir, workers)

    torch.manual_seed(config.train.seed)
    generator = build_generator(config.unet)
    critic = build_critic(config.critic) if variant == "adv-attn-unet" else None
    history = TrainHistory()
    meta = {"scheme": scheme.name, "preprocess": config.preprocess.to_dict(), "variant": variant, "protocol": protocol}

    # resume bookkeeping
    done_epochs, resume_phase, resume_extra = 0, None, None
    latest = _latest_checkpoint(run_dir) if resume else None
    gen_opt = crit_opt = None
    if latest is not None:
        gen_opt = make_sgd(generator, config.train.learning_rate, config.train.momentum)
        resume_extra = load_weights(generator, latest, gen_opt)
        history = TrainHistory.from_dicts(resume_extra["history"])
        done_epochs, resume_phase = resume_extra["epoch"], resume_extra["phase"]
        if resume_phase == "adversarial":
            crit_opt = make_sgd(critic, config.train.critic_learning_rate or config.train.learning_rate,
                                config.train.momentum)
            load_weights(critic, latest.with_name(latest.stem + ".critic.pt"), crit_opt)
        echo(f"resumed from {latest.name} (epoch {done_epochs}, {resume_phase})")

    def checkpoint(epoch, phase, history, optimizer, best_score, best_state, is_best,
                   critic_optimizer=None, global_step=0):
        write_history(run_dir / "history.jsonl", history)
        rec = history.records[-1]
        val = mean_foreground(rec.val_soft_dice) if rec.val_soft_dice else float("nan")
        echo(f"epoch={epoch} loss={rec.train_loss:.6f} val_dice={val:.6f}")
        extra = {**meta, "epoch": epoch, "phase": phase, "history": history.to_dicts(),
                 "best_score": best_score, "global_step": global_step}
        if is_best:
            save_weights(generator, run_dir / "checkpoints" / "best.pt", extra=extra, state_dict=best_state)
        phase_end = epoch == phase_last_epoch[phase]
        if epoch % config.train.checkpoint_every == 0 or phase_end:
            path = run_dir / "checkpoints" / f"epoch_{epoch}.pt"
            if critic is not None and phase == "adversarial":
                save_weights(critic, path.with_name(path.stem + ".critic.pt"), critic_optimizer)
            save_weights(generator, path, optimizer, extra=extra)

    phase_last_epoch, start = {}, 0
    for phase, epochs in plan:
        phase_last_epoch[phase] = start + epochs
        start += epochs

    try:
        start = 0
        for phase, epochs in plan:
            phase_start, phase_end = start, start + epochs
            start = phase_end
            if done_epochs >= phase_end:
                continue
            resuming = resume_extra is not None and resume_phase == phase and done_epochs > phase_start
            if not resuming and done_epochs == phase_start and done_epochs > 0:
                # previous phase finished before the interruption: continue from its best weights
                load_weights(generator, run_dir / "checkpoints" / "best.pt")
                gen_opt = crit_opt = None
            best = None
            if resuming:
                best_payload = read_checkpoint(run_dir / "checkpoints" / "best.pt")
                best = (resume_extra["best_score"], best_payload["state_dict"])
            first = done_epochs if resuming else phase_start
            if phase == "pretrain":
                pretrain_generator(
                    generator, train_set, val_set, config.train, config.loss,
                    epochs=phase_end - first, start_epoch=first, optimizer=gen_opt if resuming else None,
                    history=history, best=best, on_epoch_end=checkpoint,
                )
            else:
                generator.pretrained = config.train.pretrain_epochs > 0
                adversarial_train(
                    generator, critic, train_set, val_set, config.train, config.loss,
                    epochs=phase_end - first, start_epoch=first,
                    gen_optimizer=gen_opt if resuming else None,
                    critic_optimizer=crit_opt if resuming else None,
                    history=history, best=best,
                    global_step=resume_extra["global_step"] if resuming else 0,
                    on_epoch_end=checkpoint,
                )
    except NonFiniteLossError as exc:
        _write_json(run_dir / "failure.json", exc.snapshot)
        save_weights(generator, run_dir / "checkpoints" / "failure.pt", extra={**meta, **exc.snapshot})
        raise

    if not (run_dir / "checkpoints" / "best.pt").exists():
        save_weights(generator, run_dir / "checkpoints" / "best.pt", extra={**meta, "epoch": 0, "phase": "none"})
    write_history(run_dir / "history.jsonl", history)
    if len(history):
        plot_dice_curve(history, run_dir / "dice_curve.png")

    eval_split, eval_set = next(((s, d) for s, d in (("test", test_set), ("val", val_set), ("train", train_set))
                                 if d is not None))
    write_metrics(run_dir, generator, eval_set, scheme, protocol, variant, eval_split, config.train.batch_size)
    return run_dir


def write_metrics(run_dir: Path, generator, eval_set: SegmentationSet, scheme: ClassScheme, protocol: str,
                  variant: str, eval_split: str, batch_size: int = 8) -> dict:
    result = evaluate_model(generator, eval_set, scheme, protocol, batch_size)
    metrics = {"variant": variant, "eval_split": eval_split, **result.to_json()}
    _write_json(Path(run_dir) / "final_metrics.json", metrics)
    return metrics


@torch.no_grad()
def predict_labels(generator, image: GrayImage, cfg: PreprocessConfig) -> np.ndarray:
    """Hard class labels at the input image's native resolution."""
    values = preprocess_image(image, cfg).values
    generator.eval()
    x = torch.from_numpy(np.ascontiguousarray(values, dtype=np.float32))[None, None]
    labels = generator(x).argmax(dim=1)[0].numpy().astype(np.uint8)
    return resize_labels(labels, (image.height, image.width))


def preprocess_config_from(extra: dict) -> PreprocessConfig:
    data = dict(extra["preprocess"])
    return PreprocessConfig(**data)


def config_from_run(run_dir: str | Path) -> tuple[ExperimentConfig, dict]:
    data = json.loads((Path(run_dir) / "config.json").read_text(encoding="utf-8"))
    return ExperimentConfig.from_dict(data["experiment"]), data

