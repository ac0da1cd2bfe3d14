"""Command-line entry point: ``cxrseg {ingest,preprocess,train,evaluate,predict,report}``.

Exit codes: 0 success, 2 usage/config/input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
from PIL import Image

from cxrseg.config import ConfigError, load_config
from cxrseg.core import SUPPORTED_SCHEMES, ClassScheme
from cxrseg.data import CACHE_ENV, default_cache_dir, load_records
from cxrseg.evaluation import EvalResult, plot_dice_curve, render_table
from cxrseg.experiment import (
    VARIANTS,
    config_from_run,
    predict_labels,
    preprocess_config_from,
    read_history,
    run_experiment,
    write_metrics,
)
from cxrseg.ingest import (
    PROTOCOLS,
    CorruptDataError,
    FormatError,
    LayoutError,
    ProtocolError,
    build_manifest,
    dataset_roots,
    load_image,
    read_manifest,
    split_manifest,
    write_manifest,
)
from cxrseg.nets import CheckpointError, model_from_checkpoint
from cxrseg.training import NonFiniteLossError

log = logging.getLogger("cxrseg")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3

PALETTE = {
    "background": (0, 0, 0),
    "left_lung": (220, 60, 60),
    "right_lung": (60, 180, 75),
    "heart": (70, 110, 230),
    "lung": (230, 200, 40),
}


class UsageError(Exception):
    pass


def _datasets(value: str | None) -> list[str] | None:
    if not value:
        return None
    return [v for v in value.replace(",", " ").split() if v]


def cmd_ingest(args) -> int:
    scheme = ClassScheme.from_name(args.scheme)
    roots = dataset_roots(args.data_root, _datasets(args.datasets))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        manifest = build_manifest(roots, scheme, seed=args.seed)
    for w in caught:
        log.warning("%s", w.message)
    write_manifest(manifest, args.out)
    for dataset, count in sorted(manifest.counts().items()):
        print(f"{dataset}: {count}")
    print(f"wrote {len(manifest.records)} records to {args.out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    manifest = read_manifest(args.manifest)
    config = load_config(args.config, args.set)
    cache = args.cache or default_cache_dir()
    if cache is None:
        raise UsageError(f"no cache directory: pass --cache or set {CACHE_ENV}")
    data = load_records(list(manifest.records), manifest.class_scheme, config.preprocess, cache, args.workers)
    print(f"preprocessed {len(data)} samples into {cache}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.resume:
        config, saved = config_from_run(args.resume)
        run_dir, variant, protocol = Path(args.resume), saved["variant"], saved["protocol"]
    else:
        config = load_config(args.config, args.set)
        run_dir, variant, protocol = args.out, args.variant, args.protocol
        if variant is None or protocol is None:
            raise UsageError("--variant and --protocol are required unless resuming")
    manifest = read_manifest(args.manifest)
    run_dir = run_experiment(
        manifest, protocol, variant, config, run_dir=run_dir, runs_root=args.runs_root,
        cache_dir=args.cache or default_cache_dir(), workers=args.workers, resume=bool(args.resume),
        echo=lambda line: print(line, flush=True),
    )
    print(f"run directory: {run_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    config, saved = config_from_run(run_dir)
    generator, _ = model_from_checkpoint(args.checkpoint or run_dir / "checkpoints" / "best.pt")
    manifest = read_manifest(args.manifest)
    protocol = saved["protocol"]
    if manifest.protocol != protocol:
        manifest = split_manifest(manifest, protocol, config.split.fractions, config.split.seed)
    records = manifest.subset(args.split)
    if not records:
        raise UsageError(f"no {args.split} records under protocol {protocol}")
    data = load_records(records, manifest.class_scheme, config.preprocess,
                        args.cache or default_cache_dir(), args.workers)
    metrics = write_metrics(run_dir, generator, data, manifest.class_scheme, protocol, saved["variant"], args.split,
                            config.train.batch_size)
    for name, mean in metrics["per_class_mean"].items():
        print(f"{name}: {100 * mean:.1f} ± {100 * metrics['per_class_std'][name]:.1f}% (n={metrics['n']})")
    return EXIT_OK


def _palette(scheme: ClassScheme) -> list[int]:
    flat = []
    for name in scheme.classes:
        flat.extend(PALETTE[name])
    return flat + [0] * (768 - len(flat))


def cmd_predict(args) -> int:
    try:
        generator, extra = model_from_checkpoint(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        raise UsageError(str(exc)) from exc
    scheme = ClassScheme.from_name(extra["scheme"])
    cfg = preprocess_config_from(extra)
    image = load_image(args.image, invert_jsrt=cfg.invert_jsrt)
    labels = predict_labels(generator, image, cfg)
    mask = Image.frombytes("P", (labels.shape[1], labels.shape[0]), np.ascontiguousarray(labels).tobytes())
    mask.putpalette(_palette(scheme))
    mask.save(args.out)
    if args.overlay:
        gray = np.rint(image.pixels.astype(np.float64) * (255.0 / image.max_value)).astype(np.uint8)
        colours = np.array([PALETTE[c] for c in scheme.classes], dtype=np.float64)[labels]
        base = np.repeat(gray[..., None], 3, axis=2).astype(np.float64)
        fg = (labels != scheme.background_index)[..., None]
        blend = np.where(fg, 0.6 * base + 0.4 * colours, base)
        Image.fromarray(np.rint(blend).astype(np.uint8)).save(args.overlay)
    print(f"wrote {args.out} ({image.width}x{image.height})")
    return EXIT_OK


def cmd_report(args) -> int:
    results = []
    for run in args.runs:
        run = Path(run)
        metrics_path = run / "final_metrics.json"
        if not metrics_path.exists():
            raise UsageError(f"{run}: missing final_metrics.json")
        metrics = json.loads(metrics_path.read_text(encoding="utf-8"))
        results.append((metrics["variant"], metrics["protocol"], EvalResult.from_json(metrics)))
        history_path = run / "history.jsonl"
        if history_path.exists():
            history = read_history(history_path)
            if len(history):
                plot_dice_curve(history, run / "dice_curve.png")
    table = render_table(results, metric=args.metric)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.txt").write_text(table.text, encoding="utf-8")
    (out / "table.csv").write_text(table.csv, encoding="utf-8")
    print(table.text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cxrseg", description="Chest X-ray lung/heart segmentation")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", type=Path, help="JSON config file")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override a config value, e.g. loss.lambda_adv=0.1 (repeatable)")
        p.add_argument("--cache", type=Path, help=f"preprocess cache directory (default: ${CACHE_ENV})")
        p.add_argument("--workers", type=int, default=1, help="parallel loading workers")

    p = sub.add_parser("ingest", help="scan dataset directories into a manifest")
    p.add_argument("--data-root", required=True, type=Path)
    p.add_argument("--datasets", help="comma-separated subset of JSRT,MONTGOMERY,SHENZHEN")
    p.add_argument("--scheme", choices=sorted(SUPPORTED_SCHEMES), default="lungs")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--workers", type=int, default=1, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("preprocess", help="fill the preprocess cache for a manifest")
    p.add_argument("--manifest", required=True, type=Path)
    common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model variant under a split protocol")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--out", type=Path, help="run directory (default: timestamped under --runs-root)")
    p.add_argument("--runs-root", type=Path, default=Path("runs"))
    p.add_argument("--resume", type=Path, metavar="RUN_DIR", help="continue an interrupted run")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="hard Dice of a trained run on a split")
    p.add_argument("--run", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--checkpoint", type=Path, help="default: <run>/checkpoints/best.pt")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    common(p, config=False)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="indexed-colour PNG mask")
    p.add_argument("--overlay", type=Path, help="optional RGB overlay PNG")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="results table and Dice curves from run directories")
    p.add_argument("--runs", nargs="+", required=True, type=Path)
    p.add_argument("--out", type=Path, default=Path("."))
    p.add_argument("--metric", default="lung", help="class score shown in the table")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ConfigError, LayoutError, ProtocolError, FormatError, CorruptDataError,
            CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
