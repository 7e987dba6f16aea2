"""Command-line entry points.

Subcommands: phantom-gen, train, infer, eval, augment-preview, ablation,
serve. Failures print one machine-readable JSON record to stderr and exit
nonzero; report-producing commands write figures next to their delimited
outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import cv2
import numpy as np

from .ablation import run_ablation
from .augmentation import AugmentationFlags, single_effect_panels
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import InvalidInputError, ManifestError, SonoCaliperError
from .evaluation import evaluate, load_predictions, save_predictions
from .figures import (
    save_augmentation_grid,
    save_error_bars,
    save_prediction_overlay,
    save_training_curves,
)
from .geometry import plane_by_name
from .manifest import image_to_float, load_manifest
from .phantom import generate_dataset
from .store import PredictionBlock, ReviewStore
from .training import (
    LossWeights,
    Predictor,
    TrainConfig,
    predict_entries,
    samples_from_entries,
    train,
)

STORE_ENV_VAR = "SONOCALIPER_STORE"


def _emit_error(exc: BaseException) -> None:
    record = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(record), file=sys.stderr)


def _print(obj) -> None:
    print(json.dumps(obj))


# ---------------------------------------------------------------- phantom-gen


def cmd_phantom_gen(args) -> int:
    plane = plane_by_name(args.plane)
    paths = generate_dataset(
        n=args.n,
        seed=args.seed,
        out_dir=args.out,
        split_ratio=args.split_ratio,
        plane=plane,
        height=args.height,
        width=args.width,
    )
    _print(
        {
            "n": args.n,
            "plane": plane.plane_name,
            "manifest": str(paths["manifest"]),
            "train": str(paths["train"]),
            "val": str(paths["val"]),
        }
    )
    return 0


# ---------------------------------------------------------------------- train


def _train_config_from_args(args) -> TrainConfig:
    overrides = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            overrides = json.load(fh)
        if not isinstance(overrides, dict):
            raise InvalidInputError(f"config file {args.config} must hold a JSON object")
    def pick(cli_value, key, default):
        if cli_value is not None:
            return cli_value
        return overrides.get(key, default)

    alpha = pick(args.alpha, "alpha", 1e-3)
    if args.no_bcs:
        alpha = 0.0
    flags = AugmentationFlags.none() if args.no_da else AugmentationFlags()
    return TrainConfig(
        learning_rate=pick(args.lr, "learning_rate", 1e-4),
        epochs=pick(args.epochs, "epochs", 150),
        batch_size=pick(args.batch_size, "batch_size", 4),
        sigma=pick(args.sigma, "sigma", 2.0),
        line_width=pick(args.line_width, "line_width", 6.0),
        augmentation=flags,
        loss_weights=LossWeights(alpha),
        seed=pick(args.seed, "seed", 0),
        split_ratio=pick(args.split_ratio, "split_ratio", 0.88),
        base_channels=pick(args.base_channels, "base_channels", 12),
        depth=pick(args.depth, "depth", 4),
    )


def cmd_train(args) -> int:
    config = _train_config_from_args(args)
    entries = load_manifest(args.manifest)
    if not entries:
        raise ManifestError(f"manifest {args.manifest} has no entries")
    plane = entries[0].plane
    if args.plane and plane.plane_name != args.plane:
        raise InvalidInputError(
            f"manifest is for plane {plane.plane_name!r}, --plane said {args.plane!r}"
        )
    samples = samples_from_entries(entries)
    val_samples = None
    if args.val_manifest:
        val_samples = samples_from_entries(load_manifest(args.val_manifest))

    if config.loss_weights.alpha == 0.0:
        print("loss: L_H only (L_BCS excluded, alpha=0)")
    else:
        print(f"loss: L_H + {config.loss_weights.alpha:g} * L_BCS")
    result = train(samples, config, val_samples=val_samples)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = save_checkpoint(out_dir / "checkpoint.sckp", result.checkpoint)
    history_path = out_dir / "history.tsv"
    with open(history_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        cols = [
            "epoch",
            "train_loss",
            "train_heatmap_loss",
            "train_constraint_loss",
            "val_loss",
            "val_error_px",
            "val_error_mm",
        ]
        writer.writerow(cols)
        for m in result.history:
            row = m.to_json_dict()
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
    curves_path = save_training_curves(result.history, out_dir / "curves.png")
    (out_dir / "train-config.json").write_text(
        json.dumps(config.to_json_dict(), indent=1) + "\n", encoding="utf-8"
    )
    _print(
        {
            "checkpoint": str(ckpt_path),
            "history": str(history_path),
            "curves": str(curves_path),
            "best_epoch": result.best_epoch,
            "best_val_error_px": result.best_val_error_px,
        }
    )
    return 0


# ---------------------------------------------------------------------- infer


def cmd_infer(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    entries = load_manifest(args.manifest)
    records = predict_entries(checkpoint, entries)
    out_path = Path(args.out)
    save_predictions(records, out_path)

    if args.overlays:
        overlay_dir = out_path.with_name(out_path.stem + "_overlays")
        by_path = {e.image_path: e for e in entries}
        for i, rec in enumerate(records[: args.overlays]):
            entry = by_path[rec.image_path]
            save_prediction_overlay(
                image_to_float(entry.load_image()),
                entry.plane,
                rec.points,
                overlay_dir / f"{i:04d}_{rec.subject_id}.png",
                title=rec.subject_id,
            )

    if args.store:
        store = ReviewStore(args.store)
        for rec in records:
            entry = next(e for e in entries if e.image_path == rec.image_path)
            store.create_study(
                rec.subject_id,
                entry.load_image(),
                entry.plane,
                entry.spacing,
                prediction=PredictionBlock(
                    points=dict(rec.points),
                    confidences=dict(rec.confidences),
                    biometry=dict(rec.biometry),
                    failures=dict(rec.failures),
                ),
                exist_ok=False,
            )

    _print({"predictions": str(out_path), "n": len(records)})
    return 0


# ----------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    predictions = load_predictions(args.pred)
    entries = load_manifest(args.manifest)
    report = evaluate(predictions, entries, policy=args.policy, icc_mode=args.icc_mode)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_json = out_dir / "report.json"
    report_json.write_text(
        json.dumps(report.to_json_dict(), indent=1) + "\n", encoding="utf-8"
    )
    text = report.render_text()
    (out_dir / "report.txt").write_text(text, encoding="utf-8")
    save_error_bars(report, out_dir / "error_bars.png")
    sys.stdout.write(text)
    return 0


# ------------------------------------------------------------ augment-preview


def cmd_augment_preview(args) -> int:
    img = cv2.imread(args.image, cv2.IMREAD_GRAYSCALE)
    if img is None:
        raise InvalidInputError(f"cannot read image {args.image}")
    panels = single_effect_panels(img.astype(np.float32) / 255.0, seed=args.seed)
    out = save_augmentation_grid(panels, args.out)
    _print({"grid": str(out), "panels": [name for name, _ in panels]})
    return 0


# ------------------------------------------------------------------- ablation


def cmd_ablation(args) -> int:
    outcome = run_ablation(
        out_dir=args.out,
        n=args.n,
        n_held_out=args.held_out,
        seed=args.seed,
        epochs=args.epochs,
        batch_size=args.batch_size,
        base_channels=args.base_channels,
        alpha=args.alpha,
        plane=plane_by_name(args.plane),
        height=args.height,
        width=args.width,
    )
    sys.stdout.write(outcome.table.render_text())
    _print(
        {
            "json": str(outcome.json_path),
            "text": str(outcome.text_path),
            "chart": str(outcome.chart_path),
            "pooled_mean_mm": {
                label: outcome.pooled_mean(label) for label in outcome.reports
            },
        }
    )
    return 0


# ---------------------------------------------------------------------- serve


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    store_path = args.store or os.environ.get(STORE_ENV_VAR)
    if not store_path:
        raise InvalidInputError(
            f"no store given: pass --store or set {STORE_ENV_VAR}"
        )
    predictor = None
    if args.checkpoint:
        predictor = Predictor(load_checkpoint(args.checkpoint))
    app = create_app(ReviewStore(store_path), predictor=predictor)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sonocaliper",
        description="caliper placement toolkit: synthetic data, training, "
        "evaluation and the review service",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate a synthetic dataset with manifests")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--plane", default="TC", choices=["TC", "TV"])
    p.add_argument("--height", type=int, default=160)
    p.add_argument("--width", type=int, default=288)
    p.add_argument("--split-ratio", type=float, default=0.88)
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("train", help="train the two-head backbone on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-manifest")
    p.add_argument("--plane")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file with training settings")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--line-width", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--split-ratio", type=float)
    p.add_argument("--no-da", action="store_true", help="disable data augmentation")
    p.add_argument(
        "--no-bcs", action="store_true", help="set alpha=0, excluding the constraint loss"
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run a checkpoint over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="predictions JSONL path")
    p.add_argument("--overlays", type=int, default=0, help="write overlay figures for N images")
    p.add_argument("--store", help="also materialize a review store at this directory")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against a manifest")
    p.add_argument("--pred", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument(
        "--policy", default="per_rater_mean", choices=["per_rater_mean", "consensus_mean"]
    )
    p.add_argument("--icc-mode", default="per_rater", choices=["per_rater", "consensus"])
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment-preview", help="render the effect-by-effect panel grid")
    p.add_argument("--image", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output PNG path")
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("ablation", help="run the 4-way augmentation/constraint grid")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--held-out", type=int, default=40)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--base-channels", type=int, default=12)
    p.add_argument("--alpha", type=float, default=1e-3)
    p.add_argument("--plane", default="TC", choices=["TC", "TV"])
    p.add_argument("--height", type=int, default=160)
    p.add_argument("--width", type=int, default=288)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("serve", help="start the HTTP review service")
    p.add_argument("--checkpoint", help="checkpoint for lazy inference")
    p.add_argument("--store", help=f"store directory (or set {STORE_ENV_VAR})")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SonoCaliperError as exc:
        _emit_error(exc)
        return 1
    except OSError as exc:
        _emit_error(exc)
        return 1
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
