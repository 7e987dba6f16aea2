"""Four-run augmentation/constraint ablation on the synthetic benchmark.

One entry point generates a training set and a held-out set, trains the
{with/without augmentation} x {with/without constraint supervision} grid
with identical seeds, scores every run on the held-out set and emits the
comparison grid as JSON, aligned text and a chart.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .augmentation import AugmentationFlags
from .checkpoint import save_checkpoint
from .errors import InvalidInputError
from .evaluation import (
    AblationTable,
    EvaluationReport,
    ablation_report,
    evaluate,
    save_predictions,
)
from .figures import save_ablation_chart
from .geometry import TC_PLANE, PlaneConfig
from .manifest import load_manifest
from .phantom import generate_dataset
from .training import (
    LossWeights,
    TrainConfig,
    predict_entries,
    samples_from_entries,
    train,
)

__all__ = ["ABLATION_LABELS", "AblationOutcome", "run_ablation"]

# run order fixed: full system first, baseline last
ABLATION_LABELS = ("+DA+BCS", "+DA-BCS", "-DA+BCS", "-DA-BCS")


def _run_settings(label: str, alpha: float) -> tuple[AugmentationFlags, LossWeights]:
    da = label.startswith("+DA")
    bcs = label.endswith("+BCS")
    flags = AugmentationFlags() if da else AugmentationFlags.none()
    weights = LossWeights(alpha if bcs else 0.0)
    return flags, weights


@dataclass
class AblationOutcome:
    table: AblationTable
    reports: dict[str, EvaluationReport]
    out_dir: Path
    json_path: Path
    text_path: Path
    chart_path: Path

    def pooled_mean(self, label: str) -> float:
        return self.reports[label].pooled_mae_mm.mean


def run_ablation(
    out_dir: str | Path,
    n: int = 200,
    n_held_out: int = 40,
    seed: int = 7,
    epochs: int = 30,
    batch_size: int = 4,
    base_channels: int = 12,
    alpha: float = 1e-3,
    plane: PlaneConfig = TC_PLANE,
    height: int = 160,
    width: int = 288,
    labels=ABLATION_LABELS,
) -> AblationOutcome:
    """Run the grid and write ``ablation.json``/``.txt``/``.png`` under out_dir.

    All runs share one dataset, one split and one seed, so the only varying
    factors are the augmentation flags and the constraint-loss weight.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for label in labels:
        if label not in ABLATION_LABELS:
            raise InvalidInputError(f"unknown ablation label {label!r}")

    data_dir = out_dir / "data"
    held_dir = out_dir / "heldout"
    paths = generate_dataset(n, seed, data_dir, plane=plane, height=height, width=width)
    held_paths = generate_dataset(
        n_held_out, seed + 1, held_dir, plane=plane, height=height, width=width
    )
    train_entries = load_manifest(paths["train"])
    val_entries = load_manifest(paths["val"])
    held_entries = load_manifest(held_paths["manifest"])
    train_samples = samples_from_entries(train_entries)
    val_samples = samples_from_entries(val_entries)

    runs: list[tuple[str, EvaluationReport]] = []
    reports: dict[str, EvaluationReport] = {}
    for label in labels:
        flags, weights = _run_settings(label, alpha)
        config = TrainConfig(
            epochs=epochs,
            batch_size=batch_size,
            base_channels=base_channels,
            augmentation=flags,
            loss_weights=weights,
            seed=seed,
        )
        result = train(train_samples, config, val_samples=val_samples)
        run_dir = out_dir / "runs" / label
        run_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(run_dir / "checkpoint.sckp", result.checkpoint)
        records = predict_entries(result.checkpoint, held_entries)
        save_predictions(records, run_dir / "predictions.jsonl")
        report = evaluate(records, held_entries)
        (run_dir / "report.json").write_text(
            json.dumps(report.to_json_dict(), indent=1) + "\n", encoding="utf-8"
        )
        reports[label] = report
        runs.append((label, report))

    table = ablation_report(runs)
    payload = table.to_json_dict()
    payload["runs"] = {
        label: {
            "pooled_mean_mm": reports[label].pooled_mae_mm.mean,
            "pooled_sd_mm": reports[label].pooled_mae_mm.sd,
            "n_images": reports[label].n_images,
        }
        for label in labels
    }
    json_path = out_dir / "ablation.json"
    json_path.write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
    text_path = out_dir / "ablation.txt"
    text_path.write_text(table.render_text(), encoding="utf-8")
    chart_path = save_ablation_chart(table, out_dir / "ablation.png")
    return AblationOutcome(
        table=table,
        reports=reports,
        out_dir=out_dir,
        json_path=json_path,
        text_path=text_path,
        chart_path=chart_path,
    )
