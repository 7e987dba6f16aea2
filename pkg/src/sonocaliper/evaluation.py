"""Error statistics for caliper predictions: per-caliper and per-biometry
MAE against each rater, inter-rater error matrices, ICC(2,k) reliability,
and the multi-run comparison grid."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidInputError, ManifestError, UndefinedICCError
from .geometry import (
    CaliperPoint,
    LandmarkSet,
    PixelSpacing,
    PlaneConfig,
    biometry_length,
    plane_by_name,
)
from .manifest import (
    PER_RATER_MEAN,
    GroundTruthPolicy,
    ManifestEntry,
    resolve_ground_truth,
)

__all__ = [
    "PREDICTIONS_SCHEMA",
    "REPORT_SCHEMA",
    "ErrorStat",
    "MetricBlock",
    "PredictionRecord",
    "EvaluationReport",
    "AblationTable",
    "caliper_error_mm",
    "icc_2k",
    "evaluate",
    "ablation_report",
    "save_predictions",
    "load_predictions",
]

PREDICTIONS_SCHEMA = "caliper-predictions/v1"
REPORT_SCHEMA = "caliper-eval-report/v1"


def caliper_error_mm(pred: CaliperPoint, gt: CaliperPoint, spacing: PixelSpacing) -> float:
    """Euclidean distance between a predicted and a true caliper, in mm."""
    return biometry_length(pred, gt, spacing)


def icc_2k(table) -> float:
    """Reliability of the average of k raters over n subjects.

    Two-way ANOVA with random subjects and raters, absolute agreement:
    (MSR - MSE) / (MSR + (MSC - MSE) / n). The residual mean square is
    computed from the residuals themselves, so a table whose raters agree
    exactly returns exactly 1.0.
    """
    arr = np.asarray(table, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"rating table must be 2-D, got shape {arr.shape}")
    n, k = arr.shape
    if n < 2 or k < 2:
        raise InvalidInputError(f"need at least 2 subjects and 2 raters, got {n}x{k}")
    if not np.isfinite(arr).all():
        raise InvalidInputError("rating table contains non-finite cells")
    grand = arr.mean()
    if not np.any(arr != arr.flat[0]):
        raise UndefinedICCError("all ratings identical: no variance to apportion")
    row_means = arr.mean(axis=1)
    col_means = arr.mean(axis=0)
    msr = k * np.sum((row_means - grand) ** 2) / (n - 1)
    msc = n * np.sum((col_means - grand) ** 2) / (k - 1)
    resid = arr - row_means[:, None] - col_means[None, :] + grand
    mse = np.sum(resid**2) / ((n - 1) * (k - 1))
    denom = msr + (msc - mse) / n
    if denom == 0.0:
        raise UndefinedICCError("zero denominator: no subject variance to attribute")
    return float((msr - mse) / denom)


@dataclass(frozen=True)
class ErrorStat:
    """Mean, population standard deviation and sample count of one error pool."""

    mean: float
    sd: float
    n: int

    @classmethod
    def from_samples(cls, samples: Sequence[float]) -> "ErrorStat":
        if not samples:
            return cls(math.nan, math.nan, 0)
        a = np.asarray(samples, dtype=np.float64)
        return cls(float(a.mean()), float(a.std()), int(a.size))

    def to_json_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd, "n": self.n}


@dataclass(frozen=True)
class MetricBlock:
    """One metric broken out per rater plus the pooled statistic."""

    per_rater: Mapping[str, ErrorStat]
    pooled: ErrorStat

    def to_json_dict(self) -> dict:
        return {
            "per_rater": {r: s.to_json_dict() for r, s in self.per_rater.items()},
            "pooled": self.pooled.to_json_dict(),
        }


@dataclass(frozen=True)
class PredictionRecord:
    """The model's output for one image; points may be partial on decode failure."""

    subject_id: str
    image_path: str
    plane_name: str
    points: Mapping[str, CaliperPoint]
    confidences: Mapping[str, float] = field(default_factory=dict)
    biometry: Mapping[str, float] = field(default_factory=dict)
    failures: Mapping[str, str] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "schema": PREDICTIONS_SCHEMA,
            "subject_id": self.subject_id,
            "image_path": self.image_path,
            "plane": self.plane_name,
            "points": {n: [p.x, p.y] for n, p in self.points.items()},
            "confidences": dict(self.confidences),
            "biometry": dict(self.biometry),
            "failures": dict(self.failures),
        }

    @classmethod
    def from_json_dict(cls, obj: dict, where: str = "prediction") -> "PredictionRecord":
        if obj.get("schema") != PREDICTIONS_SCHEMA:
            raise ManifestError(
                f"{where}: schema {obj.get('schema')!r} is not {PREDICTIONS_SCHEMA!r}"
            )
        missing = [k for k in ("subject_id", "image_path", "plane", "points") if k not in obj]
        if missing:
            raise ManifestError(f"{where}: missing fields: {', '.join(missing)}")
        points = {
            str(n): CaliperPoint(float(xy[0]), float(xy[1]))
            for n, xy in obj["points"].items()
        }
        return cls(
            subject_id=str(obj["subject_id"]),
            image_path=str(obj["image_path"]),
            plane_name=str(obj["plane"]),
            points=points,
            confidences={str(k): float(v) for k, v in obj.get("confidences", {}).items()},
            biometry={str(k): float(v) for k, v in obj.get("biometry", {}).items()},
            failures={str(k): str(v) for k, v in obj.get("failures", {}).items()},
        )


def save_predictions(records: Sequence[PredictionRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_dict()) + "\n")
    tmp.replace(path)
    return path


def load_predictions(path: str | Path) -> list[PredictionRecord]:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"predictions file {path} does not exist")
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path.name}:{lineno}: not valid JSON: {exc}") from exc
            records.append(PredictionRecord.from_json_dict(obj, f"{path.name}:{lineno}"))
    return records


@dataclass(frozen=True)
class EvaluationReport:
    plane_name: str
    policy: str
    n_images: int
    missing: tuple[str, ...]  # image paths without predictions
    per_caliper_mae_mm: Mapping[str, MetricBlock]
    per_biometry_mae_mm: Mapping[str, MetricBlock]
    pooled_mae_mm: ErrorStat  # every (image, rater, caliper) sample together
    rater_ids: tuple[str, ...]
    inter_rater_matrix: tuple[tuple[float, ...], ...]  # mean caliper error per rater pair
    inter_rater_to_consensus: Mapping[str, ErrorStat]
    icc: Mapping[str, float | None]  # None when undefined on this data
    icc_mode: str
    missing_landmarks: Mapping[str, int]  # caliper -> count of undetected instances

    def to_json_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "plane": self.plane_name,
            "policy": self.policy,
            "n_images": self.n_images,
            "missing": list(self.missing),
            "per_caliper_mae_mm": {
                k: v.to_json_dict() for k, v in self.per_caliper_mae_mm.items()
            },
            "per_biometry_mae_mm": {
                k: v.to_json_dict() for k, v in self.per_biometry_mae_mm.items()
            },
            "pooled_mae_mm": self.pooled_mae_mm.to_json_dict(),
            "raters": list(self.rater_ids),
            "inter_rater_matrix": [list(row) for row in self.inter_rater_matrix],
            "inter_rater_to_consensus": {
                r: s.to_json_dict() for r, s in self.inter_rater_to_consensus.items()
            },
            "icc": dict(self.icc),
            "icc_mode": self.icc_mode,
            "missing_landmarks": dict(self.missing_landmarks),
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "EvaluationReport":
        if obj.get("schema") != REPORT_SCHEMA:
            raise ManifestError(f"report schema {obj.get('schema')!r} is not {REPORT_SCHEMA!r}")

        def stat(d):
            return ErrorStat(float(d["mean"]), float(d["sd"]), int(d["n"]))

        def block(d):
            return MetricBlock(
                per_rater={r: stat(s) for r, s in d["per_rater"].items()},
                pooled=stat(d["pooled"]),
            )

        return cls(
            plane_name=obj["plane"],
            policy=obj["policy"],
            n_images=int(obj["n_images"]),
            missing=tuple(obj["missing"]),
            per_caliper_mae_mm={k: block(v) for k, v in obj["per_caliper_mae_mm"].items()},
            per_biometry_mae_mm={k: block(v) for k, v in obj["per_biometry_mae_mm"].items()},
            pooled_mae_mm=stat(obj["pooled_mae_mm"]),
            rater_ids=tuple(obj["raters"]),
            inter_rater_matrix=tuple(tuple(row) for row in obj["inter_rater_matrix"]),
            inter_rater_to_consensus={
                r: stat(s) for r, s in obj["inter_rater_to_consensus"].items()
            },
            icc={k: (None if v is None else float(v)) for k, v in obj["icc"].items()},
            icc_mode=obj["icc_mode"],
            missing_landmarks={k: int(v) for k, v in obj["missing_landmarks"].items()},
        )

    def render_text(self) -> str:
        lines = [
            f"Evaluation: plane {self.plane_name}, {self.n_images} images, "
            f"policy {self.policy}",
        ]
        if self.missing:
            lines.append(f"Missing predictions for {len(self.missing)} image(s).")
        lines.append("")
        lines.append("Per-caliper MAE [mm]")
        lines.append(f"  {'caliper':<10}{'rater':<14}{'mean':>9}{'sd':>9}{'n':>6}")
        for name, blockv in self.per_caliper_mae_mm.items():
            for rater, s in blockv.per_rater.items():
                lines.append(f"  {name:<10}{rater:<14}{s.mean:>9.3f}{s.sd:>9.3f}{s.n:>6d}")
            p = blockv.pooled
            lines.append(f"  {name:<10}{'(pooled)':<14}{p.mean:>9.3f}{p.sd:>9.3f}{p.n:>6d}")
        p = self.pooled_mae_mm
        lines.append(f"  {'ALL':<10}{'(pooled)':<14}{p.mean:>9.3f}{p.sd:>9.3f}{p.n:>6d}")
        lines.append("")
        lines.append("Per-biometry MAE [mm]")
        for name, blockv in self.per_biometry_mae_mm.items():
            p = blockv.pooled
            lines.append(f"  {name:<10}{'(pooled)':<14}{p.mean:>9.3f}{p.sd:>9.3f}{p.n:>6d}")
        lines.append("")
        lines.append(f"ICC ({self.icc_mode} table)")
        for name, v in self.icc.items():
            lines.append(f"  {name:<10}{'undefined' if v is None else format(v, '.4f')}")
        if len(self.rater_ids) > 1:
            lines.append("")
            lines.append("Inter-rater mean caliper error [mm]")
            header = "  " + " " * 12 + "".join(f"{r:>12}" for r in self.rater_ids)
            lines.append(header)
            for r, row in zip(self.rater_ids, self.inter_rater_matrix):
                lines.append("  " + f"{r:<12}" + "".join(f"{v:>12.3f}" for v in row))
        return "\n".join(lines) + "\n"


def _biometry_from_points(plane: PlaneConfig, points, spacing) -> dict[str, float]:
    out = {}
    for name, (a, b) in zip(plane.biometry_names, plane.biometry_pairs):
        if a in points and b in points:
            out[name] = biometry_length(points[a], points[b], spacing)
    return out


def evaluate(
    predictions: Sequence[PredictionRecord],
    entries: Sequence[ManifestEntry],
    policy: GroundTruthPolicy | str = PER_RATER_MEAN,
    icc_mode: str = "per_rater",
) -> EvaluationReport:
    """Score predictions against every rater's ground truth.

    Entries without a prediction are excluded and listed. The ICC table has
    one row per image and one column per rater's biometry plus one for the
    model; with ``icc_mode="consensus"`` the rater columns collapse to one.
    """
    if isinstance(policy, str):
        policy = GroundTruthPolicy(policy)
    if icc_mode not in ("per_rater", "consensus"):
        raise InvalidInputError(f"unknown icc_mode {icc_mode!r}")
    if not entries:
        raise InvalidInputError("no manifest entries to evaluate")
    plane = entries[0].plane
    by_path = {p.image_path: p for p in predictions}

    matched: list[tuple[ManifestEntry, PredictionRecord, dict[str, LandmarkSet]]] = []
    missing = []
    rater_order: list[str] = []
    for entry in entries:
        if entry.plane.plane_name != plane.plane_name:
            raise InvalidInputError("entries mix planes; evaluate one plane at a time")
        pred = by_path.get(entry.image_path)
        if pred is None:
            missing.append(entry.image_path)
            continue
        if pred.plane_name != plane.plane_name:
            raise InvalidInputError(
                f"prediction for {entry.image_path} is for plane {pred.plane_name!r}, "
                f"entry is {plane.plane_name!r}"
            )
        resolved = resolve_ground_truth(entry, policy)
        if isinstance(resolved, LandmarkSet):
            resolved = {"consensus": resolved}
        for r in resolved:
            if r not in rater_order:
                rater_order.append(r)
        matched.append((entry, pred, resolved))
    if not matched:
        raise InvalidInputError("no entry has a matching prediction")
    raters = tuple(sorted(rater_order))

    caliper_samples: dict[str, dict[str, list[float]]] = {
        lm: {r: [] for r in raters} for lm in plane.landmark_names
    }
    biometry_samples: dict[str, dict[str, list[float]]] = {
        b: {r: [] for r in raters} for b in plane.biometry_names
    }
    missing_landmarks = {lm: 0 for lm in plane.landmark_names}
    pair_sums = np.zeros((len(raters), len(raters)))
    pair_counts = np.zeros((len(raters), len(raters)), dtype=np.int64)
    consensus_samples: dict[str, list[float]] = {r: [] for r in raters}
    icc_rows: dict[str, list[list[float]]] = {b: [] for b in plane.biometry_names}

    for entry, pred, resolved in matched:
        spacing = entry.spacing
        for lm in plane.landmark_names:
            if lm not in pred.points:
                missing_landmarks[lm] += 1
                continue
            for r, gt in resolved.items():
                caliper_samples[lm][r].append(
                    caliper_error_mm(pred.points[lm], gt[lm], spacing)
                )
        pred_bio = _biometry_from_points(plane, pred.points, spacing)
        gt_bio = {r: _biometry_from_points(plane, gt.points, spacing) for r, gt in resolved.items()}
        for b in plane.biometry_names:
            if b not in pred_bio:
                continue
            for r in resolved:
                biometry_samples[b][r].append(abs(pred_bio[b] - gt_bio[r][b]))
            if icc_mode == "consensus" and len(resolved) > 1:
                cols = [float(np.mean([gt_bio[r][b] for r in resolved])), pred_bio[b]]
            else:
                cols = [gt_bio[r][b] for r in sorted(resolved)] + [pred_bio[b]]
            icc_rows[b].append(cols)
        # rater agreement, pooled over calipers
        present = [r for r in raters if r in resolved]
        for i, ri in enumerate(present):
            for rj in present[i + 1 :]:
                ii, jj = raters.index(ri), raters.index(rj)
                errs = [
                    caliper_error_mm(resolved[ri][lm], resolved[rj][lm], spacing)
                    for lm in plane.landmark_names
                ]
                s = float(np.sum(errs))
                pair_sums[ii, jj] += s
                pair_sums[jj, ii] += s
                pair_counts[ii, jj] += len(errs)
                pair_counts[jj, ii] += len(errs)
        if len(resolved) > 1:
            cons_pts = {
                lm: CaliperPoint(
                    float(np.mean([resolved[r][lm].x for r in resolved])),
                    float(np.mean([resolved[r][lm].y for r in resolved])),
                )
                for lm in plane.landmark_names
            }
            for r in resolved:
                for lm in plane.landmark_names:
                    consensus_samples[r].append(
                        caliper_error_mm(resolved[r][lm], cons_pts[lm], spacing)
                    )

    def block_from(samples: dict[str, list[float]]) -> MetricBlock:
        pooled: list[float] = []
        per_rater = {}
        for r in raters:
            per_rater[r] = ErrorStat.from_samples(samples[r])
            pooled.extend(samples[r])
        return MetricBlock(per_rater=per_rater, pooled=ErrorStat.from_samples(pooled))

    per_caliper = {lm: block_from(caliper_samples[lm]) for lm in plane.landmark_names}
    per_biometry = {b: block_from(biometry_samples[b]) for b in plane.biometry_names}
    all_samples = [v for lm in plane.landmark_names for r in raters for v in caliper_samples[lm][r]]

    with np.errstate(invalid="ignore"):
        matrix = np.where(pair_counts > 0, pair_sums / np.maximum(pair_counts, 1), 0.0)

    icc_values: dict[str, float | None] = {}
    for b in plane.biometry_names:
        rows = icc_rows[b]
        try:
            if len(rows) < 2 or len(rows[0]) < 2:
                raise UndefinedICCError("table too small")
            icc_values[b] = icc_2k(np.asarray(rows))
        except UndefinedICCError:
            icc_values[b] = None

    return EvaluationReport(
        plane_name=plane.plane_name,
        policy=policy.mode,
        n_images=len(matched),
        missing=tuple(missing),
        per_caliper_mae_mm=per_caliper,
        per_biometry_mae_mm=per_biometry,
        pooled_mae_mm=ErrorStat.from_samples(all_samples),
        rater_ids=raters,
        inter_rater_matrix=tuple(tuple(float(v) for v in row) for row in matrix),
        inter_rater_to_consensus={
            r: ErrorStat.from_samples(consensus_samples[r]) for r in raters
        },
        icc=icc_values,
        icc_mode=icc_mode,
        missing_landmarks=missing_landmarks,
    )


@dataclass(frozen=True)
class AblationTable:
    """Pooled per-caliper errors of several labeled runs, side by side."""

    columns: tuple[str, ...]  # caliper names + "pooled"
    rows: tuple[tuple[str, dict], ...]  # (label, column -> ErrorStat)

    def to_json_dict(self) -> dict:
        return {
            "schema": "caliper-ablation/v1",
            "columns": list(self.columns),
            "rows": [
                {"label": label, "cells": {c: cells[c].to_json_dict() for c in self.columns}}
                for label, cells in self.rows
            ],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "AblationTable":
        if obj.get("schema") != "caliper-ablation/v1":
            raise ManifestError(f"ablation schema {obj.get('schema')!r} unsupported")
        columns = tuple(obj["columns"])
        rows = []
        for row in obj["rows"]:
            cells = {
                c: ErrorStat(float(s["mean"]), float(s["sd"]), int(s["n"]))
                for c, s in row["cells"].items()
            }
            rows.append((row["label"], cells))
        return cls(columns=columns, rows=tuple(rows))

    def render_text(self) -> str:
        """Aligned grid, one run per row, `mean±sd` in mm at 3 decimals."""
        width = max(16, max((len(label) for label, _ in self.rows), default=0) + 2)
        header = f"{'run':<{width}}" + "".join(f"{c:>16}" for c in self.columns)
        lines = [header]
        for label, cells in self.rows:
            body = "".join(
                f"{format(cells[c].mean, '.3f') + '±' + format(cells[c].sd, '.3f'):>16}"
                for c in self.columns
            )
            lines.append(f"{label:<{width}}" + body)
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse_text(text: str) -> dict[str, dict[str, tuple[float, float]]]:
        """Read a rendered grid back into {label: {column: (mean, sd)}}."""
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise InvalidInputError("empty ablation table text")
        header = re.split(r"\s{2,}", lines[0].strip())
        if header[0] != "run":
            raise InvalidInputError("ablation table header must start with 'run'")
        columns = header[1:]
        out: dict[str, dict[str, tuple[float, float]]] = {}
        for ln in lines[1:]:
            parts = re.split(r"\s{2,}", ln.strip())
            if len(parts) != len(columns) + 1:
                raise InvalidInputError(f"malformed ablation row: {ln!r}")
            label, cells = parts[0], parts[1:]
            row = {}
            for col, cell in zip(columns, cells):
                m = re.fullmatch(r"(-?\d+(?:\.\d+)?)±(-?\d+(?:\.\d+)?)", cell)
                if m is None:
                    raise InvalidInputError(f"malformed cell {cell!r} in row {label!r}")
                row[col] = (float(m.group(1)), float(m.group(2)))
            out[label] = row
        return out


def ablation_report(runs: Sequence[tuple[str, EvaluationReport]]) -> AblationTable:
    """Collect pooled per-caliper MAE (plus the overall pool) across runs."""
    if not runs:
        raise InvalidInputError("ablation_report needs at least one run")
    plane = plane_by_name(runs[0][1].plane_name)
    columns = tuple(plane.landmark_names) + ("pooled",)
    rows = []
    for label, report in runs:
        if report.plane_name != plane.plane_name:
            raise InvalidInputError("all ablation runs must share one plane")
        cells = {lm: report.per_caliper_mae_mm[lm].pooled for lm in plane.landmark_names}
        cells["pooled"] = report.pooled_mae_mm
        rows.append((label, cells))
    return AblationTable(columns=columns, rows=tuple(rows))
