"""On-disk study store backing the review service.

One JSON document per study under ``studies/``, images under ``images/``.
Every write goes to a temp file and is moved into place atomically. Model
predictions are written once and never mutated; reviewer adjustments are
appended to a list so the full history (and the original prediction) stays
retrievable. A monotonically increasing revision per study detects
conflicting writes.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

import cv2
import numpy as np

from .errors import (
    InvalidInputError,
    LandmarkOutOfBoundsError,
    ManifestError,
    StoreConflictError,
    StudyNotFoundError,
)
from .geometry import (
    CaliperPoint,
    LandmarkSet,
    PixelSpacing,
    PlaneConfig,
    compute_biometry,
    plane_by_name,
)

__all__ = ["STORE_SCHEMA", "PredictionBlock", "AdjustmentBlock", "StudyRecord", "ReviewStore"]

STORE_SCHEMA = "caliper-review-store/v1"

STATUS_UNREVIEWED = "unreviewed"
STATUS_ADJUSTED = "adjusted"
STATUS_ACCEPTED = "accepted"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def _points_to_json(points: Mapping[str, CaliperPoint]) -> dict:
    return {n: [p.x, p.y] for n, p in points.items()}


def _points_from_json(obj: Mapping) -> dict[str, CaliperPoint]:
    return {str(n): CaliperPoint(float(xy[0]), float(xy[1])) for n, xy in obj.items()}


@dataclass(frozen=True)
class PredictionBlock:
    points: Mapping[str, CaliperPoint]
    confidences: Mapping[str, float]
    biometry: Mapping[str, float]
    failures: Mapping[str, str] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "points": _points_to_json(self.points),
            "confidences": dict(self.confidences),
            "biometry": dict(self.biometry),
            "failures": dict(self.failures),
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "PredictionBlock":
        return cls(
            points=_points_from_json(obj["points"]),
            confidences={str(k): float(v) for k, v in obj.get("confidences", {}).items()},
            biometry={str(k): float(v) for k, v in obj.get("biometry", {}).items()},
            failures={str(k): str(v) for k, v in obj.get("failures", {}).items()},
        )


@dataclass(frozen=True)
class AdjustmentBlock:
    points: Mapping[str, CaliperPoint]
    biometry: Mapping[str, float]
    base_revision: int
    at: str

    def to_json_dict(self) -> dict:
        return {
            "points": _points_to_json(self.points),
            "biometry": dict(self.biometry),
            "base_revision": self.base_revision,
            "at": self.at,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "AdjustmentBlock":
        return cls(
            points=_points_from_json(obj["points"]),
            biometry={str(k): float(v) for k, v in obj["biometry"].items()},
            base_revision=int(obj["base_revision"]),
            at=str(obj["at"]),
        )


@dataclass(frozen=True)
class StudyRecord:
    study_id: str
    plane: PlaneConfig
    spacing: PixelSpacing
    width: int
    height: int
    image_file: str
    prediction: PredictionBlock | None
    adjustments: tuple[AdjustmentBlock, ...]
    status: str
    revision: int
    created_at: str
    updated_at: str
    accepted: dict | None = None  # {"at", "base_revision", "confirmed_without_adjustment"}

    def current_points(self) -> Mapping[str, CaliperPoint] | None:
        """The positions a reviewer currently sees: latest adjustment, else model."""
        if self.adjustments:
            return self.adjustments[-1].points
        if self.prediction is not None:
            return self.prediction.points
        return None

    def current_biometry(self) -> Mapping[str, float] | None:
        if self.adjustments:
            return self.adjustments[-1].biometry
        if self.prediction is not None:
            return self.prediction.biometry
        return None

    def to_json_dict(self) -> dict:
        return {
            "schema": STORE_SCHEMA,
            "study_id": self.study_id,
            "plane": {
                "plane_name": self.plane.plane_name,
                "landmark_names": list(self.plane.landmark_names),
                "biometry_pairs": [list(p) for p in self.plane.biometry_pairs],
            },
            "spacing_mm": [self.spacing.mm_per_px_x, self.spacing.mm_per_px_y],
            "width": self.width,
            "height": self.height,
            "image_file": self.image_file,
            "prediction": None if self.prediction is None else self.prediction.to_json_dict(),
            "adjustments": [a.to_json_dict() for a in self.adjustments],
            "status": self.status,
            "revision": self.revision,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "accepted": self.accepted,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "StudyRecord":
        if obj.get("schema") != STORE_SCHEMA:
            raise ManifestError(f"study record schema {obj.get('schema')!r} unsupported")
        p = obj["plane"]
        plane = PlaneConfig(
            plane_name=p["plane_name"],
            landmark_names=tuple(p["landmark_names"]),
            biometry_pairs=tuple((a, b) for a, b in p["biometry_pairs"]),
        )
        return cls(
            study_id=str(obj["study_id"]),
            plane=plane,
            spacing=PixelSpacing(float(obj["spacing_mm"][0]), float(obj["spacing_mm"][1])),
            width=int(obj["width"]),
            height=int(obj["height"]),
            image_file=str(obj["image_file"]),
            prediction=(
                None
                if obj["prediction"] is None
                else PredictionBlock.from_json_dict(obj["prediction"])
            ),
            adjustments=tuple(
                AdjustmentBlock.from_json_dict(a) for a in obj["adjustments"]
            ),
            status=str(obj["status"]),
            revision=int(obj["revision"]),
            created_at=str(obj["created_at"]),
            updated_at=str(obj["updated_at"]),
            accepted=obj.get("accepted"),
        )


class ReviewStore:
    """Thread-safe persistence for study records; writes serialized per study."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.studies_dir = self.root / "studies"
        self.images_dir = self.root / "images"
        self.studies_dir.mkdir(parents=True, exist_ok=True)
        self.images_dir.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._registry_lock = threading.Lock()

    def lock(self, study_id: str) -> threading.Lock:
        with self._registry_lock:
            if study_id not in self._locks:
                self._locks[study_id] = threading.Lock()
            return self._locks[study_id]

    def _study_path(self, study_id: str) -> Path:
        if not study_id or "/" in study_id or "\\" in study_id or study_id.startswith("."):
            raise InvalidInputError(f"invalid study id {study_id!r}")
        return self.studies_dir / f"{study_id}.json"

    def _write(self, record: StudyRecord) -> None:
        path = self._study_path(record.study_id)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(record.to_json_dict(), indent=1) + "\n", encoding="utf-8")
        tmp.replace(path)

    def list_ids(self) -> list[str]:
        return sorted(p.stem for p in self.studies_dir.glob("*.json"))

    def get(self, study_id: str) -> StudyRecord:
        path = self._study_path(study_id)
        if not path.is_file():
            raise StudyNotFoundError(f"no study {study_id!r} in {self.root}")
        return StudyRecord.from_json_dict(json.loads(path.read_text(encoding="utf-8")))

    def image_path(self, study_id: str) -> Path:
        record = self.get(study_id)
        path = self.root / record.image_file
        if not path.is_file():
            raise StudyNotFoundError(f"image for study {study_id!r} is missing at {path}")
        return path

    def load_image(self, study_id: str) -> np.ndarray:
        img = cv2.imread(str(self.image_path(study_id)), cv2.IMREAD_UNCHANGED)
        if img is None:
            raise ManifestError(f"cannot decode stored image for study {study_id!r}")
        return img

    def create_study(
        self,
        study_id: str,
        image: np.ndarray,
        plane: PlaneConfig,
        spacing: PixelSpacing,
        prediction: PredictionBlock | None = None,
        exist_ok: bool = False,
    ) -> StudyRecord:
        with self.lock(study_id):
            path = self._study_path(study_id)
            if path.exists():
                if exist_ok:
                    return self.get(study_id)
                raise InvalidInputError(f"study {study_id!r} already exists")
            image = np.asarray(image)
            if image.ndim != 2 or image.dtype not in (np.uint8, np.uint16):
                raise InvalidInputError(
                    "study image must be 2-D uint8/uint16 grayscale, "
                    f"got shape {image.shape} dtype {image.dtype}"
                )
            image_file = f"images/{study_id}.png"
            if not cv2.imwrite(str(self.root / image_file), image):
                raise IOError(f"failed to write study image {self.root / image_file}")
            now = _now()
            record = StudyRecord(
                study_id=study_id,
                plane=plane,
                spacing=spacing,
                width=int(image.shape[1]),
                height=int(image.shape[0]),
                image_file=image_file,
                prediction=prediction,
                adjustments=(),
                status=STATUS_UNREVIEWED,
                revision=0,
                created_at=now,
                updated_at=now,
                accepted=None,
            )
            self._write(record)
            return record

    def set_prediction(self, study_id: str, prediction: PredictionBlock) -> StudyRecord:
        """Attach a model prediction to a study that has none yet.

        Predictions are immutable once stored: a second call is an error, so
        the audit trail (model output vs reviewer edits) cannot be rewritten.
        """
        with self.lock(study_id):
            record = self.get(study_id)
            if record.prediction is not None:
                raise InvalidInputError(f"study {study_id!r} already has a prediction")
            updated = replace(
                record,
                prediction=prediction,
                revision=record.revision + 1,
                updated_at=_now(),
            )
            self._write(updated)
            return updated

    def _validated_landmarks(
        self, record: StudyRecord, points: Mapping[str, CaliperPoint]
    ) -> LandmarkSet:
        lm = LandmarkSet(record.plane, dict(points))  # raises on bad/missing names
        for name, p in lm.points.items():
            if not p.in_bounds(record.width, record.height):
                raise LandmarkOutOfBoundsError(name, p, record.width, record.height)
        return lm

    def put_adjustment(
        self, study_id: str, points: Mapping[str, CaliperPoint], base_revision: int
    ) -> StudyRecord:
        """Append a reviewer adjustment; biometry is recomputed from the points."""
        with self.lock(study_id):
            record = self.get(study_id)
            if base_revision != record.revision:
                raise StoreConflictError(study_id, base_revision, record.revision)
            lm = self._validated_landmarks(record, points)
            adjustment = AdjustmentBlock(
                points=dict(lm.points),
                biometry=compute_biometry(lm, record.spacing),
                base_revision=base_revision,
                at=_now(),
            )
            updated = replace(
                record,
                adjustments=record.adjustments + (adjustment,),
                status=STATUS_ADJUSTED,
                revision=record.revision + 1,
                updated_at=_now(),
                accepted=None,
            )
            self._write(updated)
            return updated

    def accept(self, study_id: str, base_revision: int) -> StudyRecord:
        """Mark a study accepted at its current state.

        Accepting with no adjustment records an explicit confirmation of the
        model's prediction; accepting nothing at all is rejected.
        """
        with self.lock(study_id):
            record = self.get(study_id)
            if base_revision != record.revision:
                raise StoreConflictError(study_id, base_revision, record.revision)
            if record.prediction is None and not record.adjustments:
                raise InvalidInputError(
                    f"study {study_id!r} has neither a prediction nor an adjustment"
                )
            updated = replace(
                record,
                status=STATUS_ACCEPTED,
                revision=record.revision + 1,
                updated_at=_now(),
                accepted={
                    "at": _now(),
                    "base_revision": base_revision,
                    "confirmed_without_adjustment": not record.adjustments,
                },
            )
            self._write(updated)
            return updated
