"""HTTP review service: list studies, fetch images and predictions, accept
or adjust calipers.

All responses carry a ``schema`` field. Coordinates travel in image pixel
space; pixel spacing is included so clients can render mm. Writes must quote
the revision they were based on and get 409 when it is stale; landmark
validation failures are 422 and name the offending landmark.
"""

from __future__ import annotations

import threading
from typing import Mapping

from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse
from pydantic import BaseModel, Field

from .errors import (
    IncompleteLandmarkSetError,
    InvalidInputError,
    LandmarkOutOfBoundsError,
    StoreConflictError,
    StudyNotFoundError,
)
from .geometry import CaliperPoint
from .store import PredictionBlock, ReviewStore, StudyRecord

__all__ = ["SERVICE_SCHEMA", "create_app"]

SERVICE_SCHEMA = "caliper-review/v1"


class CalipersBody(BaseModel):
    revision: int = Field(..., ge=0, description="revision the edit was based on")
    points: dict[str, tuple[float, float]]


class AcceptBody(BaseModel):
    revision: int = Field(..., ge=0)


def _study_summary(record: StudyRecord) -> dict:
    return {
        "study_id": record.study_id,
        "plane": record.plane.plane_name,
        "status": record.status,
        "revision": record.revision,
        "has_prediction": record.prediction is not None,
        "has_adjustment": bool(record.adjustments),
    }


def _points_json(points: Mapping[str, CaliperPoint]) -> dict:
    return {n: [p.x, p.y] for n, p in points.items()}


def _spacing_json(record: StudyRecord) -> list[float]:
    return [record.spacing.mm_per_px_x, record.spacing.mm_per_px_y]


def create_app(store: ReviewStore, predictor=None) -> FastAPI:
    """Build the service over a store; ``predictor`` fills in predictions lazily.

    ``predictor`` needs an ``infer(image, spacing) -> InferenceResult``-shaped
    method; inference runs behind one lock, so concurrent requests queue
    rather than stacking model evaluations.
    """
    app = FastAPI(title="caliper review service")
    inference_lock = threading.Lock()

    def get_record(study_id: str) -> StudyRecord:
        try:
            return store.get(study_id)
        except StudyNotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc

    def ensure_prediction(record: StudyRecord) -> StudyRecord:
        if record.prediction is not None:
            return record
        if predictor is None:
            raise HTTPException(
                status_code=503,
                detail=f"study {record.study_id!r} has no stored prediction and no "
                "model is loaded",
            )
        with inference_lock:
            # re-read: another request may have filled it while we waited
            record = get_record(record.study_id)
            if record.prediction is not None:
                return record
            image = store.load_image(record.study_id)
            result = predictor.infer(image, record.spacing)
            block = PredictionBlock(
                points=dict(result.points),
                confidences=dict(result.confidences),
                biometry=dict(result.biometry),
                failures=dict(result.failures),
            )
            return store.set_prediction(record.study_id, block)

    @app.get("/studies")
    def list_studies():
        return {
            "schema": SERVICE_SCHEMA,
            "studies": [_study_summary(store.get(sid)) for sid in store.list_ids()],
        }

    @app.get("/studies/{study_id}/image")
    def get_image(study_id: str):
        get_record(study_id)
        return FileResponse(store.image_path(study_id), media_type="image/png")

    @app.get("/studies/{study_id}/prediction")
    def get_prediction(study_id: str):
        record = ensure_prediction(get_record(study_id))
        pred = record.prediction
        assert pred is not None
        return {
            "schema": SERVICE_SCHEMA,
            "study_id": record.study_id,
            "plane": record.plane.plane_name,
            "landmark_names": list(record.plane.landmark_names),
            "biometry_pairs": [list(p) for p in record.plane.biometry_pairs],
            "width": record.width,
            "height": record.height,
            "spacing_mm": _spacing_json(record),
            "points": _points_json(pred.points),
            "confidences": dict(pred.confidences),
            "biometry": dict(pred.biometry),
            "failures": dict(pred.failures),
            "revision": record.revision,
            "status": record.status,
        }

    @app.put("/studies/{study_id}/calipers")
    def put_calipers(study_id: str, body: CalipersBody):
        get_record(study_id)
        points = {}
        for name, xy in body.points.items():
            points[name] = CaliperPoint(float(xy[0]), float(xy[1]))
        try:
            record = store.put_adjustment(study_id, points, body.revision)
        except StoreConflictError as exc:
            raise HTTPException(
                status_code=409,
                detail={
                    "error": "revision_conflict",
                    "study_id": study_id,
                    "based_on": exc.expected,
                    "current_revision": exc.actual,
                },
            ) from exc
        except LandmarkOutOfBoundsError as exc:
            raise HTTPException(
                status_code=422,
                detail={
                    "error": "landmark_out_of_bounds",
                    "landmark": exc.name,
                    "point": [exc.point.x, exc.point.y],
                    "message": str(exc),
                },
            ) from exc
        except IncompleteLandmarkSetError as exc:
            raise HTTPException(
                status_code=422,
                detail={
                    "error": "invalid_landmark_names",
                    "missing": list(exc.missing),
                    "unexpected": list(exc.unexpected),
                    "message": str(exc),
                },
            ) from exc
        except InvalidInputError as exc:
            raise HTTPException(
                status_code=422,
                detail={"error": "invalid_input", "message": str(exc)},
            ) from exc
        adjustment = record.adjustments[-1]
        return {
            "schema": SERVICE_SCHEMA,
            "study_id": record.study_id,
            "revision": record.revision,
            "status": record.status,
            "points": _points_json(adjustment.points),
            "biometry": dict(adjustment.biometry),
            "spacing_mm": _spacing_json(record),
        }

    @app.post("/studies/{study_id}/accept")
    def post_accept(study_id: str, body: AcceptBody):
        get_record(study_id)
        try:
            record = store.accept(study_id, body.revision)
        except StoreConflictError as exc:
            raise HTTPException(
                status_code=409,
                detail={
                    "error": "revision_conflict",
                    "study_id": study_id,
                    "based_on": exc.expected,
                    "current_revision": exc.actual,
                },
            ) from exc
        except InvalidInputError as exc:
            raise HTTPException(
                status_code=422,
                detail={"error": "invalid_input", "message": str(exc)},
            ) from exc
        return {
            "schema": SERVICE_SCHEMA,
            "study_id": record.study_id,
            "revision": record.revision,
            "status": record.status,
            "accepted": record.accepted,
        }

    @app.get("/studies/{study_id}/biometry")
    def get_biometry(study_id: str):
        record = get_record(study_id)
        if record.adjustments:
            source = "adjusted"
            points = record.adjustments[-1].points
            biometry = record.adjustments[-1].biometry
        elif record.prediction is not None:
            source = "model"
            points = record.prediction.points
            biometry = record.prediction.biometry
        else:
            raise HTTPException(
                status_code=404,
                detail=f"study {study_id!r} has no caliper data yet",
            )
        return {
            "schema": SERVICE_SCHEMA,
            "study_id": record.study_id,
            "source": source,
            "points": _points_json(points),
            "biometry": dict(biometry),
            "spacing_mm": _spacing_json(record),
            "revision": record.revision,
            "status": record.status,
        }

    return app
