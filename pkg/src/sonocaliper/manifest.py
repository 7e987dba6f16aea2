"""Dataset manifest reading, validation and ground-truth resolution.

A manifest is a JSONL file: one self-contained JSON record per line, schema
version mandatory in every record, images referenced by path relative to the
manifest's directory. Annotations are grouped per rater with one or two
passes each; see ``docs/manifest-format.md`` for the golden example.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import cv2
import numpy as np

from .errors import InvalidInputError, ManifestError, SonoCaliperError
from .geometry import (
    CaliperPoint,
    LandmarkSet,
    PixelSpacing,
    PlaneConfig,
    plane_by_name,
)

__all__ = [
    "SCHEMA_VERSION",
    "RaterAnnotation",
    "ManifestEntry",
    "GroundTruthPolicy",
    "PER_RATER_MEAN",
    "CONSENSUS_MEAN",
    "load_manifest",
    "save_manifest",
    "mean_landmark_sets",
    "resolve_ground_truth",
    "subject_disjoint_split",
    "image_to_float",
]

SCHEMA_VERSION = "caliper-manifest/v1"


@dataclass(frozen=True)
class RaterAnnotation:
    """One rater's caliper placements: a mandatory first pass, optional second."""

    pass1: LandmarkSet
    pass2: LandmarkSet | None = None

    def passes(self) -> tuple[LandmarkSet, ...]:
        return (self.pass1,) if self.pass2 is None else (self.pass1, self.pass2)


@dataclass(frozen=True)
class ManifestEntry:
    """One image with its pixel geometry and per-rater annotations."""

    subject_id: str
    image_path: str
    plane: PlaneConfig
    spacing: PixelSpacing
    width: int
    height: int
    annotations: Mapping[str, RaterAnnotation]
    root: Path | None = None  # directory image_path is relative to

    def __post_init__(self):
        object.__setattr__(self, "annotations", dict(self.annotations))
        if not self.subject_id:
            raise ManifestError("subject_id must be non-empty")
        if self.width <= 0 or self.height <= 0:
            raise ManifestError(
                f"entry {self.subject_id!r}: non-positive image size "
                f"{self.width}x{self.height}"
            )
        if not self.annotations:
            raise ManifestError(f"entry {self.subject_id!r} carries no annotations")
        for rater, ann in self.annotations.items():
            for idx, lm in enumerate(ann.passes(), start=1):
                if lm.plane.plane_name != self.plane.plane_name:
                    raise ManifestError(
                        f"entry {self.subject_id!r}, rater {rater!r}, pass {idx}: "
                        f"plane {lm.plane.plane_name!r} does not match entry plane "
                        f"{self.plane.plane_name!r}"
                    )
                for name, p in lm.points.items():
                    if not p.in_bounds(self.width, self.height):
                        raise ManifestError(
                            f"entry {self.subject_id!r}, rater {rater!r}, pass {idx}: "
                            f"landmark {name} at ({p.x:g}, {p.y:g}) is outside the "
                            f"{self.width}x{self.height} image"
                        )

    @property
    def rater_ids(self) -> tuple[str, ...]:
        return tuple(self.annotations.keys())

    def absolute_image_path(self) -> Path:
        base = self.root if self.root is not None else Path(".")
        return (base / self.image_path).resolve()

    def load_image(self) -> np.ndarray:
        """Load the referenced raster as a 2-D grayscale array (uint8/uint16)."""
        path = self.absolute_image_path()
        img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if img is None:
            raise ManifestError(f"entry {self.subject_id!r}: cannot read image {path}")
        if img.ndim == 3:  # collapse accidental 3-channel grayscale
            img = cv2.cvtColor(img, cv2.COLOR_BGR2GRAY)
        if img.dtype not in (np.uint8, np.uint16):
            raise ManifestError(
                f"entry {self.subject_id!r}: image {path} has dtype {img.dtype}, "
                "expected 8-bit or 16-bit grayscale"
            )
        if img.shape != (self.height, self.width):
            raise ManifestError(
                f"entry {self.subject_id!r}: image {path} is "
                f"{img.shape[1]}x{img.shape[0]}, manifest says "
                f"{self.width}x{self.height}"
            )
        return img


def image_to_float(image: np.ndarray) -> np.ndarray:
    """Scale an integer grayscale image to float32 in [0, 1]."""
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    if image.dtype == np.uint16:
        return image.astype(np.float32) / 65535.0
    if np.issubdtype(image.dtype, np.floating):
        return image.astype(np.float32)
    raise InvalidInputError(f"unsupported image dtype {image.dtype}")


@dataclass(frozen=True)
class GroundTruthPolicy:
    """How multi-rater, multi-pass annotations collapse to ground truth."""

    mode: str = "per_rater_mean"

    def __post_init__(self):
        if self.mode not in ("per_rater_mean", "consensus_mean"):
            raise InvalidInputError(
                f"unknown ground-truth policy {self.mode!r}; "
                "expected per_rater_mean or consensus_mean"
            )


PER_RATER_MEAN = GroundTruthPolicy("per_rater_mean")
CONSENSUS_MEAN = GroundTruthPolicy("consensus_mean")


def _landmarks_to_json(lm: LandmarkSet) -> dict:
    return {name: [p.x, p.y] for name, p in lm.points.items()}


def _landmarks_from_json(obj, plane: PlaneConfig, where: str) -> LandmarkSet:
    if not isinstance(obj, dict):
        raise ManifestError(f"{where}: landmark block must be an object")
    pts = {}
    for name, xy in obj.items():
        if (
            not isinstance(xy, (list, tuple))
            or len(xy) != 2
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in xy)
        ):
            raise ManifestError(f"{where}: landmark {name!r} must be a [x, y] pair")
        pts[name] = CaliperPoint(float(xy[0]), float(xy[1]))
    try:
        return LandmarkSet(plane, pts)
    except SonoCaliperError as exc:
        raise ManifestError(f"{where}: {exc}") from exc


def entry_to_json_dict(entry: ManifestEntry) -> dict:
    ann = {}
    for rater, a in entry.annotations.items():
        block = {"pass1": _landmarks_to_json(a.pass1)}
        if a.pass2 is not None:
            block["pass2"] = _landmarks_to_json(a.pass2)
        ann[rater] = block
    return {
        "schema": SCHEMA_VERSION,
        "subject_id": entry.subject_id,
        "image_path": entry.image_path,
        "plane": entry.plane.plane_name,
        "spacing_mm": [entry.spacing.mm_per_px_x, entry.spacing.mm_per_px_y],
        "width": entry.width,
        "height": entry.height,
        "annotations": ann,
    }


def entry_from_json_dict(obj: dict, root: Path | None, where: str) -> ManifestEntry:
    if not isinstance(obj, dict):
        raise ManifestError(f"{where}: record must be a JSON object")
    schema = obj.get("schema")
    if schema != SCHEMA_VERSION:
        raise ManifestError(
            f"{where}: schema {schema!r} is not supported (expected {SCHEMA_VERSION!r})"
        )
    required = ("subject_id", "image_path", "plane", "spacing_mm", "width", "height", "annotations")
    missing = [k for k in required if k not in obj]
    if missing:
        raise ManifestError(f"{where}: missing fields: {', '.join(missing)}")
    try:
        plane = plane_by_name(obj["plane"])
    except SonoCaliperError as exc:
        raise ManifestError(f"{where}: {exc}") from exc
    sp = obj["spacing_mm"]
    if not isinstance(sp, (list, tuple)) or len(sp) != 2:
        raise ManifestError(f"{where}: spacing_mm must be a [x, y] pair")
    try:
        spacing = PixelSpacing(float(sp[0]), float(sp[1]))
    except SonoCaliperError as exc:
        raise ManifestError(f"{where}: {exc}") from exc
    if not isinstance(obj["annotations"], dict) or not obj["annotations"]:
        raise ManifestError(f"{where}: annotations must be a non-empty object")
    annotations = {}
    for rater, block in obj["annotations"].items():
        if not isinstance(block, dict) or "pass1" not in block:
            raise ManifestError(f"{where}: rater {rater!r} must carry at least pass1")
        extra = set(block) - {"pass1", "pass2"}
        if extra:
            raise ManifestError(
                f"{where}: rater {rater!r} has unknown keys: {', '.join(sorted(extra))}"
            )
        p1 = _landmarks_from_json(block["pass1"], plane, f"{where}, rater {rater!r} pass1")
        p2 = None
        if "pass2" in block:
            p2 = _landmarks_from_json(block["pass2"], plane, f"{where}, rater {rater!r} pass2")
        annotations[rater] = RaterAnnotation(pass1=p1, pass2=p2)
    try:
        return ManifestEntry(
            subject_id=str(obj["subject_id"]),
            image_path=str(obj["image_path"]),
            plane=plane,
            spacing=spacing,
            width=int(obj["width"]),
            height=int(obj["height"]),
            annotations=annotations,
            root=root,
        )
    except ManifestError as exc:
        raise ManifestError(f"{where}: {exc}") from exc


def load_manifest(path: str | Path, validate_images: bool = False) -> list[ManifestEntry]:
    """Parse and validate a JSONL manifest.

    Raises :class:`ManifestError` on a malformed container or on entry
    validation failures; the message aggregates every failing entry so a bad
    manifest is reported in one pass. With ``validate_images`` each referenced
    raster is opened and checked against the declared dimensions.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest {path} does not exist")
    root = path.parent
    entries: list[ManifestEntry] = []
    problems: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path.name}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{where}: not valid JSON: {exc}") from exc
            try:
                entry = entry_from_json_dict(obj, root, where)
                if validate_images:
                    entry.load_image()
            except ManifestError as exc:
                problems.append(str(exc))
                continue
            entries.append(entry)
    if problems:
        raise ManifestError(
            f"{len(problems)} invalid entr{'y' if len(problems) == 1 else 'ies'} in "
            f"{path}:\n" + "\n".join("  - " + p for p in problems)
        )
    return entries


def save_manifest(entries: Sequence[ManifestEntry], path: str | Path) -> Path:
    """Write entries as JSONL; loading the result reproduces them exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry_to_json_dict(entry)) + "\n")
    tmp.replace(path)
    return path


def mean_landmark_sets(sets: Sequence[LandmarkSet]) -> LandmarkSet:
    """Coordinatewise mean of landmark sets sharing one plane."""
    if not sets:
        raise InvalidInputError("cannot average zero landmark sets")
    plane = sets[0].plane
    for lm in sets[1:]:
        if lm.plane.plane_name != plane.plane_name:
            raise InvalidInputError("cannot average landmark sets from different planes")
    n = float(len(sets))
    pts = {
        name: CaliperPoint(
            sum(lm[name].x for lm in sets) / n,
            sum(lm[name].y for lm in sets) / n,
        )
        for name in plane.landmark_names
    }
    return LandmarkSet(plane, pts)


def resolve_ground_truth(
    entry: ManifestEntry, policy: GroundTruthPolicy | str = PER_RATER_MEAN
):
    """Collapse an entry's annotations according to the policy.

    ``per_rater_mean`` returns a map rater_id -> mean of that rater's passes;
    ``consensus_mean`` returns one LandmarkSet, the mean of those per-rater
    means. A rater missing pass2 contributes pass1 alone, with a warning.
    """
    if isinstance(policy, str):
        policy = GroundTruthPolicy(policy)
    per_rater = {}
    for rater, ann in entry.annotations.items():
        if ann.pass2 is None:
            warnings.warn(
                f"entry {entry.subject_id!r}, rater {rater!r}: pass2 missing, "
                "using pass1 alone",
                stacklevel=2,
            )
        per_rater[rater] = mean_landmark_sets(ann.passes())
    if policy.mode == "per_rater_mean":
        return per_rater
    return mean_landmark_sets(list(per_rater.values()))


def subject_disjoint_split(
    entries: Sequence[ManifestEntry], ratio: float = 0.88, seed: int = 0
) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """Split entries by subject so no subject appears on both sides.

    The subject list is shuffled deterministically and cut at
    ``floor(n_subjects * ratio)``; input order is preserved within each side.
    """
    if not 0.0 < ratio < 1.0:
        raise InvalidInputError(f"split ratio must be in (0, 1), got {ratio}")
    subjects = []
    for e in entries:
        if e.subject_id not in subjects:
            subjects.append(e.subject_id)
    if len(subjects) < 2:
        raise InvalidInputError("need at least 2 subjects for a subject-disjoint split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(subjects))
    n_train = int(len(subjects) * ratio)
    if n_train == 0 or n_train == len(subjects):
        raise InvalidInputError(
            f"ratio {ratio} leaves one side of the split empty for "
            f"{len(subjects)} subjects"
        )
    train_subjects = {subjects[i] for i in order[:n_train]}
    train = [e for e in entries if e.subject_id in train_subjects]
    val = [e for e in entries if e.subject_id not in train_subjects]
    return train, val
