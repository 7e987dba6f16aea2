"""Core coordinate types, physical calibration and biometry computation.

Conventions used everywhere in this package: ``x`` is the column index and
``y`` the row index, both continuous (subpixel), with the origin at the
top-left pixel center. Physical lengths are derived through a
:class:`PixelSpacing` and reported in millimeters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

from .errors import IncompleteLandmarkSetError, InvalidInputError

__all__ = [
    "CaliperPoint",
    "PixelSpacing",
    "PlaneConfig",
    "LandmarkSet",
    "TC_PLANE",
    "TV_PLANE",
    "plane_by_name",
    "biometry_length",
    "compute_biometry",
]


@dataclass(frozen=True)
class CaliperPoint:
    """One caliper endpoint as a subpixel image coordinate."""

    x: float
    y: float

    def is_finite(self) -> bool:
        return math.isfinite(self.x) and math.isfinite(self.y)

    def in_bounds(self, width: int, height: int) -> bool:
        """True when the point lies inside a ``width x height`` image."""
        return 0.0 <= self.x < width and 0.0 <= self.y < height


@dataclass(frozen=True)
class PixelSpacing:
    """Physical calibration: millimeters per pixel along each image axis."""

    mm_per_px_x: float
    mm_per_px_y: float

    def __post_init__(self):
        for name in ("mm_per_px_x", "mm_per_px_y"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0.0):
                raise InvalidInputError(f"{name} must be strictly positive and finite, got {v!r}")

    @classmethod
    def isotropic(cls, mm_per_px: float) -> "PixelSpacing":
        return cls(mm_per_px, mm_per_px)


@dataclass(frozen=True)
class PlaneConfig:
    """Declarative description of a plane: its calipers and how they pair up.

    ``biometry_pairs`` lists ``(biometry_name, landmark_a, landmark_b)``
    triples; the pairs must partition ``landmark_names``.
    """

    plane_name: str
    landmark_names: tuple[str, ...]
    biometry_pairs: tuple[tuple[str, str, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "landmark_names", tuple(self.landmark_names))
        object.__setattr__(
            self, "biometry_pairs", tuple(tuple(p) for p in self.biometry_pairs)
        )
        names = self.landmark_names
        if len(set(names)) != len(names):
            raise InvalidInputError(f"duplicate landmark names in plane {self.plane_name!r}")
        seen: list[str] = []
        for pair in self.biometry_pairs:
            if len(pair) != 3:
                raise InvalidInputError(f"biometry pair {pair!r} must be (name, a, b)")
            _, a, b = pair
            for lm in (a, b):
                if lm not in names:
                    raise InvalidInputError(
                        f"biometry pair references unknown landmark {lm!r} "
                        f"in plane {self.plane_name!r}"
                    )
                seen.append(lm)
        if sorted(seen) != sorted(names):
            raise InvalidInputError(
                f"biometry pairs must use each landmark of plane {self.plane_name!r} exactly once"
            )
        bnames = [p[0] for p in self.biometry_pairs]
        if len(set(bnames)) != len(bnames):
            raise InvalidInputError(f"duplicate biometry names in plane {self.plane_name!r}")

    @property
    def n_landmarks(self) -> int:
        return len(self.landmark_names)

    @property
    def n_biometries(self) -> int:
        return len(self.biometry_pairs)

    @property
    def biometry_names(self) -> tuple[str, ...]:
        return tuple(p[0] for p in self.biometry_pairs)


#: Transcerebellar plane: six calipers forming three biometries.
TC_PLANE = PlaneConfig(
    plane_name="TC",
    landmark_names=("TCD_1", "TCD_2", "CMS_1", "CMS_2", "NFT_1", "NFT_2"),
    biometry_pairs=(
        ("TCD", "TCD_1", "TCD_2"),
        ("CMS", "CMS_1", "CMS_2"),
        ("NFT", "NFT_1", "NFT_2"),
    ),
)

#: Transventricular plane: one caliper pair for the atrial width.
TV_PLANE = PlaneConfig(
    plane_name="TV",
    landmark_names=("AW_1", "AW_2"),
    biometry_pairs=(("AW", "AW_1", "AW_2"),),
)

_PLANES = {p.plane_name: p for p in (TC_PLANE, TV_PLANE)}


def plane_by_name(name: str) -> PlaneConfig:
    try:
        return _PLANES[name]
    except KeyError:
        raise InvalidInputError(
            f"unknown plane {name!r}; known planes: {sorted(_PLANES)}"
        ) from None


@dataclass(frozen=True)
class LandmarkSet:
    """A complete assignment of caliper points for one plane.

    Construction is strict: the point keys must be exactly the plane's
    landmark names, otherwise :class:`IncompleteLandmarkSetError` is raised
    naming the missing/unexpected calipers.
    """

    plane: PlaneConfig
    points: Mapping[str, CaliperPoint] = field(default_factory=dict)

    def __post_init__(self):
        want = set(self.plane.landmark_names)
        have = set(self.points)
        if want != have:
            raise IncompleteLandmarkSetError(
                self.plane.plane_name,
                missing=sorted(want - have),
                unexpected=sorted(have - want),
            )
        # normalize to a plain dict in plane order
        object.__setattr__(
            self,
            "points",
            {name: self.points[name] for name in self.plane.landmark_names},
        )

    def __getitem__(self, name: str) -> CaliperPoint:
        return self.points[name]

    def in_bounds(self, width: int, height: int) -> bool:
        return all(p.in_bounds(width, height) for p in self.points.values())

    def as_array(self):
        """Points as an ``(n, 2)`` float list ``[[x, y], ...]`` in plane order."""
        return [[p.x, p.y] for p in self.points.values()]

    def replace(self, **updates: CaliperPoint) -> "LandmarkSet":
        pts = dict(self.points)
        pts.update(updates)
        return LandmarkSet(self.plane, pts)


def biometry_length(a: CaliperPoint, b: CaliperPoint, spacing: PixelSpacing) -> float:
    """Euclidean distance between two calipers in millimeters.

    Anisotropic spacing is supported: each axis delta is converted to mm
    before the norm is taken.
    """
    if not (a.is_finite() and b.is_finite()):
        raise InvalidInputError("caliper coordinates must be finite")
    dx = (a.x - b.x) * spacing.mm_per_px_x
    dy = (a.y - b.y) * spacing.mm_per_px_y
    return math.hypot(dx, dy)


def compute_biometry(landmarks: LandmarkSet, spacing: PixelSpacing) -> dict[str, float]:
    """All biometries of the set's plane, in millimeters, keyed by name."""
    out: dict[str, float] = {}
    for name, lm_a, lm_b in landmarks.plane.biometry_pairs:
        try:
            a = landmarks.points[lm_a]
            b = landmarks.points[lm_b]
        except KeyError as exc:
            raise IncompleteLandmarkSetError(
                landmarks.plane.plane_name, missing=[str(exc.args[0])]
            ) from None
        out[name] = biometry_length(a, b, spacing)
    return out
