"""Heatmap-to-coordinate decoding.

One predicted channel becomes one subpixel caliper: min-max normalize,
threshold at 0.85, label 8-connected components, score each component by the
sum of normalized values under it, and return the intensity-weighted
barycenter of the winner. Ties in confidence break on the smallest row-major
origin so the output is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateChannelError,
    IncompleteLandmarkSetError,
    InvalidInputError,
)
from .geometry import CaliperPoint, LandmarkSet, PlaneConfig

__all__ = [
    "DEFAULT_THRESHOLD",
    "ComponentCandidate",
    "DecodeResult",
    "normalize_channel",
    "component_candidates",
    "decode_landmark",
    "decode_all",
]

DEFAULT_THRESHOLD = 0.85


@dataclass(frozen=True)
class ComponentCandidate:
    """One thresholded connected component and its score."""

    mask: np.ndarray  # bool (H, W)
    confidence: float  # sum of normalized channel values under the mask
    barycenter: CaliperPoint
    origin: int  # smallest row-major pixel index; deterministic tie-break key


@dataclass
class DecodeResult:
    """Per-landmark decoding outcome for one predicted stack.

    Degenerate channels do not abort the whole stack: their landmark name is
    reported in ``failures`` and the remaining channels decode normally.
    """

    plane: PlaneConfig
    points: dict[str, CaliperPoint] = field(default_factory=dict)
    confidences: dict[str, float] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)

    @property
    def is_complete(self) -> bool:
        return not self.failures

    def landmark_set(self) -> LandmarkSet:
        if self.failures:
            raise IncompleteLandmarkSetError(
                self.plane.plane_name, missing=sorted(self.failures)
            )
        return LandmarkSet(self.plane, dict(self.points))


def normalize_channel(h: np.ndarray) -> np.ndarray:
    """Min-max normalize a channel to [0, 1].

    Raises :class:`DegenerateChannelError` for a constant channel (no
    landmark evidence) and :class:`InvalidInputError` for non-finite values.
    """
    h = np.asarray(h, dtype=np.float64)
    if not np.isfinite(h).all():
        raise InvalidInputError("channel contains non-finite values")
    lo = h.min()
    hi = h.max()
    if hi == lo:
        raise DegenerateChannelError(f"channel is constant (value {lo!r})")
    return (h - lo) / (hi - lo)


def component_candidates(normalized: np.ndarray, threshold: float) -> list[ComponentCandidate]:
    """All 8-connected components of ``normalized >= threshold``, best first.

    Ordering is by descending confidence, then ascending row-major origin.
    After min-max normalization the argmax pixel always survives the
    threshold, so the list is never empty.
    """
    binary = (normalized >= threshold).astype(np.uint8)
    n_labels, labels = cv2.connectedComponents(binary, connectivity=8)
    h, w = normalized.shape
    flat_labels = labels.ravel()
    flat_vals = normalized.ravel()
    out: list[ComponentCandidate] = []
    for lbl in range(1, n_labels):
        idx = np.flatnonzero(flat_labels == lbl)
        vals = flat_vals[idx]
        total = float(vals.sum())
        ys, xs = np.divmod(idx, w)
        bx = float((vals * xs).sum() / total)
        by = float((vals * ys).sum() / total)
        out.append(
            ComponentCandidate(
                mask=(labels == lbl),
                confidence=total,
                barycenter=CaliperPoint(bx, by),
                origin=int(idx[0]),
            )
        )
    out.sort(key=lambda c: (-c.confidence, c.origin))
    return out


def decode_landmark(h: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> CaliperPoint:
    """Decode one channel into one subpixel caliper coordinate."""
    return _decode_with_confidence(h, threshold)[0]


def _decode_with_confidence(h: np.ndarray, threshold: float) -> tuple[CaliperPoint, float]:
    normalized = normalize_channel(h)
    winner = component_candidates(normalized, threshold)[0]
    return winner.barycenter, winner.confidence


def decode_all(
    stack: np.ndarray,
    plane: PlaneConfig,
    threshold: float = DEFAULT_THRESHOLD,
) -> DecodeResult:
    """Decode a ``(C_L, H, W)`` stack into named calipers in plane order."""
    stack = np.asarray(stack)
    if stack.ndim != 3 or stack.shape[0] != plane.n_landmarks:
        raise ConfigurationError(
            f"expected {plane.n_landmarks} channels for plane "
            f"{plane.plane_name!r}, got stack of shape {stack.shape}"
        )
    result = DecodeResult(plane=plane)
    for i, name in enumerate(plane.landmark_names):
        try:
            point, conf = _decode_with_confidence(stack[i], threshold)
        except DegenerateChannelError as exc:
            result.failures[name] = str(exc)
            continue
        result.points[name] = point
        result.confidences[name] = conf
    return result
