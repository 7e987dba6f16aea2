"""Training-target encoders: Gaussian landmark heatmaps and paired line masks.

Heatmaps are peak-normalized (grid maximum exactly 1.0) so that the decoder's
fixed 0.85 threshold always keeps the peak pixel. Constraint masks are exact
distance-to-segment tests, not rasterized strokes, so they can be checked
against a closed-form per-pixel oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LandmarkOutOfBoundsError
from .geometry import CaliperPoint, LandmarkSet

__all__ = [
    "DEFAULT_SIGMA",
    "DEFAULT_LINE_WIDTH",
    "HeatmapStack",
    "ConstraintMaskStack",
    "encode_heatmaps",
    "encode_constraints",
    "gaussian_channel",
    "segment_mask",
]

DEFAULT_SIGMA = 2.0
DEFAULT_LINE_WIDTH = 6.0


@dataclass(frozen=True)
class HeatmapStack:
    """Per-landmark Gaussian target channels, shape ``(C_L, H, W)`` in [0, 1]."""

    channels: np.ndarray
    sigma: float
    landmark_names: tuple[str, ...]

    @property
    def shape(self):
        return self.channels.shape


@dataclass(frozen=True)
class ConstraintMaskStack:
    """Per-biometry binary line masks, shape ``(C_B, H, W)`` with values {0, 1}."""

    channels: np.ndarray
    line_width: float
    biometry_names: tuple[str, ...]

    @property
    def shape(self):
        return self.channels.shape


def _check_in_image(name: str, p: CaliperPoint, width: int, height: int) -> None:
    if not p.in_bounds(width, height):
        raise LandmarkOutOfBoundsError(name, p, width, height)


def gaussian_channel(px: float, py: float, height: int, width: int, sigma: float) -> np.ndarray:
    """Peak-normalized Gaussian centered at the (subpixel) point ``(px, py)``.

    Evaluated on the full grid without truncation; pixel (x, y) has its
    center at the integer coordinate (x, y).
    """
    xs = np.arange(width, dtype=np.float64) - px
    ys = np.arange(height, dtype=np.float64) - py
    gx = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    gy = np.exp(-(ys * ys) / (2.0 * sigma * sigma))
    channel = np.outer(gy, gx)
    peak = channel.max()
    return channel / peak


def encode_heatmaps(
    landmarks: LandmarkSet,
    height: int,
    width: int,
    sigma: float = DEFAULT_SIGMA,
) -> HeatmapStack:
    """One Gaussian channel per landmark, in the plane's landmark order.

    Raises :class:`LandmarkOutOfBoundsError` for any landmark outside the
    image; callers (augmentation, dataset validation) must filter upstream.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    stack = np.empty((landmarks.plane.n_landmarks, height, width), dtype=np.float64)
    for i, name in enumerate(landmarks.plane.landmark_names):
        p = landmarks[name]
        _check_in_image(name, p, width, height)
        stack[i] = gaussian_channel(p.x, p.y, height, width, sigma)
    return HeatmapStack(stack, sigma, landmarks.plane.landmark_names)


def segment_mask(
    a: CaliperPoint, b: CaliperPoint, height: int, width: int, line_width: float
) -> np.ndarray:
    """Binary mask of pixels whose centers lie within ``line_width / 2`` of [a, b].

    The test is the exact point-to-closed-segment Euclidean distance; a
    coincident pair degenerates to a disc around the point.
    """
    xs = np.arange(width, dtype=np.float64)[None, :]
    ys = np.arange(height, dtype=np.float64)[:, None]
    ax, ay, bx, by = a.x, a.y, b.x, b.y
    dx, dy = bx - ax, by - ay
    seg_sq = dx * dx + dy * dy
    if seg_sq == 0.0:
        d_sq = (xs - ax) ** 2 + (ys - ay) ** 2
    else:
        t = ((xs - ax) * dx + (ys - ay) * dy) / seg_sq
        t = np.clip(t, 0.0, 1.0)
        d_sq = (xs - (ax + t * dx)) ** 2 + (ys - (ay + t * dy)) ** 2
    half = line_width / 2.0
    return (d_sq <= half * half).astype(np.uint8)


def encode_constraints(
    landmarks: LandmarkSet,
    height: int,
    width: int,
    line_width: float = DEFAULT_LINE_WIDTH,
) -> ConstraintMaskStack:
    """One line mask per biometry pair, in the plane's pair order."""
    if line_width <= 0:
        raise ValueError(f"line_width must be > 0, got {line_width}")
    plane = landmarks.plane
    stack = np.empty((plane.n_biometries, height, width), dtype=np.uint8)
    for i, (_, lm_a, lm_b) in enumerate(plane.biometry_pairs):
        a, b = landmarks[lm_a], landmarks[lm_b]
        _check_in_image(lm_a, a, width, height)
        _check_in_image(lm_b, b, width, height)
        stack[i] = segment_mask(a, b, height, width, line_width)
    return ConstraintMaskStack(stack, line_width, plane.biometry_names)
