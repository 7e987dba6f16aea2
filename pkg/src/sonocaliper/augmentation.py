"""Domain-specific online augmentation of (image, landmarks) pairs.

Eight effects are modeled: four geometric (rotation, translation, shear,
zoom, composed into a single affine warp that moves the landmarks by exactly
the same matrix) and four intensity-only (multiplicative speckle noise,
down/up resampling, wedge-shaped acoustic shadowing, motion blur), applied in
that fixed order. Every draw is fully determined by a 64-bit seed plus the
per-effect enable flags, so any augmented sample can be reproduced from its
spec.

Images are float arrays with intensities in [0, 1]; all outputs are clipped
back into that range. Intensity effects never touch the landmark
coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import cv2
import numpy as np

from .geometry import CaliperPoint, LandmarkSet

__all__ = [
    "AugmentationFlags",
    "ShadowPatch",
    "AugmentationSpec",
    "GeometricResult",
    "AugmentResult",
    "sample_spec",
    "affine_matrix",
    "transform_landmarks",
    "apply_geometric",
    "apply_speckle",
    "apply_resolution",
    "apply_shadow",
    "apply_motion_blur",
    "augment",
    "single_effect_panels",
]

ROTATION_RANGE_DEG = (-20.0, 20.0)
TRANSLATE_RANGE_PX = (40.0, 60.0)
SHEAR_RANGE = (0.0, 0.3)
ZOOM_RANGE = (0.6, 1.0)
SPECKLE_SIGMA = 0.1
RESAMPLE_RANGE = (0.3, 0.7)
SHADOW_SIZE_RANGE_PX = (75.0, 100.0)
SHADOW_ANGLE_RANGE_DEG = (15.0, 20.0)
SHADOW_ATTENUATION_RANGE = (0.2, 0.5)
SHADOW_TILT_RANGE_DEG = (-25.0, 25.0)
BLUR_KERNEL = 50
MAX_GEOMETRIC_ATTEMPTS = 10

# fraction of the wedge angle/length over which the attenuation eases to zero
_SHADOW_EDGE_FRACTION = 0.25


@dataclass(frozen=True)
class AugmentationFlags:
    """Which of the eight effects may be applied."""

    rotation: bool = True
    translation: bool = True
    shear: bool = True
    zoom: bool = True
    speckle: bool = True
    resolution: bool = True
    shadow: bool = True
    blur: bool = True

    @classmethod
    def none(cls) -> "AugmentationFlags":
        return cls(*(False,) * 8)

    @classmethod
    def geometric_only(cls) -> "AugmentationFlags":
        return cls(True, True, True, True, False, False, False, False)

    @classmethod
    def intensity_only(cls) -> "AugmentationFlags":
        return cls(False, False, False, False, True, True, True, True)

    @classmethod
    def only(cls, name: str) -> "AugmentationFlags":
        return replace(cls.none(), **{name: True})

    @property
    def any_geometric(self) -> bool:
        return self.rotation or self.translation or self.shear or self.zoom

    @property
    def any_intensity(self) -> bool:
        return self.speckle or self.resolution or self.shadow or self.blur

    @property
    def any(self) -> bool:
        return self.any_geometric or self.any_intensity


@dataclass(frozen=True)
class ShadowPatch:
    """One wedge of acoustic shadowing anchored at a lateral image border."""

    side: str  # "left" or "right"
    apex_fraction: float  # apex position along the border, in [0.15, 0.85]
    tilt_deg: float  # wedge axis tilt away from horizontal
    opening_deg: float  # full opening angle of the wedge
    length_px: float
    attenuation: float  # multiplier at the wedge core (< 1 darkens)


@dataclass(frozen=True)
class AugmentationSpec:
    """One fully sampled augmentation draw; reproducible from (seed, flags)."""

    rotation_deg: float = 0.0
    translate_x: float = 0.0
    translate_y: float = 0.0
    shear: float = 0.0
    zoom: float = 1.0
    speckle_sigma: float = SPECKLE_SIGMA
    resample_factor: float = 1.0
    shadows: tuple[ShadowPatch, ...] = ()
    blur_kernel: int = BLUR_KERNEL
    blur_angle_deg: float = 0.0
    flags: AugmentationFlags = field(default_factory=AugmentationFlags.none)
    seed: int = 0


def _sample_shadow(rng: np.random.Generator) -> ShadowPatch:
    return ShadowPatch(
        side="left" if rng.random() < 0.5 else "right",
        apex_fraction=float(rng.uniform(0.15, 0.85)),
        tilt_deg=float(rng.uniform(*SHADOW_TILT_RANGE_DEG)),
        opening_deg=float(rng.uniform(*SHADOW_ANGLE_RANGE_DEG)),
        length_px=float(rng.uniform(*SHADOW_SIZE_RANGE_PX)),
        attenuation=float(rng.uniform(*SHADOW_ATTENUATION_RANGE)),
    )


def _sample_geometry(rng: np.random.Generator, flags: AugmentationFlags) -> dict:
    """Draw the four geometric parameters; disabled effects become neutral.

    The rng stream is consumed identically regardless of flags so that the
    same seed yields the same enabled-effect parameters under any flag mask.
    """
    rotation = float(rng.uniform(*ROTATION_RANGE_DEG))
    t_mag_x = float(rng.uniform(*TRANSLATE_RANGE_PX))
    t_mag_y = float(rng.uniform(*TRANSLATE_RANGE_PX))
    sign_x = 1.0 if rng.random() < 0.5 else -1.0
    sign_y = 1.0 if rng.random() < 0.5 else -1.0
    shear = float(rng.uniform(*SHEAR_RANGE))
    zoom = float(rng.uniform(*ZOOM_RANGE))
    return {
        "rotation_deg": rotation if flags.rotation else 0.0,
        "translate_x": sign_x * t_mag_x if flags.translation else 0.0,
        "translate_y": sign_y * t_mag_y if flags.translation else 0.0,
        "shear": shear if flags.shear else 0.0,
        "zoom": zoom if flags.zoom else 1.0,
    }


def sample_spec(seed: int, flags: AugmentationFlags | None = None) -> AugmentationSpec:
    """Deterministically sample one augmentation draw.

    Parameters are uniform in their documented ranges; effects whose flag is
    off get neutral parameters so the resulting spec applies as identity for
    them.
    """
    if flags is None:
        flags = AugmentationFlags()
    rng = np.random.default_rng(seed)
    geo = _sample_geometry(rng, flags)
    resample = float(rng.uniform(*RESAMPLE_RANGE))
    shadows = (_sample_shadow(rng), _sample_shadow(rng))
    blur_angle = float(rng.uniform(0.0, 180.0))
    return AugmentationSpec(
        **geo,
        speckle_sigma=SPECKLE_SIGMA if flags.speckle else 0.0,
        resample_factor=resample if flags.resolution else 1.0,
        shadows=shadows if flags.shadow else (),
        blur_kernel=BLUR_KERNEL,
        blur_angle_deg=blur_angle,
        flags=flags,
        seed=int(seed),
    )


def affine_matrix(spec: AugmentationSpec, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """The composed forward map ``p' = M p + offset`` for this spec.

    Composition order is fixed: shear, then rotation, then zoom, all about
    the image center, followed by the translation. Landmarks and the image
    grid are mapped by this same affine.
    """
    theta = math.radians(spec.rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    rot = np.array([[cos_t, -sin_t], [sin_t, cos_t]])
    shear = np.array([[1.0, spec.shear], [0.0, 1.0]])
    m = spec.zoom * (rot @ shear)
    center = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    t = np.array([spec.translate_x, spec.translate_y])
    offset = center + t - m @ center
    return m, offset


def _is_identity(m: np.ndarray, offset: np.ndarray) -> bool:
    return np.array_equal(m, np.eye(2)) and np.array_equal(offset, np.zeros(2))


def transform_landmarks(landmarks: LandmarkSet, m: np.ndarray, offset: np.ndarray) -> LandmarkSet:
    pts = {
        name: CaliperPoint(
            float(m[0, 0] * p.x + m[0, 1] * p.y + offset[0]),
            float(m[1, 0] * p.x + m[1, 1] * p.y + offset[1]),
        )
        for name, p in landmarks.points.items()
    }
    return LandmarkSet(landmarks.plane, pts)


def warp_image(image: np.ndarray, m: np.ndarray, offset: np.ndarray) -> np.ndarray:
    mat = np.concatenate([m, offset[:, None]], axis=1).astype(np.float64)
    h, w = image.shape
    return cv2.warpAffine(
        image,
        mat,
        (w, h),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=0.0,
    )


@dataclass(frozen=True)
class GeometricResult:
    image: np.ndarray
    landmarks: LandmarkSet
    spec: AugmentationSpec  # the spec actually applied (may be a redraw)
    rejected: bool
    attempts: int


def apply_geometric(
    image: np.ndarray,
    landmarks: LandmarkSet,
    spec: AugmentationSpec,
    max_attempts: int = MAX_GEOMETRIC_ATTEMPTS,
) -> GeometricResult:
    """Warp image and landmarks by the spec's composed affine.

    If any transformed landmark would leave the canvas the geometric
    parameters are redrawn from a sub-seed, up to ``max_attempts`` times;
    after that the inputs pass through unchanged with ``rejected=True``.
    """
    h, w = image.shape
    current = spec
    for attempt in range(1, max_attempts + 1):
        m, offset = affine_matrix(current, w, h)
        moved = transform_landmarks(landmarks, m, offset)
        if moved.in_bounds(w, h) or not landmarks.points:
            if _is_identity(m, offset):
                return GeometricResult(image.copy(), landmarks, current, False, attempt)
            return GeometricResult(warp_image(image, m, offset), moved, current, False, attempt)
        rng = np.random.default_rng([spec.seed & 0xFFFFFFFFFFFFFFFF, 0x9E0, attempt])
        current = replace(current, **_sample_geometry(rng, spec.flags))
    return GeometricResult(image.copy(), landmarks, spec, True, max_attempts)


def apply_speckle(image: np.ndarray, sigma: float = SPECKLE_SIGMA, seed: int = 0) -> np.ndarray:
    """Multiplicative Gaussian noise: ``I' = clip(I * (1 + n))``, n ~ N(0, sigma)."""
    if sigma == 0.0:
        return image.copy()
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(image.shape).astype(np.float32)
    return np.clip(image * (1.0 + sigma * noise), 0.0, 1.0).astype(np.float32)


def apply_resolution(image: np.ndarray, factor: float) -> np.ndarray:
    """Bilinear downsample by ``factor`` then upsample back to the input size."""
    if not 0.0 < factor <= 1.0:
        raise ValueError(f"resample factor must be in (0, 1], got {factor}")
    h, w = image.shape
    if factor == 1.0:
        return image.copy()
    small_w = max(1, round(w * factor))
    small_h = max(1, round(h * factor))
    small = cv2.resize(image, (small_w, small_h), interpolation=cv2.INTER_LINEAR)
    return cv2.resize(small, (w, h), interpolation=cv2.INTER_LINEAR)


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def shadow_field(patch: ShadowPatch, height: int, width: int) -> np.ndarray:
    """Multiplicative attenuation field of one wedge, 1.0 outside it.

    The wedge opens from an apex on a lateral border; attenuation reaches
    ``patch.attenuation`` at the core and eases smoothly to 1.0 at the
    angular and radial boundaries.
    """
    if patch.attenuation >= 1.0:
        return np.ones((height, width), dtype=np.float32)
    if patch.side == "left":
        apex = np.array([0.0, patch.apex_fraction * (height - 1)])
        axis_deg = patch.tilt_deg
    else:
        apex = np.array([float(width - 1), patch.apex_fraction * (height - 1)])
        axis_deg = 180.0 - patch.tilt_deg
    axis = math.radians(axis_deg)
    xs = np.arange(width, dtype=np.float64)[None, :] - apex[0]
    ys = np.arange(height, dtype=np.float64)[:, None] - apex[1]
    r = np.hypot(xs, ys)
    ang = np.arctan2(ys, xs) - axis
    ang = np.abs(np.arctan2(np.sin(ang), np.cos(ang)))  # wrap to [0, pi]
    half = math.radians(patch.opening_deg) / 2.0
    s_ang = _smoothstep((half - ang) / (half * _SHADOW_EDGE_FRACTION))
    s_rad = _smoothstep((patch.length_px - r) / (patch.length_px * _SHADOW_EDGE_FRACTION))
    depth = (1.0 - patch.attenuation) * s_ang * s_rad
    return (1.0 - depth).astype(np.float32)


def apply_shadow(image: np.ndarray, patches: tuple[ShadowPatch, ...]) -> np.ndarray:
    out = image.astype(np.float32, copy=True)
    h, w = image.shape
    for patch in patches:
        out *= shadow_field(patch, h, w)
    return np.clip(out, 0.0, 1.0)


def motion_blur_kernel(kernel_size: int, angle_deg: float) -> np.ndarray:
    """Normalized line kernel of the given orientation on a square support."""
    if kernel_size <= 1:
        return np.ones((1, 1), dtype=np.float32)
    k = np.zeros((kernel_size, kernel_size), dtype=np.float32)
    c = (kernel_size - 1) / 2.0
    dx = math.cos(math.radians(angle_deg)) * kernel_size
    dy = math.sin(math.radians(angle_deg)) * kernel_size
    p1 = (int(round(c - dx / 2)), int(round(c - dy / 2)))
    p2 = (int(round(c + dx / 2)), int(round(c + dy / 2)))
    cv2.line(k, p1, p2, 1.0, thickness=1)
    return k / k.sum()


def apply_motion_blur(
    image: np.ndarray, kernel_size: int = BLUR_KERNEL, angle_deg: float = 0.0
) -> np.ndarray:
    """Convolve with a normalized line kernel; reflective border handling."""
    if kernel_size <= 1:
        return image.copy()
    k = motion_blur_kernel(kernel_size, angle_deg)
    out = cv2.filter2D(image, -1, k, borderType=cv2.BORDER_REFLECT)
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class AugmentResult:
    image: np.ndarray
    landmarks: LandmarkSet
    spec: AugmentationSpec  # the spec actually applied, for reproducibility
    geometric_rejected: bool = False


def augment(
    image: np.ndarray,
    landmarks: LandmarkSet,
    flags: AugmentationFlags | None = None,
    seed: int = 0,
) -> AugmentResult:
    """Run the full pipeline: geometric warp, then speckle, resolution,
    shadow and motion blur in that fixed order.

    The returned spec reproduces the exact draw (including any geometric
    redraws caused by out-of-canvas landmarks).
    """
    if image.ndim != 2 or image.size == 0:
        raise ValueError(f"expected a non-empty 2D image, got shape {image.shape}")
    spec = sample_spec(seed, flags)
    img = np.asarray(image, dtype=np.float32)
    out_landmarks = landmarks
    rejected = False
    if spec.flags.any_geometric:
        geo = apply_geometric(img, landmarks, spec)
        img, out_landmarks, spec, rejected = geo.image, geo.landmarks, geo.spec, geo.rejected
    else:
        img = img.copy()
    if spec.flags.speckle:
        img = apply_speckle(img, spec.speckle_sigma, seed=_derive(spec.seed, 1))
    if spec.flags.resolution:
        img = apply_resolution(img, spec.resample_factor)
    if spec.flags.shadow:
        img = apply_shadow(img, spec.shadows)
    if spec.flags.blur:
        img = apply_motion_blur(img, spec.blur_kernel, spec.blur_angle_deg)
    return AugmentResult(img, out_landmarks, spec, rejected)


def _derive(seed: int, stream: int) -> list[int]:
    return [seed & 0xFFFFFFFFFFFFFFFF, stream]


#: effect name -> flags enabling just that effect; order mirrors the usual
#: eight-panel preview (baseline first, added by the caller).
PREVIEW_EFFECTS = (
    "rotation",
    "zoom",
    "shear",
    "speckle",
    "resolution",
    "shadow",
    "blur",
)


def single_effect_panels(
    image: np.ndarray, seed: int, landmarks: LandmarkSet | None = None
) -> list[tuple[str, np.ndarray]]:
    """Baseline plus one panel per effect, for the preview grid."""
    from .geometry import PlaneConfig  # local: avoid polluting module surface

    if landmarks is None:
        landmarks = LandmarkSet(PlaneConfig("preview", (), ()), {})
    img = np.asarray(image, dtype=np.float32)
    panels = [("baseline", img.copy())]
    for name in PREVIEW_EFFECTS:
        res = augment(img, landmarks, AugmentationFlags.only(name), seed)
        panels.append((name, res.image))
    return panels
