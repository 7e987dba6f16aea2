"""Deterministic synthetic scan-like phantoms with exact landmark ground truth.

The phantoms are stylized, not anatomically realistic: their job is to give
the full pipeline (encode, train, decode, measure) an error-free geometric
oracle. A TC phantom renders a cranium ring, a two-lobed cerebellum bridged
by a central vermis, a dark cisterna gap and a skin line over a speckled
background; its six calipers come from the construction in closed form. A TV
phantom renders a single bright ventricle band whose two edge midpoints are
the AW calipers.

Layout convention for TC (before the head tilt is applied): the head midline
runs vertically with posterior pointing down (+y), so the two cerebellar
lobes sit left/right of the midline and the CMS/NFT chain descends along it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from .errors import InvalidInputError, InvalidPhantomSpecError
from .geometry import (
    TC_PLANE,
    TV_PLANE,
    CaliperPoint,
    LandmarkSet,
    PixelSpacing,
    PlaneConfig,
)

__all__ = [
    "LANDMARK_MARGIN_PX",
    "PHANTOM_SPACING",
    "IntensityProfile",
    "PhantomSpec",
    "TVPhantomSpec",
    "tc_landmarks",
    "tv_landmarks",
    "generate",
    "sample_spec",
    "generate_dataset",
]

LANDMARK_MARGIN_PX = 8.0
PHANTOM_SPACING = PixelSpacing.isotropic(0.25)


@dataclass(frozen=True)
class IntensityProfile:
    """Gray levels (0..255) per structure plus texture/nuisance parameters."""

    background: float = 28.0
    tissue: float = 72.0
    soft_tissue: float = 55.0  # between skull and skin line
    cerebellum: float = 140.0
    fluid: float = 10.0
    bone: float = 220.0
    skin: float = 185.0
    band: float = 195.0  # TV ventricle band
    speckle_amp: float = 0.14
    speckle_grain_px: float = 1.2
    gain_amp: float = 0.05
    blur_sigma: float = 0.7
    shadow_strength: float = 0.0  # 0 disables the baked-in lateral dropout
    shadow_seedless_x: float = 0.5  # dropout column center as a width fraction


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry of one TC phantom; lengths in pixels, angles in degrees."""

    height: int = 160
    width: int = 288
    center: tuple[float, float] = (144.0, 64.0)
    inner_semi_axes: tuple[float, float] = (84.0, 52.0)  # (lateral, midline)
    bone_thickness: float = 6.0
    rotation_deg: float = 0.0
    lobe_semi_axes: tuple[float, float] = (26.0, 11.0)  # (lateral, midline)
    vermis_semi_axes: tuple[float, float] = (16.0, 9.0)
    cisterna_gap: float = 8.0
    cisterna_halfwidth: float = 18.0
    skin_gap: float = 7.0
    skin_thickness: float = 5.0
    texture_seed: int = 0
    intensity: IntensityProfile = field(default_factory=IntensityProfile)


@dataclass(frozen=True)
class TVPhantomSpec:
    """Geometry of one TV phantom: head outline plus one bright band."""

    height: int = 160
    width: int = 288
    center: tuple[float, float] = (144.0, 78.0)
    inner_semi_axes: tuple[float, float] = (92.0, 60.0)
    bone_thickness: float = 6.0
    rotation_deg: float = 0.0
    band_offset: tuple[float, float] = (28.0, 0.0)  # band center in head frame
    band_angle_deg: float = 70.0  # band axis within the head frame
    band_halfwidth: float = 9.0
    band_length: float = 78.0
    texture_seed: int = 0
    intensity: IntensityProfile = field(default_factory=IntensityProfile)


def _rotate_about(p: tuple[float, float], center: tuple[float, float], deg: float) -> CaliperPoint:
    theta = math.radians(deg)
    c, s = math.cos(theta), math.sin(theta)
    dx, dy = p[0] - center[0], p[1] - center[1]
    return CaliperPoint(center[0] + c * dx - s * dy, center[1] + s * dx + c * dy)


def _lobe_center_offset(spec: PhantomSpec) -> float:
    """Posterior (y) offset of the lobe centers from the head center."""
    return spec.inner_semi_axes[1] - spec.cisterna_gap - spec.vermis_semi_axes[1]


def tc_landmarks(spec: PhantomSpec) -> LandmarkSet:
    """The six TC calipers implied by the construction, in canvas coordinates.

    Exact by construction: TCD spans the lobes' extreme lateral points, CMS
    spans the cisterna gap along the midline, NFT runs from the outer bone
    edge to the outer skin edge along the midline.
    """
    cx, cy = spec.center
    a_in, b_in = spec.inner_semi_axes
    a_l = spec.lobe_semi_axes[0]
    y_c = cy + _lobe_center_offset(spec)
    b_v = spec.vermis_semi_axes[1]
    t = spec.bone_thickness
    skin_out = b_in + t + spec.skin_gap + spec.skin_thickness
    raw = {
        "TCD_1": (cx - 2.0 * a_l, y_c),
        "TCD_2": (cx + 2.0 * a_l, y_c),
        "CMS_1": (cx, y_c + b_v),
        "CMS_2": (cx, cy + b_in),
        "NFT_1": (cx, cy + b_in + t),
        "NFT_2": (cx, cy + skin_out),
    }
    pts = {k: _rotate_about(v, spec.center, spec.rotation_deg) for k, v in raw.items()}
    return LandmarkSet(TC_PLANE, pts)


def tv_landmarks(spec: TVPhantomSpec) -> LandmarkSet:
    """AW calipers at the midpoints of the band's two long edges."""
    cx, cy = spec.center
    ox, oy = spec.band_offset
    band_center = (cx + ox, cy + oy)
    normal = math.radians(spec.band_angle_deg + 90.0)
    nx, ny = math.cos(normal), math.sin(normal)
    h = spec.band_halfwidth
    raw = {
        "AW_1": (band_center[0] - h * nx, band_center[1] - h * ny),
        "AW_2": (band_center[0] + h * nx, band_center[1] + h * ny),
    }
    pts = {k: _rotate_about(v, spec.center, spec.rotation_deg) for k, v in raw.items()}
    return LandmarkSet(TV_PLANE, pts)


def _validate_margins(landmarks: LandmarkSet, width: int, height: int) -> None:
    m = LANDMARK_MARGIN_PX
    for name, p in landmarks.points.items():
        if not (m <= p.x <= width - 1 - m and m <= p.y <= height - 1 - m):
            raise InvalidPhantomSpecError(
                f"landmark {name} at ({p.x:.1f}, {p.y:.1f}) violates the "
                f"{m:.0f} px canvas margin on a {width}x{height} canvas"
            )


def _head_frame(spec, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center coordinates rotated into the (untilted) head frame."""
    xs = np.arange(width, dtype=np.float64)[None, :] - spec.center[0]
    ys = np.arange(height, dtype=np.float64)[:, None] - spec.center[1]
    theta = math.radians(-spec.rotation_deg)
    c, s = math.cos(theta), math.sin(theta)
    ux = c * xs - s * ys
    uy = s * xs + c * ys
    return ux, uy


def _inside_ellipse(ux, uy, a: float, b: float, x0: float = 0.0, y0: float = 0.0):
    return ((ux - x0) / a) ** 2 + ((uy - y0) / b) ** 2 <= 1.0


def _texture(img: np.ndarray, profile: IntensityProfile, seed: int) -> np.ndarray:
    """Structural blur, multiplicative speckle, smooth gain, optional dropout."""
    h, w = img.shape
    out = img.astype(np.float64)
    if profile.blur_sigma > 0:
        out = cv2.GaussianBlur(out, (0, 0), profile.blur_sigma)
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0x7E])
    if profile.speckle_amp > 0:
        noise = rng.standard_normal((h, w))
        if profile.speckle_grain_px > 0:
            noise = cv2.GaussianBlur(noise, (0, 0), profile.speckle_grain_px)
            noise /= noise.std()
        field = 1.0 + profile.speckle_amp * noise
        np.clip(field, 1.0 - 2.5 * profile.speckle_amp, 1.0 + 2.5 * profile.speckle_amp, out=field)
        out *= field
    if profile.gain_amp > 0:
        coarse = rng.standard_normal((5, 7))
        gain = cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC)
        out *= 1.0 + profile.gain_amp * np.clip(gain, -2.0, 2.0)
    if profile.shadow_strength > 0:
        x0 = profile.shadow_seedless_x * (w - 1)
        sigma = 0.10 * w
        col = 1.0 - profile.shadow_strength * np.exp(
            -((np.arange(w) - x0) ** 2) / (2.0 * sigma * sigma)
        )
        out *= col[None, :]
    return np.clip(out, 0.0, 255.0).astype(np.uint8)


def render_tc(spec: PhantomSpec) -> np.ndarray:
    """Render one TC phantom as an 8-bit grayscale image; deterministic."""
    lv = spec.intensity
    h, w = spec.height, spec.width
    ux, uy = _head_frame(spec, h, w)
    a_in, b_in = spec.inner_semi_axes
    t = spec.bone_thickness
    a_out, b_out = a_in + t, b_in + t
    skin_in_a, skin_in_b = a_out + spec.skin_gap, b_out + spec.skin_gap
    skin_out_a = skin_in_a + spec.skin_thickness
    skin_out_b = skin_in_b + spec.skin_thickness

    inside_inner = _inside_ellipse(ux, uy, a_in, b_in)
    inside_outer = _inside_ellipse(ux, uy, a_out, b_out)
    inside_skin_in = _inside_ellipse(ux, uy, skin_in_a, skin_in_b)
    inside_skin_out = _inside_ellipse(ux, uy, skin_out_a, skin_out_b)

    y_off = _lobe_center_offset(spec)
    a_l, b_l = spec.lobe_semi_axes
    a_v, b_v = spec.vermis_semi_axes
    lobes = _inside_ellipse(ux, uy, a_l, b_l, x0=-a_l, y0=y_off) | _inside_ellipse(
        ux, uy, a_l, b_l, x0=a_l, y0=y_off
    )
    vermis = _inside_ellipse(ux, uy, a_v, b_v, y0=y_off)
    cisterna = inside_inner & (np.abs(ux) <= spec.cisterna_halfwidth) & (uy >= y_off)

    img = np.full((h, w), lv.background, dtype=np.float64)
    img[inside_skin_out & ~inside_skin_in] = lv.skin
    img[inside_skin_in & ~inside_outer] = lv.soft_tissue
    img[inside_outer & ~inside_inner] = lv.bone
    img[inside_inner] = lv.tissue
    img[cisterna] = lv.fluid
    img[lobes | vermis] = lv.cerebellum
    # redraw bone over any cisterna/cerebellum spill past the inner wall
    img[inside_outer & ~inside_inner] = lv.bone
    return _texture(img, lv, spec.texture_seed)


def render_tv(spec: TVPhantomSpec) -> np.ndarray:
    """Render one TV phantom as an 8-bit grayscale image; deterministic."""
    lv = spec.intensity
    h, w = spec.height, spec.width
    ux, uy = _head_frame(spec, h, w)
    a_in, b_in = spec.inner_semi_axes
    a_out, b_out = a_in + spec.bone_thickness, b_in + spec.bone_thickness
    inside_inner = _inside_ellipse(ux, uy, a_in, b_in)
    inside_outer = _inside_ellipse(ux, uy, a_out, b_out)

    theta = math.radians(spec.band_angle_deg)
    axis = np.array([math.cos(theta), math.sin(theta)])
    ox, oy = spec.band_offset
    du = ux - ox
    dv = uy - oy
    along = du * axis[0] + dv * axis[1]
    across = -du * axis[1] + dv * axis[0]
    band = (
        (np.abs(across) <= spec.band_halfwidth)
        & (np.abs(along) <= spec.band_length / 2.0)
        & inside_inner
    )

    img = np.full((h, w), lv.background, dtype=np.float64)
    img[inside_outer & ~inside_inner] = lv.bone
    img[inside_inner] = lv.tissue
    img[band] = lv.band
    return _texture(img, lv, spec.texture_seed)


def generate(spec: PhantomSpec | TVPhantomSpec):
    """Render a phantom and return ``(image, landmarks, spacing)``.

    Raises :class:`InvalidPhantomSpecError` when any ground-truth landmark
    violates the canvas margin.
    """
    if isinstance(spec, PhantomSpec):
        landmarks = tc_landmarks(spec)
        _validate_margins(landmarks, spec.width, spec.height)
        return render_tc(spec), landmarks, PHANTOM_SPACING
    if isinstance(spec, TVPhantomSpec):
        landmarks = tv_landmarks(spec)
        _validate_margins(landmarks, spec.width, spec.height)
        return render_tv(spec), landmarks, PHANTOM_SPACING
    raise InvalidInputError(f"unsupported phantom spec type {type(spec).__name__}")


def _sample_intensity(rng: np.random.Generator) -> IntensityProfile:
    base = IntensityProfile()
    return IntensityProfile(
        background=base.background + rng.uniform(-8, 10),
        tissue=base.tissue + rng.uniform(-12, 14),
        soft_tissue=base.soft_tissue + rng.uniform(-8, 10),
        cerebellum=base.cerebellum + rng.uniform(-18, 22),
        fluid=base.fluid + rng.uniform(0, 10),
        bone=base.bone + rng.uniform(-25, 25),
        skin=base.skin + rng.uniform(-20, 20),
        band=base.band + rng.uniform(-25, 25),
        speckle_amp=rng.uniform(0.08, 0.22),
        speckle_grain_px=rng.uniform(0.8, 1.8),
        gain_amp=rng.uniform(0.02, 0.10),
        blur_sigma=rng.uniform(0.4, 1.3),
        shadow_strength=0.0 if rng.random() < 0.5 else rng.uniform(0.15, 0.45),
        shadow_seedless_x=rng.uniform(0.15, 0.85),
    )


def _sample_tc_geometry(rng: np.random.Generator, height: int, width: int) -> PhantomSpec:
    scale = min(height / 160.0, width / 288.0)
    b_in = rng.uniform(44, 56) * scale
    a_in = rng.uniform(74, 92) * scale
    t = rng.uniform(5, 8) * scale
    skin_gap = rng.uniform(5, 9) * scale
    skin_thickness = rng.uniform(4, 7) * scale
    chain = b_in + t + skin_gap + skin_thickness
    cy = (height - 1) - LANDMARK_MARGIN_PX - chain - rng.uniform(0, 6) * scale
    cx = width / 2.0 + rng.uniform(-14, 14) * scale
    a_l = rng.uniform(0.26, 0.36) * a_in
    b_l = rng.uniform(8, 13) * scale
    b_v = rng.uniform(6, 10) * scale
    gap = rng.uniform(5, 11) * scale
    return PhantomSpec(
        height=height,
        width=width,
        center=(cx, cy),
        inner_semi_axes=(a_in, b_in),
        bone_thickness=t,
        rotation_deg=rng.uniform(-8, 8),
        lobe_semi_axes=(a_l, b_l),
        vermis_semi_axes=(rng.uniform(0.45, 0.65) * a_l, b_v),
        cisterna_gap=gap,
        cisterna_halfwidth=rng.uniform(13, 22) * scale,
        skin_gap=skin_gap,
        skin_thickness=skin_thickness,
        texture_seed=int(rng.integers(0, 2**63 - 1)),
        intensity=_sample_intensity(rng),
    )


def _lobes_inside_skull(spec: PhantomSpec, margin: float = 2.0) -> bool:
    a_in, b_in = spec.inner_semi_axes
    a_l, b_l = spec.lobe_semi_axes
    y_off = _lobe_center_offset(spec)
    # probe each lobe boundary at 16 angles
    phis = np.linspace(0, 2 * math.pi, 16, endpoint=False)
    for sign in (-1.0, 1.0):
        bx = sign * a_l + a_l * np.cos(phis)
        by = y_off + b_l * np.sin(phis)
        if np.any((bx / (a_in - margin)) ** 2 + (by / (b_in - margin)) ** 2 > 1.0):
            return False
    return True


def _sample_tv_geometry(rng: np.random.Generator, height: int, width: int) -> TVPhantomSpec:
    scale = min(height / 160.0, width / 288.0)
    b_in = rng.uniform(48, 60) * scale
    a_in = rng.uniform(80, 100) * scale
    return TVPhantomSpec(
        height=height,
        width=width,
        center=(width / 2.0 + rng.uniform(-12, 12) * scale, height / 2.0 + rng.uniform(-6, 10) * scale),
        inner_semi_axes=(a_in, b_in),
        bone_thickness=rng.uniform(5, 8) * scale,
        rotation_deg=rng.uniform(-8, 8),
        band_offset=(rng.uniform(14, 38) * scale, rng.uniform(-12, 12) * scale),
        band_angle_deg=rng.uniform(50, 130),
        band_halfwidth=rng.uniform(6, 12) * scale,
        band_length=rng.uniform(55, 85) * scale,
        texture_seed=int(rng.integers(0, 2**63 - 1)),
        intensity=_sample_intensity(rng),
    )


def sample_spec(
    rng: np.random.Generator, plane: PlaneConfig = TC_PLANE, height: int = 160, width: int = 288
):
    """Draw one randomized, margin-valid phantom spec for the given plane."""
    for _ in range(200):
        if plane.plane_name == "TC":
            spec = _sample_tc_geometry(rng, height, width)
            landmarks = tc_landmarks(spec)
            if not _lobes_inside_skull(spec):
                continue
        elif plane.plane_name == "TV":
            spec = _sample_tv_geometry(rng, height, width)
            landmarks = tv_landmarks(spec)
        else:
            raise InvalidInputError(f"no phantom generator for plane {plane.plane_name!r}")
        m = LANDMARK_MARGIN_PX
        if all(
            m <= p.x <= width - 1 - m and m <= p.y <= height - 1 - m
            for p in landmarks.points.values()
        ):
            return spec
    raise InvalidPhantomSpecError(
        f"could not sample a margin-valid {plane.plane_name} phantom at {width}x{height}"
    )


def generate_dataset(
    n: int,
    seed: int,
    out_dir: str | Path,
    split_ratio: float = 0.88,
    plane: PlaneConfig = TC_PLANE,
    height: int = 160,
    width: int = 288,
):
    """Write ``n`` phantoms plus manifests with a subject-disjoint split.

    Creates ``images/*.png`` and three manifests under ``out_dir``:
    ``manifest.jsonl`` (everything), ``manifest.train.jsonl`` and
    ``manifest.val.jsonl`` (split by synthetic subject id). Returns the
    manifest paths.
    """
    from .manifest import ManifestEntry, RaterAnnotation, save_manifest

    if n < 2:
        raise InvalidInputError(f"need at least 2 phantoms, got n={n}")
    if not 0.0 < split_ratio < 1.0:
        raise InvalidInputError(f"split_ratio must be in (0, 1), got {split_ratio}")
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n):
        spec = sample_spec(rng, plane, height, width)
        image, landmarks, spacing = generate(spec)
        rel = f"images/{plane.plane_name.lower()}_{i:04d}.png"
        if not cv2.imwrite(str(out_dir / rel), image):
            raise IOError(f"failed to write {out_dir / rel}")
        entries.append(
            ManifestEntry(
                subject_id=f"subj_{i:04d}",
                image_path=rel,
                plane=plane,
                spacing=spacing,
                width=width,
                height=height,
                annotations={"oracle": RaterAnnotation(pass1=landmarks)},
                root=out_dir,
            )
        )
    order = rng.permutation(n)
    n_train = int(n * split_ratio)
    train = [entries[i] for i in sorted(order[:n_train])]
    val = [entries[i] for i in sorted(order[n_train:])]
    paths = {
        "manifest": out_dir / "manifest.jsonl",
        "train": out_dir / "manifest.train.jsonl",
        "val": out_dir / "manifest.val.jsonl",
    }
    save_manifest(entries, paths["manifest"])
    save_manifest(train, paths["train"])
    save_manifest(val, paths["val"])
    return paths
