"""Training loop, composite loss and checkpoint-driven inference.

The loss is ``L = L_H + alpha * L_BCS`` where both terms are mean per-pixel
binary cross-entropy of sigmoid(logits): against the continuous Gaussian
heatmap targets for L_H, against the binary line masks for L_BCS. Training
uses Adam at a fixed learning rate, augments online, and keeps the weights
of the epoch with the lowest validation mean decode error in pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .augmentation import AugmentationFlags, augment
from .checkpoint import Checkpoint
from .decoding import DEFAULT_THRESHOLD, decode_all
from .encoding import DEFAULT_LINE_WIDTH, DEFAULT_SIGMA, encode_constraints, encode_heatmaps
from .errors import (
    ConfigurationError,
    InvalidInputError,
    TrainingDivergedError,
)
from .evaluation import PredictionRecord
from .geometry import (
    CaliperPoint,
    LandmarkSet,
    PixelSpacing,
    PlaneConfig,
    compute_biometry,
)
from .manifest import CONSENSUS_MEAN, ManifestEntry, image_to_float, resolve_ground_truth
from .model import BackboneConfig, CaliperNet

__all__ = [
    "LossWeights",
    "LossOutput",
    "loss_components",
    "TrainingSample",
    "TrainConfig",
    "EpochMetrics",
    "TrainResult",
    "samples_from_entries",
    "train",
    "InferenceResult",
    "Predictor",
    "infer",
    "predict_entries",
]

# per-image application odds for each enabled effect family during training
P_GEOMETRIC = 0.8
P_SPECKLE = 0.35
P_RESOLUTION = 0.25
P_SHADOW = 0.35
P_BLUR = 0.2

_U64 = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class LossWeights:
    """Weight of the constraint-mask term; zero disables it."""

    alpha: float = 1e-3

    def __post_init__(self):
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise InvalidInputError(f"alpha must be finite and >= 0, got {self.alpha}")


@dataclass(frozen=True)
class LossOutput:
    total: torch.Tensor
    heatmap: torch.Tensor
    constraint: torch.Tensor


def loss_components(
    landmark_logits: torch.Tensor,
    constraint_logits: torch.Tensor,
    heatmap_targets: torch.Tensor,
    mask_targets: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> LossOutput:
    """Total loss plus both components, each a scalar tensor.

    With ``alpha == 0`` the constraint term is evaluated for logging only and
    contributes neither value nor gradient to the total.
    """
    if landmark_logits.shape != heatmap_targets.shape:
        raise ConfigurationError(
            f"landmark logits {tuple(landmark_logits.shape)} do not match targets "
            f"{tuple(heatmap_targets.shape)}"
        )
    if constraint_logits.shape != mask_targets.shape:
        raise ConfigurationError(
            f"constraint logits {tuple(constraint_logits.shape)} do not match targets "
            f"{tuple(mask_targets.shape)}"
        )
    if not bool(torch.isfinite(landmark_logits).all()) or not bool(
        torch.isfinite(constraint_logits).all()
    ):
        raise TrainingDivergedError("non-finite values in network logits")
    l_h = F.binary_cross_entropy_with_logits(landmark_logits, heatmap_targets)
    if weights.alpha == 0.0:
        with torch.no_grad():
            l_b = F.binary_cross_entropy_with_logits(constraint_logits, mask_targets)
        total = l_h
    else:
        l_b = F.binary_cross_entropy_with_logits(constraint_logits, mask_targets)
        total = l_h + weights.alpha * l_b
    if not bool(torch.isfinite(total)):
        raise TrainingDivergedError("loss is non-finite")
    return LossOutput(total=total, heatmap=l_h, constraint=l_b)


@dataclass(frozen=True)
class TrainingSample:
    """One training instance: float image in [0, 1] plus its ground truth."""

    subject_id: str
    image: np.ndarray  # float32 (H, W)
    landmarks: LandmarkSet
    spacing: PixelSpacing


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 150
    batch_size: int = 4
    sigma: float = DEFAULT_SIGMA
    line_width: float = DEFAULT_LINE_WIDTH
    augmentation: AugmentationFlags = field(default_factory=AugmentationFlags)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    split_ratio: float = 0.88
    base_channels: int = 12
    depth: int = 4
    decode_threshold: float = DEFAULT_THRESHOLD
    device: str = "cpu"

    def __post_init__(self):
        if self.learning_rate <= 0 or not math.isfinite(self.learning_rate):
            raise InvalidInputError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise InvalidInputError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidInputError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.split_ratio < 1.0:
            raise InvalidInputError(f"split_ratio must be in (0, 1), got {self.split_ratio}")

    def to_json_dict(self) -> dict:
        d = {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "sigma": self.sigma,
            "line_width": self.line_width,
            "alpha": self.loss_weights.alpha,
            "augmentation": {
                k: getattr(self.augmentation, k)
                for k in (
                    "rotation",
                    "translation",
                    "shear",
                    "zoom",
                    "speckle",
                    "resolution",
                    "shadow",
                    "blur",
                )
            },
            "seed": self.seed,
            "split_ratio": self.split_ratio,
            "base_channels": self.base_channels,
            "depth": self.depth,
            "decode_threshold": self.decode_threshold,
        }
        return d


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    train_heatmap_loss: float
    train_constraint_loss: float
    val_loss: float
    val_error_px: float
    val_error_mm: float

    def to_json_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "train_heatmap_loss": self.train_heatmap_loss,
            "train_constraint_loss": self.train_constraint_loss,
            "val_loss": self.val_loss,
            "val_error_px": self.val_error_px,
            "val_error_mm": self.val_error_mm,
        }


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochMetrics]
    best_epoch: int
    best_val_error_px: float


def samples_from_entries(entries: Sequence[ManifestEntry]) -> list[TrainingSample]:
    """Materialize manifest entries as training samples.

    Ground truth is the consensus mean over raters (a single rater's mean of
    its passes when only one rater annotated).
    """
    samples = []
    for entry in entries:
        image = image_to_float(entry.load_image())
        gt = resolve_ground_truth(entry, CONSENSUS_MEAN)
        samples.append(
            TrainingSample(
                subject_id=entry.subject_id,
                image=image,
                landmarks=gt,
                spacing=entry.spacing,
            )
        )
    return samples


def _split_samples(
    samples: Sequence[TrainingSample], ratio: float, seed: int
) -> tuple[list[TrainingSample], list[TrainingSample]]:
    subjects = []
    for s in samples:
        if s.subject_id not in subjects:
            subjects.append(s.subject_id)
    if len(subjects) < 2:
        raise InvalidInputError("need at least 2 subjects to split")
    rng = np.random.default_rng([seed & _U64, 0x5B17])
    order = rng.permutation(len(subjects))
    n_train = int(len(subjects) * ratio)
    if n_train == 0 or n_train == len(subjects):
        raise InvalidInputError(f"split ratio {ratio} leaves an empty side")
    train_ids = {subjects[i] for i in order[:n_train]}
    return (
        [s for s in samples if s.subject_id in train_ids],
        [s for s in samples if s.subject_id not in train_ids],
    )


def _draw_flags(rng: np.random.Generator, enabled: AugmentationFlags) -> AugmentationFlags:
    """Per-image effect selection; the rng stream shape is flag-independent."""
    geo = rng.random() < P_GEOMETRIC
    draws = rng.random(4)
    return AugmentationFlags(
        rotation=enabled.rotation and geo,
        translation=enabled.translation and geo,
        shear=enabled.shear and geo,
        zoom=enabled.zoom and geo,
        speckle=enabled.speckle and draws[0] < P_SPECKLE,
        resolution=enabled.resolution and draws[1] < P_RESOLUTION,
        shadow=enabled.shadow and draws[2] < P_SHADOW,
        blur=enabled.blur and draws[3] < P_BLUR,
    )


def _encode_batch(
    batch: list[tuple[np.ndarray, LandmarkSet]],
    sigma: float,
    line_width: float,
    device: str,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    images, heats, masks = [], [], []
    for image, landmarks in batch:
        h, w = image.shape
        images.append(image[None, :, :].astype(np.float32))
        heats.append(encode_heatmaps(landmarks, h, w, sigma).channels.astype(np.float32))
        masks.append(encode_constraints(landmarks, h, w, line_width).channels.astype(np.float32))
    to = lambda arrs: torch.from_numpy(np.stack(arrs)).to(device)
    return to(images), to(heats), to(masks)


def _mean_decode_error(
    model: CaliperNet,
    samples: Sequence[TrainingSample],
    threshold: float,
    device: str,
) -> tuple[float, float]:
    """Mean validation decode error in px and mm.

    An undecodable landmark is charged the image diagonal in px so that a
    collapsed channel cannot look better than a poor detection.
    """
    errs_px: list[float] = []
    errs_mm: list[float] = []
    for s in samples:
        x = torch.from_numpy(s.image[None, None, :, :].astype(np.float32)).to(device)
        heat_logits, _ = model(x)
        heat = torch.sigmoid(heat_logits)[0].cpu().numpy().astype(np.float64)
        result = decode_all(heat, s.landmarks.plane, threshold)
        h, w = s.image.shape
        diag_px = math.hypot(w, h)
        for name in s.landmarks.plane.landmark_names:
            gt = s.landmarks[name]
            if name in result.points:
                p = result.points[name]
                e_px = math.hypot(p.x - gt.x, p.y - gt.y)
                e_mm = math.hypot(
                    (p.x - gt.x) * s.spacing.mm_per_px_x, (p.y - gt.y) * s.spacing.mm_per_px_y
                )
            else:
                e_px = diag_px
                e_mm = diag_px * max(s.spacing.mm_per_px_x, s.spacing.mm_per_px_y)
            errs_px.append(e_px)
            errs_mm.append(e_mm)
    return float(np.mean(errs_px)), float(np.mean(errs_mm))


def train(
    samples: Sequence[TrainingSample],
    config: TrainConfig = TrainConfig(),
    val_samples: Sequence[TrainingSample] | None = None,
) -> TrainResult:
    """Fit the backbone on (image, landmarks, spacing) samples.

    When ``val_samples`` is omitted the input is split subject-disjointly at
    ``config.split_ratio``. Given a seed the whole run is reproducible, and
    the returned checkpoint carries the weights of the best-validation epoch.
    """
    if not samples:
        raise InvalidInputError("training dataset is empty")
    if val_samples is None:
        train_set, val_set = _split_samples(samples, config.split_ratio, config.seed)
    else:
        train_set, val_set = list(samples), list(val_samples)
        overlap = {s.subject_id for s in train_set} & {s.subject_id for s in val_set}
        if overlap:
            raise ConfigurationError(
                f"subjects appear in both splits: {', '.join(sorted(overlap)[:5])}"
            )
    if not train_set or not val_set:
        raise InvalidInputError("both splits must be non-empty")

    plane = train_set[0].landmarks.plane
    h, w = train_set[0].image.shape
    for s in list(train_set) + list(val_set):
        if s.image.shape != (h, w):
            raise ConfigurationError(
                f"sample {s.subject_id!r} is {s.image.shape[1]}x{s.image.shape[0]}, "
                f"expected {w}x{h}"
            )
        if s.landmarks.plane.plane_name != plane.plane_name:
            raise ConfigurationError("samples mix planes")

    backbone = BackboneConfig.for_plane(
        plane, input_height=h, input_width=w,
        base_channels=config.base_channels, depth=config.depth,
    )
    torch.manual_seed(config.seed)
    device = config.device
    model = CaliperNet(backbone).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    history: list[EpochMetrics] = []
    best_state: dict[str, torch.Tensor] | None = None
    best_err = math.inf
    best_epoch = -1
    n_train = len(train_set)
    seed = config.seed & _U64

    for epoch in range(config.epochs):
        model.train()
        order = np.random.default_rng([seed, 0xE70C, epoch]).permutation(n_train)
        tot = tot_h = tot_b = 0.0
        seen = 0
        for start in range(0, n_train, config.batch_size):
            idxs = order[start : start + config.batch_size]
            batch = []
            for i in idxs:
                s = train_set[int(i)]
                per_image = np.random.default_rng([seed, 0xA06, epoch, int(i)])
                flags = _draw_flags(per_image, config.augmentation)
                aug_seed = int(per_image.integers(0, 2**63 - 1))
                res = augment(s.image, s.landmarks, flags, aug_seed)
                batch.append((res.image, res.landmarks))
            images, heats, masks = _encode_batch(
                batch, config.sigma, config.line_width, device
            )
            optimizer.zero_grad()
            heat_logits, mask_logits = model(images)
            out = loss_components(heat_logits, mask_logits, heats, masks, config.loss_weights)
            out.total.backward()
            optimizer.step()
            k = len(batch)
            tot += float(out.total) * k
            tot_h += float(out.heatmap) * k
            tot_b += float(out.constraint) * k
            seen += k

        model.eval()
        with torch.no_grad():
            val_tot = 0.0
            for start in range(0, len(val_set), config.batch_size):
                chunk = val_set[start : start + config.batch_size]
                images, heats, masks = _encode_batch(
                    [(s.image, s.landmarks) for s in chunk],
                    config.sigma,
                    config.line_width,
                    device,
                )
                heat_logits, mask_logits = model(images)
                out = loss_components(heat_logits, mask_logits, heats, masks, config.loss_weights)
                val_tot += float(out.total) * len(chunk)
            err_px, err_mm = _mean_decode_error(
                model, val_set, config.decode_threshold, device
            )
        metrics = EpochMetrics(
            epoch=epoch,
            train_loss=tot / seen,
            train_heatmap_loss=tot_h / seen,
            train_constraint_loss=tot_b / seen,
            val_loss=val_tot / len(val_set),
            val_error_px=err_px,
            val_error_mm=err_mm,
        )
        history.append(metrics)
        if err_px < best_err:
            best_err = err_px
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    assert best_state is not None
    checkpoint = Checkpoint(
        backbone=backbone,
        plane=plane,
        state_dict=best_state,
        sigma=config.sigma,
        line_width=config.line_width,
        alpha=config.loss_weights.alpha,
        seed=config.seed,
        best_epoch=best_epoch,
        history=[m.to_json_dict() for m in history],
    )
    return TrainResult(
        checkpoint=checkpoint,
        history=history,
        best_epoch=best_epoch,
        best_val_error_px=best_err,
    )


@dataclass(frozen=True)
class InferenceResult:
    """Decoded calipers for one image; partial when channels are degenerate."""

    plane: PlaneConfig
    points: dict[str, CaliperPoint]
    confidences: dict[str, float]
    failures: dict[str, str]
    biometry: dict[str, float]  # mm, only pairs with both endpoints decoded

    @property
    def is_complete(self) -> bool:
        return not self.failures

    def landmark_set(self) -> LandmarkSet:
        from .errors import IncompleteLandmarkSetError

        if self.failures:
            raise IncompleteLandmarkSetError(self.plane.plane_name, missing=sorted(self.failures))
        return LandmarkSet(self.plane, dict(self.points))


class Predictor:
    """A loaded checkpoint ready for repeated inference."""

    def __init__(self, checkpoint: Checkpoint, device: str = "cpu"):
        self.checkpoint = checkpoint
        self.plane = checkpoint.plane
        self.device = device
        self._model = checkpoint.build_model().to(device)
        self._model.eval()

    def infer(
        self,
        image: np.ndarray,
        spacing: PixelSpacing,
        plane: PlaneConfig | None = None,
    ) -> InferenceResult:
        if plane is not None and plane.plane_name != self.plane.plane_name:
            raise ConfigurationError(
                f"checkpoint is for plane {self.plane.plane_name!r}, "
                f"requested {plane.plane_name!r}"
            )
        img = image_to_float(np.asarray(image))
        if img.ndim != 2:
            raise InvalidInputError(f"expected a 2-D grayscale image, got shape {img.shape}")
        cfg = self.checkpoint.backbone
        if img.shape != (cfg.input_height, cfg.input_width):
            raise ConfigurationError(
                f"image is {img.shape[1]}x{img.shape[0]}, checkpoint expects "
                f"{cfg.input_width}x{cfg.input_height}"
            )
        with torch.no_grad():
            x = torch.from_numpy(img[None, None, :, :].astype(np.float32)).to(self.device)
            heat_logits, _ = self._model(x)
            heat = torch.sigmoid(heat_logits)[0].cpu().numpy().astype(np.float64)
        decoded = decode_all(heat, self.plane, DEFAULT_THRESHOLD)
        biometry = {}
        for name, (a, b) in zip(self.plane.biometry_names, self.plane.biometry_pairs):
            if a in decoded.points and b in decoded.points:
                biometry[name] = math.hypot(
                    (decoded.points[a].x - decoded.points[b].x) * spacing.mm_per_px_x,
                    (decoded.points[a].y - decoded.points[b].y) * spacing.mm_per_px_y,
                )
        return InferenceResult(
            plane=self.plane,
            points=dict(decoded.points),
            confidences=dict(decoded.confidences),
            failures=dict(decoded.failures),
            biometry=biometry,
        )


def infer(
    checkpoint: Checkpoint,
    image: np.ndarray,
    spacing: PixelSpacing,
    plane: PlaneConfig | None = None,
) -> InferenceResult:
    """One-shot inference; builds the model, runs one image, decodes."""
    return Predictor(checkpoint).infer(image, spacing, plane)


def predict_entries(
    checkpoint: Checkpoint, entries: Sequence[ManifestEntry], device: str = "cpu"
) -> list[PredictionRecord]:
    """Run inference over manifest entries, one record per image."""
    predictor = Predictor(checkpoint, device)
    records = []
    for entry in entries:
        result = predictor.infer(entry.load_image(), entry.spacing)
        records.append(
            PredictionRecord(
                subject_id=entry.subject_id,
                image_path=entry.image_path,
                plane_name=entry.plane.plane_name,
                points=dict(result.points),
                confidences=dict(result.confidences),
                biometry=dict(result.biometry),
                failures=dict(result.failures),
            )
        )
    return records
