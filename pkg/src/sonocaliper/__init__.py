"""Caliper placement toolkit for axial fetal-brain biometry.

Pipeline pieces: landmark/constraint target encoding, heatmap decoding, the
two-head backbone with its composite loss, seeded scan-style augmentation, a
synthetic phantom benchmark with exact ground truth, the evaluation battery
(per-caliper MAE, inter-rater matrices, ICC reliability), and a CLI plus
HTTP review service.
"""

from .errors import (
    CheckpointError,
    ConfigurationError,
    DegenerateChannelError,
    IncompleteLandmarkSetError,
    InvalidInputError,
    InvalidPhantomSpecError,
    LandmarkOutOfBoundsError,
    ManifestError,
    SonoCaliperError,
    StoreConflictError,
    StudyNotFoundError,
    TrainingDivergedError,
    UndefinedICCError,
)
from .geometry import (
    TC_PLANE,
    TV_PLANE,
    CaliperPoint,
    LandmarkSet,
    PixelSpacing,
    PlaneConfig,
    biometry_length,
    compute_biometry,
    plane_by_name,
)
from .encoding import (
    DEFAULT_LINE_WIDTH,
    DEFAULT_SIGMA,
    ConstraintMaskStack,
    HeatmapStack,
    encode_constraints,
    encode_heatmaps,
    gaussian_channel,
    segment_mask,
)
from .decoding import (
    DEFAULT_THRESHOLD,
    DecodeResult,
    decode_all,
    decode_landmark,
    normalize_channel,
)
from .augmentation import (
    AugmentationFlags,
    AugmentationSpec,
    augment,
    sample_spec,
    single_effect_panels,
)
from .phantom import (
    IntensityProfile,
    PhantomSpec,
    TVPhantomSpec,
    generate,
    generate_dataset,
    tc_landmarks,
    tv_landmarks,
)
from .manifest import (
    CONSENSUS_MEAN,
    PER_RATER_MEAN,
    GroundTruthPolicy,
    ManifestEntry,
    RaterAnnotation,
    load_manifest,
    resolve_ground_truth,
    save_manifest,
    subject_disjoint_split,
)
from .evaluation import (
    AblationTable,
    ErrorStat,
    EvaluationReport,
    PredictionRecord,
    ablation_report,
    caliper_error_mm,
    evaluate,
    icc_2k,
    load_predictions,
    save_predictions,
)
from .model import BackboneConfig, CaliperNet
from .training import (
    InferenceResult,
    LossWeights,
    Predictor,
    TrainConfig,
    TrainResult,
    TrainingSample,
    infer,
    loss_components,
    samples_from_entries,
    train,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .store import ReviewStore, StudyRecord
from .service import create_app

__version__ = "0.1.0"
