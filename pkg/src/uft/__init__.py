"""Underwater feature training toolkit.

Physically-based underwater image synthesis, distillation loss kernels
with analytic gradients (including the straight-through binarization),
binary descriptor matching, and feature/trajectory evaluation metrics,
all verifiable at desk scale.
"""

__version__ = "0.1.0"

from .errors import (
    DataError,
    EmptyCorrespondenceError,
    NumericalError,
    ParameterDomainError,
    ToolkitError,
    UsageError,
)
from .heads import (
    DescriptorField,
    Keypoint,
    binarize_ste,
    dense_descriptors,
    detect_keypoints,
    detector_probability_map,
    pack_descriptor_bits,
    unpack_descriptor_bits,
)
from .losses import LossValueGrad, LossWeights, kl_loss_grad, lp_loss, pkt_loss_grad, total_loss
from .matching import (
    CorrespondenceSet,
    HomographyRanges,
    Match,
    MatchMargins,
    build_correspondences,
    hamming_distance,
    ld_loss_grad,
    ld_loss_relaxed,
    nn_match,
    sample_homography,
)
from .trajectory import (
    SimilarityTransform,
    Trajectory,
    ate_rmse,
    resample_trajectory,
    time_offset_search,
    umeyama_align,
)
from .water import (
    RgbdFrame,
    ScenePhysics,
    SpectralWaterParams,
    WaterTypeBounds,
    background_light,
    grayscale,
    sample_water_params,
    synthesize_underwater,
)

__all__ = [
    "__version__",
    "ToolkitError",
    "UsageError",
    "DataError",
    "ParameterDomainError",
    "EmptyCorrespondenceError",
    "NumericalError",
    "SpectralWaterParams",
    "ScenePhysics",
    "RgbdFrame",
    "WaterTypeBounds",
    "background_light",
    "synthesize_underwater",
    "sample_water_params",
    "grayscale",
    "Keypoint",
    "DescriptorField",
    "detector_probability_map",
    "dense_descriptors",
    "binarize_ste",
    "pack_descriptor_bits",
    "unpack_descriptor_bits",
    "detect_keypoints",
    "LossWeights",
    "LossValueGrad",
    "kl_loss_grad",
    "pkt_loss_grad",
    "lp_loss",
    "total_loss",
    "HomographyRanges",
    "MatchMargins",
    "Match",
    "CorrespondenceSet",
    "sample_homography",
    "build_correspondences",
    "hamming_distance",
    "ld_loss_grad",
    "ld_loss_relaxed",
    "nn_match",
    "Trajectory",
    "SimilarityTransform",
    "umeyama_align",
    "ate_rmse",
    "resample_trajectory",
    "time_offset_search",
]
