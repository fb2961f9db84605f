"""Pseudo-label selection, saliency-guided alignment losses and EMA teacher
updates for teacher-student domain adaptation of object detectors."""

__version__ = "0.1.0"

from .caps import (
    ConfidenceHistogram,
    PseudoLabel,
    PseudoLabelSet,
    ThresholdState,
    accumulate_histogram,
    caps_step,
    coarse_filter,
    cosine_beta,
    mode_endpoint,
    select_pseudo_labels,
    update_thresholds,
)
from .detection import BBox, Detection, PredictionBatch, argmax_class, iou, validate_detection
from .ema import WeightVector, ema_closed_form, ema_step
from .losses import (
    Discriminator,
    LossWeights,
    consensus_loss,
    detection_loss,
    grl_backward,
    image_domain_loss,
    instance_domain_loss,
    total_loss,
)
from .saliency import (
    FeatureMap,
    SaliencyMatrix,
    rasterize_saliency,
    reweight_features,
    saliency_from_ground_truth,
)
