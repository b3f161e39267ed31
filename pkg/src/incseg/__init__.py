"""Weakly-supervised incremental semantic segmentation with online
pseudo-supervision, desk-scale reference backbone included."""

from .data import SampleRecord, derive_weak_labels, filter_step
from .metrics import ConfusionMatrix, miou
from .models import FrozenSnapshot, ModelBundle, snapshot_old_model
from .pamr import AffinityField, RefinedPseudoGT, compute_affinity, pamr_refine, \
    pseudo_gt_from_refined, sss_loss
from .pooling import classification_loss, focal_penalty, ngwp, softmax_normalize
from .priors import localization_prior_loss
from .pseudo import compose_supervision, hard_labels, segmentation_loss, \
    smooth_labels, upsample_scores
from .schedule import IncrementalSchedule, build_schedule, export_schedule, import_schedule
from .trainer import TrainConfig, evaluate, feature_distillation_loss, poly_lr, \
    total_loss, train_base, train_step

__version__ = "0.1.0"

__all__ = [
    "AffinityField",
    "ConfusionMatrix",
    "FrozenSnapshot",
    "IncrementalSchedule",
    "ModelBundle",
    "RefinedPseudoGT",
    "SampleRecord",
    "TrainConfig",
    "build_schedule",
    "classification_loss",
    "compose_supervision",
    "compute_affinity",
    "derive_weak_labels",
    "evaluate",
    "export_schedule",
    "feature_distillation_loss",
    "filter_step",
    "focal_penalty",
    "hard_labels",
    "import_schedule",
    "localization_prior_loss",
    "miou",
    "ngwp",
    "pamr_refine",
    "poly_lr",
    "pseudo_gt_from_refined",
    "segmentation_loss",
    "smooth_labels",
    "snapshot_old_model",
    "softmax_normalize",
    "sss_loss",
    "total_loss",
    "train_base",
    "train_step",
    "upsample_scores",
]
