"""Few-shot domain adaptation toolkit for object detection datasets.

Class-balancing cut-paste augmentation, multi-level instance alignment losses
with analytic gradients, batch scheduling and detection metrics.
"""

from .balance import AugmentParams, BalanceConfig, balance_dataset, balance_with_report, compute_stats
from .batches import compose_schedule
from .dataset import (
    Annotation,
    BBox,
    DetectionDataset,
    Domain,
    ImageRecord,
    SourceFlag,
    load_dataset,
    sample_kshot,
    sample_random_images,
    save_dataset,
)
from .features import MultiLevelFeatures, pool_instances, read_feature_dump, write_feature_dump
from .losses import ClassifierHead, LossConfig, i2da_loss
from .metrics import Detection, average_precision, iou, map_suite

__version__ = "0.1.0"

__all__ = [
    "Annotation",
    "AugmentParams",
    "BBox",
    "BalanceConfig",
    "ClassifierHead",
    "Detection",
    "DetectionDataset",
    "Domain",
    "ImageRecord",
    "LossConfig",
    "MultiLevelFeatures",
    "SourceFlag",
    "average_precision",
    "balance_dataset",
    "balance_with_report",
    "compose_schedule",
    "compute_stats",
    "i2da_loss",
    "iou",
    "load_dataset",
    "map_suite",
    "pool_instances",
    "read_feature_dump",
    "sample_kshot",
    "sample_random_images",
    "save_dataset",
    "write_feature_dump",
]
