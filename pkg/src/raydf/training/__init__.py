"""Two-stage training: visibility classifier, then distance field."""

from .classifier import (
    ClassifierConfig,
    ClassifierParams,
    ClassifierResult,
    classifier_backward,
    classifier_forward,
    init_classifier,
    make_scorer,
    read_classifier,
    train_classifier,
    write_classifier,
)
from .distance import (
    DistanceConfig,
    DistanceResult,
    MultiViewBatch,
    build_multiview_batch,
    init_distance_net,
    multiview_loss,
    predict_distance,
    train_distance,
)

__all__ = [
    "ClassifierConfig", "ClassifierParams", "ClassifierResult", "classifier_backward",
    "classifier_forward", "init_classifier", "make_scorer", "read_classifier",
    "train_classifier", "write_classifier", "DistanceConfig", "DistanceResult",
    "MultiViewBatch", "build_multiview_batch", "init_distance_net", "multiview_loss",
    "predict_distance", "train_distance",
]
