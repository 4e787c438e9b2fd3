"""Revocation-probability prediction for spot markets."""

from spottune.revpred.features import (
    ClassBalance,
    DatasetError,
    FeatureRecord,
    LabeledSample,
    SampleSet,
    build_dataset,
    engineer_features,
    feature_matrix,
    inference_max_price,
    label_sample,
    load_dataset,
    save_dataset,
    training_max_price,
    trimmed_delta_mean,
)
from spottune.revpred.model import (
    PredictorModel,
    TrainConfig,
    UntrainableError,
    calibrate,
    confusion_metrics,
    evaluate,
    load_model,
    predict,
    predict_proba,
    save_model,
    train,
)

__all__ = [
    "ClassBalance",
    "DatasetError",
    "FeatureRecord",
    "LabeledSample",
    "PredictorModel",
    "SampleSet",
    "TrainConfig",
    "UntrainableError",
    "build_dataset",
    "calibrate",
    "confusion_metrics",
    "engineer_features",
    "evaluate",
    "feature_matrix",
    "inference_max_price",
    "label_sample",
    "load_dataset",
    "load_model",
    "predict",
    "predict_proba",
    "save_dataset",
    "save_model",
    "train",
    "training_max_price",
    "trimmed_delta_mean",
]
