"""Patellar texture ROI pipeline: LBP features, boosted trees, metrics and experiments."""

from ._core import (
    average_precision,
    brier,
    cli,
    delong_test,
    generate_cohort,
    lbp_code,
    lbp_histogram,
    predict_gbm,
    roc_auc,
    run_experiment,
    stratified_subject_kfold,
    train_gbm,
)

__all__ = [
    "average_precision",
    "brier",
    "cli",
    "delong_test",
    "generate_cohort",
    "lbp_code",
    "lbp_histogram",
    "predict_gbm",
    "roc_auc",
    "run_experiment",
    "stratified_subject_kfold",
    "train_gbm",
]
