"""Segmentation metrics."""

import numpy as np


def confusion_matrix(pred, truth, classes: int = 4) -> np.ndarray:
    """``conf[t, p]`` pixel counts."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != label shape {truth.shape}")
    p, t = pred.reshape(-1).astype(np.int64), truth.reshape(-1).astype(np.int64)
    return np.bincount(t * classes + p, minlength=classes * classes).reshape(classes, classes)


def per_class_iou(pred, truth, classes: int = 4) -> np.ndarray:
    """IoU per class; NaN for classes absent from both."""
    conf = confusion_matrix(pred, truth, classes)
    inter = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), np.nan)


def compute_miou(pred, truth, classes: int = 4) -> float:
    """Mean IoU over classes present in ``pred`` or ``truth``."""
    conf = confusion_matrix(pred, truth, classes)
    inter = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    present = union > 0
    if not present.any():
        return 1.0
    return float(np.mean(inter[present] / union[present]))
