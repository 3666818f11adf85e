"""scikit-learn style wrappers: degradation, the input-adapter ISP and the RAW segmenter.

Inputs ``X`` are either a sequence of :class:`BayerImage` or an array of
linear ``N x H x W x 3`` images (already demosaiced, values in [0, 1]).
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import numerics as nm
from .degrade import DegradeConfig, degrade_bayer, derive_seed
from .harness import trainer as T
from .harness.checkpoint import Checkpoint, load_checkpoint
from .harness.config import RunConfig
from .isp import init_input_adapters, input_adapter_forward, sub
from .rawio import BayerImage, demosaic_bilinear, normalize_levels
from .tasks.backbone import NUM_CLASSES
from .tasks.metrics import compute_miou


def check_bayer_batch(X) -> list:
    items = list(X)
    if not items:
        raise ValueError("expected at least one image")
    bad = [type(x).__name__ for x in items if not isinstance(x, BayerImage)]
    if bad:
        raise TypeError(f"expected BayerImage items, got {sorted(set(bad))}")
    return items


def check_image_batch(X) -> np.ndarray:
    """``N x 3 x H x W`` float32 linear images from Bayer images or an ``N x H x W x 3`` array."""
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], BayerImage):
        imgs = [demosaic_bilinear(normalize_levels(r), r.pattern) for r in check_bayer_batch(X)]
        shapes = {im.shape for im in imgs}
        if len(shapes) != 1:
            raise ValueError(f"all images must share one size, got {sorted(shapes)}")
        arr = np.stack(imgs)
    else:
        arr = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ValueError(f"expected an N x H x W x 3 array, got shape {arr.shape}")
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2), dtype=np.float32)


def check_label_batch(y, n: int, hw: tuple, classes: int = NUM_CLASSES) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,) + tuple(hw):
        raise ValueError(f"labels shape {y.shape} does not match images {(n,) + tuple(hw)}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integers")
    if y.min() < 0 or y.max() >= classes:
        raise ValueError(f"labels must lie in [0, {classes})")
    return y.astype(np.int64)


class RawDegrader(TransformerMixin, BaseEstimator):
    """Low-light / over-exposure synthesis; item ``i`` is seeded with ``derive_seed(seed, i)``."""

    def __init__(self, mode: str = "dark", delta_r: float = 0.01, delta_s: float = 0.02, seed: int = 0,
                 mean_shift_noise: bool = False):
        self.mode = mode
        self.delta_r = delta_r
        self.delta_s = delta_s
        self.seed = seed
        self.mean_shift_noise = mean_shift_noise

    def fit(self, X=None, y=None):
        self.config_ = DegradeConfig(self.mode, None, self.delta_r, self.delta_s, self.seed, self.mean_shift_noise)
        return self

    def transform(self, X) -> list:
        check_is_fitted(self, "config_")
        return [degrade_bayer(raw, self.config_, derive_seed(self.seed, i))[0]
                for i, raw in enumerate(check_bayer_batch(X))]


class RawAdapterISP(TransformerMixin, BaseEstimator):
    """Input adapters alone: ``transform`` returns I5 as ``N x H x W x 3``.

    ``fit`` loads the ``isp.`` weights of ``checkpoint`` or draws a zero-output
    initialization from ``seed``; it does not learn from ``X``.
    """

    def __init__(self, mode: str = "normal", use_pk: bool = True, use_pm: bool = True, use_lut: bool = True,
                 lut_dim: int = 32, seed: int = 0, checkpoint=None):
        self.mode = mode
        self.use_pk = use_pk
        self.use_pm = use_pm
        self.use_lut = use_lut
        self.lut_dim = lut_dim
        self.seed = seed
        self.checkpoint = checkpoint

    def fit(self, X=None, y=None):
        if self.checkpoint is not None:
            ckpt = self.checkpoint if isinstance(self.checkpoint, Checkpoint) else load_checkpoint(self.checkpoint)
            self.weights_ = sub(ckpt.weights, "isp")
        else:
            self.weights_ = init_input_adapters(np.random.default_rng(self.seed), lut_dim=self.lut_dim)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "weights_")
        x = check_image_batch(X)
        out = []
        with nm.precision("train"):
            for img in x:
                trace = input_adapter_forward(nm.constant(img), self.weights_, self.mode,
                                              self.use_pk, self.use_pm, self.use_lut)
                out.append(trace.stage_image(5))
        return np.stack(out)


class RawAdapterSegmenter(BaseEstimator):
    """Adapters + toy backbone + segmentation head trained jointly on RAW inputs.

    ``pretrained`` is a checkpoint path, a :class:`Checkpoint` or a weight map
    whose ``bb.``/``head.`` entries seed the backbone.  ``score`` is mIoU.
    """

    def __init__(self, mode: str = "dark", use_pk: bool = True, use_pm: bool = True, use_lut: bool = True,
                 use_m: bool = True, epochs: int = 30, batch_size: int = 8, lr: float = 1e-3,
                 optimizer: str = "adam", seed: int = 0, lut_dim: int = 32, freeze_backbone: bool = False,
                 pretrained=None):
        self.mode = mode
        self.use_pk = use_pk
        self.use_pm = use_pm
        self.use_lut = use_lut
        self.use_m = use_m
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.seed = seed
        self.lut_dim = lut_dim
        self.freeze_backbone = freeze_backbone
        self.pretrained = pretrained

    def _config(self) -> RunConfig:
        return RunConfig(mode=self.mode, use_pk=self.use_pk, use_pm=self.use_pm, use_lut=self.use_lut,
                         use_m=self.use_m, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                         optimizer=self.optimizer, seed=self.seed, lut_dim=self.lut_dim,
                         freeze_backbone=self.freeze_backbone)

    def _pretrained_weights(self) -> Optional[dict]:
        p = self.pretrained
        if p is None:
            return None
        if isinstance(p, (str, Path)):
            return load_checkpoint(p).weights
        if isinstance(p, Checkpoint):
            return p.weights
        return dict(p)

    def fit(self, X, y, X_val=None, y_val=None):
        """Train on ``(X, y)``; per-epoch metrics go to ``history_`` (on the val pair when given)."""
        cfg = self._config()
        x = check_image_batch(X)
        labels = check_label_batch(y, len(x), x.shape[-2:])
        train_idx = np.arange(len(x))
        val_idx = train_idx
        if X_val is not None:
            xv = check_image_batch(X_val)
            yv = check_label_batch(y_val, len(xv), xv.shape[-2:])
            val_idx = np.arange(len(x), len(x) + len(xv))
            x, labels = np.concatenate([x, xv]), np.concatenate([labels, yv])
        data = T.TaskData(x, labels, train_idx, val_idx)
        weights = T.init_weights(cfg, self._pretrained_weights())
        self.history_, _ = T.fit(weights, data, cfg, T.trainable_names(weights, cfg))
        self.weights_ = weights
        self.classes_ = np.arange(NUM_CLASSES)
        return self

    def decision_function(self, X) -> np.ndarray:
        """Logits ``N x K x H x W``."""
        check_is_fitted(self, "weights_")
        x = check_image_batch(X)
        cfg = self._config()
        with nm.precision("train"):
            w = {k: nm.constant(v) for k, v in self.weights_.items()}
            return np.concatenate([T.model_forward(w, x[i:i + cfg.batch_size], cfg).data
                                   for i in range(0, len(x), cfg.batch_size)])

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)

    def score(self, X, y) -> float:
        pred = self.predict(X)
        return compute_miou(pred, check_label_batch(y, len(pred), pred.shape[1:]), NUM_CLASSES)
