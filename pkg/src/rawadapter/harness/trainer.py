"""Training, evaluation and pretraining loops for the toy RAW segmentation task.

Weights live in one flat ``name -> float32 array`` map with prefixes
``isp.`` (input adapters), ``madapter.`` (model adapter), ``bb.`` (backbone)
and ``head.``.  Every module is initialized from its own seeded stream, so
toggling one module does not change another's initialization.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .. import numerics as nm
from ..degrade import DegradeConfig, degrade_bayer, derive_seed
from ..isp import init_input_adapters, input_adapter_forward, prefixed, sub
from ..model_adapters import adapted_backbone_forward, init_model_adapter
from ..rawio import demosaic_bilinear, normalize_levels
from ..tasks.backbone import NUM_CLASSES, backbone_forward, init_backbone, init_head, seg_head_forward
from ..tasks.metrics import compute_miou
from ..tasks.scenes import SceneDataset, generate_dataset, load_dataset
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .optim import make_optimizer

logger = logging.getLogger(__name__)

_STREAMS = {"isp": 1, "madapter": 2, "bb": 3, "head": 4}


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class TaskData:
    """Network-ready arrays: ``inputs`` are ``N x 3 x H x W`` float32."""

    inputs: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    light: Optional[np.ndarray] = None


_DATA_CACHE: dict = {}


def _scenes(cfg: RunConfig) -> SceneDataset:
    key = ("scenes", cfg.dataset, cfg.n_scenes, cfg.data_seed, cfg.val_fraction)
    if key not in _DATA_CACHE:
        if cfg.dataset:
            _DATA_CACHE[key] = load_dataset(cfg.dataset)
        else:
            _DATA_CACHE[key] = generate_dataset(cfg.n_scenes, cfg.data_seed, cfg.val_fraction)
    return _DATA_CACHE[key]


def degrade_config(cfg: RunConfig) -> DegradeConfig:
    return DegradeConfig(mode=cfg.mode, delta_r=cfg.delta_r, delta_s=cfg.delta_s,
                         seed=cfg.degrade_seed, mean_shift_noise=cfg.mean_shift_noise)


def raw_task_data(cfg: RunConfig) -> TaskData:
    """Degrade every stored mosaic for ``cfg.mode`` and demosaic it to I1 (cached per process)."""
    key = ("raw", cfg.dataset, cfg.n_scenes, cfg.data_seed, cfg.val_fraction, cfg.mode,
           cfg.delta_r, cfg.delta_s, cfg.degrade_seed, cfg.mean_shift_noise)
    if key not in _DATA_CACHE:
        ds = _scenes(cfg)
        dcfg = degrade_config(cfg)
        inputs, light = [], []
        for i, raw in enumerate(ds.raws):
            degraded, l = degrade_bayer(raw, dcfg, derive_seed(dcfg.seed, i))
            inputs.append(demosaic_bilinear(normalize_levels(degraded), degraded.pattern).transpose(2, 0, 1))
            light.append(l)
        _DATA_CACHE[key] = TaskData(np.stack(inputs).astype(np.float32), ds.labels.astype(np.int64),
                                    ds.train_idx, ds.val_idx, np.array(light))
    return _DATA_CACHE[key]


def srgb_task_data(cfg: RunConfig) -> TaskData:
    ds = _scenes(cfg)
    x = (ds.srgb.astype(np.float32) / 255.0).transpose(0, 3, 1, 2)
    return TaskData(np.ascontiguousarray(x), ds.labels.astype(np.int64), ds.train_idx, ds.val_idx)


def clear_cache() -> None:
    _DATA_CACHE.clear()


def _stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, _STREAMS[name]])


def init_weights(cfg: RunConfig, pretrained: Optional[dict] = None) -> dict:
    """Fresh weights for every module; ``bb.``/``head.`` entries of ``pretrained`` replace the fresh ones."""
    w = {}
    w.update(prefixed(init_input_adapters(_stream(cfg.seed, "isp"), lut_dim=cfg.lut_dim), "isp"))
    w.update(prefixed(init_model_adapter(_stream(cfg.seed, "madapter")), "madapter"))
    w.update(prefixed(init_backbone(_stream(cfg.seed, "bb")), "bb"))
    w.update(prefixed(init_head(_stream(cfg.seed, "head"), zero=True), "head"))
    if pretrained:
        for k, v in pretrained.items():
            if k.startswith(("bb.", "head.")):
                if k not in w or w[k].shape != np.shape(v):
                    raise ValueError(f"pretrained tensor {k} does not match the backbone layout")
                w[k] = np.asarray(v)
    # always copy: the optimizer updates in place and must never touch the caller's arrays
    return {k: np.array(v, dtype=np.float32) for k, v in w.items()}


def trainable_names(weights: dict, cfg: RunConfig, isp: bool = True) -> list:
    prefixes = []
    if isp:
        prefixes += [f"isp.{p}." for p, on in (("pk", cfg.use_pk), ("pm", cfg.use_pm), ("lut", cfg.use_lut)) if on]
        if cfg.use_m:
            prefixes.append("madapter.")
    # the head stays trainable: it starts at zero, so freezing it would also starve the adapters
    prefixes.append("head.")
    if not cfg.freeze_backbone:
        prefixes.append("bb.")
    return sorted(k for k in weights if k.startswith(tuple(prefixes)))


def uses_isp(cfg: RunConfig) -> bool:
    return cfg.use_pk or cfg.use_pm or cfg.use_lut


def model_forward(w: dict, x: np.ndarray, cfg: RunConfig, plain: bool = False) -> nm.Tensor:
    """Logits ``N x K x H x W`` for a batch of I1 images (or sRGB images with ``plain``)."""
    h, wd = x.shape[-2:]
    if plain:
        feats = backbone_forward(nm.constant(x), sub(w, "bb"))
        return seg_head_forward(feats, sub(w, "head"), (h, wd))
    if uses_isp(cfg):
        isp = sub(w, "isp")
        traces = [input_adapter_forward(nm.constant(img), isp, cfg.mode, cfg.use_pk, cfg.use_pm, cfg.use_lut)
                  for img in x]

        def batch(k):
            return nm.concat([nm.reshape(t.stages[k], (1,) + t.stages[k].shape) for t in traces], axis=0)

        i5 = batch(4)
        stages = [batch(k) for k in range(4)] if cfg.use_m else None
    else:
        i5 = nm.constant(x)
        stages = [i5] * 4
    feats = adapted_backbone_forward(i5, stages, sub(w, "bb"), sub(w, "madapter"), use_m=cfg.use_m)
    return seg_head_forward(feats, sub(w, "head"), (h, wd))


def evaluate(weights: dict, data: TaskData, cfg: RunConfig, idx=None, plain: bool = False) -> dict:
    """Mean cross-entropy and dataset-level mIoU over ``idx`` (default: the val split)."""
    idx = data.val_idx if idx is None else np.asarray(idx)
    with nm.precision("train"):
        w = {k: nm.constant(v) for k, v in weights.items()}
        losses, preds = [], []
        for start in range(0, len(idx), cfg.batch_size):
            b = idx[start:start + cfg.batch_size]
            logits = model_forward(w, data.inputs[b], cfg, plain)
            losses.append(nm.softmax_cross_entropy(logits, data.labels[b]).item() * len(b))
            preds.append(np.argmax(logits.data, axis=1))
    pred = np.concatenate(preds)
    return {"loss": float(np.sum(losses) / len(idx)),
            "miou": compute_miou(pred, data.labels[idx], NUM_CLASSES),
            "pred": pred}


def _epoch_order(cfg: RunConfig, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([cfg.seed, 1000 + epoch]).permutation(n)


def _lr_at(cfg: RunConfig, epoch: int) -> float:
    if cfg.lr_step > 0:
        return cfg.lr * cfg.lr_gamma ** ((epoch - 1) // cfg.lr_step)
    return cfg.lr


def fit(weights: dict, data: TaskData, cfg: RunConfig, names: list, plain: bool = False,
        optimizer=None, history: Optional[list] = None, log: Optional[Callable] = None):
    """Optimize ``weights[names]`` in place for epochs ``len(history) .. cfg.epochs``.

    Returns ``(history, optimizer)``.  ``history`` entries are
    ``{epoch, loss, val_loss, miou}``; epoch 0 is the evaluation at the
    starting point and carries ``loss = None``.
    """
    optimizer = optimizer or make_optimizer(cfg)
    history = list(history or [])
    if not history:
        ev = evaluate(weights, data, cfg, plain=plain)
        history.append({"epoch": 0, "loss": None, "val_loss": ev["loss"], "miou": ev["miou"]})
        if log:
            log(history[-1])
    train_idx = data.train_idx
    step = optimizer.step_count
    for epoch in range(len(history), cfg.epochs + 1):
        order = train_idx[_epoch_order(cfg, epoch, len(train_idx))]
        lr, total = _lr_at(cfg, epoch), 0.0
        for start in range(0, len(order), cfg.batch_size):
            b = np.sort(order[start:start + cfg.batch_size])
            with nm.precision("train"):
                tape = nm.Tape()
                w = {k: (tape.watch(v) if k in names else nm.constant(v)) for k, v in weights.items()}
                loss = nm.softmax_cross_entropy(model_forward(w, data.inputs[b], cfg, plain), data.labels[b])
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteLossError(step, value)
                grads = tape.gradient(loss, {k: w[k] for k in names})
            optimizer.step(weights, grads, lr)
            step += 1
            total += value * len(b)
        ev = evaluate(weights, data, cfg, plain=plain)
        history.append({"epoch": epoch, "loss": total / len(order), "val_loss": ev["loss"], "miou": ev["miou"]})
        if log:
            log(history[-1])
    return history, optimizer


def _checkpoint(weights, cfg, history, optimizer, kind) -> Checkpoint:
    meta, tensors = optimizer.state() if optimizer is not None else ({}, {})
    return Checkpoint(weights, cfg.to_dict(), history, meta, tensors, {"kind": kind})


def _json_log(path):
    if path is None:
        return None
    fh = open(path, "w")

    def write(rec):
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()

    write.close = fh.close
    return write


def pretrain_backbone(cfg: RunConfig, epochs: Optional[int] = None, out: Optional[Path] = None,
                      log_path=None) -> Checkpoint:
    """Train backbone + head on the clean sRGB renders (the stand-in for large-scale pretraining)."""
    pcfg = cfg.replace(epochs=cfg.pretrain_epochs if epochs is None else epochs, freeze_backbone=False)
    weights = {k: v for k, v in init_weights(pcfg).items() if k.startswith(("bb.", "head."))}
    data = srgb_task_data(pcfg)
    log = _json_log(log_path)
    history, opt = fit(weights, data, pcfg, sorted(weights), plain=True, log=log)
    if log:
        log.close()
    ckpt = _checkpoint(weights, pcfg, history, opt, "pretrain")
    if out is not None:
        save_checkpoint(ckpt, out)
    return ckpt


def _pretrained_weights(cfg: RunConfig) -> Optional[dict]:
    if not cfg.pretrained:
        return None
    return load_checkpoint(cfg.pretrained).weights


def train(cfg: RunConfig, out: Optional[Path] = None, log_path=None, resume: Optional[Checkpoint] = None,
          pretrained: Optional[dict] = None) -> Checkpoint:
    """Jointly optimize the enabled adapters and the backbone on degraded RAW scenes."""
    data = raw_task_data(cfg)
    if resume is not None:
        weights = {k: v.copy() for k, v in resume.weights.items()}
        optimizer = make_optimizer(cfg)
        if resume.optimizer:
            optimizer.load_state(resume.optimizer, resume.optimizer_tensors)
        history = resume.history
    else:
        weights = init_weights(cfg, pretrained if pretrained is not None else _pretrained_weights(cfg))
        optimizer, history = None, None
    names = trainable_names(weights, cfg)
    log = _json_log(log_path)
    if log and history:
        for rec in history:
            log(rec)
    history, optimizer = fit(weights, data, cfg, names, optimizer=optimizer, history=history, log=log)
    if log:
        log.close()
    ckpt = _checkpoint(weights, cfg, history, optimizer, "train")
    if out is not None:
        save_checkpoint(ckpt, out)
    return ckpt


def final_miou(ckpt: Checkpoint) -> float:
    return float(ckpt.history[-1]["miou"])
