"""Toy four-stage residual backbone and a 1x1-conv segmentation head."""

from __future__ import annotations

from typing import Mapping, Optional, Sequence

import numpy as np

from .. import numerics as nm
from ..isp import he_normal, sub

STAGE_CHANNELS = (16, 32, 64, 128)
STEM_CHANNELS = 16
NUM_CLASSES = 4


def init_conv(rng, cout: int, cin: int, k: int, zero: bool = False) -> dict:
    w = np.zeros((cout, cin, k, k)) if zero else he_normal(rng, (cout, cin, k, k), cin * k * k)
    return {"w": w, "b": np.zeros(cout)}


def _put(dst: dict, prefix: str, src: dict) -> None:
    for k, v in src.items():
        dst[f"{prefix}.{k}"] = v


def init_res_block(rng, cin: int, cout: int, stride: int, zero_last: bool = False) -> dict:
    w: dict = {}
    _put(w, "conv1", init_conv(rng, cout, cin, 3))
    _put(w, "conv2", init_conv(rng, cout, cout, 3, zero=zero_last))
    if stride != 1 or cin != cout:
        _put(w, "short", init_conv(rng, cout, cin, 1))
    return w


def res_block(x, w: Mapping, stride: int = 1) -> nm.Tensor:
    """``relu(conv2(relu(conv1(x))) + shortcut(x))``; the shortcut is a 1x1 conv when shapes change."""
    h = nm.relu(nm.conv2d(x, w["conv1.w"], w["conv1.b"], stride=stride, pad=1))
    h = nm.conv2d(h, w["conv2.w"], w["conv2.b"], stride=1, pad=1)
    short = nm.conv2d(x, w["short.w"], w["short.b"], stride=stride) if "short.w" in w else x
    return nm.relu(nm.add(h, short))


def init_backbone(rng: np.random.Generator, channels: Sequence[int] = STAGE_CHANNELS,
                  stem: int = STEM_CHANNELS) -> dict:
    w: dict = {}
    _put(w, "stem", init_conv(rng, stem, 3, 3))
    cin = stem
    for s, c in enumerate(channels, start=1):
        _put(w, f"stage{s}.block1", init_res_block(rng, cin, c, stride=2))
        _put(w, f"stage{s}.block2", init_res_block(rng, c, c, stride=1))
        cin = c
    return w


def stem_forward(x, w: Mapping) -> nm.Tensor:
    return nm.relu(nm.conv2d(x, w["stem.w"], w["stem.b"], stride=2, pad=1))


def stage_forward(x, w: Mapping, s: int) -> nm.Tensor:
    """Stage ``s`` (1-based): a stride-2 residual block then a stride-1 one."""
    x = res_block(x, sub(w, f"stage{s}.block1"), stride=2)
    return res_block(x, sub(w, f"stage{s}.block2"), stride=1)


def backbone_forward(x, w: Mapping) -> list:
    """Plain forward of an ``N x 3 x H x W`` batch; returns the four stage outputs."""
    h = stem_forward(nm.as_tensor(x), w)
    feats = []
    for s in range(1, 5):
        h = stage_forward(h, w, s)
        feats.append(h)
    return feats


def stage_shapes(h: int, w: int, channels: Sequence[int] = STAGE_CHANNELS) -> list:
    """Stage ``s`` output is ``C_s x H/2^(s+1) x W/2^(s+1)`` (ceil for odd extents)."""
    out = []
    for s, c in enumerate(channels, start=1):
        for _ in range(2 if s == 1 else 1):
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        out.append((c, h, w))
    return out


def init_head(rng: Optional[np.random.Generator], channels: Sequence[int] = STAGE_CHANNELS,
              num_classes: int = NUM_CLASSES, zero: bool = False) -> dict:
    w: dict = {}
    for s, c in enumerate(channels, start=1):
        _put(w, f"proj{s}", init_conv(rng, num_classes, c, 1, zero=zero or rng is None))
    return w


def seg_head_forward(feats: Sequence, w: Mapping, out_hw: tuple) -> nm.Tensor:
    """Sum of per-stage 1x1-conv logits, each nearest-upsampled to ``out_hw``."""
    total = None
    for s, f in enumerate(feats, start=1):
        logits = nm.conv2d(f, w[f"proj{s}.w"], w[f"proj{s}.b"])
        factor = out_hw[0] // logits.shape[-2]
        if factor * logits.shape[-2] != out_hw[0] or factor * logits.shape[-1] != out_hw[1]:
            raise nm.ShapeError(f"stage {s} map {logits.shape[-2:]} does not tile output {out_hw}")
        up = nm.upsample_nearest(logits, factor)
        total = up if total is None else nm.add(total, up)
    return total
