"""Model-level adapter: ISP intermediates I1..I4 fused into backbone stages 1-3.

``extract_isp_features`` turns the four stage images into the first adapter
map ``f1`` (at stage-1 resolution).  After each of stages 1-3 a merge block
concatenates the stage output with the current adapter map, adds a
zero-initialized 1x1 projection of the concatenation back onto the stage
output, and (for stages 1 and 2) emits the next adapter map with a stride-2
conv.  Zero projections make the adapted backbone identical to the plain one.
"""

from __future__ import annotations

from typing import Mapping, Optional, Sequence

import numpy as np

from . import numerics as nm
from .isp import IspTrace, sub
from .tasks.backbone import (
    STAGE_CHANNELS,
    _put,
    init_conv,
    init_res_block,
    res_block,
    stage_forward,
    stem_forward,
)

ADAPTER_CHANNELS = 32
STAGE_GROUP = 8
STAGE1_STRIDE = 4


def init_isp_features(rng: np.random.Generator, adapter: int = ADAPTER_CHANNELS) -> dict:
    group = adapter // 4
    w: dict = {}
    for i in range(1, 5):
        _put(w, f"c{i}", init_conv(rng, group, 3, 3))
    _put(w, "res1", init_res_block(rng, adapter, adapter, stride=1))
    _put(w, "res2", init_res_block(rng, adapter, adapter, stride=1))
    return w


def init_merge_block(rng: np.random.Generator, c_stage: int, adapter: int = ADAPTER_CHANNELS,
                     emit_next: bool = True) -> dict:
    w: dict = {}
    _put(w, "proj", init_conv(rng, c_stage, c_stage + adapter, 1, zero=True))
    if emit_next:
        _put(w, "out", init_conv(rng, adapter, c_stage + adapter, 3))
    return w


def init_model_adapter(rng: np.random.Generator, channels: Sequence[int] = STAGE_CHANNELS,
                       adapter: int = ADAPTER_CHANNELS) -> dict:
    w: dict = {}
    _put(w, "feat", init_isp_features(rng, adapter))
    for s in (1, 2, 3):
        _put(w, f"merge{s}", init_merge_block(rng, channels[s - 1], adapter, emit_next=s < 3))
    return w


def _stages_of(trace) -> list:
    if isinstance(trace, IspTrace):
        return trace.stages[:4]
    return list(trace)[:4]


def extract_isp_features(trace, w: Mapping, stride: int = STAGE1_STRIDE) -> nm.Tensor:
    """``f1 = ResBlocks(concat(c1(I1), c2(I2), c3(I3), c4(I4)))``.

    ``trace`` is an :class:`IspTrace` or a sequence of four ``[N,]3,H,W`` tensors.
    """
    stages = [nm.as_tensor(s) for s in _stages_of(trace)]
    shapes = {s.shape for s in stages}
    if len(stages) != 4 or len(shapes) != 1:
        raise nm.ShapeError(f"ISP stages must share one shape, got {sorted(shapes)}")
    if stages[0].ndim == 3:
        stages = [nm.reshape(s, (1,) + s.shape) for s in stages]
    feats = [nm.conv2d(s, w[f"c{i}.w"], w[f"c{i}.b"], stride=stride, pad=1)
             for i, s in enumerate(stages, start=1)]
    x = nm.concat(feats, axis=1)
    x = res_block(x, sub(w, "res1"))
    return res_block(x, sub(w, "res2"))


def merge_block(stage_feat, f_s, w: Mapping) -> tuple:
    """Return ``(stage_feat + proj(concat), f_next)``; ``f_next`` is ``None`` without an out conv."""
    stage_feat, f_s = nm.as_tensor(stage_feat), nm.as_tensor(f_s)
    if stage_feat.shape[-2:] != f_s.shape[-2:] or stage_feat.shape[0] != f_s.shape[0]:
        raise nm.ShapeError(f"merge block: stage map {stage_feat.shape} and adapter map {f_s.shape} "
                            "differ in batch or spatial extent")
    cat = nm.concat([stage_feat, f_s], axis=1)
    merged = nm.add(stage_feat, nm.conv2d(cat, w["proj.w"], w["proj.b"]))
    f_next = None
    if "out.w" in w:
        f_next = nm.relu(nm.conv2d(cat, w["out.w"], w["out.b"], stride=2, pad=1))
    return merged, f_next


def adapted_backbone_forward(i5, isp_stages, backbone: Mapping, adapter: Optional[Mapping],
                             use_m: bool = True) -> list:
    """Backbone stage features 1-4 with merge blocks after stages 1-3.

    ``isp_stages`` holds batched I1..I4 (``N x 3 x H x W``).  With ``use_m``
    false or no adapter weights this is the plain backbone forward.
    """
    h = stem_forward(nm.as_tensor(i5), backbone)
    f = None
    if use_m and adapter is not None:
        f = extract_isp_features(isp_stages, sub(adapter, "feat"))
    feats = []
    for s in range(1, 5):
        h = stage_forward(h, backbone, s)
        if f is not None and s <= 3:
            h, f = merge_block(h, f, sub(adapter, f"merge{s}"))
        feats.append(h)
    return feats
