"""Learnable ISP chain I1 -> I5.

Stages, in order:

* attention-based parameter predictors (``pk`` for the kernel stage, ``pm``
  for the color stage),
* gain, anisotropic Gaussian denoise and sharpening blend (I1 -> I2),
* shades-of-gray white balance with a learnable Minkowski exponent (I2 -> I3),
* a 3x3 color matrix added to the identity (I3 -> I4),
* a residual per-pixel MLP lookup table (I4 -> I5).

Weights are flat ``dict[str, ndarray]`` objects; every forward function also
accepts the same mapping with :class:`~rawadapter.numerics.Tensor` values so
gradients can be tracked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import numerics as nm
from .rawio import BayerImage, demosaic_tensor, normalize_levels

GAIN_INIT = {"normal": 1.0, "overexp": 1.0, "dark": 5.0}
R1_INIT, R2_INIT = 3.0, 2.0
R_MIN, R_MAX = 0.1, 8.0
G_MIN = 0.01
RHO_EPS = 1e-3
RHO_MAX = 50.0
MAX_WINDOW = 9
PK_QUERIES, PM_QUERIES = 5, 10
QAL_EMBED = 128
QAL_WIDTHS = (16, 32)


def sub(weights: Mapping, prefix: str) -> dict:
    """Entries of ``weights`` under ``prefix.``, with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in weights.items() if k.startswith(p)}


def prefixed(weights: Mapping, prefix: str) -> dict:
    return {f"{prefix}.{k}": v for k, v in weights.items()}


def count_params(weights: Mapping) -> int:
    return int(sum(np.asarray(v.data if isinstance(v, nm.Tensor) else v).size for v in weights.values()))


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


# -- query adaptive learning -------------------------------------------------


def init_qal(rng: np.random.Generator, n_queries: int, embed: int = QAL_EMBED,
             widths=QAL_WIDTHS, output_scale: float = 0.0) -> dict:
    """Predictor weights; the final FFN layer is ``output_scale`` times a Xavier draw (0 by default)."""
    c1, c2 = widths
    w = {
        "conv1.w": he_normal(rng, (c1, 3, 3, 3), 27), "conv1.b": np.zeros(c1),
        "conv2.w": he_normal(rng, (c2, c1, 3, 3), 9 * c1), "conv2.b": np.zeros(c2),
        "key.w": xavier_uniform(rng, embed, c2),
        "value.w": xavier_uniform(rng, embed, c2), "value.b": np.zeros(embed),
        "queries": rng.normal(0.0, 1.0, size=(n_queries, embed)),
        "ffn1.w": he_normal(rng, (embed, embed), embed), "ffn1.b": np.zeros(embed),
        "ffn2.w": output_scale * xavier_uniform(rng, 1, embed), "ffn2.b": np.zeros(1),
    }
    return w


def qal_tokens(image, w: Mapping) -> nm.Tensor:
    """Two stride-2 conv blocks, flattened to ``N x T x C`` tokens."""
    x = nm.as_tensor(image)
    if x.ndim == 3:
        x = nm.reshape(x, (1,) + x.shape)
    if x.shape[-1] < 4 or x.shape[-2] < 4:
        raise nm.ShapeError(f"predictor input {x.shape[-2]}x{x.shape[-1]} is below the 4x4 minimum")
    x = nm.relu(nm.conv2d(x, w["conv1.w"], w["conv1.b"], stride=2, pad=1))
    x = nm.relu(nm.conv2d(x, w["conv2.w"], w["conv2.b"], stride=2, pad=1))
    n, c, h, wd = x.shape
    return nm.transpose(nm.reshape(x, (n, c, h * wd)), (0, 2, 1))


def qal_attend(tokens, w: Mapping) -> nm.Tensor:
    """``FFN(softmax(q k^T / sqrt(d_k)) v)`` for token batch ``N x T x C``; returns ``N x n_q``."""
    tokens = nm.as_tensor(tokens)
    n = tokens.shape[0]
    queries = nm.as_tensor(w["queries"])
    nq, dk = queries.shape
    # a key bias only shifts every score of a query equally, so it is omitted
    k = nm.linear(tokens, w["key.w"], nm.constant(np.zeros(dk)))
    v = nm.linear(tokens, w["value.w"], w["value.b"])
    q = nm.broadcast_to(nm.reshape(queries, (1, nq, dk)), (n, nq, dk))
    scores = nm.scale(nm.matmul(q, nm.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dk))
    attended = nm.matmul(nm.softmax(scores), v)
    h = nm.relu(nm.linear(attended, w["ffn1.w"], w["ffn1.b"]))
    out = nm.linear(h, w["ffn2.w"], w["ffn2.b"])
    return nm.reshape(out, (n, nq))


def qal_forward(image, w: Mapping) -> nm.Tensor:
    """Predict one raw value per query from a ``3 x H x W`` (or batched) image."""
    return qal_attend(qal_tokens(image, w), w)


# -- parameter constraints ---------------------------------------------------


@dataclass
class KernelParams:
    g: nm.Tensor
    r1: nm.Tensor
    r2: nm.Tensor
    sigma: nm.Tensor
    theta: float = 0.0

    def values(self) -> dict:
        return {"g": self.g.item(), "r1": self.r1.item(), "r2": self.r2.item(),
                "theta": self.theta, "sigma": self.sigma.item()}


@dataclass
class ColorParams:
    rho: nm.Tensor
    e_ccm: nm.Tensor
    m: Optional[nm.Tensor] = None

    def values(self) -> dict:
        out = {"rho": self.rho.item(), "e_ccm": self.e_ccm.data.tolist()}
        if self.m is not None:
            out["m"] = self.m.data.tolist()
        return out


def constrain_kernel_params(raw_k, mode: str) -> KernelParams:
    """Map the 5 raw kernel-predictor outputs ``[g, r1, r2, theta, sigma]`` to valid values.

    The angle slot is predicted but unused; the kernel angle is fixed at 0.
    """
    raw_k = nm.reshape(nm.as_tensor(raw_k), (-1,))
    if raw_k.shape != (PK_QUERIES,):
        raise nm.ShapeError(f"expected {PK_QUERIES} kernel parameters, got {raw_k.shape}")
    g = nm.clamp(nm.add(raw_k[0], GAIN_INIT[mode]), lo=G_MIN)
    a = nm.clamp(nm.add(raw_k[1], R1_INIT), R_MIN, R_MAX)
    b = nm.clamp(nm.add(raw_k[2], R2_INIT), R_MIN, R_MAX)
    sigma = nm.sigmoid(raw_k[4])
    return KernelParams(g=g, r1=nm.maximum(a, b), r2=nm.minimum(a, b), sigma=sigma)


def constrain_color_params(raw_m) -> ColorParams:
    """Map the 10 raw matrix-predictor outputs ``[rho, ccm(9, row-major)]``."""
    raw_m = nm.reshape(nm.as_tensor(raw_m), (-1,))
    if raw_m.shape != (PM_QUERIES,):
        raise nm.ShapeError(f"expected {PM_QUERIES} color parameters, got {raw_m.shape}")
    rho = nm.minimum(nm.add(nm.relu(raw_m[0]), 1.0 + RHO_EPS), RHO_MAX)
    eye = nm.constant(np.eye(3))
    e_ccm = nm.add(eye, nm.reshape(raw_m[1:10], (3, 3)))
    return ColorParams(rho=rho, e_ccm=e_ccm)


def constrain_params(raw_k, raw_m, mode: str) -> tuple[KernelParams, ColorParams]:
    return constrain_kernel_params(raw_k, mode), constrain_color_params(raw_m)


# -- gain, denoise, sharpen --------------------------------------------------


def window_size(r1: float) -> int:
    """Smallest odd integer >= 4*r1 + 1, capped at 9 (also for a non-finite radius)."""
    if not math.isfinite(float(r1)):
        return MAX_WINDOW
    size = int(math.ceil(4.0 * float(r1) + 1.0 - 1e-12))
    if size % 2 == 0:
        size += 1
    return min(size, MAX_WINDOW)


def build_gaussian_kernel(r1, r2, theta: float, size: int) -> nm.Tensor:
    """Unit-sum anisotropic Gaussian ``exp(-(b0 x^2 + 2 b1 x y + b2 y^2))`` on a centered grid.

    ``x`` runs along columns, ``y`` along rows; the result is indexed ``[y, x]``.
    """
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {size}")
    r1, r2 = nm.as_tensor(r1), nm.as_tensor(r2)
    c, s = math.cos(theta), math.sin(theta)
    inv1 = nm.div(1.0, nm.mul(r1, r1))
    inv2 = nm.div(1.0, nm.mul(r2, r2))
    b0 = nm.add(nm.scale(inv1, c * c / 2), nm.scale(inv2, s * s / 2))
    b2 = nm.add(nm.scale(inv1, s * s / 2), nm.scale(inv2, c * c / 2))
    half = size // 2
    coords = np.arange(-half, half + 1, dtype=nm.get_dtype())
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    quad = nm.add(nm.mul(b0, nm.constant(xx * xx)), nm.mul(b2, nm.constant(yy * yy)))
    if s != 0.0:
        ratio = nm.div(r1, r2)
        b1 = nm.scale(nm.mul(inv1, nm.sub(nm.mul(ratio, ratio), 1.0)), math.sin(2 * theta) / 4)
        quad = nm.add(quad, nm.mul(nm.scale(b1, 2.0), nm.constant(xx * yy)))
    k = nm.exp(nm.scale(quad, -1.0))
    return nm.div(k, nm.sum(k))


def gain_denoise_sharpen(i1, p: KernelParams) -> nm.Tensor:
    """``I2' = (g I1) * k`` per channel (replicate border); ``I2 = I2' + (g I1 - I2') sigma``."""
    i1 = nm.as_tensor(i1)
    size = window_size(p.r1.item())
    k = build_gaussian_kernel(p.r1, p.r2, p.theta, size)
    gained = nm.mul(i1, p.g)
    smoothed = nm.filter2d(nm.pad_replicate(gained, size // 2), k)
    return nm.add(smoothed, nm.mul(nm.sub(gained, smoothed), p.sigma))


# -- white balance and color matrix ------------------------------------------


def sog_white_balance(i2, rho) -> tuple[nm.Tensor, nm.Tensor]:
    """Shades-of-gray multipliers ``m_c = M_rho(I2_c) / M_rho(I2)`` applied per channel.

    ``M_rho`` is the Minkowski rho-mean.  An all-zero image gets ``m = (1, 1, 1)``.
    """
    i2 = nm.as_tensor(i2)
    rho = nm.as_tensor(rho)
    c, h, w = i2.shape
    if not np.any(i2.data):
        return i2, nm.constant(np.ones(c))
    powered = nm.power(i2, rho)
    inv = nm.div(1.0, rho)
    per_channel = nm.power(nm.mean(powered, axis=(1, 2)), inv)
    overall = nm.power(nm.mean(powered), inv)
    m = nm.div(per_channel, overall)
    i3 = nm.mul(i2, nm.broadcast_to(nm.reshape(m, (c, 1, 1)), (c, h, w)))
    return i3, m


def _pixels(image) -> nm.Tensor:
    c, h, w = image.shape
    return nm.transpose(nm.reshape(image, (c, h * w)), (1, 0))


def _unpixels(rows, h: int, w: int) -> nm.Tensor:
    return nm.reshape(nm.transpose(rows, (1, 0)), (rows.shape[1], h, w))


def apply_ccm(i3, e_ccm) -> nm.Tensor:
    """Right-multiply every pixel row vector by the 3x3 matrix ``e_ccm``."""
    i3 = nm.as_tensor(i3)
    _, h, w = i3.shape
    return _unpixels(nm.matmul(_pixels(i3), nm.as_tensor(e_ccm)), h, w)


# -- neural implicit LUT -----------------------------------------------------


def nilut_param_count(d: int) -> int:
    return 3 * d * d + 10 * d + 3


def init_nilut(rng: np.random.Generator, d: int = 32, output_scale: float = 0.0) -> dict:
    w = {"in.w": xavier_uniform(rng, d, 3), "in.b": np.zeros(d)}
    for i in (1, 2, 3):
        w[f"h{i}.w"] = xavier_uniform(rng, d, d)
        w[f"h{i}.b"] = np.zeros(d)
    w["out.w"] = output_scale * xavier_uniform(rng, 3, d)
    w["out.b"] = np.zeros(3)
    return w


def nilut_mlp(rows, w: Mapping) -> nm.Tensor:
    """Residual color MLP on ``P x 3`` rows (unclamped)."""
    rows = nm.as_tensor(rows)
    h = nm.tanh(nm.linear(rows, w["in.w"], w["in.b"]))
    for i in (1, 2, 3):
        h = nm.tanh(nm.linear(h, w[f"h{i}.w"], w[f"h{i}.b"]))
    return nm.add(rows, nm.linear(h, w["out.w"], w["out.b"]))


def nilut_apply(i4, w: Mapping) -> nm.Tensor:
    i4 = nm.as_tensor(i4)
    _, h, wd = i4.shape
    return nm.relu(_unpixels(nilut_mlp(_pixels(i4), w), h, wd))


# -- full chain --------------------------------------------------------------


@dataclass
class IspTrace:
    """Stages I1..I5 (``3 x H x W`` tensors) and the parameters that produced them."""

    i1: nm.Tensor
    i2: nm.Tensor
    i3: nm.Tensor
    i4: nm.Tensor
    i5: nm.Tensor
    kernel_params: Optional[KernelParams] = None
    color_params: Optional[ColorParams] = None
    extras: dict = field(default_factory=dict)

    @property
    def stages(self) -> list:
        return [self.i1, self.i2, self.i3, self.i4, self.i5]

    def stage_image(self, k: int) -> np.ndarray:
        """Stage ``k`` (1-based) as an ``H x W x 3`` array."""
        return np.ascontiguousarray(self.stages[k - 1].data.transpose(1, 2, 0))


def init_input_adapters(rng: np.random.Generator, lut_dim: int = 32, output_scale: float = 0.0) -> dict:
    """``pk.*``, ``pm.*`` and ``lut.*`` weights; zero output layers make the chain an identity."""
    w = {}
    w.update(prefixed(init_qal(rng, PK_QUERIES, output_scale=output_scale), "pk"))
    w.update(prefixed(init_qal(rng, PM_QUERIES, output_scale=output_scale), "pm"))
    w.update(prefixed(init_nilut(rng, lut_dim, output_scale=output_scale), "lut"))
    return w


def first_stage(raw) -> nm.Tensor:
    """I1 as a ``3 x H x W`` tensor from a :class:`BayerImage`, an ``H x W x 3`` array or a tensor."""
    if isinstance(raw, BayerImage):
        return demosaic_tensor(nm.constant(normalize_levels(raw)), raw.pattern)
    if isinstance(raw, nm.Tensor):
        return raw
    arr = np.asarray(raw, dtype=nm.get_dtype())
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise nm.ShapeError(f"expected an H x W x 3 linear image, got {arr.shape}")
    return nm.constant(arr.transpose(2, 0, 1))


def input_adapter_forward(raw, weights: Mapping, mode: str = "normal", use_pk: bool = True,
                          use_pm: bool = True, use_lut: bool = True) -> IspTrace:
    """Run the chain; disabled stages pass their input through unchanged."""
    if mode not in GAIN_INIT:
        raise ValueError(f"unknown lighting mode {mode!r}")
    i1 = first_stage(raw)
    kp = cp = None
    if use_pk:
        pk = sub(weights, "pk")
        kp = constrain_kernel_params(qal_forward(i1, pk), mode)
        i2 = gain_denoise_sharpen(i1, kp)
    else:
        i2 = i1
    if use_pm:
        pm = sub(weights, "pm")
        cp = constrain_color_params(qal_forward(i2, pm))
        i3, cp.m = sog_white_balance(i2, cp.rho)
        i4 = apply_ccm(i3, cp.e_ccm)
    else:
        i3 = i4 = i2
    i5 = nilut_apply(i4, sub(weights, "lut")) if use_lut else i4
    return IspTrace(i1, i2, i3, i4, i5, kp, cp)
