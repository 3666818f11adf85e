"""Registered finite-difference gradient checks for primitives, stages and the full chain.

Each check draws a random instance from a seeded generator and reduces the
output to a scalar with a random projection, so every output coordinate
contributes.  Functions are looked up on their modules at call time, which
lets tests substitute a primitive and watch its check fail.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .. import isp
from .. import model_adapters as ma
from .. import numerics as nm
from .. import rawio
from ..tasks import backbone as bb

PRIMITIVE_TOL = 1e-5
CHAIN_TOL = 1e-4
CHAIN_EPS = 1e-4


@dataclass
class GradCheck:
    name: str
    kind: str
    build: Callable
    tol: float
    eps: float = 1e-5
    max_coords: Optional[int] = None


@dataclass
class CheckResult:
    name: str
    kind: str
    max_error: float
    tol: float
    instances: int
    error: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.error is None and self.max_error < self.tol


REGISTRY: dict = {}


def register(name: str, kind: str = "primitive", tol: float = PRIMITIVE_TOL, eps: float = 1e-5,
             max_coords: Optional[int] = None):
    def deco(build):
        REGISTRY[name] = GradCheck(name, kind, build, tol, eps, max_coords)
        return build
    return deco


def _project(out, rng) -> nm.Tensor:
    """``sum(out * R)`` with ``R`` fixed by the generator's current state (which is not advanced)."""
    out = nm.as_tensor(out)
    key = rng.bit_generator.state["state"]["state"] % (1 << 63)
    r = nm.constant(np.random.default_rng([key, *out.shape]).normal(size=out.shape))
    return nm.sum(nm.mul(out, r))


def _away(rng, shape, margin=0.1, scale=1.0):
    """Normal draws pushed at least ``margin`` away from 0 (for kinks)."""
    x = rng.normal(0.0, scale, size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _unary(op_name, sample):
    def build(rng):
        x = sample(rng)
        return (lambda x: _project(getattr(nm, op_name)(x), rng)), {"x": x}
    return build


register("relu")(_unary("relu", lambda r: _away(r, (3, 4))))
register("sigmoid")(_unary("sigmoid", lambda r: r.normal(0, 2, (3, 4))))
register("tanh")(_unary("tanh", lambda r: r.normal(0, 1.5, (3, 4))))
register("exp")(_unary("exp", lambda r: r.normal(0, 1, (3, 4))))
register("log")(_unary("log", lambda r: r.uniform(0.2, 3.0, (3, 4))))
register("neg")(lambda rng: ((lambda x: _project(-x, rng)), {"x": rng.normal(size=(2, 3))}))


def _binary(op_name, sample_b=None):
    def build(rng):
        a = rng.normal(size=(3, 4))
        b = sample_b(rng) if sample_b else rng.normal(size=(3, 4))
        return (lambda a, b: _project(getattr(nm, op_name)(a, b), rng)), {"a": a, "b": b}
    return build


register("add")(_binary("add"))
register("sub")(_binary("sub"))
register("mul")(_binary("mul"))
register("div")(_binary("div", lambda r: _away(r, (3, 4), margin=0.5)))


@register("add_scalar_broadcast")
def _b_add_scalar(rng):
    return (lambda a, s: _project(nm.add(a, nm.reshape(s, ())), rng)), \
        {"a": rng.normal(size=(3, 4)), "s": rng.normal(size=(1,))}


@register("scale")
def _b_scale(rng):
    c = float(rng.normal())
    return (lambda x: _project(nm.scale(x, c), rng)), {"x": rng.normal(size=(3, 4))}


@register("power_const")
def _b_power_const(rng):
    p = float(rng.uniform(0.3, 2.7))
    return (lambda x: _project(nm.power(x, p), rng)), {"x": rng.uniform(0.2, 2.0, (3, 4))}


@register("power_tensor")
def _b_power_tensor(rng):
    return (lambda x, p: _project(nm.power(x, nm.reshape(p, ())), rng)), \
        {"x": rng.uniform(0.2, 2.0, (3, 4)), "p": rng.uniform(0.5, 3.0, (1,))}


def _separated(rng):
    a = rng.normal(size=(3, 4))
    b = a + _away(rng, (3, 4), margin=0.1)
    return a, b


@register("maximum")
def _b_maximum(rng):
    a, b = _separated(rng)
    return (lambda a, b: _project(nm.maximum(a, b), rng)), {"a": a, "b": b}


@register("minimum")
def _b_minimum(rng):
    a, b = _separated(rng)
    return (lambda a, b: _project(nm.minimum(a, b), rng)), {"a": a, "b": b}


@register("clamp")
def _b_clamp(rng):
    x = rng.uniform(-2, 2, (4, 5))
    x = np.where(np.abs(np.abs(x) - 1.0) < 0.05, x * 1.2, x)
    return (lambda x: _project(nm.clamp(x, -1.0, 1.0), rng)), {"x": x}


@register("sum")
def _b_sum(rng):
    axis = int(rng.integers(0, 3))
    return (lambda x: _project(nm.sum(x, axis=axis), rng)), {"x": rng.normal(size=(2, 3, 4))}


@register("mean")
def _b_mean(rng):
    axis = int(rng.integers(0, 3))
    return (lambda x: _project(nm.mean(x, axis=axis, keepdims=True), rng)), {"x": rng.normal(size=(2, 3, 4))}


@register("reshape")
def _b_reshape(rng):
    return (lambda x: _project(nm.reshape(x, (4, 6)), rng)), {"x": rng.normal(size=(2, 3, 4))}


@register("transpose")
def _b_transpose(rng):
    axes = tuple(int(a) for a in rng.permutation(3))
    return (lambda x: _project(nm.transpose(x, axes), rng)), {"x": rng.normal(size=(2, 3, 4))}


@register("broadcast_to")
def _b_broadcast(rng):
    return (lambda x: _project(nm.broadcast_to(x, (3, 2, 4)), rng)), {"x": rng.normal(size=(1, 2, 4))}


@register("concat")
def _b_concat(rng):
    axis = int(rng.integers(0, 2))
    shape_b = (2, 3) if axis == 0 else (3, 2)
    return (lambda a, b: _project(nm.concat([a, b], axis=axis), rng)), \
        {"a": rng.normal(size=(3, 3)), "b": rng.normal(size=shape_b)}


@register("getitem")
def _b_getitem(rng):
    idx = np.array([0, 2, 2, 1])
    return (lambda x: _project(nm.add(x[1:3, ::2], x[idx][:2, :2]), rng)), {"x": rng.normal(size=(4, 4))}


@register("matmul")
def _b_matmul(rng):
    return (lambda a, b: _project(nm.matmul(a, b), rng)), \
        {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(2, 4, 5))}


@register("linear")
def _b_linear(rng):
    return (lambda x, w, b: _project(nm.linear(x, w, b), rng)), \
        {"x": rng.normal(size=(2, 3, 4)), "w": rng.normal(size=(5, 4)), "b": rng.normal(size=(5,))}


@register("softmax")
def _b_softmax(rng):
    return (lambda x: _project(nm.softmax(x), rng)), {"x": rng.normal(0, 2, (3, 5))}


@register("cross_entropy")
def _b_ce(rng):
    labels = rng.integers(0, 4, size=(2, 3, 3))
    return (lambda z: nm.softmax_cross_entropy(z, labels)), {"z": rng.normal(size=(2, 4, 3, 3))}


@register("conv2d")
def _b_conv2d(rng):
    stride, pad, k = int(rng.integers(1, 3)), int(rng.integers(0, 2)), int(rng.choice([1, 3]))
    pt = {"x": rng.normal(size=(2, 3, 6, 5)), "w": rng.normal(size=(4, 3, k, k)), "b": rng.normal(size=(4,))}
    return (lambda x, w, b: _project(nm.conv2d(x, w, b, stride=stride, pad=pad), rng)), pt


@register("pad_replicate")
def _b_pad(rng):
    pad = int(rng.integers(1, 4))
    return (lambda x: _project(nm.pad_replicate(x, pad), rng)), {"x": rng.normal(size=(3, 4, 5))}


@register("filter2d")
def _b_filter2d(rng):
    return (lambda x, k: _project(nm.filter2d(x, k), rng)), \
        {"x": rng.normal(size=(3, 7, 6)), "k": rng.normal(size=(3, 3))}


@register("upsample_nearest")
def _b_upsample(rng):
    f = int(rng.integers(2, 4))
    return (lambda x: _project(nm.upsample_nearest(x, f), rng)), {"x": rng.normal(size=(1, 2, 3, 3))}


# -- stages --------------------------------------------------------------------


@register("demosaic", kind="stage")
def _b_demosaic(rng):
    pattern = rawio.CfaPattern(int(rng.integers(0, 4)))
    return (lambda m: _project(rawio.demosaic_tensor(m, pattern), rng)), {"m": rng.uniform(0, 1, (6, 8))}


@register("gaussian_kernel", kind="stage")
def _b_kernel(rng):
    size = int(rng.choice([3, 5, 7, 9]))

    def fn(r):
        return _project(isp.build_gaussian_kernel(r[0], r[1], 0.0, size), rng)
    return fn, {"r": rng.uniform(0.5, 4.0, (2,))}


@register("gain_denoise_sharpen", kind="stage")
def _b_gds(rng):
    r1, r2 = sorted(rng.uniform(0.3, 2.0, 2), reverse=True)

    def fn(x, g, s):
        p = isp.KernelParams(g=nm.reshape(g, ()), r1=nm.constant(r1), r2=nm.constant(r2),
                             sigma=nm.reshape(s, ()))
        return _project(isp.gain_denoise_sharpen(x, p), rng)
    return fn, {"x": rng.uniform(0, 1, (3, 6, 7)), "g": rng.uniform(0.5, 3, (1,)), "s": rng.uniform(0.1, 0.9, (1,))}


@register("sog_white_balance", kind="stage")
def _b_sog(rng):
    def fn(x, rho):
        out, m = isp.sog_white_balance(x, nm.reshape(rho, ()))
        return nm.add(_project(out, rng), _project(m, rng))
    return fn, {"x": rng.uniform(0.1, 1, (3, 5, 4)), "rho": rng.uniform(1.0, 6.0, (1,))}


@register("apply_ccm", kind="stage")
def _b_ccm(rng):
    return (lambda x, e: _project(isp.apply_ccm(x, e), rng)), \
        {"x": rng.uniform(0, 1, (3, 4, 5)), "e": np.eye(3) + 0.2 * rng.normal(size=(3, 3))}


@register("nilut", kind="stage")
def _b_nilut(rng):
    w = isp.init_nilut(rng, d=8, output_scale=1.0)

    def fn(x, **w):
        return _project(isp.nilut_apply(x, w), rng)
    return fn, {"x": rng.uniform(0.1, 0.9, (3, 3, 4)), **w}


@register("qal_predictor", kind="stage")
def _b_qal(rng):
    w = isp.init_qal(rng, n_queries=3, embed=8, widths=(4, 6), output_scale=1.0)

    def fn(x, **w):
        return _project(isp.qal_forward(x, w), rng)
    return fn, {"x": rng.uniform(0, 1, (3, 8, 8)), **w}


@register("res_block", kind="stage")
def _b_res(rng):
    w = bb.init_res_block(rng, 3, 4, stride=2)

    def fn(x, **w):
        return _project(bb.res_block(x, w, stride=2), rng)
    return fn, {"x": rng.normal(size=(1, 3, 6, 6)), **w}


@register("merge_block", kind="stage")
def _b_merge(rng):
    w = ma.init_merge_block(rng, 4, adapter=4, emit_next=True)
    w["proj.w"] = rng.normal(0, 0.5, w["proj.w"].shape)

    def fn(h, f, **w):
        merged, nxt = ma.merge_block(h, f, w)
        return nm.add(_project(merged, rng), _project(nxt, rng))
    return fn, {"h": rng.normal(size=(1, 4, 4, 4)), "f": rng.normal(size=(1, 4, 4, 4)), **w}


@register("seg_head", kind="stage")
def _b_head(rng):
    ch = (2, 3)
    w = bb.init_head(rng, channels=ch, num_classes=3)
    labels = rng.integers(0, 3, size=(1, 8, 8))

    def fn(f1, f2, **w):
        return nm.softmax_cross_entropy(bb.seg_head_forward([f1, f2], w, (8, 8)), labels)
    return fn, {"f1": rng.normal(size=(1, 2, 4, 4)), "f2": rng.normal(size=(1, 3, 2, 2)), **w}


# -- full chain ----------------------------------------------------------------


@register("input_adapter_chain", kind="chain", tol=CHAIN_TOL, eps=CHAIN_EPS, max_coords=4)
def _b_chain(rng):
    w = isp.init_input_adapters(rng, lut_dim=8, output_scale=0.5)
    img = rng.uniform(0.05, 0.95, (8, 8, 3))
    mode = str(rng.choice(["normal", "dark", "overexp"]))

    def fn(**kw):
        return nm.mean(isp.input_adapter_forward(img, {**w, **kw}, mode).i5)
    return fn, w


def _max_error(check: GradCheck, instances: int, seed: int) -> float:
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        with nm.precision("float64"):
            fn, point = check.build(rng)
        err = nm.grad_check(fn, point, eps=check.eps, max_coords=check.max_coords, seed=i)
        worst = max(worst, err if np.isfinite(err) else np.inf)
    return worst


def run_check(name: str, instances: int = 20, seed: int = 0) -> CheckResult:
    check = REGISTRY[name]
    try:
        err = _max_error(check, instances, seed)
    except Exception as exc:  # a crashing check is a failed check
        return CheckResult(name, check.kind, float("inf"), check.tol, instances, f"{type(exc).__name__}: {exc}")
    return CheckResult(name, check.kind, err, check.tol, instances)


def run_all(instances: int = 20, seed: int = 0, names=None) -> list:
    return [run_check(n, instances, seed) for n in (names or list(REGISTRY))]


def format_report(results: list) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f"  ({r.error})" if r.error else ""
        lines.append(f"{status}  {r.kind:9s} {r.name:24s} max_rel_err={r.max_error:.3e}  tol={r.tol:.0e}{extra}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
