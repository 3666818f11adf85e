"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Mapping, Optional, Union

import numpy as np

from .tensor import Tape, Tensor, precision

Point = Union[np.ndarray, Tensor, Mapping[str, np.ndarray]]


def _scalar(out) -> float:
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("grad_check: function must return a scalar Tensor")
    return float(out.data.reshape(-1)[0])


def finite_difference(fn: Callable, point: Mapping[str, np.ndarray], eps: float,
                      coords: Optional[Mapping[str, np.ndarray]] = None) -> dict:
    """Numeric gradient of ``fn(**tensors)`` by central differences per coordinate.

    ``coords`` optionally restricts each array to the given flat indices;
    other entries of the result are NaN.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    grads = {}
    for name, arr in base.items():
        g = np.full_like(arr, np.nan)
        flat = arr.reshape(-1)
        todo = range(flat.size) if coords is None else coords[name]
        for i in todo:
            orig = flat[i]
            hi, lo = orig + eps, orig - eps
            flat[i] = hi
            fp = _scalar(fn(**{k: Tensor(v.copy()) for k, v in base.items()}))
            flat[i] = lo
            fm = _scalar(fn(**{k: Tensor(v.copy()) for k, v in base.items()}))
            flat[i] = orig
            # divide by the step actually represented, not the nominal 2*eps
            g.reshape(-1)[i] = (fp - fm) / (hi - lo)
        grads[name] = g
    return grads


def analytic_gradient(fn: Callable, point: Mapping[str, np.ndarray]) -> dict:
    tape = Tape()
    leaves = {k: tape.watch(np.array(v, dtype=np.float64)) for k, v in point.items()}
    out = fn(**leaves)
    _scalar(out)
    return tape.gradient(out, leaves)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    keep = ~np.isnan(numeric)
    analytic, numeric = analytic[keep], numeric[keep]
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(fn: Callable, point: Point, eps: float = 1e-5, max_coords: Optional[int] = None,
               seed: int = 0) -> float:
    """Max relative error between backward and central differences.

    ``point`` is a single array (``fn`` takes one tensor) or a mapping of
    named arrays (``fn`` takes them as keyword arguments).  With
    ``max_coords`` only that many randomly chosen coordinates per array are
    differenced.  Runs in 64-bit.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    single = not isinstance(point, Mapping)
    if single:
        data = point.data if isinstance(point, Tensor) else point
        named = {"x": np.asarray(data, dtype=np.float64)}
        call = lambda x: fn(x)  # noqa: E731
    else:
        named = dict(point)
        call = fn
    with precision("float64"):
        ana = analytic_gradient(call, named)
        coords = None
        if max_coords is not None:
            rng = np.random.default_rng(seed)
            coords = {k: rng.choice(np.size(v), size=min(max_coords, np.size(v)), replace=False)
                      for k, v in named.items()}
        num = finite_difference(call, named, eps, coords)
    return max(relative_error(ana[k], num[k]) for k in named)
