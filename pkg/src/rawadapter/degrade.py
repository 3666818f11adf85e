"""Low-light / over-exposure RAW synthesis with illumination scaling plus shot and read noise.

The default noise model keeps the degraded mean at ``l * x``::

    y = l*x + n,   n ~ N(0, delta_r**2 + delta_s * l * x)

``mean_shift_noise=True`` instead draws the added term with mean ``l*x``, so
``E[y] = 2*l*x``.  Randomness comes from :class:`DeterministicRng`, which is
bit-reproducible on every platform.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .rawio import BayerImage, read_rawdesk, write_rawdesk

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

DEFAULT_L_RANGES = {"normal": (1.0, 1.0), "dark": (0.05, 0.4), "overexp": (2.5, 3.5)}


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class DeterministicRng:
    """SplitMix64 stream.

    Uniforms are ``(u64 >> 11) * 2**-53`` in ``[0, 1)``.  Each Gaussian uses two
    successive uniforms ``u1, u2``: ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def _block(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * _GOLDEN
            out = _mix(states)
        self.state = (self.state + n * int(_GOLDEN)) & MASK64
        return out

    def next_u64(self) -> int:
        return int(self._block(1)[0])

    def uniform(self, n: Optional[int] = None):
        u = (self._block(1 if n is None else n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return float(u[0]) if n is None else u

    def normal(self, n: Optional[int] = None):
        u = self.uniform(2 * (1 if n is None else n)).reshape(-1, 2)
        z = np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
        return float(z[0]) if n is None else z


def derive_seed(master: int, index: int) -> int:
    """Per-item seed: first SplitMix64 output from state ``master XOR index``."""
    return DeterministicRng((int(master) ^ int(index)) & MASK64).next_u64()


@dataclass
class DegradeConfig:
    mode: str = "dark"
    l_range: Optional[tuple] = None
    delta_r: float = 0.01
    delta_s: float = 0.02
    seed: int = 0
    mean_shift_noise: bool = False

    def __post_init__(self):
        if self.mode not in DEFAULT_L_RANGES:
            raise ValueError(f"unknown lighting mode {self.mode!r}")
        if self.l_range is None:
            self.l_range = DEFAULT_L_RANGES[self.mode]
        self.l_range = (float(self.l_range[0]), float(self.l_range[1]))
        if self.l_range[0] > self.l_range[1]:
            raise ValueError("l_range minimum exceeds maximum")
        if self.delta_r < 0 or self.delta_s < 0:
            raise ValueError("noise parameters must be nonnegative")


def sample_light_intensity(cfg: DegradeConfig, rng: DeterministicRng) -> float:
    lo, hi = cfg.l_range
    return lo + (hi - lo) * rng.uniform()


def degrade_raw(x, l: float, cfg: DegradeConfig, rng: DeterministicRng, clamp: bool = True) -> np.ndarray:
    """Scale ``x`` by light intensity ``l`` and add signal-dependent Gaussian noise.

    The output is clamped below at 0 (``clamp=False`` skips this, for moment
    tests); there is no upper clamp so over-exposure survives.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("degrade_raw needs a nonnegative input")
    mean = l * x
    var = cfg.delta_r ** 2 + cfg.delta_s * mean
    if cfg.delta_r == 0 and cfg.delta_s == 0:
        noise = np.zeros_like(x)
    else:
        noise = np.sqrt(var) * rng.normal(x.size).reshape(x.shape)
    if cfg.mean_shift_noise:
        noise = noise + mean
    y = mean + noise
    return np.maximum(y, 0.0) if clamp else y


def degrade_bayer(raw: BayerImage, cfg: DegradeConfig, seed: int) -> tuple[BayerImage, float]:
    """Degrade a stored mosaic in the linear domain and re-quantize to its code range."""
    rng = DeterministicRng(seed)
    l = sample_light_intensity(cfg, rng)
    span = float(raw.white_level - raw.black_level)
    x = np.maximum(raw.samples.astype(np.float64) - raw.black_level, 0.0) / span
    y = degrade_raw(x, l, cfg, rng)
    codes = np.floor(raw.black_level + y * span + 0.5)
    codes = np.clip(codes, 0, raw.max_code).astype(np.uint16)
    return BayerImage(raw.width, raw.height, raw.pattern, raw.bit_depth,
                      raw.black_level, raw.white_level, codes), l


def degrade_dataset(input_dir, cfg: DegradeConfig, output_dir) -> list[dict]:
    """Degrade every ``*.rawdesk`` under ``input_dir`` into ``output_dir``.

    Files are indexed in sorted-name order and seeded with
    ``derive_seed(cfg.seed, index)``.  A ``manifest.jsonl`` records
    ``{input, output, l, seed, status}`` per file; unreadable inputs are
    recorded as failed and skipped.
    """
    input_dir, output_dir = Path(input_dir), Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for index, path in enumerate(sorted(input_dir.glob("*.rawdesk"))):
        seed = derive_seed(cfg.seed, index)
        out = output_dir / path.name
        rec = {"input": str(path), "output": str(out), "l": None, "seed": seed, "status": "ok"}
        try:
            raw = read_rawdesk(path)
        except (OSError, ValueError) as exc:
            logger.warning("skipping %s: %s", path, exc)
            rec.update(output=None, status=f"failed: {exc}")
            records.append(rec)
            continue
        degraded, l = degrade_bayer(raw, cfg, seed)
        write_rawdesk(degraded, out)
        rec["l"] = l
        records.append(rec)
    with open(output_dir / "manifest.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    (output_dir / "degrade_config.json").write_text(json.dumps(asdict(cfg)))
    return records
