"""RAW containers, level normalization, bilinear demosaicing and display rendering.

Linear images are ``H x W x 3`` float arrays.  Inside differentiable code the
same data travels channel-first as ``3 x H x W`` tensors.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm

RAWDESK_MAGIC = b"RWDK"
RAWDESK_VERSION = 1
_HEADER = struct.Struct("<4sHIIBBHH")


class RawFormatError(ValueError):
    """Base class for malformed RAW containers."""


class BadMagicError(RawFormatError):
    pass


class TruncatedPayloadError(RawFormatError):
    pass


class SampleRangeError(RawFormatError):
    pass


class CfaPattern(enum.IntEnum):
    RGGB = 0
    BGGR = 1
    GRBG = 2
    GBRG = 3

    @property
    def tile(self) -> np.ndarray:
        """2x2 channel indices (0=R, 1=G, 2=B) by (row parity, col parity)."""
        return _TILES[self]

    def channel_index(self, h: int, w: int) -> np.ndarray:
        return np.tile(self.tile, (h // 2, w // 2))

    def masks(self, h: int, w: int) -> np.ndarray:
        """Boolean ``3 x H x W`` site masks."""
        idx = self.channel_index(h, w)
        return np.stack([idx == c for c in range(3)])

    @classmethod
    def parse(cls, value) -> "CfaPattern":
        if isinstance(value, CfaPattern):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError(f"unknown CFA pattern {value!r}") from None
        return cls(int(value))


_TILES = {
    CfaPattern.RGGB: np.array([[0, 1], [1, 2]]),
    CfaPattern.BGGR: np.array([[2, 1], [1, 0]]),
    CfaPattern.GRBG: np.array([[1, 0], [2, 1]]),
    CfaPattern.GBRG: np.array([[1, 2], [0, 1]]),
}


@dataclass(eq=False)
class BayerImage:
    """A single-channel CFA mosaic with its black/white levels."""

    width: int
    height: int
    pattern: CfaPattern
    bit_depth: int
    black_level: int
    white_level: int
    samples: np.ndarray

    def __post_init__(self):
        self.pattern = CfaPattern.parse(self.pattern)
        self.samples = np.ascontiguousarray(self.samples, dtype=np.uint16).reshape(self.height, self.width)
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image extents must be positive")
        if self.width % 2 or self.height % 2:
            raise ValueError(f"mosaic extents must be even, got {self.height}x{self.width}")
        if not 8 <= self.bit_depth <= 16:
            raise ValueError(f"bit_depth {self.bit_depth} outside [8, 16]")
        if not 0 <= self.black_level < self.white_level:
            raise ValueError("black_level must be below white_level")
        limit = (1 << self.bit_depth) - 1
        if self.samples.size and int(self.samples.max()) > limit:
            raise SampleRangeError(f"sample {int(self.samples.max())} exceeds {self.bit_depth}-bit range")

    def __eq__(self, other):
        if not isinstance(other, BayerImage):
            return NotImplemented
        return (self.header() == other.header()) and np.array_equal(self.samples, other.samples)

    def header(self) -> tuple:
        return (self.width, self.height, self.pattern, self.bit_depth, self.black_level, self.white_level)

    @property
    def max_code(self) -> int:
        return (1 << self.bit_depth) - 1


def write_rawdesk(image: BayerImage, path, version: int = RAWDESK_VERSION) -> None:
    head = _HEADER.pack(RAWDESK_MAGIC, version, image.width, image.height, int(image.pattern),
                        image.bit_depth, image.black_level, image.white_level)
    Path(path).write_bytes(head + image.samples.astype("<u2").tobytes())


def read_rawdesk(path) -> BayerImage:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != RAWDESK_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    _, _version, width, height, cfa, bit_depth, black, white = _HEADER.unpack_from(blob)
    need = width * height * 2
    payload = blob[_HEADER.size:]
    if len(payload) < need:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, expected {need}")
    samples = np.frombuffer(payload[:need], dtype="<u2").reshape(height, width)
    limit = (1 << bit_depth) - 1
    if samples.size and int(samples.max()) > limit:
        raise SampleRangeError(f"{path}: sample {int(samples.max())} exceeds {bit_depth}-bit range")
    return BayerImage(width, height, CfaPattern(cfa), bit_depth, black, white, samples.astype(np.uint16))


def read_pgm16(path, sidecar=None) -> BayerImage:
    """Import a 16-bit binary PGM (P5, big-endian) with a JSON metadata sidecar.

    The sidecar defaults to ``path`` with a ``.json`` suffix and carries
    ``pattern``, ``black_level``, ``white_level`` and ``bit_depth``.
    """
    path = Path(path)
    meta = json.loads(Path(sidecar or path.with_suffix(".json")).read_text())
    blob = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedPayloadError(f"{path}: PGM header truncated")
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5":
        raise BadMagicError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval < 256:
        raise RawFormatError(f"{path}: expected a 16-bit PGM, maxval={maxval}")
    pos += 1
    need = width * height * 2
    if len(blob) - pos < need:
        raise TruncatedPayloadError(f"{path}: PGM payload truncated")
    samples = np.frombuffer(blob[pos:pos + need], dtype=">u2").reshape(height, width)
    return BayerImage(width, height, CfaPattern.parse(meta["pattern"]), int(meta["bit_depth"]),
                      int(meta["black_level"]), int(meta["white_level"]), samples.astype(np.uint16))


def write_pgm16(image: BayerImage, path, sidecar=None) -> None:
    path = Path(path)
    head = f"P5\n{image.width} {image.height}\n65535\n".encode()
    path.write_bytes(head + image.samples.astype(">u2").tobytes())
    meta = {"pattern": image.pattern.name, "black_level": image.black_level,
            "white_level": image.white_level, "bit_depth": image.bit_depth}
    Path(sidecar or path.with_suffix(".json")).write_text(json.dumps(meta))


def normalize_levels(raw: BayerImage) -> np.ndarray:
    span = float(raw.white_level - raw.black_level)
    out = (raw.samples.astype(np.float64) - raw.black_level) / span
    return np.clip(out, 0.0, 1.0).astype(nm.get_dtype())


def _check_even(h: int, w: int) -> None:
    if h % 2 or w % 2:
        raise ValueError(f"CFA operations need even extents, got {h}x{w}")


def demosaic_tensor(mosaic, pattern) -> nm.Tensor:
    """Differentiable bilinear demosaic of an ``H x W`` mosaic to a ``3 x H x W`` tensor.

    Sites keep their measured value; each missing color is the mean of the
    same-color samples in the replicate-padded 3x3 neighbourhood.
    """
    pattern = CfaPattern.parse(pattern)
    mosaic = nm.as_tensor(mosaic)
    h, w = mosaic.shape
    _check_even(h, w)
    dtype = mosaic.dtype
    masks = pattern.masks(h, w).astype(dtype)
    counts = np.pad(masks, ((0, 0), (1, 1), (1, 1)), mode="edge")
    counts = sum(counts[:, i:i + h, j:j + w] for i in range(3) for j in range(3))
    stacked = nm.broadcast_to(nm.reshape(mosaic, (1, h, w)), (3, h, w))
    sampled = stacked * nm.constant(masks)
    sums = nm.filter2d(nm.pad_replicate(sampled, 1), nm.Tensor(np.ones((3, 3), dtype=dtype)))
    interp = sums * nm.Tensor((1.0 - masks) / counts)
    return sampled + interp


def demosaic_bilinear(mosaic, pattern) -> np.ndarray:
    """Bilinear demosaic of an ``H x W`` array; returns an ``H x W x 3`` linear image."""
    arr = np.asarray(mosaic.data if isinstance(mosaic, nm.Tensor) else mosaic)
    out = demosaic_tensor(nm.Tensor(np.asarray(arr, dtype=nm.get_dtype())), pattern)
    return np.ascontiguousarray(out.data.transpose(1, 2, 0))


def mosaic_from_rgb(image: np.ndarray, pattern) -> np.ndarray:
    """Sample the CFA-selected channel of an ``H x W x 3`` image at every site."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    _check_even(h, w)
    idx = CfaPattern.parse(pattern).channel_index(h, w)
    return np.take_along_axis(image, idx[..., None], axis=2)[..., 0]


def linear_image_from_raw(raw: BayerImage) -> np.ndarray:
    """The adapter chain's first stage: level-normalized, demosaiced ``H x W x 3`` image."""
    return demosaic_bilinear(normalize_levels(raw), raw.pattern)


def encode_display(image: np.ndarray, gamma: float = 1 / 2.2) -> np.ndarray:
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    v = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) ** gamma
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def render_display(image: np.ndarray, path, gamma: float = 1 / 2.2) -> np.ndarray:
    """Write ``image`` as an 8-bit PNG after clamping and gamma encoding; returns the bytes written."""
    from PIL import Image

    pixels = encode_display(image, gamma)
    Image.fromarray(pixels).save(path, format="PNG")
    return pixels
