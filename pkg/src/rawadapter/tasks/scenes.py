"""Synthetic segmentation scenes rendered in sRGB and unprocessed to camera RAW.

Each scene holds 1-4 flat-shaded shapes (disk, square, triangle) over a
low-frequency textured background.  Class hues are loosely tied to shape
type so color fidelity matters, with enough jitter that geometry matters too.

Unprocessing: ``linear = srgb ** 2.2``; camera RGB is ``linear @ CAMERA_MATRIX``
scaled by ``CAMERA_GAINS``; the camera image is sampled through an RGGB CFA
and quantized to 12-bit codes.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..degrade import derive_seed
from ..rawio import BayerImage, CfaPattern, mosaic_from_rgb, read_rawdesk, write_rawdesk

SIZE = 64
CLASSES = ("background", "disk", "square", "triangle")
CLASS_HUES = {1: 0.02, 2: 0.33, 3: 0.62}
DISPLAY_GAMMA = 2.2
CAMERA_MATRIX = np.array([[0.70, 0.15, 0.10],
                          [0.20, 0.70, 0.25],
                          [0.10, 0.15, 0.65]])
CAMERA_GAINS = np.array([0.55, 1.0, 0.75])
BIT_DEPTH, BLACK_LEVEL, WHITE_LEVEL = 12, 64, 4095
MIN_SHAPE_PIXELS = 16


@dataclass
class SyntheticScene:
    srgb: np.ndarray
    labels: np.ndarray
    seed: int
    shapes: list = field(default_factory=list)

    @property
    def linear(self) -> np.ndarray:
        return srgb_to_linear(self.srgb)


def srgb_to_linear(srgb: np.ndarray) -> np.ndarray:
    return np.clip(srgb, 0.0, 1.0) ** DISPLAY_GAMMA


def linear_to_camera(linear: np.ndarray) -> np.ndarray:
    return np.clip((linear @ CAMERA_MATRIX) * CAMERA_GAINS, 0.0, 1.0)


def camera_to_raw(camera: np.ndarray, pattern=CfaPattern.RGGB) -> BayerImage:
    mosaic = mosaic_from_rgb(camera, pattern)
    span = WHITE_LEVEL - BLACK_LEVEL
    codes = np.floor(BLACK_LEVEL + mosaic * span + 0.5).astype(np.uint16)
    h, w = mosaic.shape
    return BayerImage(w, h, pattern, BIT_DEPTH, BLACK_LEVEL, WHITE_LEVEL, codes)


def _low_frequency(rng: np.random.Generator, size: int, terms: int = 3) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    field_ = np.zeros((size, size))
    for _ in range(terms):
        fx, fy = rng.uniform(0.5, 2.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    return field_ / terms


def _shape_mask(kind: int, rng: np.random.Generator, size: int) -> tuple:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    radius = rng.uniform(7.0, 15.0)
    cx, cy = rng.uniform(radius * 0.6, size - radius * 0.6, size=2)
    angle = rng.uniform(0, 2 * np.pi)
    dx, dy = xx - cx, yy - cy
    if kind == 1:
        mask = dx * dx + dy * dy <= radius * radius
    elif kind == 2:
        c, s = np.cos(angle), np.sin(angle)
        u, v = c * dx + s * dy, -s * dx + c * dy
        half = radius * 0.85
        mask = (np.abs(u) <= half) & (np.abs(v) <= half)
    else:
        verts = [(cx + radius * np.cos(angle + k * 2 * np.pi / 3),
                  cy + radius * np.sin(angle + k * 2 * np.pi / 3)) for k in range(3)]
        signs = []
        for (x0, y0), (x1, y1) in zip(verts, verts[1:] + verts[:1]):
            signs.append((x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0)
        mask = (signs[0] & signs[1] & signs[2]) | (~signs[0] & ~signs[1] & ~signs[2])
    return mask, {"kind": CLASSES[kind], "center": [float(cx), float(cy)], "radius": float(radius),
                  "angle": float(angle)}


def generate_scene(seed: int, size: int = SIZE, textured: bool = True) -> SyntheticScene:
    """Render one scene; retries internally until every shape keeps >= 16 visible pixels."""
    rng = np.random.default_rng(seed)
    while True:
        base = colorsys.hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.0, 0.25), rng.uniform(0.35, 0.7))
        img = np.empty((size, size, 3))
        img[:] = base
        if textured:
            img *= (1.0 + 0.25 * _low_frequency(rng, size))[..., None]
        labels = np.zeros((size, size), dtype=np.uint8)
        instances = np.zeros((size, size), dtype=np.int32)
        shapes = []
        for _ in range(int(rng.integers(1, 5))):
            kind = int(rng.integers(1, 4))
            mask, info = _shape_mask(kind, rng, size)
            hue = (CLASS_HUES[kind] + rng.uniform(-0.12, 0.12)) % 1.0
            color = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.45, 0.9), rng.uniform(0.45, 0.95)))
            shade = (1.0 + 0.1 * _low_frequency(rng, size, terms=2)) if textured else np.ones((size, size))
            img[mask] = color * shade[mask, None]
            labels[mask] = kind
            shapes.append(info)
            instances[mask] = len(shapes)
        visible = np.bincount(instances.reshape(-1), minlength=len(shapes) + 1)[1:]
        if visible.min() >= MIN_SHAPE_PIXELS:
            return SyntheticScene(np.clip(img, 0.0, 1.0), labels, seed, shapes)


@dataclass
class SceneDataset:
    """Clean sRGB renders (``uint8``), stored RAW mosaics and per-pixel labels."""

    srgb: np.ndarray
    raws: list
    labels: np.ndarray
    seed: int
    train_idx: np.ndarray
    val_idx: np.ndarray

    def __len__(self) -> int:
        return len(self.raws)


def generate_dataset(n: int, seed: int, val_fraction: float = 0.2, size: int = SIZE,
                     textured: bool = True) -> SceneDataset:
    """``n`` scenes seeded per index; the last ``round(n*val_fraction)`` scenes form the val split."""
    if n < 10:
        raise ValueError("generate_dataset needs n >= 10")
    srgb, raws, labels = [], [], []
    for i in range(n):
        scene = generate_scene(derive_seed(seed, i), size, textured)
        srgb.append(np.floor(scene.srgb * 255 + 0.5).astype(np.uint8))
        raws.append(camera_to_raw(linear_to_camera(scene.linear)))
        labels.append(scene.labels)
    n_val = int(round(n * val_fraction))
    idx = np.arange(n)
    return SceneDataset(np.stack(srgb), raws, np.stack(labels), seed, idx[: n - n_val], idx[n - n_val:])


def save_dataset(ds: SceneDataset, root) -> Path:
    """Write ``scenes/NNNN.{rawdesk,png,labels}`` and ``manifest.json`` under ``root``."""
    from PIL import Image

    root = Path(root)
    scenes = root / "scenes"
    scenes.mkdir(parents=True, exist_ok=True)
    for i in range(len(ds)):
        write_rawdesk(ds.raws[i], scenes / f"{i:04d}.rawdesk")
        Image.fromarray(ds.srgb[i]).save(scenes / f"{i:04d}.png", format="PNG")
        (scenes / f"{i:04d}.labels").write_bytes(ds.labels[i].astype(np.uint8).tobytes())
    manifest = {"n": len(ds), "seed": ds.seed, "size": list(ds.labels.shape[1:]), "classes": list(CLASSES),
                "train": ds.train_idx.tolist(), "val": ds.val_idx.tolist()}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def load_dataset(root, raw_dir: Optional[Path] = None) -> SceneDataset:
    """Read a dataset written by :func:`save_dataset`; ``raw_dir`` substitutes degraded mosaics."""
    from PIL import Image

    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    h, w = manifest["size"]
    scenes = root / "scenes"
    raw_dir = Path(raw_dir) if raw_dir is not None else scenes
    srgb, raws, labels = [], [], []
    for i in range(manifest["n"]):
        srgb.append(np.asarray(Image.open(scenes / f"{i:04d}.png").convert("RGB")))
        raws.append(read_rawdesk(raw_dir / f"{i:04d}.rawdesk"))
        labels.append(np.frombuffer((scenes / f"{i:04d}.labels").read_bytes(), dtype=np.uint8).reshape(h, w))
    return SceneDataset(np.stack(srgb), raws, np.stack(labels), manifest["seed"],
                        np.array(manifest["train"], dtype=int), np.array(manifest["val"], dtype=int))
