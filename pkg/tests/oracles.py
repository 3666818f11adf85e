"""Independent brute-force reference implementations used by the tests."""

import math

import numpy as np


def conv2d_direct(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for i in range(n):
        for o in range(k):
            for y in range(ho):
                for z in range(wo):
                    acc = b[o]
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ci, y * stride + u, z * stride + v] * w[o, ci, u, v]
                    out[i, o, y, z] = acc
    return out


TILES = {"RGGB": ["RG", "GB"], "BGGR": ["BG", "GR"], "GRBG": ["GR", "BG"], "GBRG": ["GB", "RG"]}


def demosaic_direct(mosaic, pattern_name):
    """Per pixel: keep the measured value, average same-color sites in the 3x3 (replicate-padded) window."""
    h, w = mosaic.shape
    tile = TILES[pattern_name]
    color = lambda y, x: "RGB".index(tile[y % 2][x % 2])  # noqa: E731
    out = np.zeros((h, w, 3))
    for y in range(h):
        for x in range(w):
            for ch in range(3):
                if color(y, x) == ch:
                    out[y, x, ch] = mosaic[y, x]
                    continue
                vals = []
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        # replicate padding: an out-of-range site copies the clamped site, colour included
                        py, px = min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)
                        if color(py, px) == ch:
                            vals.append(mosaic[py, px])
                out[y, x, ch] = sum(vals) / len(vals)
    return out


def gaussian_kernel_direct(r1, r2, size):
    half = size // 2
    b0, b2 = 1 / (2 * r1 * r1), 1 / (2 * r2 * r2)
    k = np.zeros((size, size))
    for y in range(-half, half + 1):
        for x in range(-half, half + 1):
            k[y + half, x + half] = math.exp(-(b0 * x * x + b2 * y * y))
    return k / k.sum()


def mlp_direct(pixel, layers, acts):
    h = np.asarray(pixel, dtype=float)
    for (w, b), act in zip(layers, acts):
        h = np.array([sum(w[o, i] * h[i] for i in range(len(h))) + b[o] for o in range(w.shape[0])])
        if act == "tanh":
            h = np.array([math.tanh(v) for v in h])
    return h
