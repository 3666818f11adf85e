import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rawadapter import numerics as nm
from rawadapter.rawio import (
    BadMagicError,
    BayerImage,
    CfaPattern,
    SampleRangeError,
    TruncatedPayloadError,
    demosaic_bilinear,
    demosaic_tensor,
    encode_display,
    mosaic_from_rgb,
    normalize_levels,
    read_pgm16,
    read_rawdesk,
    render_display,
    write_pgm16,
    write_rawdesk,
)

from oracles import demosaic_direct


def _image(rng, h=4, w=4, bits=12, black=64, white=4095, pattern=CfaPattern.RGGB):
    return BayerImage(w, h, pattern, bits, black, white, rng.integers(0, 1 << bits, size=(h, w)))


def test_rawdesk_round_trip(tmp_path, rng):
    img = _image(rng)
    write_rawdesk(img, tmp_path / "a.rawdesk")
    back = read_rawdesk(tmp_path / "a.rawdesk")
    assert back == img and back.samples.dtype == np.uint16


def test_rawdesk_round_trip_many(tmp_path):
    gen = np.random.default_rng(5)
    for i in range(100):
        bits = int(gen.integers(8, 17))
        h, w = 2 * int(gen.integers(1, 6)), 2 * int(gen.integers(1, 6))
        white = int(gen.integers(2, 1 << bits))
        img = _image(gen, h, w, bits, int(gen.integers(0, white)), white, CfaPattern(i % 4))
        write_rawdesk(img, tmp_path / "x.rawdesk")
        assert read_rawdesk(tmp_path / "x.rawdesk") == img


def test_rawdesk_layout_is_exact(tmp_path):
    img = BayerImage(2, 2, CfaPattern.GRBG, 10, 64, 1023, np.array([[1, 2], [3, 1023]]))
    write_rawdesk(img, tmp_path / "b.rawdesk")
    blob = (tmp_path / "b.rawdesk").read_bytes()
    expected = (b"RWDK" + (1).to_bytes(2, "little") + (2).to_bytes(4, "little") + (2).to_bytes(4, "little")
                + bytes([2, 10]) + (64).to_bytes(2, "little") + (1023).to_bytes(2, "little")
                + b"".join(v.to_bytes(2, "little") for v in (1, 2, 3, 1023)))
    assert blob == expected


def test_rawdesk_errors(tmp_path, rng):
    write_rawdesk(_image(rng), tmp_path / "ok.rawdesk")
    blob = (tmp_path / "ok.rawdesk").read_bytes()
    (tmp_path / "magic.rawdesk").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(BadMagicError):
        read_rawdesk(tmp_path / "magic.rawdesk")
    (tmp_path / "short.rawdesk").write_bytes(blob[:-3])
    with pytest.raises(TruncatedPayloadError):
        read_rawdesk(tmp_path / "short.rawdesk")
    over = bytearray(blob)
    over[-2:] = (5000).to_bytes(2, "little")
    (tmp_path / "range.rawdesk").write_bytes(bytes(over))
    with pytest.raises(SampleRangeError):
        read_rawdesk(tmp_path / "range.rawdesk")
    assert not issubclass(BadMagicError, TruncatedPayloadError)


def test_bayer_image_validation(rng):
    with pytest.raises(ValueError):
        BayerImage(3, 2, CfaPattern.RGGB, 12, 0, 10, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        BayerImage(2, 2, CfaPattern.RGGB, 12, 10, 10, np.zeros((2, 2)))
    with pytest.raises(ValueError):
        BayerImage(2, 2, CfaPattern.RGGB, 7, 0, 10, np.zeros((2, 2)))


def test_pgm_import_round_trip(tmp_path, rng):
    img = _image(rng, 4, 6, bits=14, black=512, white=16383, pattern=CfaPattern.BGGR)
    write_pgm16(img, tmp_path / "c.pgm")
    meta = json.loads((tmp_path / "c.json").read_text())
    assert meta == {"pattern": "BGGR", "black_level": 512, "white_level": 16383, "bit_depth": 14}
    assert (tmp_path / "c.pgm").read_bytes()[:14].startswith(b"P5\n6 4\n65535\n")
    assert read_pgm16(tmp_path / "c.pgm") == img


def test_cfa_tiles_cover_each_site_once():
    for p in CfaPattern:
        m = p.masks(4, 6)
        assert np.array_equal(m.sum(axis=0), np.ones((4, 6)))
        assert m[1].sum() == 12


def test_normalize_levels_examples():
    img = BayerImage(2, 2, CfaPattern.RGGB, 10, 64, 1023, np.array([[64, 1023], [543, 0]]))
    v = normalize_levels(img)
    assert v[0, 0] == 0.0 and v[0, 1] == 1.0 and v[1, 1] == 0.0
    assert abs(v[1, 0] - 479 / 959) < 1e-15
    assert abs(v[1, 0] - 0.499478) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 4095), st.integers(0, 4000))
def test_normalize_levels_in_unit_interval(v, black):
    img = BayerImage(2, 2, CfaPattern.RGGB, 12, black, 4095, np.full((2, 2), v))
    out = normalize_levels(img)
    assert np.all((out >= 0) & (out <= 1))


@pytest.mark.parametrize("pattern", list(CfaPattern))
def test_demosaic_constant_and_linear(pattern, rng):
    out = demosaic_bilinear(np.full((6, 8), 0.37), pattern)
    assert np.allclose(out, 0.37, atol=1e-15, rtol=0)
    m = rng.uniform(size=(6, 8))
    assert np.max(np.abs(demosaic_bilinear(2 * m, pattern) - 2 * demosaic_bilinear(m, pattern))) < 1e-12


def test_demosaic_rggb_tile_hand_case():
    m = np.array([[0.8, 0.4], [0.2, 0.6]])
    out = demosaic_bilinear(m, CfaPattern.RGGB)
    assert np.allclose(out[..., 0], 0.8) and np.allclose(out[..., 2], 0.6)
    assert np.allclose(out[..., 1], [[0.3, 0.4], [0.2, 0.3]], atol=1e-15)
    assert np.max(np.abs(out - demosaic_direct(m, "RGGB"))) < 1e-12


@pytest.mark.parametrize("pattern", list(CfaPattern))
def test_demosaic_matches_per_pixel_oracle(pattern, rng):
    m = rng.uniform(size=(6, 8))
    assert np.max(np.abs(demosaic_bilinear(m, pattern) - demosaic_direct(m, pattern.name))) < 1e-12


def test_demosaic_rejects_odd():
    with pytest.raises(ValueError):
        demosaic_bilinear(np.zeros((3, 4)), CfaPattern.RGGB)
    with pytest.raises(ValueError):
        mosaic_from_rgb(np.zeros((4, 3, 3)), CfaPattern.RGGB)


def test_demosaic_is_differentiable(rng):
    c = rng.normal(size=(3, 4, 6))
    err = nm.grad_check(lambda m: nm.sum(nm.mul(demosaic_tensor(m, CfaPattern.GBRG), c)), rng.uniform(size=(4, 6)))
    assert err < 1e-5


@pytest.mark.parametrize("pattern", list(CfaPattern))
def test_mosaic_round_trips(pattern, rng):
    const = np.full((4, 6), 0.25)
    assert np.array_equal(mosaic_from_rgb(demosaic_bilinear(const, pattern), pattern), const)
    m = rng.uniform(size=(4, 6))
    assert np.array_equal(mosaic_from_rgb(demosaic_bilinear(m, pattern), pattern), m)


def test_mosaic_site_lookup(rng):
    red = np.zeros((4, 4, 3))
    red[..., 0] = 0.7
    m = mosaic_from_rgb(red, CfaPattern.RGGB)
    assert np.array_equal(m, np.where(CfaPattern.RGGB.masks(4, 4)[0], 0.7, 0.0))
    img = rng.uniform(size=(4, 6, 3))
    m = mosaic_from_rgb(img, CfaPattern.GRBG)
    idx = CfaPattern.GRBG.channel_index(4, 6)
    for y in range(4):
        for x in range(6):
            assert m[y, x] == img[y, x, idx[y, x]]


def test_render_display(tmp_path):
    from PIL import Image

    px = render_display(np.zeros((2, 2, 3)), tmp_path / "z.png")
    assert np.all(np.asarray(Image.open(tmp_path / "z.png")) == 0) and px.dtype == np.uint8
    assert encode_display(np.array([1.0]))[0] == 255
    assert encode_display(np.array([0.5]))[0] == 186
    assert encode_display(np.array([-1.0, 7.0])).tolist() == [0, 255]
    with pytest.raises(ValueError):
        encode_display(np.ones(2), gamma=0)
