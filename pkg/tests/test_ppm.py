"""Image codec tests; downscaling is checked against a numpy reference."""

import math
import random

import numpy as np
import pytest

from skyrelay.errors import TransformError
from skyrelay.ppm import downscale_to_fit, parse_ppm, write_ppm


def test_write_parse_round_trip():
    pixels = bytes(range(256)) * 3  # 256 px * 3 channels
    data = write_ppm(16, 16, pixels)
    w, h, out = parse_ppm(data)
    assert (w, h) == (16, 16)
    assert out == pixels


def test_header_tolerates_comments_and_whitespace():
    pixels = bytes(6)
    data = b"P6 # a comment\n# another\n  2\t1 \n255\n" + pixels
    w, h, out = parse_ppm(data)
    assert (w, h, out) == (2, 1, pixels)


@pytest.mark.parametrize("data", [
    b"P5\n2 1\n255\n" + bytes(6),          # wrong magic
    b"P6\n2 1\n65535\n" + bytes(12),       # unsupported depth
    b"P6\n2 1\n255\n" + bytes(5),          # truncated pixels
    b"P6\n0 1\n255\n",                     # empty dims
    b"P6\n2 x\n255\n" + bytes(6),          # non-numeric field
    b"P6\n2",                              # truncated header
])
def test_parse_rejects_malformed(data):
    with pytest.raises(TransformError):
        parse_ppm(data)


def test_downscale_noop_when_within_limit():
    pixels = bytes(i % 256 for i in range(128 * 64 * 3))
    data = write_ppm(128, 64, pixels)
    assert downscale_to_fit(data, 128) == data


def test_downscale_factor_boundary():
    # one pixel over the limit forces factor 2
    data = write_ppm(129, 10, bytes(129 * 10 * 3))
    w, h, _ = parse_ppm(downscale_to_fit(data, 128))
    assert (w, h) == (65, 5)


def test_downscale_uniform_stays_uniform():
    data = write_ppm(300, 200, bytes([7, 50, 200]) * (300 * 200))
    w, h, pixels = parse_ppm(downscale_to_fit(data, 64))
    assert max(w, h) <= 64
    assert set(pixels[0::3]) == {7}
    assert set(pixels[1::3]) == {50}
    assert set(pixels[2::3]) == {200}


def _reference_downscale(w, h, pixels, max_resolution):
    """Independent box filter: floor-of-mean per channel, edge-clipped."""
    img = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).astype(np.int64)
    f = math.ceil(max(w, h) / max_resolution)
    ow, oh = math.ceil(w / f), math.ceil(h / f)
    out = np.zeros((oh, ow, 3), dtype=np.uint8)
    for oy in range(oh):
        for ox in range(ow):
            block = img[oy * f:min((oy + 1) * f, h), ox * f:min((ox + 1) * f, w)]
            out[oy, ox] = block.reshape(-1, 3).sum(axis=0) // block[:, :, 0].size
    return ow, oh, out.tobytes()


def test_downscale_matches_reference():
    rng = random.Random(1234)
    for _ in range(40):
        w = rng.randint(1, 48)
        h = rng.randint(1, 48)
        limit = rng.randint(1, 20)
        pixels = rng.randbytes(w * h * 3)
        got_w, got_h, got = parse_ppm(downscale_to_fit(write_ppm(w, h, pixels), limit))
        ref_w, ref_h, ref = _reference_downscale(w, h, pixels, limit)
        if math.ceil(max(w, h) / limit) <= 1:
            assert (got_w, got_h, got) == (w, h, pixels)
            continue
        assert (got_w, got_h) == (ref_w, ref_h)
        assert got == ref
        assert max(got_w, got_h) <= limit


def test_downscale_rejects_bad_limit():
    data = write_ppm(4, 4, bytes(48))
    with pytest.raises(TransformError):
        downscale_to_fit(data, 0)
