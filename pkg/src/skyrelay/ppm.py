"""Minimal PPM (P6) codec and box-filter downscaling.

Binary PPM is the one image format converted natively, so the worker needs
no media libraries.  Other formats would plug in beside downscale_to_fit.
"""

from __future__ import annotations

from .errors import TransformError


def _read_header_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":  # comment runs to end of line
            while pos < n and data[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise TransformError("truncated PPM header")
    return data[start:pos], pos


def parse_ppm(data: bytes) -> tuple[int, int, bytes]:
    """Return (width, height, rgb bytes); maxval must be 255."""
    if data[:2] != b"P6":
        raise TransformError("not a binary PPM (P6) image")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_header_token(data, pos)
        if not tok.isdigit():
            raise TransformError(f"bad PPM header field {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise TransformError(f"unsupported PPM maxval {maxval}")
    if width <= 0 or height <= 0:
        raise TransformError("empty PPM image")
    pos += 1  # single whitespace after maxval
    pixels = data[pos:pos + width * height * 3]
    if len(pixels) != width * height * 3:
        raise TransformError("PPM pixel data truncated")
    return width, height, pixels


def write_ppm(width: int, height: int, pixels: bytes) -> bytes:
    return b"P6\n%d %d\n255\n" % (width, height) + pixels


def downscale_to_fit(data: bytes, max_resolution: int) -> bytes:
    """Box-filter the image so neither side exceeds max_resolution."""
    if max_resolution <= 0:
        raise TransformError("max_resolution must be positive")
    width, height, pixels = parse_ppm(data)
    longest = max(width, height)
    factor = -(-longest // max_resolution)  # ceil division
    if factor <= 1:
        return write_ppm(width, height, pixels)
    out_w = -(-width // factor)
    out_h = -(-height // factor)
    out = bytearray(out_w * out_h * 3)
    for oy in range(out_h):
        y0 = oy * factor
        y1 = min(y0 + factor, height)
        for ox in range(out_w):
            x0 = ox * factor
            x1 = min(x0 + factor, width)
            rs = gs = bs = 0
            count = (y1 - y0) * (x1 - x0)
            for y in range(y0, y1):
                row = (y * width + x0) * 3
                for x in range(x1 - x0):
                    rs += pixels[row]
                    gs += pixels[row + 1]
                    bs += pixels[row + 2]
                    row += 3
            o = (oy * out_w + ox) * 3
            out[o] = rs // count
            out[o + 1] = gs // count
            out[o + 2] = bs // count
    return write_ppm(out_w, out_h, bytes(out))
