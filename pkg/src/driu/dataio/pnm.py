"""Binary netpbm codecs: PPM (P6) for RGB images, PGM (P5) for masks and maps.

Raw arrays are channel-first: (3, H, W) for P6 and (H, W) for P5. Samples
wider than 8 bits are stored big-endian as the format requires.
"""
import os

import numpy as np

from ..errors import FormatError
from .atomic import atomic_write

PROB_MAXVAL = 65535


def _read_token(buf, pos):
    n = len(buf)
    while True:
        while pos < n and buf[pos] in b" \t\r\n\v\f":
            pos += 1
        if pos < n and buf[pos] == ord("#"):
            while pos < n and buf[pos] not in b"\r\n":
                pos += 1
            continue
        break
    start = pos
    while pos < n and buf[pos] not in b" \t\r\n\v\f#":
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of header", offset=start)
    return buf[start:pos], start, pos


def decode_pnm(buf):
    """Decode P5/P6 bytes into ``(array, maxval)``."""
    buf = bytes(buf)
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise FormatError("not a binary PGM/PPM file (expected P5 or P6)", offset=0)
    channels = 3 if buf[:2] == b"P6" else 1
    pos = 2
    fields, starts = [], []
    for label in ("width", "height", "maxval"):
        tok, start, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"invalid {label} {tok!r}", offset=start)
        fields.append(int(tok))
        starts.append(start)
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError("image dimensions must be positive", offset=starts[0 if width < 1 else 1])
    if not 1 <= maxval <= 65535:
        raise FormatError(f"maxval {maxval} out of range", offset=starts[2])
    if pos >= len(buf) or buf[pos] not in b" \t\r\n\v\f":
        raise FormatError("missing whitespace after maxval", offset=pos)
    pos += 1

    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    need = count * dtype.itemsize
    if len(buf) - pos < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(buf) - pos}",
                          offset=len(buf))
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    data = data.astype(np.uint16 if maxval > 255 else np.uint8)
    if data.max(initial=0) > maxval:
        raise FormatError("sample value exceeds maxval", offset=pos)
    if channels == 3:
        data = data.reshape(height, width, 3).transpose(2, 0, 1)
    else:
        data = data.reshape(height, width)
    return np.ascontiguousarray(data), maxval


def encode_pnm(array, maxval):
    array = np.asarray(array)
    if array.ndim == 3 and array.shape[0] == 3:
        magic, pixels = b"P6", array.transpose(1, 2, 0)
    elif array.ndim == 2:
        magic, pixels = b"P5", array
    else:
        raise ValueError(f"expected (3,H,W) or (H,W) array, got {array.shape}")
    if not 1 <= maxval <= 65535:
        raise ValueError(f"maxval {maxval} out of range")
    if array.size and (array.min() < 0 or array.max() > maxval):
        raise ValueError("sample values outside [0, maxval]")
    h, w = array.shape[-2:]
    dtype = ">u2" if maxval > 255 else "u1"
    header = b"%s\n%d %d\n%d\n" % (magic, w, h, maxval)
    return header + np.ascontiguousarray(pixels).astype(dtype).tobytes()


def read_pnm(path):
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def write_pnm(path, array, maxval):
    data = encode_pnm(array, maxval)
    with atomic_write(path) as fh:
        fh.write(data)


def read_rgb(path):
    """PPM -> float32 (3, H, W) in [0, 1]."""
    raw, maxval = read_pnm(path)
    if raw.ndim != 3:
        raise FormatError(f"{os.fspath(path)}: expected an RGB (P6) image", offset=0)
    return (raw.astype(np.float64) / maxval).astype(np.float32)


def write_rgb(path, image):
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    write_pnm(path, np.floor(img * 255 + 0.5).astype(np.uint8), 255)


def read_mask(path):
    """PGM/PPM -> uint8 (H, W) mask; foreground iff value > maxval / 2."""
    raw, maxval = read_pnm(path)
    if raw.ndim == 3:
        raw = raw.max(axis=0)
    return (raw.astype(np.float64) > maxval / 2).astype(np.uint8)


def write_mask(path, mask):
    write_pnm(path, (np.asarray(mask) > 0).astype(np.uint8) * 255, 255)


def quantize_prob(prob):
    """Round-half-up to 16 bits, clamped so a map never stores exactly 0 or 1."""
    q = np.floor(np.asarray(prob, dtype=np.float64) * PROB_MAXVAL + 0.5)
    return np.clip(q, 1, PROB_MAXVAL - 1).astype(np.uint16)


def read_probmap(path):
    raw, maxval = read_pnm(path)
    if raw.ndim != 2:
        raise FormatError(f"{os.fspath(path)}: probability maps must be PGM", offset=0)
    return raw.astype(np.float64) / maxval


def write_probmap(path, prob):
    prob = np.asarray(prob)
    if prob.ndim == 3 and prob.shape[0] == 1:
        prob = prob[0]
    write_pnm(path, quantize_prob(prob), PROB_MAXVAL)
