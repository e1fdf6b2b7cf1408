"""Binary PPM/PGM decoding, bilinear resizing and pixel normalisation.

Other formats (JPEG, PNG, ...) are expected to be converted to PPM before
preprocessing, e.g. ``convert meme.jpg meme.ppm``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import DecodeError, FormatError

PIXEL_MEAN = 0.5


def _read_header(data: bytes, path) -> tuple[str, int, int, int, int]:
    """Parse ``magic width height maxval`` and return them with the pixel offset."""
    fields, pos, n = [], 0, len(data)
    while len(fields) < 4:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DecodeError(f"{path}: truncated image header")
        fields.append(data[start:pos])
    if pos >= n or not data[pos : pos + 1].isspace():
        raise DecodeError(f"{path}: truncated image header")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise DecodeError(f"{path}: malformed image header") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise DecodeError(f"{path}: invalid image dimensions or maxval")
    return fields[0].decode("ascii", "replace"), width, height, maxval, pos + 1


def decode_ppm(data: bytes, path="<bytes>") -> np.ndarray:
    """Decode binary PPM (P6) or PGM (P5) into an ``H×W×3`` float array in [0, 1]."""
    if data[:2] not in (b"P6", b"P5"):
        raise FormatError(f"{path}: not a binary PPM/PGM image")
    magic, width, height, maxval, offset = _read_header(data, path)
    channels = 3 if magic == "P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    count = width * height * channels
    need = count * dtype.itemsize
    if len(data) - offset < need:
        raise DecodeError(f"{path}: pixel data truncated ({len(data) - offset} of {need} bytes)")
    pixels = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(height, width, channels)
    pixels = pixels.astype(np.float64) / maxval
    if channels == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    return pixels


def write_ppm(path, rgb: np.ndarray):
    """Write an ``H×W×3`` uint8 array as binary PPM."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def _axis_weights(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(image: np.ndarray, height: int, width: int | None = None) -> np.ndarray:
    """Half-pixel-centred bilinear resize of an ``H×W×C`` array, edges clamped."""
    width = height if width is None else width
    lo, hi, f = _axis_weights(image.shape[0], height)
    top, bottom = image[lo], image[hi]
    rows = top + f[:, None, None] * (bottom - top)
    lo, hi, f = _axis_weights(image.shape[1], width)
    left, right = rows[:, lo], rows[:, hi]
    return left + f[None, :, None] * (right - left)


def normalize_pixels(rgb01: np.ndarray, mean: float = PIXEL_MEAN) -> np.ndarray:
    """``H×W×3`` values in [0, 1] → mean-subtracted ``3×H×W`` float32."""
    return (np.transpose(rgb01, (2, 0, 1)) - mean).astype(np.float32)


def load_image(path, target_resolution: int, mean: float = PIXEL_MEAN) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DecodeError(f"{path}: cannot read image ({exc.strerror})") from exc
    rgb = decode_ppm(data, path)
    return normalize_pixels(resize_bilinear(rgb, target_resolution), mean)
