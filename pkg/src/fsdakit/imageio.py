"""Lossless 8-bit RGB image files: binary PPM natively, PNG through Pillow."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(data):
            raise ImageFormatError(f"{path}: truncated PPM header")
        ch = data[pos : pos + 1]
        if ch == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end : end + 1].isspace():
                end += 1
            tokens.append(data[pos:end])
            pos = end
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: bad PPM header") from exc
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    expected = width * height * 3
    raster = data[pos : pos + expected]
    if len(raster) != expected:
        raise ImageFormatError(f"{path}: truncated PPM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).copy()


def _write_ppm(path: Path, pixels: np.ndarray) -> None:
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def read_image(path: str | Path) -> np.ndarray:
    """Return an ``(H, W, 3)`` uint8 array."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image file not found: {path}")
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pnm"):
        return _read_ppm(path)
    if suffix == ".png":
        from PIL import Image

        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    raise ImageFormatError(f"{path}: unsupported image format {suffix!r}")


def write_image(path: str | Path, pixels: np.ndarray) -> None:
    path = Path(path)
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ImageFormatError("expected an (H, W, 3) uint8 raster")
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pnm"):
        _write_ppm(path, pixels)
    elif suffix == ".png":
        from PIL import Image

        Image.fromarray(pixels).save(path)
    else:
        raise ImageFormatError(f"{path}: unsupported image format {suffix!r}")
