"""Image files, pixel-quality CSVs and the ryg-v1 heatmap."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError
from .plq import PlqMap

COLORMAP_ID = "ryg-v1"
_WHITESPACE = b" \t\n\r\x0b\x0c"


def quantize(image) -> np.ndarray:
    """Unit-interval intensities to bytes, rounding half up."""
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise InputError("image contains non-finite values")
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _ppm_tokens(data: bytes, count: int):
    """First ``count`` header tokens of a netpbm file plus the offset just past the last one."""
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and (data[pos] in _WHITESPACE or data[pos] == ord("#")):
            if data[pos] == ord("#"):
                while pos < n and data[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        if pos >= n:
            raise FormatError(f"truncated PPM header: found {len(tokens)} of {count} fields", offset=pos)
        start = pos
        while pos < n and data[pos] not in _WHITESPACE and data[pos] != ord("#"):
            pos += 1
        tokens.append((data[start:pos], start))
    return tokens, pos


def decode_ppm(data: bytes) -> np.ndarray:
    tokens, pos = _ppm_tokens(data, 4)
    (magic, _), (w_tok, w_off), (h_tok, h_off), (max_tok, max_off) = tokens
    if magic != b"P6":
        raise FormatError(f"not a binary PPM: magic {magic!r}, expected b'P6'", offset=0)
    values = []
    for tok, off, name in ((w_tok, w_off, "width"), (h_tok, h_off, "height"), (max_tok, max_off, "maxval")):
        if not tok.isdigit():
            raise FormatError(f"PPM {name} {tok!r} is not a decimal integer", offset=off)
        values.append(int(tok))
    width, height, maxval = values
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval}; only 255 is supported", offset=max_off)
    if width <= 0 or height <= 0:
        raise FormatError(f"PPM dimensions must be positive, got {width}x{height}", offset=w_off)
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise FormatError("missing whitespace after PPM maxval", offset=pos)
    pos += 1
    need = width * height * 3
    if len(data) - pos < need:
        raise FormatError(f"PPM raster truncated: expected {need} bytes, got {len(data) - pos}", offset=pos)
    raster = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return raster.reshape(height, width, 3).astype(np.float64) / 255.0


def encode_ppm(image) -> bytes:
    q = quantize(image)
    if q.ndim != 3 or q.shape[2] != 3:
        raise InputError(f"PPM needs an H x W x 3 image, got shape {q.shape}")
    h, w, _ = q.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def read_image(path) -> np.ndarray:
    """Read a P6 PPM (or an 8-bit RGB PNG) as an H x W x 3 float image in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        return _read_png(path)
    return decode_ppm(path.read_bytes())


def write_image(image, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        _write_png(quantize(image), path)
    else:
        path.write_bytes(encode_ppm(image))


def _read_png(path):
    from PIL import Image

    with Image.open(path) as im:
        if im.format != "PNG":
            raise FormatError(f"{path} is not a PNG file", offset=0)
        if im.info.get("interlace"):
            raise FormatError(f"{path}: interlaced PNG is not supported", offset=0)
        if im.mode != "RGB":
            raise FormatError(f"{path}: expected 8-bit RGB PNG, got mode {im.mode}", offset=0)
        return np.asarray(im, dtype=np.uint8).astype(np.float64) / 255.0


def _write_png(pixels, path):
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(pixels), mode="RGB").save(path, format="PNG", optimize=False)


# ---------------------------------------------------------------- heatmap


@dataclass(frozen=True)
class RenderedMap:
    pixels: np.ndarray  # H x W x 3 uint8
    colormap_id: str = COLORMAP_ID


def render_heatmap(plq) -> RenderedMap:
    """Red (low pixel quality) through yellow to green (high)."""
    values = plq.values if isinstance(plq, PlqMap) else np.asarray(plq, dtype=np.float64)
    if values.ndim != 2:
        raise InputError(f"pixel-quality map must be H x W, got shape {values.shape}")
    if not np.all((values >= 0.0) & (values < 1.0)):
        raise InputError("pixel-quality values must lie in [0, 1)")
    low = values <= 0.5
    r = np.where(low, 255.0, np.floor(510.0 * (1.0 - values) + 0.5))
    g = np.where(low, np.floor(510.0 * values + 0.5), 255.0)
    pixels = np.stack([r, g, np.zeros_like(values)], axis=-1).astype(np.uint8)
    return RenderedMap(pixels)


def write_heatmap(rendered: RenderedMap, path) -> None:
    write_image(rendered.pixels.astype(np.float64) / 255.0, path)


# ---------------------------------------------------------------- CSV


def format_plq_csv(values) -> str:
    values = values.values if isinstance(values, PlqMap) else np.asarray(values, dtype=np.float64)
    return "".join(",".join(format(float(v), ".9g") for v in row) + "\n" for row in values)


def write_plq_csv(values, path) -> None:
    Path(path).write_text(format_plq_csv(values))


def read_plq_csv(path) -> np.ndarray:
    text = Path(path).read_text()
    rows = []
    offset = 0
    for line in text.splitlines(keepends=True):
        stripped = line.strip()
        if stripped:
            try:
                rows.append([float(tok) for tok in stripped.split(",")])
            except ValueError:
                raise FormatError(f"non-numeric value in pixel-quality CSV line {len(rows) + 1}", offset=offset) from None
            if len(rows[-1]) != len(rows[0]):
                raise FormatError(f"ragged pixel-quality CSV: line {len(rows)} has {len(rows[-1])} values", offset=offset)
        offset += len(line.encode("utf-8"))
    if not rows:
        raise FormatError("empty pixel-quality CSV", offset=0)
    return np.array(rows, dtype=np.float64)
