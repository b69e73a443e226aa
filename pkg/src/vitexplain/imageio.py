"""Image file I/O: binary PPM/PGM (with 16-bit P5 output), PNG via Pillow,
and the heatmap overlay renderer."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import InputError

# viridis anchor colors at 0.0, 0.1, ..., 1.0
_VIRIDIS_ANCHORS = np.array(
    [
        (0.267004, 0.004874, 0.329415),
        (0.282623, 0.140926, 0.457517),
        (0.253935, 0.265254, 0.529983),
        (0.206756, 0.371758, 0.553117),
        (0.163625, 0.471133, 0.558148),
        (0.127568, 0.566949, 0.550556),
        (0.134692, 0.658636, 0.517649),
        (0.266941, 0.748751, 0.440573),
        (0.477504, 0.821444, 0.318195),
        (0.741388, 0.873449, 0.149561),
        (0.993248, 0.906157, 0.143936),
    ]
)


def _read_pnm_header(data: bytes, path):
    if len(data) < 2 or data[0:1] != b"P":
        raise InputError(f"{path}: not a PNM file")
    magic = data[0:2].decode("ascii", "replace")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InputError(f"{path}: truncated PNM header")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    return magic, fields[0], fields[1], fields[2], pos


def _read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, width, height, maxval, pos = _read_pnm_header(data, path)
    channels = {"P5": 1, "P6": 3}.get(magic)
    if channels is None:
        raise InputError(f"{path}: unsupported PNM magic {magic}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    if raw.size != count:
        raise InputError(f"{path}: truncated PNM payload")
    arr = raw.astype(np.float64) / maxval
    if channels == 1:
        return arr.reshape(height, width)
    return arr.reshape(height, width, 3)


def read_image(path) -> np.ndarray:
    """Load an image as [H, W, 3] floats in [0, 1]. PPM/PGM natively, PNG via
    Pillow; grayscale is replicated across channels."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"image not found: {path}")
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        arr = _read_pnm(path)
    elif path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    else:
        raise InputError(f"unsupported image format: {path}")
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr


def read_mask(path) -> np.ndarray:
    """Load a PGM 0/255 mask as booleans (threshold at half scale)."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"mask not found: {path}")
    arr = _read_pnm(path)
    if arr.ndim != 2:
        raise InputError(f"{path}: mask must be single-channel PGM")
    return arr > 0.5


def write_ppm(path, rgb01: np.ndarray) -> None:
    """8-bit binary P6 from [H, W, 3] floats in [0, 1]."""
    arr = np.clip(np.asarray(rgb01), 0.0, 1.0)
    h, w = arr.shape[:2]
    payload = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(payload.tobytes())


def write_pgm16(path, gray01: np.ndarray) -> None:
    """16-bit binary P5 (big-endian samples) from floats in [0, 1]."""
    arr = np.clip(np.asarray(gray01), 0.0, 1.0)
    h, w = arr.shape
    payload = np.floor(arr * 65535.0 + 0.5).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(payload.tobytes())


def colormap(values01: np.ndarray) -> np.ndarray:
    """Map floats in [0, 1] to RGB via the fixed viridis-like table."""
    v = np.clip(np.asarray(values01, dtype=np.float64), 0.0, 1.0)
    x = v * (len(_VIRIDIS_ANCHORS) - 1)
    lo = np.minimum(x.astype(int), len(_VIRIDIS_ANCHORS) - 2)
    frac = (x - lo)[..., None]
    return _VIRIDIS_ANCHORS[lo] * (1 - frac) + _VIRIDIS_ANCHORS[lo + 1] * frac


def overlay(image01: np.ndarray, heat01: np.ndarray, alpha: float = 0.6) -> np.ndarray:
    """Alpha-blend the colormapped heatmap over the image; blend strength is
    alpha scaled by the local heat value."""
    heat = np.clip(np.asarray(heat01), 0.0, 1.0)
    color = colormap(heat)
    a = (alpha * heat)[..., None]
    return np.asarray(image01) * (1 - a) + color * a
