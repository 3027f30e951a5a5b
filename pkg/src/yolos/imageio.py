"""Binary PPM (P6) reading and writing; PNG through Pillow when it is installed."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_ppm(path, pixels: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] (or uint8) as binary PPM."""
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) image, got {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(np.asarray(arr, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(arr).tobytes())


def _tokens(buf: bytes):
    pos = 0
    out = []
    while len(out) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        out.append(buf[start:pos])
    return out, pos + 1


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into an (H, W, 3) float array in [0, 1]."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _tokens(buf)
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval >= 256:
        raw = np.frombuffer(buf, dtype=">u2", count=w * h * 3, offset=offset)
    else:
        raw = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=offset)
    return raw.reshape(h, w, 3).astype(float) / maxval


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        return read_ppm(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=float) / 255.0
    raise ValueError(f"{path}: unsupported image format (PPM or PNG expected)")


def draw_box(pixels: np.ndarray, box_xyxy, color=(1.0, 0.0, 0.0)) -> None:
    """Draw a 1-pixel rectangle outline in place; pixel coordinates, clipped to the image."""
    h, w = pixels.shape[:2]
    x1, y1, x2, y2 = (int(round(v)) for v in box_xyxy)
    x1, x2 = max(0, min(x1, w - 1)), max(0, min(x2 - 1, w - 1))
    y1, y2 = max(0, min(y1, h - 1)), max(0, min(y2 - 1, h - 1))
    c = np.asarray(color, dtype=pixels.dtype)
    pixels[y1, x1:x2 + 1] = c
    pixels[y2, x1:x2 + 1] = c
    pixels[y1:y2 + 1, x1] = c
    pixels[y1:y2 + 1, x2] = c
